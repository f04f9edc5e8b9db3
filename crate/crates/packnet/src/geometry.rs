//! Camera model, rigid-body transforms, and differentiable view synthesis.
//!
//! Two parallel implementations live here on purpose. The value-level API
//! (`backproject`, `project`, `sample_bilinear`, `warp`) works on plain
//! `f64` arrays and nalgebra types; it is straightforward scalar code and
//! serves as the reference the tape-based path is tested against. The
//! differentiable path ([`warp_frame`]) builds the same computation out of
//! tape operations so gradients flow to the depth map, the pose parameters,
//! and the sampled image.
//!
//! Conventions: pixel centers sit at integer coordinates with (0, 0) at the
//! top-left; a pose maps points from the target camera frame into the source
//! camera frame (`p_s = R * p_t + t`); samples that fall outside the source
//! raster read zero and are flagged invalid.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// Points whose transformed depth falls at or below this value (in meters)
/// are treated as invalid instead of being perspective-divided.
pub const Z_MIN: f64 = 1e-3;

/// Tolerance (in pixels) applied to the raster-bounds test so identity
/// round-trips of border pixels are not invalidated by rounding noise.
const RASTER_EPS: f64 = 1e-6;

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} raster"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Rescale for a pyramid level. Focal lengths and the principal point
    /// scale linearly; the raster size is rounded to the nearest integer.
    pub fn scaled(&self, factor_x: f64, factor_y: f64) -> Result<Self> {
        if !(factor_x > 0.0 && factor_y > 0.0) {
            return Err(Error::invalid(format!(
                "scale factors must be positive, got ({factor_x}, {factor_y})"
            )));
        }
        Self::new(
            self.fx * factor_x,
            self.fy * factor_y,
            self.cx * factor_x,
            self.cy * factor_y,
            (self.width as f64 * factor_x).round() as usize,
            (self.height as f64 * factor_y).round() as usize,
        )
    }
}

/// An element of SE(3): rotation plus translation, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    /// Build from an explicit rotation matrix, validating orthonormality.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).norm();
        if dev > 1e-6 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (deviation {dev:.2e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(Self { rotation: Rotation3::from_matrix_unchecked(rotation), translation })
    }

    /// Exponential-map constructor: `omega` is an axis-angle 3-vector whose
    /// norm is the rotation angle in radians.
    pub fn from_axis_angle_translation(omega: [f64; 3], t: [f64; 3]) -> Self {
        Self {
            rotation: Rotation3::new(Vector3::from(omega)),
            translation: Vector3::from(t),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Axis-angle vector of the rotation part.
    pub fn axis_angle(&self) -> [f64; 3] {
        let v = self.rotation.scaled_axis();
        [v.x, v.y, v.z]
    }

    /// Apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self { rotation: inv_rot, translation: -(inv_rot * self.translation) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Sub-pixel sampling coordinates with their validity mask.
#[derive(Debug, Clone)]
pub struct PixelGrid {
    /// `[H, W, 2]`; last axis is (x, y) in source-image pixels.
    pub coords: Array3<f64>,
    pub valid: Array2<bool>,
}

/// Lift every pixel of a depth map to a 3-D point in the camera frame.
/// Fails if any depth is not strictly positive.
pub fn backproject(depth: &Array2<f64>, k: &CameraIntrinsics) -> Result<Array3<f64>> {
    let (h, w) = depth.dim();
    if let Some(&bad) = depth.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::invalid(format!(
            "backproject requires strictly positive depth, found {bad}"
        )));
    }
    let mut out = Array3::zeros((h, w, 3));
    for v in 0..h {
        for u in 0..w {
            let d = depth[[v, u]];
            out[[v, u, 0]] = d * (u as f64 - k.cx) / k.fx;
            out[[v, u, 1]] = d * (v as f64 - k.cy) / k.fy;
            out[[v, u, 2]] = d;
        }
    }
    Ok(out)
}

/// Transform camera-frame points and perspective-project them onto the
/// raster described by `k`. Points behind the camera (z <= [`Z_MIN`]) or
/// landing outside the raster are marked invalid.
pub fn project(points: &Array3<f64>, pose: &RigidTransform, k: &CameraIntrinsics) -> PixelGrid {
    let (h, w, _) = points.dim();
    let mut coords = Array3::zeros((h, w, 2));
    let mut valid = Array2::from_elem((h, w), false);
    for v in 0..h {
        for u in 0..w {
            let p = Vector3::new(points[[v, u, 0]], points[[v, u, 1]], points[[v, u, 2]]);
            let q = pose.apply(&p);
            if q.z <= Z_MIN {
                // Leave coords at a harmless value; the mask excludes them.
                coords[[v, u, 0]] = -1.0;
                coords[[v, u, 1]] = -1.0;
                continue;
            }
            let x = k.fx * q.x / q.z + k.cx;
            let y = k.fy * q.y / q.z + k.cy;
            coords[[v, u, 0]] = x;
            coords[[v, u, 1]] = y;
            // The border tolerance keeps round-trips of edge pixels valid in
            // the face of floating-point noise.
            valid[[v, u]] = x >= -RASTER_EPS
                && x <= (k.width - 1) as f64 + RASTER_EPS
                && y >= -RASTER_EPS
                && y <= (k.height - 1) as f64 + RASTER_EPS;
        }
    }
    PixelGrid { coords, valid }
}

/// Bilinearly sample `image` (`[C, H, W]`) at the grid coordinates.
/// Taps outside the image read zero, and invalid grid entries produce zero.
pub fn sample_bilinear(image: &Array3<f64>, grid: &PixelGrid) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let (gh, gw, _) = grid.coords.dim();
    let tap = |ci: usize, y: isize, x: isize| -> f64 {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            image[[ci, y as usize, x as usize]]
        } else {
            0.0
        }
    };
    let mut out = Array3::zeros((c, gh, gw));
    for v in 0..gh {
        for u in 0..gw {
            if !grid.valid[[v, u]] {
                continue;
            }
            let x = grid.coords[[v, u, 0]];
            let y = grid.coords[[v, u, 1]];
            let x0 = x.floor();
            let y0 = y.floor();
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ci in 0..c {
                let top = tap(ci, y0, x0) * (1.0 - fx) + tap(ci, y0, x0 + 1) * fx;
                let bot = tap(ci, y0 + 1, x0) * (1.0 - fx) + tap(ci, y0 + 1, x0 + 1) * fx;
                out[[ci, v, u]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Synthesize the target view from a source image: backproject the target
/// depth, move the points through `pose`, project into the source camera,
/// and sample. Returns the synthesized image and its validity mask.
pub fn warp(
    source: &Array3<f64>,
    target_depth: &Array2<f64>,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<(Array3<f64>, Array2<bool>)> {
    let points = backproject(target_depth, k)?;
    let grid = project(&points, pose, k);
    let image = sample_bilinear(source, &grid);
    Ok((image, grid.valid))
}

// ---------------------------------------------------------------------------
// Differentiable path
// ---------------------------------------------------------------------------

/// Coefficients of the rotation exponential and their derivatives:
/// R = I + a*K + b*K^2 with K = skew(omega), a = sin(t)/t, b = (1-cos(t))/t^2,
/// alpha = a'(t)/t, beta = b'(t)/t. Taylor expansions take over near zero.
fn rotation_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / (theta * theta);
        let da = (theta * c - s) / (theta * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (theta * theta * theta);
        (a, b, da / theta, db / theta)
    }
}

fn skew(w: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for l in 0..3 {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

impl<T: Element> Tape<T> {
    /// Map an axis-angle 3-vector to its 3x3 rotation matrix with an
    /// analytic backward pass. Internally computed in `f64` for stability.
    pub fn rotation_from_axis_angle(&self, omega: &Tensor<T>) -> Tensor<T> {
        assert_eq!(omega.shape(), &[3], "axis-angle vector must be [3]");
        let w = [
            omega.array()[[0]].into_f64(),
            omega.array()[[1]].into_f64(),
            omega.array()[[2]].into_f64(),
        ];
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let (a, b, alpha, beta) = rotation_coeffs(theta);
        let km = skew(w);
        let k2 = mat_mul3(&km, &km);
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = if i == j { 1.0 } else { 0.0 } + a * km[i][j] + b * k2[i][j];
            }
        }
        let data = ArrayD::from_shape_vec(
            IxDyn(&[3, 3]),
            r.iter().flatten().map(|&v| T::from_f64(v)).collect(),
        )
        .unwrap();
        self.unary(omega, data, move |g, _| {
            // dR/dw_i = alpha*w_i*K + a*E_i + beta*w_i*K^2 + b*(E_i K + K E_i)
            // with E_i = skew(e_i); contract each against the upstream grad.
            let mut out = vec![T::zero(); 3];
            for i in 0..3 {
                let mut e = [0.0; 3];
                e[i] = 1.0;
                let ei = skew(e);
                let eik = mat_mul3(&ei, &km);
                let kei = mat_mul3(&km, &ei);
                let mut acc = 0.0;
                for r_ in 0..3 {
                    for c_ in 0..3 {
                        let dr = alpha * w[i] * km[r_][c_]
                            + a * ei[r_][c_]
                            + beta * w[i] * k2[r_][c_]
                            + b * (eik[r_][c_] + kei[r_][c_]);
                        acc += g[[r_, c_]].into_f64() * dr;
                    }
                }
                out[i] = T::from_f64(acc);
            }
            ArrayD::from_shape_vec(IxDyn(&[3]), out).unwrap()
        })
    }
}

/// Result of a differentiable warp: the synthesized image and the validity
/// mask (1 where the source sample exists and sits in front of the camera).
pub struct WarpOutput<T: Element> {
    pub image: Tensor<T>,
    pub valid: ArrayD<T>,
}

/// Differentiable view synthesis. `source` is `[C, H, W]`, `depth` is
/// `[H, W]`, `pose` is a 6-vector (axis-angle then translation). Gradients
/// flow into all three.
pub fn warp_frame<T: Element>(
    tape: &Tape<T>,
    source: &Tensor<T>,
    depth: &Tensor<T>,
    pose: &Tensor<T>,
    k: &CameraIntrinsics,
) -> Result<WarpOutput<T>> {
    if source.shape().len() != 3 {
        return Err(Error::shape("warp_frame source", "[C,H,W]", source.shape()));
    }
    if depth.shape().len() != 2 {
        return Err(Error::shape("warp_frame depth", "[H,W]", depth.shape()));
    }
    if pose.shape() != [6] {
        return Err(Error::shape("warp_frame pose", "[6]", pose.shape()));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if source.shape()[1] != h || source.shape()[2] != w {
        return Err(Error::shape(
            "warp_frame source vs depth",
            &format!("[_,{h},{w}]"),
            source.shape(),
        ));
    }
    if let Some(&bad) = depth.array().iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::invalid(format!(
            "warp_frame requires strictly positive depth, found {bad}"
        )));
    }
    let n = h * w;

    // Constant unit rays scaled by depth give camera-frame points.
    let mut xr = Vec::with_capacity(n);
    let mut yr = Vec::with_capacity(n);
    for v in 0..h {
        for u in 0..w {
            xr.push(T::from_f64((u as f64 - k.cx) / k.fx));
            yr.push(T::from_f64((v as f64 - k.cy) / k.fy));
        }
    }
    let xr = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, n]), xr).unwrap());
    let yr = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, n]), yr).unwrap());
    let d = tape.reshape(depth, &[1, n]);
    let px = tape.mul(&d, &xr);
    let py = tape.mul(&d, &yr);
    let points = tape.concat0(&[&px, &py, &d]);

    let omega = tape.narrow(pose, 0, 0, 3);
    let t = tape.narrow(pose, 0, 3, 3);
    let rot = tape.rotation_from_axis_angle(&omega);
    let moved = tape.add_col(&tape.matmul(&rot, &points), &t);

    let x = tape.narrow(&moved, 0, 0, 1);
    let y = tape.narrow(&moved, 0, 1, 1);
    let z = tape.narrow(&moved, 0, 2, 1);
    let z_min = T::from_f64(Z_MIN);
    let zc = tape.clamp_min(&z, z_min);
    let u = tape.add_scalar(
        &tape.mul_scalar(&tape.div(&x, &zc), T::from_f64(k.fx)),
        T::from_f64(k.cx),
    );
    let v = tape.add_scalar(
        &tape.mul_scalar(&tape.div(&y, &zc), T::from_f64(k.fy)),
        T::from_f64(k.cy),
    );
    let u = tape.reshape(&u, &[n]);
    let v = tape.reshape(&v, &[n]);

    let (image, in_raster) = tape.bilinear_sample(source, &u, &v, h, w);

    // Combine the raster mask with the depth-positivity mask.
    let mut valid = in_raster;
    {
        let zs = z.array();
        for j in 0..n {
            if zs[[0, j]].into_f64() <= Z_MIN {
                valid[[j / w, j % w]] = T::zero();
            }
        }
    }
    Ok(WarpOutput { image, valid })
}
