//! The self-supervised training objective.
//!
//! The photometric term compares the target frame against views synthesized
//! from each source frame, taking the per-pixel minimum across sources so
//! occlusions fall out of the optimization. An automatic mask drops pixels
//! whose appearance does not change between frames (static camera, moving
//! objects at camera speed), an edge-aware smoothness term regularizes the
//! inverse depth, and an optional velocity term pins the translation
//! magnitude to odometry so predictions become metric.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::geometry::{warp_frame, CameraIntrinsics};
use crate::tensor::{avg_pool2, Element, Tape, Tensor};

/// SSIM stabilizers for images in `[0, 1]`.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Loss value assigned to invalid pixels before the per-source minimum, so
/// the minimum prefers any source with a valid mapping.
const INVALID_LOSS: f64 = 1e4;

/// Floor added under the squared translation norm so its gradient stays
/// finite at zero translation (the pose head starts at exactly zero).
const NORM_EPS: f64 = 1e-12;

/// Mixing and regularization weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// SSIM weight in the photometric term; the L1 part gets `1 - alpha`.
    pub alpha: f64,
    /// Smoothness weight at the finest scale.
    pub lambda1: f64,
    /// Velocity supervision weight.
    pub lambda2: f64,
    /// Per-pyramid-level decay: scale `s` is weighted `scale_decay^-s`.
    pub scale_decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.85, lambda1: 0.001, lambda2: 0.05, scale_decay: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("scale_decay", self.scale_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Odometry reading for one source frame: instantaneous speed and the signed
/// time offset from target to source.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VelocityRecord {
    pub speed: f64,
    pub dt: f64,
}

impl VelocityRecord {
    pub fn new(speed: f64, dt: f64) -> Result<Self> {
        if !(speed >= 0.0) {
            return Err(Error::invalid(format!("speed must be >= 0, got {speed}")));
        }
        if dt == 0.0 || !dt.is_finite() {
            return Err(Error::invalid(format!("dt must be nonzero and finite, got {dt}")));
        }
        Ok(Self { speed, dt })
    }

    /// Expected translation magnitude over the frame gap.
    pub fn expected_translation(&self) -> f64 {
        (self.speed * self.dt).abs()
    }
}

/// One target frame with its source frames and shared camera model.
pub struct PhotometricContext<T: Element> {
    /// Target image `[3, H, W]`, values in `[0, 1]`.
    pub target: Tensor<T>,
    /// Source images, each `[3, H, W]`.
    pub sources: Vec<Tensor<T>>,
    pub intrinsics: CameraIntrinsics,
}

impl<T: Element> PhotometricContext<T> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.target.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("photometric target", "[3,H,W]", shape));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid("photometric context needs at least one source frame"));
        }
        for s in &self.sources {
            if s.shape() != shape {
                return Err(Error::shape("photometric source", format!("{shape:?}"), s.shape()));
            }
        }
        if self.intrinsics.width != shape[2] || self.intrinsics.height != shape[1] {
            return Err(Error::invalid(format!(
                "intrinsics raster {}x{} does not match image {}x{}",
                self.intrinsics.width, self.intrinsics.height, shape[2], shape[1]
            )));
        }
        Ok(())
    }

    fn height(&self) -> usize {
        self.target.shape()[1]
    }

    fn width(&self) -> usize {
        self.target.shape()[2]
    }
}

/// Per-term scalars reported alongside the loss, for the training log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossDiagnostics {
    pub total: f64,
    /// Masked-mean photometric error, one entry per scale.
    pub photometric: Vec<f64>,
    /// Unweighted smoothness term per scale.
    pub smoothness: Vec<f64>,
    /// Unweighted velocity term summed over sources (0 without odometry).
    pub velocity: f64,
    /// Fraction of pixels surviving both masks, per scale.
    pub mask_coverage: Vec<f64>,
    /// True when some scale lost every pixel to masking; its photometric
    /// term contributed zero.
    pub fully_masked: bool,
}

/// Structural similarity between two rasters `[C, H, W]`, per pixel and
/// channel, using 3x3 mean pooling over reflect-padded inputs.
pub fn ssim<T: Element>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::shape("ssim", format!("{:?}", a.shape()), b.shape()));
    }
    let c1 = T::from_f64(SSIM_C1);
    let c2 = T::from_f64(SSIM_C2);
    let mean = |x: &Tensor<T>| tape.box_mean3(&tape.pad_reflect1(x));
    let mu_a = mean(a);
    let mu_b = mean(b);
    let mu_aa = mean(&tape.mul(a, a));
    let mu_bb = mean(&tape.mul(b, b));
    let mu_ab = mean(&tape.mul(a, b));
    let var_a = tape.sub(&mu_aa, &tape.mul(&mu_a, &mu_a));
    let var_b = tape.sub(&mu_bb, &tape.mul(&mu_b, &mu_b));
    let cov = tape.sub(&mu_ab, &tape.mul(&mu_a, &mu_b));

    let num = tape.mul(
        &tape.add_scalar(&tape.mul_scalar(&tape.mul(&mu_a, &mu_b), T::from_f64(2.0)), c1),
        &tape.add_scalar(&tape.mul_scalar(&cov, T::from_f64(2.0)), c2),
    );
    let den = tape.mul(
        &tape.add_scalar(&tape.add(&tape.mul(&mu_a, &mu_a), &tape.mul(&mu_b, &mu_b)), c1),
        &tape.add_scalar(&tape.add(&var_a, &var_b), c2),
    );
    Ok(tape.div(&num, &den))
}

/// Per-pixel photometric error: a blend of structural dissimilarity and L1,
/// averaged over channels. Output is `[H, W]`.
pub fn photometric_loss<T: Element>(
    tape: &Tape<T>,
    target: &Tensor<T>,
    synthesized: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    if target.shape() != synthesized.shape() {
        return Err(Error::shape(
            "photometric_loss",
            format!("{:?}", target.shape()),
            synthesized.shape(),
        ));
    }
    let alpha = T::from_f64(w.alpha);
    let sim = ssim(tape, target, synthesized)?;
    // alpha * (1 - ssim) / 2
    let dissim = tape.mul_scalar(&tape.add_scalar(&tape.neg(&sim), T::one()), alpha * T::from_f64(0.5));
    // (1 - alpha) * |target - synthesized|
    let l1 = tape.mul_scalar(
        &tape.abs(&tape.sub(target, synthesized)),
        T::one() - alpha,
    );
    let map = tape.mean_channels(&tape.add(&dissim, &l1));
    // Rounding can push SSIM a hair past 1 on near-identical windows; the
    // loss map must stay nonnegative (identical images score exactly zero,
    // and the auto-mask comparison relies on that).
    Ok(tape.clamp_min(&map, T::zero()))
}

/// Per-pixel minimum over the per-source loss maps. The gradient reaches
/// only the winning source; ties resolve to the lowest source index.
pub fn min_reprojection<T: Element>(tape: &Tape<T>, maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("min_reprojection needs at least one map"))?;
    let mut acc = first.clone();
    for m in &maps[1..] {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "min_reprojection",
                format!("{:?}", first.shape()),
                m.shape(),
            ));
        }
        acc = tape.minimum(&acc, m);
    }
    Ok(acc)
}

/// Compare two detached loss maps: keep pixels where warping beats simply
/// reading the unwarped source (strictly).
fn mask_from_min_maps<T: Element>(identity_min: &ArrayD<T>, warped_min: &ArrayD<T>) -> ArrayD<T> {
    ndarray::Zip::from(identity_min)
        .and(warped_min)
        .map_collect(|&idn, &warped| if idn > warped { T::one() } else { T::zero() })
}

/// The automatic mask: true (1) where synthesizing the view explains the
/// target better than the unwarped source does. Computed entirely outside
/// the tape, so no gradients flow through the comparison.
pub fn auto_mask<T: Element>(
    target: &Tensor<T>,
    sources: &[Tensor<T>],
    synthesized: &[Tensor<T>],
    w: &LossWeights,
) -> Result<ArrayD<T>> {
    if sources.is_empty() || synthesized.is_empty() {
        return Err(Error::invalid("auto_mask needs at least one source"));
    }
    let identity_min = detached_min_loss(target, sources, w)?;
    let warped_min = detached_min_loss(target, synthesized, w)?;
    Ok(mask_from_min_maps(&identity_min, &warped_min))
}

/// Minimum photometric loss across images, computed on a throwaway tape so
/// nothing is recorded against the caller's graph.
fn detached_min_loss<T: Element>(
    target: &Tensor<T>,
    images: &[Tensor<T>],
    w: &LossWeights,
) -> Result<ArrayD<T>> {
    let tape = Tape::<T>::no_grad();
    let t = tape.leaf(target.array().clone());
    let maps = images
        .iter()
        .map(|img| photometric_loss(&tape, &t, &tape.leaf(img.array().clone()), w))
        .collect::<Result<Vec<_>>>()?;
    Ok(min_reprojection(&tape, &maps)?.array().clone())
}

/// Edge-aware smoothness of a (mean-normalized) inverse depth map `[H, W]`
/// against the image `[3, H, W]` at the same resolution. Image gradients
/// are channel-averaged before exponentiation.
pub fn smoothness_loss<T: Element>(
    tape: &Tape<T>,
    inv_depth: &Tensor<T>,
    image: &ArrayD<T>,
) -> Result<Tensor<T>> {
    let (h, w) = match inv_depth.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::shape("smoothness inverse depth", "[H,W]", other)),
    };
    if image.shape() != [3, h, w] {
        return Err(Error::shape("smoothness image", format!("[3,{h},{w}]"), image.shape()));
    }
    // exp(-|dI|) weights from the image, channel-averaged: plain arrays,
    // since the image carries no gradient.
    let mut wx = ArrayD::<T>::zeros(IxDyn(&[h, w - 1]));
    let mut wy = ArrayD::<T>::zeros(IxDyn(&[h - 1, w]));
    let third = T::from_f64(1.0 / 3.0);
    for y in 0..h {
        for x in 0..w - 1 {
            let mut g = T::zero();
            for c in 0..3 {
                g = g + (image[[c, y, x + 1]] - image[[c, y, x]]).abs();
            }
            wx[[y, x]] = (-(g * third)).exp();
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let mut g = T::zero();
            for c in 0..3 {
                g = g + (image[[c, y + 1, x]] - image[[c, y, x]]).abs();
            }
            wy[[y, x]] = (-(g * third)).exp();
        }
    }
    let mean = tape.mean(inv_depth);
    let normalized = tape.div(inv_depth, &mean);
    let tx = tape.mean(&tape.mul(&tape.abs(&tape.diff_w(&normalized)), &tape.constant(wx)));
    let ty = tape.mean(&tape.mul(&tape.abs(&tape.diff_h(&normalized)), &tape.constant(wy)));
    Ok(tape.add(&tx, &ty))
}

/// Velocity supervision for one source frame: the absolute difference
/// between the predicted translation magnitude and the odometry distance.
pub fn velocity_loss<T: Element>(
    tape: &Tape<T>,
    pose: &Tensor<T>,
    vel: &VelocityRecord,
) -> Tensor<T> {
    assert_eq!(pose.shape(), &[6], "pose must be a 6-vector");
    let t = tape.narrow(pose, 0, 3, 3);
    let sq = tape.sum(&tape.mul(&t, &t));
    let norm = tape.sqrt(&tape.add_scalar(&sq, T::from_f64(NORM_EPS)));
    tape.abs(&tape.add_scalar(&norm, -T::from_f64(vel.expected_translation())))
}

/// The full multi-scale objective for one sample.
///
/// `inv_depths[s]` is the sigmoid inverse-depth map at scale `s` (finest
/// first) and `depths[s]` the matching metric depth; both share resolution.
/// Every scale is upsampled to the input resolution with nearest-neighbor
/// interpolation before warping, while smoothness runs at the native scale
/// against an area-downsampled image pyramid. `poses[i]` is the 6-vector
/// motion from target to `ctx.sources[i]`.
pub fn total_loss<T: Element>(
    tape: &Tape<T>,
    ctx: &PhotometricContext<T>,
    inv_depths: &[Tensor<T>],
    depths: &[Tensor<T>],
    poses: &[Tensor<T>],
    velocity: Option<&[VelocityRecord]>,
    w: &LossWeights,
) -> Result<(Tensor<T>, LossDiagnostics)> {
    ctx.validate()?;
    w.validate()?;
    if inv_depths.is_empty() || inv_depths.len() != depths.len() {
        return Err(Error::invalid(format!(
            "need matching inverse-depth/depth scales, got {} and {}",
            inv_depths.len(),
            depths.len()
        )));
    }
    if poses.len() != ctx.sources.len() {
        return Err(Error::invalid(format!(
            "got {} poses for {} source frames",
            poses.len(),
            ctx.sources.len()
        )));
    }
    if let Some(records) = velocity {
        if records.len() != ctx.sources.len() {
            return Err(Error::invalid(format!(
                "got {} velocity records for {} source frames",
                records.len(),
                ctx.sources.len()
            )));
        }
    }
    let (height, width) = (ctx.height(), ctx.width());

    // Identity (unwarped) minimum loss, shared across scales; detached.
    let identity_min = detached_min_loss(&ctx.target, &ctx.sources, w)?;

    let mut diag = LossDiagnostics {
        total: 0.0,
        photometric: Vec::new(),
        smoothness: Vec::new(),
        velocity: 0.0,
        mask_coverage: Vec::new(),
        fully_masked: false,
    };
    let mut per_scale: Vec<Tensor<T>> = Vec::with_capacity(inv_depths.len());
    let mut pyramid_image = ctx.target.array().clone();

    for (s, (inv, depth)) in inv_depths.iter().zip(depths.iter()).enumerate() {
        let (hs, ws) = match inv.shape() {
            [h, w] => (*h, *w),
            other => return Err(Error::shape("inverse depth scale", "[H,W]", other)),
        };
        if depth.shape() != [hs, ws] {
            return Err(Error::shape("depth scale", format!("[{hs},{ws}]"), depth.shape()));
        }
        if height % hs != 0 || width % ws != 0 || height / hs != width / ws {
            return Err(Error::invalid(format!(
                "scale {s} resolution {ws}x{hs} does not evenly divide input {width}x{height}"
            )));
        }
        let factor = height / hs;
        let depth_full = tape.upsample_nearest(depth, factor);

        // Warp every source and assemble BIG-masked per-source loss maps.
        let mut maps = Vec::with_capacity(ctx.sources.len());
        for (src, pose) in ctx.sources.iter().zip(poses.iter()) {
            let warped = warp_frame(tape, src, &depth_full, pose, &ctx.intrinsics)?;
            let map = photometric_loss(tape, &ctx.target, &warped.image, w)?;
            let big_where_invalid =
                warped.valid.mapv(|m| (T::one() - m) * T::from_f64(INVALID_LOSS));
            let masked = tape.add(
                &tape.mul(&map, &tape.constant(warped.valid)),
                &tape.constant(big_where_invalid),
            );
            maps.push(masked);
        }
        let min_map = min_reprojection(tape, &maps)?;

        // The automatic mask also swallows pixels with no valid mapping:
        // their BIG loss can never undercut the identity loss.
        let mask = mask_from_min_maps(&identity_min, min_map.array());
        let coverage =
            mask.iter().filter(|&&m| m != T::zero()).count() as f64 / mask.len() as f64;
        let photo = tape.mean_where(&min_map, &mask);
        if coverage == 0.0 {
            diag.fully_masked = true;
        }

        // Smoothness at the native scale against the downsampled image.
        while pyramid_image.shape()[1] > hs {
            pyramid_image = avg_pool2(&pyramid_image);
        }
        if pyramid_image.shape() != [3, hs, ws] {
            return Err(Error::invalid(format!(
                "scale {s}: pyramid image {:?} does not match depth {ws}x{hs}",
                pyramid_image.shape()
            )));
        }
        let smooth = smoothness_loss(tape, inv, &pyramid_image)?;
        let smooth_weight = T::from_f64(w.lambda1 * w.scale_decay.powi(-(s as i32)));
        let scale_total = tape.add(&photo, &tape.mul_scalar(&smooth, smooth_weight));

        diag.photometric.push(photo.array().iter().next().unwrap().into_f64());
        diag.smoothness.push(smooth.array().iter().next().unwrap().into_f64());
        diag.mask_coverage.push(coverage);
        per_scale.push(scale_total);
    }

    // Average scales, then add velocity supervision once.
    let mut total = per_scale[0].clone();
    for t in &per_scale[1..] {
        total = tape.add(&total, t);
    }
    total = tape.mul_scalar(&total, T::from_f64(1.0 / per_scale.len() as f64));

    if let Some(records) = velocity {
        let mut vel_sum: Option<Tensor<T>> = None;
        for (pose, rec) in poses.iter().zip(records.iter()) {
            let term = velocity_loss(tape, pose, rec);
            vel_sum = Some(match vel_sum {
                Some(acc) => tape.add(&acc, &term),
                None => term,
            });
        }
        let vel_sum = vel_sum.expect("sources are non-empty");
        diag.velocity = vel_sum.array().iter().next().unwrap().into_f64();
        total = tape.add(&total, &tape.mul_scalar(&vel_sum, T::from_f64(w.lambda2)));
    }

    diag.total = total.array().iter().next().unwrap().into_f64();
    Ok((total, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use approx::assert_relative_eq;
    use ndarray::{ArrayD, IxDyn};

    fn pattern(c: usize, h: usize, w: usize, phase: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
            let (ci, y, x) = (ix[0] as f64, ix[1] as f64, ix[2] as f64);
            0.5 + 0.25 * (0.7 * x + 0.4 * y + phase + ci).sin()
                + 0.15 * (0.3 * x - 0.5 * y - phase).cos()
        })
    }

    #[test]
    fn weights_validate_ranges() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: 1.2, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda1: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn velocity_record_validates() {
        assert!(VelocityRecord::new(10.0, 0.1).is_ok());
        assert!(VelocityRecord::new(-1.0, 0.1).is_err());
        assert!(VelocityRecord::new(1.0, 0.0).is_err());
        assert_relative_eq!(VelocityRecord::new(10.0, -0.1).unwrap().expected_translation(), 1.0);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(pattern(3, 10, 12, 0.3));
        let s = ssim(&tape, &x, &x).unwrap();
        for &v in s.array().iter() {
            assert!((v - 1.0).abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_strongly_negative() {
        let tape = Tape::<f64>::new();
        let board = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |ix| ((ix[1] + ix[2]) % 2) as f64);
        let x = tape.leaf(board.clone());
        let y = tape.leaf(board.mapv(|v| 1.0 - v));
        let s = ssim(&tape, &x, &y).unwrap();
        // Interior windows see anti-correlated binary patterns.
        for yy in 2..6 {
            for xx in 2..6 {
                assert!(
                    s.array()[[0, yy, xx]] < -0.9,
                    "interior ssim was {}",
                    s.array()[[0, yy, xx]]
                );
            }
        }
    }

    #[test]
    fn ssim_gradients_match_finite_differences() {
        let a = pattern(1, 6, 7, 0.1);
        let b = pattern(1, 6, 7, 0.9);
        check_gradients(
            &[a, b],
            |tape, l| {
                let s = ssim(tape, &l[0], &l[1]).unwrap();
                tape.mean(&s)
            },
            1e-5,
            24,
        )
        .assert_close(1e-4);
    }

    #[test]
    fn photometric_loss_trivial_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(pattern(3, 8, 9, 0.2));
        let zero = photometric_loss(&tape, &x, &x, &LossWeights::default()).unwrap();
        for &v in zero.array().iter() {
            assert!(v.abs() < 1e-9);
        }

        // Pure L1: alpha = 0, constant offset of 0.5.
        let w = LossWeights { alpha: 0.0, ..Default::default() };
        let a = tape.leaf(ArrayD::zeros(IxDyn(&[3, 6, 6])));
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 6, 6]), 0.5));
        let l = photometric_loss(&tape, &a, &b, &w).unwrap();
        for &v in l.array().iter() {
            assert_relative_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn photometric_pure_ssim_on_constant_offset_matches_window_oracle() {
        // Constant images a and a + c have zero variance, so
        // SSIM = (2 a (a+c) + C1) / (a^2 + (a+c)^2 + C1) in every window.
        let (a, c) = (0.4, 0.2);
        let expected_ssim =
            (2.0 * a * (a + c) + SSIM_C1) / (a * a + (a + c) * (a + c) + SSIM_C1);
        let expected = (1.0 - expected_ssim) / 2.0;

        let tape = Tape::<f64>::new();
        let w = LossWeights { alpha: 1.0, ..Default::default() };
        let ta = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 6, 6]), a));
        let tb = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 6, 6]), a + c));
        let l = photometric_loss(&tape, &ta, &tb, &w).unwrap();
        for &v in l.array().iter() {
            assert_relative_eq!(v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn min_reprojection_matches_brute_force() {
        let tape = Tape::<f64>::new();
        let a = pattern(1, 5, 7, 0.0).index_axis_move(ndarray::Axis(0), 0);
        let b = pattern(1, 5, 7, 1.3).index_axis_move(ndarray::Axis(0), 0);
        let ta = tape.leaf(a.clone().into_dyn());
        let tb = tape.leaf(b.clone().into_dyn());

        let single = min_reprojection(&tape, &[ta.clone()]).unwrap();
        assert_eq!(single.array(), ta.array());

        let m = min_reprojection(&tape, &[ta, tb]).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(m.array()[[y, x]], a[[y, x]].min(b[[y, x]]));
            }
        }
        assert!(min_reprojection(&tape, &[]).is_err());
    }

    #[test]
    fn auto_mask_trivial_and_random_cases() {
        let w = LossWeights::default();
        let tape = Tape::<f64>::new();
        let target = tape.leaf(pattern(3, 8, 8, 0.0));

        // Identical frames everywhere: equality is not strict improvement.
        let same_src = vec![target.clone()];
        let same_syn = vec![target.clone()];
        let m = auto_mask(&target, &same_src, &same_syn, &w).unwrap();
        assert!(m.iter().all(|&v| v == 0.0), "static scene must be fully masked");

        // Perfect synthesis vs imperfect sources: keep everything.
        let src = vec![tape.leaf(pattern(3, 8, 8, 2.0))];
        let syn = vec![target.clone()];
        let m = auto_mask(&target, &src, &syn, &w).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));

        // Randomized inputs agree with the brute-force definition.
        let srcs = vec![tape.leaf(pattern(3, 8, 8, 0.7)), tape.leaf(pattern(3, 8, 8, 1.9))];
        let syns = vec![tape.leaf(pattern(3, 8, 8, 0.4)), tape.leaf(pattern(3, 8, 8, 2.6))];
        let m = auto_mask(&target, &srcs, &syns, &w).unwrap();
        let id_min = detached_min_loss(&target, &srcs, &w).unwrap();
        let syn_min = detached_min_loss(&target, &syns, &w).unwrap();
        for ((&mv, &iv), &sv) in m.iter().zip(id_min.iter()).zip(syn_min.iter()) {
            assert_eq!(mv == 1.0, iv > sv);
        }
    }

    #[test]
    fn smoothness_zero_for_constant_inverse_depth() {
        let tape = Tape::<f64>::new();
        let inv = tape.leaf(ArrayD::from_elem(IxDyn(&[6, 8]), 0.37));
        let img = pattern(3, 6, 8, 0.0);
        let l = smoothness_loss(&tape, &inv, &img).unwrap();
        assert!(l.array()[[]].abs() < 1e-12);
    }

    #[test]
    fn smoothness_linear_ramp_closed_form() {
        let tape = Tape::<f64>::new();
        let (h, wd, slope, base) = (6usize, 8usize, 0.01, 0.3);
        let inv =
            ArrayD::from_shape_fn(IxDyn(&[h, wd]), |ix| base + slope * ix[1] as f64);
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        let img = ArrayD::from_elem(IxDyn(&[3, h, wd]), 0.5);
        let t = tape.leaf(inv);
        let l = smoothness_loss(&tape, &t, &img).unwrap();
        // Constant image: weights are 1. Normalized ramp has constant
        // x-gradient slope/mean and zero y-gradient.
        assert_relative_eq!(l.array()[[]], slope / mean, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_prefers_discontinuity_on_image_edge() {
        let tape = Tape::<f64>::new();
        let (h, wd) = (6usize, 8usize);
        let inv = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[h, wd]), |ix| {
            if ix[1] < wd / 2 {
                0.2
            } else {
                0.6
            }
        }));
        let flat = ArrayD::from_elem(IxDyn(&[3, h, wd]), 0.5);
        let edged = ArrayD::from_shape_fn(IxDyn(&[3, h, wd]), |ix| {
            if ix[2] < wd / 2 {
                0.1
            } else {
                0.9
            }
        });
        let on_flat = smoothness_loss(&tape, &inv, &flat).unwrap().array()[[]];
        let on_edge = smoothness_loss(&tape, &inv, &edged).unwrap().array()[[]];
        assert!(
            on_edge < on_flat,
            "edge-aligned discontinuity must be cheaper: {on_edge} vs {on_flat}"
        );
    }

    #[test]
    fn velocity_loss_examples_and_gradient() {
        let tape = Tape::<f64>::new();
        let rec = VelocityRecord::new(10.0, 0.1).unwrap();

        // Unit translation, 10 m/s over 0.1 s: perfectly explained.
        let pose = tape.leaf(ArrayD::from_shape_vec(
            IxDyn(&[6]),
            vec![0.0, 0.0, 0.0, 0.6, 0.0, 0.8],
        )
        .unwrap());
        let l = velocity_loss(&tape, &pose, &rec);
        assert!(l.array()[[]].abs() < 1e-5);

        // Zero translation leaves the full expected distance.
        let zero = tape.leaf(ArrayD::zeros(IxDyn(&[6])));
        let l0 = velocity_loss(&tape, &zero, &rec);
        assert_relative_eq!(l0.array()[[]], 1.0, epsilon = 1e-5);

        // Gradient w.r.t. translation is the unit direction (times the
        // residual sign; the prediction here overshoots the target).
        let tape2 = Tape::<f64>::new();
        let p = tape2.leaf(ArrayD::from_shape_vec(
            IxDyn(&[6]),
            vec![0.1, -0.2, 0.05, 1.2, 0.0, 1.6],
        )
        .unwrap());
        let l2 = velocity_loss(&tape2, &p, &VelocityRecord::new(10.0, 0.1).unwrap());
        let g = tape2.backward(&l2);
        let gp = g.wrt(&p).unwrap();
        let norm = (1.2f64 * 1.2 + 1.6 * 1.6).sqrt();
        assert!(gp[[0]].abs() < 1e-12, "no gradient into rotation");
        assert_relative_eq!(gp[[3]], 1.2 / norm, epsilon = 1e-6);
        assert_relative_eq!(gp[[4]], 0.0, epsilon = 1e-6);
        assert_relative_eq!(gp[[5]], 1.6 / norm, epsilon = 1e-6);
    }

    /// Shared fixture: a 16x16 scene where warping genuinely explains the
    /// sources, so the auto-mask keeps (almost) everything with a margin.
    struct Fixture {
        k: CameraIntrinsics,
        target: ArrayD<f64>,
        sources: Vec<ArrayD<f64>>,
        inv_fine: ArrayD<f64>,
        inv_coarse: ArrayD<f64>,
        poses: Vec<ArrayD<f64>>,
    }

    fn fixture() -> Fixture {
        let (h, w) = (16usize, 16usize);
        let k = CameraIntrinsics::new(12.0, 12.0, 7.5, 7.5, w, h).unwrap();
        let depth0 = 4.0;
        // Diagonal sub-pixel shift. A fractional offset on both axes keeps
        // every warped sample well clear of the image border, so tiny pose
        // perturbations (as in the gradient test) cannot flip a pixel's
        // validity; an axis-aligned shift would leave whole rows sitting
        // exactly on the frustum edge.
        let (sx, sy) = (0.6, 0.45); // px
        // Sources hold the pattern shifted by (+sx, +sy) px, so reconstructing
        // the target means sampling them down-left: negative x/y motion.
        let tx = -sx * depth0 / k.fx;
        let ty = -sy * depth0 / k.fy;
        // Strictly increasing in x and y (slopes bounded away from zero) so
        // the identity loss never collapses to the warped loss anywhere: the
        // auto-mask then has a wide margin and stays put under
        // finite-difference perturbations in the gradient test below.
        let img = |ox: f64, oy: f64| {
            ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
                let (c, y, x) = (ix[0] as f64, ix[1] as f64 + oy, ix[2] as f64 + ox);
                0.15 + 0.028 * x + 0.012 * y + 0.02 * (0.5 * x + 0.3 * y + 0.1 * c).sin()
            })
        };
        Fixture {
            k,
            target: img(0.0, 0.0),
            // Source 0 is the target shifted by (sx, sy) px; source 1 is a
            // brightened copy so source 0 wins the minimum everywhere.
            sources: vec![img(sx, sy), img(sx, sy).mapv(|v| v + 0.25)],
            inv_fine: ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
                1.0 / depth0 + 1e-3 * ((ix[0] + ix[1]) % 3) as f64
            }),
            inv_coarse: ArrayD::from_elem(IxDyn(&[h / 2, w / 2]), 1.0 / depth0),
            poses: vec![
                ArrayD::from_shape_vec(IxDyn(&[6]), vec![0.0, 0.0, 0.0, tx, ty, 0.0]).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[6]), vec![0.0, 0.0, 0.0, tx, ty, 0.0]).unwrap(),
            ],
        }
    }

    fn build_ctx(tape: &Tape<f64>, f: &Fixture) -> PhotometricContext<f64> {
        PhotometricContext {
            target: tape.leaf(f.target.clone()),
            sources: f.sources.iter().map(|s| tape.leaf(s.clone())).collect(),
            intrinsics: f.k,
        }
    }

    fn run_total(
        tape: &Tape<f64>,
        f: &Fixture,
        vel: Option<&[VelocityRecord]>,
        w: &LossWeights,
    ) -> (Tensor<f64>, LossDiagnostics) {
        let ctx = build_ctx(tape, f);
        let inv0 = tape.leaf(f.inv_fine.clone());
        let inv1 = tape.leaf(f.inv_coarse.clone());
        let d0 = tape.recip(&inv0);
        let d1 = tape.recip(&inv1);
        let poses: Vec<_> = f.poses.iter().map(|p| tape.leaf(p.clone())).collect();
        total_loss(tape, &ctx, &[inv0, inv1], &[d0, d1], &poses, vel, w).unwrap()
    }

    #[test]
    fn total_loss_without_velocity_equals_zero_weighted_velocity() {
        let f = fixture();
        let w = LossWeights::default();
        let tape = Tape::<f64>::no_grad();
        let (no_vel, diag_no) = run_total(&tape, &f, None, &w);
        let w0 = LossWeights { lambda2: 0.0, ..w };
        let recs = vec![VelocityRecord::new(10.0, 0.1).unwrap(); 2];
        let (zero_weight, diag_zero) = run_total(&tape, &f, Some(&recs), &w0);
        assert_relative_eq!(no_vel.array()[[]], zero_weight.array()[[]], epsilon = 1e-12);
        assert_eq!(diag_no.velocity, 0.0);
        assert!(diag_zero.velocity > 0.0, "diagnostic still reports the term");
    }

    #[test]
    fn total_loss_is_linear_in_lambda1() {
        let f = fixture();
        let tape = Tape::<f64>::no_grad();
        let w1 = LossWeights { lambda1: 0.001, ..Default::default() };
        let w2 = LossWeights { lambda1: 0.002, ..Default::default() };
        let (t1, d1) = run_total(&tape, &f, None, &w1);
        let (t2, d2) = run_total(&tape, &f, None, &w2);
        // The smoothness diagnostics are weight-independent.
        assert_eq!(d1.smoothness, d2.smoothness);
        let expected_delta = 0.001
            * d1
                .smoothness
                .iter()
                .enumerate()
                .map(|(s, l)| l * 2.0f64.powi(-(s as i32)))
                .sum::<f64>()
            / d1.smoothness.len() as f64;
        assert_relative_eq!(
            t2.array()[[]] - t1.array()[[]],
            expected_delta,
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_loss_photometric_small_for_consistent_geometry() {
        // The fixture's pose/depth exactly explain source 0, so the
        // photometric term is interpolation noise.
        let f = fixture();
        let tape = Tape::<f64>::no_grad();
        let (_, diag) = run_total(&tape, &f, None, &LossWeights::default());
        assert!(
            diag.photometric[0] < 1e-3,
            "photometric {} should be near the interpolation floor",
            diag.photometric[0]
        );
        assert!(diag.mask_coverage[0] > 0.5, "most pixels should survive masking");
        assert!(!diag.fully_masked);
    }

    #[test]
    fn total_loss_nonnegative_and_zero_conditions() {
        let f = fixture();
        let tape = Tape::<f64>::no_grad();
        let (t, _) = run_total(&tape, &f, None, &LossWeights::default());
        assert!(t.array()[[]] >= 0.0);
    }

    #[test]
    fn fully_masked_scene_zeroes_photometric_and_keeps_smoothness() {
        // Identical target and sources: the auto-mask removes every pixel.
        let (h, w) = (16usize, 16usize);
        let k = CameraIntrinsics::new(12.0, 12.0, 7.5, 7.5, w, h).unwrap();
        let tape = Tape::<f64>::no_grad();
        let img = pattern(3, h, w, 0.0);
        let ctx = PhotometricContext {
            target: tape.leaf(img.clone()),
            sources: vec![tape.leaf(img.clone())],
            intrinsics: k,
        };
        let inv = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
            0.25 + 0.01 * ix[1] as f64
        }));
        let depth = tape.recip(&inv);
        let pose = tape.leaf(ArrayD::zeros(IxDyn(&[6])));
        let (total, diag) = total_loss(
            &tape,
            &ctx,
            &[inv.clone()],
            &[depth],
            &[pose],
            None,
            &LossWeights::default(),
        )
        .unwrap();
        assert!(diag.fully_masked);
        assert_eq!(diag.photometric[0], 0.0);
        assert_eq!(diag.mask_coverage[0], 0.0);
        assert!(diag.smoothness[0] > 0.0, "smoothness must be untouched by masking");
        // Identity pose on an identical frame: total is purely smoothness.
        let expected = 0.001 * diag.smoothness[0];
        assert_relative_eq!(total.array()[[]], expected, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let f = fixture();
        let recs = vec![
            VelocityRecord::new(2.0, 0.12).unwrap(),
            VelocityRecord::new(2.0, -0.12).unwrap(),
        ];
        let w = LossWeights::default();
        check_gradients(
            &[
                f.inv_fine.clone(),
                f.inv_coarse.clone(),
                f.poses[0].clone(),
                f.poses[1].clone(),
            ],
            move |tape, l| {
                let ctx = build_ctx(tape, &f);
                let d0 = tape.recip(&l[0]);
                let d1 = tape.recip(&l[1]);
                let (total, _) = total_loss(
                    tape,
                    &ctx,
                    &[l[0].clone(), l[1].clone()],
                    &[d0, d1],
                    &[l[2].clone(), l[3].clone()],
                    Some(&recs),
                    &w,
                )
                .unwrap();
                total
            },
            1e-6,
            12,
        )
        .assert_close(1e-3);
    }
}
