//! A ray-traced box world with closed-form depth at every pixel.
//!
//! The scene is deliberately simple — a textured ground plane, a handful of
//! axis-aligned boxes, and a back wall — because every surface then has an
//! exact ray intersection. Renders come with per-pixel metric depth and the
//! camera pose that produced them, which is what downstream tests need to
//! check the photometric model against ground truth instead of against
//! another approximation.

use nalgebra::Vector3;
use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};

use super::{DepthMap, ImageFrame, SampleSource, SequenceSample};

/// An axis-aligned box in world coordinates. The camera convention is
/// x right, y down, z forward, so a box resting on the ground spans from
/// `max[1]` at the ground up to a smaller `min[1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a] < self.max[a]) {
                return Err(Error::invalid(format!(
                    "box min {:?} must be strictly below max {:?} on every axis",
                    self.min, self.max
                )));
            }
        }
        Ok(())
    }
}

/// Camera path: starting at the world origin, the camera advances
/// `speed * frame_dt` meters per frame along `motion_dir` (expressed in the
/// camera frame, so the path bends with the heading) while yawing about the
/// vertical at `yaw_rate` rad/s. Step lengths are exact by construction,
/// which makes the trajectory usable as odometry ground truth.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryConfig {
    pub frames: usize,
    /// Speed in m/s, constant over the path.
    pub speed: f64,
    /// Seconds between consecutive frames.
    pub frame_dt: f64,
    /// Heading change in rad/s; positive turns toward +x.
    pub yaw_rate: f64,
    /// Direction of travel in the camera frame, normalized at construction.
    pub motion_dir: [f64; 3],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            speed: 1.5,
            frame_dt: 0.1,
            yaw_rate: 0.05,
            motion_dir: [0.0, 0.0, 1.0],
        }
    }
}

/// Full scene description: geometry, texture statistics, and the camera.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub intrinsics: CameraIntrinsics,
    /// Ground plane height; y points down, so this is the camera height in
    /// meters above the ground. `None` removes the ground entirely.
    pub ground_y: Option<f64>,
    /// Distance of the fronto-parallel back wall from the world origin.
    pub wall_z: f64,
    pub boxes: Vec<BoxSpec>,
    /// World-space wavelength of the coarsest texture octave, in meters.
    pub texture_scale: f64,
    pub texture_octaves: usize,
    pub seed: u64,
    pub trajectory: TrajectoryConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            // 96x64 with a ~77 degree horizontal field of view: wide enough
            // that forward motion produces measurable flow at the borders.
            intrinsics: CameraIntrinsics::new(60.0, 60.0, 47.5, 31.5, 96, 64).unwrap(),
            ground_y: Some(1.5),
            wall_z: 18.0,
            boxes: vec![
                BoxSpec { min: [-3.2, 0.3, 6.0], max: [-1.2, 1.5, 8.0] },
                BoxSpec { min: [0.8, -0.2, 9.0], max: [2.6, 1.5, 11.0] },
                BoxSpec { min: [-1.0, 0.6, 13.0], max: [1.4, 1.5, 15.0] },
            ],
            texture_scale: 1.5,
            texture_octaves: 3,
            seed: 7,
            trajectory: TrajectoryConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wall_z <= 0.0 {
            return Err(Error::invalid(format!(
                "back wall must sit in front of the origin, got z = {}",
                self.wall_z
            )));
        }
        for b in &self.boxes {
            b.validate()?;
        }
        if !(self.texture_scale > 0.0) {
            return Err(Error::invalid(format!(
                "texture scale must be positive, got {}",
                self.texture_scale
            )));
        }
        if self.texture_octaves == 0 {
            return Err(Error::invalid("texture needs at least one octave"));
        }
        let t = &self.trajectory;
        if t.frames == 0 {
            return Err(Error::invalid("trajectory needs at least one frame"));
        }
        if !(t.speed >= 0.0) || !(t.frame_dt > 0.0) {
            return Err(Error::invalid(format!(
                "trajectory needs speed >= 0 and frame_dt > 0, got {} and {}",
                t.speed, t.frame_dt
            )));
        }
        let dir = Vector3::from(t.motion_dir);
        if dir.norm() < 1e-9 {
            return Err(Error::invalid("motion direction must be nonzero"));
        }
        // Every ray must keep hitting the back wall, so cap the total yaw
        // sweep well short of turning sideways.
        let sweep = (t.yaw_rate * t.frame_dt * t.frames as f64).abs();
        if sweep > 0.5 {
            return Err(Error::invalid(format!(
                "total yaw sweep {sweep:.3} rad would turn the camera away from the scene"
            )));
        }
        Ok(())
    }
}

/// One rendered frame with its exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub image: ImageFrame,
    pub depth: DepthMap,
    /// World-from-camera pose of this frame.
    pub pose: RigidTransform,
    /// Speed in m/s at this frame.
    pub speed: f64,
}

/// A renderable scene with its camera trajectory baked out.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    cfg: SceneConfig,
    poses: Vec<RigidTransform>,
}

impl SyntheticScene {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.trajectory;
        let dir = Vector3::from(t.motion_dir).normalize();
        let step = t.speed * t.frame_dt;
        let mut poses = Vec::with_capacity(t.frames);
        let mut position = Vector3::zeros();
        for i in 0..t.frames {
            let yaw = t.yaw_rate * t.frame_dt * i as f64;
            let pose = RigidTransform::from_axis_angle_translation([0.0, yaw, 0.0], [
                position.x, position.y, position.z,
            ]);
            // Step along the current heading; the translation between
            // consecutive frames then has norm speed * frame_dt exactly.
            position += step * (pose.rotation() * dir);
            poses.push(pose);
        }
        Ok(Self { cfg, poses })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    /// World-from-camera pose of a frame.
    pub fn pose(&self, frame: usize) -> Result<&RigidTransform> {
        self.poses
            .get(frame)
            .ok_or_else(|| Error::IndexOutOfRange { index: frame, len: self.poses.len() })
    }

    /// Motion that maps target-frame points into the source frame:
    /// the inverse source pose composed with the target pose.
    pub fn relative_pose(&self, target: usize, source: usize) -> Result<RigidTransform> {
        Ok(self.pose(source)?.invert().compose(self.pose(target)?))
    }

    /// Render a frame at the configured resolution.
    pub fn render(&self, frame: usize) -> Result<SyntheticFrame> {
        self.render_with_intrinsics(frame, &self.cfg.intrinsics)
    }

    /// Render a frame with the intrinsics shrunk by an integer factor, for
    /// ground truth that matches a coarser pyramid level exactly.
    pub fn render_scaled(&self, frame: usize, factor: usize) -> Result<SyntheticFrame> {
        if factor == 0 {
            return Err(Error::invalid("scale factor must be >= 1"));
        }
        let k = self.cfg.intrinsics.scaled(1.0 / factor as f64, 1.0 / factor as f64)?;
        self.render_with_intrinsics(frame, &k)
    }

    fn render_with_intrinsics(
        &self,
        frame: usize,
        k: &CameraIntrinsics,
    ) -> Result<SyntheticFrame> {
        let pose = self.pose(frame)?.clone();
        let (h, w) = (k.height, k.width);
        let mut pixels = ArrayD::zeros(IxDyn(&[3, h, w]));
        let mut depth = Array2::zeros((h, w));
        let origin = *pose.translation();
        for v in 0..h {
            for u in 0..w {
                // Ray through the pixel center with unit z in the camera
                // frame, so the hit parameter is the planar depth directly.
                let dir_cam = Vector3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let dir = pose.rotation() * dir_cam;
                let (t, point, surface) = self.cast(&origin, &dir)?;
                depth[[v, u]] = t;
                let rgb = self.shade(surface, &point);
                for (c, value) in rgb.iter().enumerate() {
                    pixels[[c, v, u]] = *value;
                }
            }
        }
        Ok(SyntheticFrame {
            image: ImageFrame::new(pixels, frame as f64 * self.cfg.trajectory.frame_dt)?,
            depth: DepthMap::new(depth)?,
            pose,
            speed: self.cfg.trajectory.speed,
        })
    }

    /// Nearest positive hit along `origin + t * dir`.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Result<(f64, Vector3<f64>, Surface)> {
        let mut best: Option<(f64, Surface)> = None;
        let mut consider = |t: f64, s: Surface| {
            if t > 1e-9 && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, s));
            }
        };

        if dir.z > 1e-12 {
            consider((self.cfg.wall_z - origin.z) / dir.z, Surface::Wall);
        }
        if let Some(gy) = self.cfg.ground_y {
            if dir.y > 1e-12 {
                consider((gy - origin.y) / dir.y, Surface::Ground);
            }
        }
        for (i, b) in self.cfg.boxes.iter().enumerate() {
            if let Some((t, axis)) = slab_entry(origin, dir, b) {
                consider(t, Surface::Box { index: i, axis });
            }
        }

        let (t, surface) = best.ok_or_else(|| {
            Error::invalid("a ray escaped the scene; the back wall must close the frustum")
        })?;
        Ok((t, origin + t * dir, surface))
    }

    /// View-independent albedo at a surface point. Lighting is deliberately
    /// absent: the photometric model assumes brightness constancy, and this
    /// scene is its ground truth.
    fn shade(&self, surface: Surface, point: &Vector3<f64>) -> [f64; 3] {
        let (salt, a, b) = match surface {
            Surface::Ground => (1, point.x, point.z),
            Surface::Wall => (2, point.x, point.y),
            Surface::Box { index, axis } => {
                let salt = 16 + 4 * index as u64 + axis as u64;
                match axis {
                    Axis::X => (salt, point.z, point.y),
                    Axis::Y => (salt, point.x, point.z),
                    Axis::Z => (salt, point.x, point.y),
                }
            }
        };
        let inv = 1.0 / self.cfg.texture_scale;
        let mut rgb = [0.0; 3];
        for (c, channel) in rgb.iter_mut().enumerate() {
            let base = fbm(
                self.cfg.seed ^ (salt << 8),
                a * inv,
                b * inv,
                self.cfg.texture_octaves,
            );
            let tint = fbm(
                self.cfg.seed ^ (salt << 8) ^ (0xA5A5 + c as u64),
                a * inv * 0.7,
                b * inv * 0.7,
                1,
            );
            *channel = (0.15 + 0.6 * base + 0.2 * tint).clamp(0.0, 1.0);
        }
        rgb
    }

    /// Assemble a training sample: the frame itself plus its two temporal
    /// neighbors, dense ground-truth depth, and the trajectory speed.
    pub fn sample(&self, frame: usize) -> Result<SequenceSample> {
        if frame >= self.frame_count() {
            return Err(Error::IndexOutOfRange { index: frame, len: self.frame_count() });
        }
        if frame == 0 {
            return Err(Error::MissingContext { index: frame, side: "previous" });
        }
        if frame + 1 >= self.frame_count() {
            return Err(Error::MissingContext { index: frame, side: "posterior" });
        }
        let target = self.render(frame)?;
        let prev = self.render(frame - 1)?;
        let next = self.render(frame + 1)?;
        let dt = self.cfg.trajectory.frame_dt;
        Ok(SequenceSample {
            target: target.image,
            contexts: vec![(prev.image, -dt), (next.image, dt)],
            intrinsics: self.cfg.intrinsics,
            gt_depth: Some(target.depth),
            speed: Some(target.speed),
        })
    }
}

impl SampleSource for SyntheticScene {
    fn len(&self) -> usize {
        self.frame_count().saturating_sub(2)
    }

    fn get(&self, index: usize) -> Result<SequenceSample> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange { index, len: self.len() });
        }
        self.sample(index + 1)
    }
}

/// Render one frame of a scene; see [`SyntheticScene::render`].
pub fn render_synthetic(scene: &SyntheticScene, frame: usize) -> Result<SyntheticFrame> {
    scene.render(frame)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Ground,
    Wall,
    Box { index: usize, axis: Axis },
}

/// Slab-method ray/box intersection. Returns the entry parameter and the
/// axis of the face the ray enters through, or `None` on a miss (including
/// rays starting inside the box).
fn slab_entry(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &BoxSpec) -> Option<(f64, Axis)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = Axis::X;
    for (axis, (o, d)) in [
        (Axis::X, (origin.x, dir.x)),
        (Axis::Y, (origin.y, dir.y)),
        (Axis::Z, (origin.z, dir.z)),
    ] {
        let (lo, hi) = (b.min[axis as usize], b.max[axis as usize]);
        if d.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - o) / d, (hi - o) / d);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            enter_axis = axis;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    (t_enter > 1e-9).then_some((t_enter, enter_axis))
}

/// Integer-lattice hash to a uniform value in `[0, 1)`.
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Value noise: smoothstep-blended bilinear interpolation of lattice values.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let top = v00 + sx * (v10 - v00);
    let bot = v01 + sx * (v11 - v01);
    top + sy * (bot - top)
}

/// Fractional Brownian motion over `value_noise`, normalized to `[0, 1)`.
fn fbm(seed: u64, x: f64, y: f64, octaves: usize) -> f64 {
    let mut sum = 0.0;
    let mut amplitude = 1.0;
    let mut total = 0.0;
    for o in 0..octaves {
        sum += amplitude * value_noise(seed.wrapping_add(o as u64), x * (1 << o) as f64, y * (1 << o) as f64);
        total += amplitude;
        amplitude *= 0.5;
    }
    sum / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::warp;
    use crate::losses::{total_loss, LossWeights, PhotometricContext, VelocityRecord};
    use crate::tensor::{Tape, Tensor};
    use ndarray::Array3;

    fn as_array3(frame: &ImageFrame) -> Array3<f64> {
        frame
            .pixels
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("frame rasters are [3,H,W]")
    }

    #[test]
    fn fronto_parallel_wall_renders_constant_depth() {
        let cfg = SceneConfig {
            ground_y: None,
            boxes: Vec::new(),
            wall_z: 10.0,
            trajectory: TrajectoryConfig {
                frames: 1,
                speed: 0.0,
                yaw_rate: 0.0,
                ..TrajectoryConfig::default()
            },
            ..SceneConfig::default()
        };
        let scene = SyntheticScene::new(cfg).unwrap();
        let frame = scene.render(0).unwrap();
        assert!(frame.depth.values.iter().all(|&d| d == 10.0));
        assert_eq!(*scene.pose(0).unwrap(), RigidTransform::identity());
        assert!(frame.image.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn render_is_deterministic() {
        let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
        let a = scene.render(2).unwrap();
        let b = scene.render(2).unwrap();
        assert_eq!(a.image.pixels, b.image.pixels);
        assert_eq!(a.depth.values, b.depth.values);
    }

    #[test]
    fn step_length_matches_speed_times_dt() {
        let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
        let t = scene.config().trajectory;
        for i in 0..scene.frame_count() - 1 {
            let rel = scene.relative_pose(i + 1, i).unwrap();
            let expected = t.speed * t.frame_dt;
            assert!(
                (rel.translation().norm() - expected).abs() < 1e-12 * expected.max(1.0),
                "frame {i}: step {} differs from {expected}",
                rel.translation().norm()
            );
        }
    }

    /// Warping one frame into a neighbor with exact depth and pose must
    /// reproduce it up to interpolation error and thin occlusion bands.
    #[test]
    fn neighbor_warp_reconstructs_frame() {
        let cfg = SceneConfig {
            trajectory: TrajectoryConfig {
                frames: 2,
                speed: 1.5,
                frame_dt: 0.1,
                yaw_rate: 0.0,
                motion_dir: [1.0, 0.0, 0.0],
            },
            ..SceneConfig::default()
        };
        let scene = SyntheticScene::new(cfg).unwrap();
        let target = scene.render(0).unwrap();
        let source = scene.render(1).unwrap();
        let pose = scene.relative_pose(0, 1).unwrap();
        let (warped, valid) = warp(
            &as_array3(&source.image),
            &target.depth.values,
            &pose,
            &scene.config().intrinsics,
        )
        .unwrap();

        let truth = as_array3(&target.image);
        let mut err = 0.0;
        let mut count = 0usize;
        for v in 0..valid.dim().0 {
            for u in 0..valid.dim().1 {
                if valid[[v, u]] {
                    for c in 0..3 {
                        err += (warped[[c, v, u]] - truth[[c, v, u]]).abs();
                    }
                    count += 3;
                }
            }
        }
        assert!(count > valid.len(), "most pixels should stay in frustum");
        let mean = err / count as f64;
        assert!(mean < 2e-2, "mean reconstruction error {mean}");
    }

    /// The keystone check: the training objective evaluated at exact depth
    /// and pose must sit near its floor. Every later claim that optimizing
    /// this loss recovers geometry leans on this bound.
    #[test]
    fn objective_at_ground_truth_is_near_floor() {
        let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
        let frame = 2;
        let target = scene.render(frame).unwrap();
        let prev = scene.render(frame - 1).unwrap();
        let next = scene.render(frame + 1).unwrap();
        let dt = scene.config().trajectory.frame_dt;
        let speed = scene.config().trajectory.speed;

        let tape = Tape::<f64>::no_grad();
        let ctx = PhotometricContext {
            target: tape.constant(target.image.pixels.clone()),
            sources: vec![
                tape.constant(prev.image.pixels.clone()),
                tape.constant(next.image.pixels.clone()),
            ],
            intrinsics: scene.config().intrinsics,
        };
        let pose_vec = |t: usize, s: usize| -> Tensor<f64> {
            let rel = scene.relative_pose(t, s).unwrap();
            let w = rel.axis_angle();
            let tr = rel.translation();
            tape.constant(ArrayD::from_shape_vec(IxDyn(&[6]), vec![
                w[0], w[1], w[2], tr.x, tr.y, tr.z,
            ])
            .unwrap())
        };
        let poses = vec![pose_vec(frame, frame - 1), pose_vec(frame, frame + 1)];

        // Exact depth at every pyramid scale: the oracle validates the
        // photometric model, not a depth network's output layout.
        let depth_arr = target.depth.values.clone().into_dyn();
        let inv_arr = depth_arr.mapv(|d| 1.0 / d);
        let depths: Vec<_> = (0..4).map(|_| tape.constant(depth_arr.clone())).collect();
        let invs: Vec<_> = (0..4).map(|_| tape.constant(inv_arr.clone())).collect();

        let velocity =
            [VelocityRecord::new(speed, -dt).unwrap(), VelocityRecord::new(speed, dt).unwrap()];
        let (loss, diag) = total_loss(
            &tape,
            &ctx,
            &invs,
            &depths,
            &poses,
            Some(&velocity),
            &LossWeights::default(),
        )
        .unwrap();

        assert!(!diag.fully_masked);
        assert!(
            loss.scalar() < 1e-2,
            "objective at ground truth: {} (photometric {:?}, velocity {})",
            loss.scalar(),
            diag.photometric,
            diag.velocity
        );
        // Exact odometry: the translation norm equals speed * dt.
        assert!(diag.velocity < 1e-9, "velocity term {}", diag.velocity);
    }

    #[test]
    fn sample_assembles_both_neighbors() {
        let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
        let sample = scene.sample(3).unwrap();
        sample.validate().unwrap();
        let dt = scene.config().trajectory.frame_dt;
        assert_eq!(sample.contexts.len(), 2);
        assert_eq!(sample.contexts[0].1, -dt);
        assert_eq!(sample.contexts[1].1, dt);
        assert_eq!(sample.gt_depth.as_ref().unwrap().coverage(), 1.0);
        assert_eq!(sample.speed, Some(scene.config().trajectory.speed));

        assert!(matches!(scene.sample(0), Err(Error::MissingContext { index: 0, .. })));
        let last = scene.frame_count() - 1;
        assert!(matches!(scene.sample(last), Err(Error::MissingContext { .. })));
        assert!(matches!(scene.sample(99), Err(Error::IndexOutOfRange { .. })));

        // Dense indexing skips the boundary frames.
        assert_eq!(scene.len(), scene.frame_count() - 2);
        scene.get(0).unwrap();
        assert!(matches!(scene.get(scene.len()), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn scaled_render_matches_full_resolution_geometry() {
        let scene = SyntheticScene::new(SceneConfig::default()).unwrap();
        let full = scene.render(1).unwrap();
        let half = scene.render_scaled(1, 2).unwrap();
        assert_eq!(half.depth.values.dim().0 * 2, full.depth.values.dim().0);
        // With linear intrinsics scaling, coarse pixel (u, v) casts the same
        // ray as fine pixel (2u, 2v), so depth agrees exactly off edges.
        let k = scene.config().intrinsics;
        let kh = k.scaled(0.5, 0.5).unwrap();
        assert_eq!((kh.fx, kh.cx), (k.fx / 2.0, k.cx / 2.0));
        let (hh, hw) = half.depth.values.dim();
        for v in 0..hh {
            for u in 0..hw {
                let fine = full.depth.values[[2 * v, 2 * u]];
                let coarse = half.depth.values[[v, u]];
                assert!(
                    (fine - coarse).abs() < 1e-9,
                    "depth mismatch at ({u},{v}): {coarse} vs {fine}"
                );
            }
        }
    }
}
