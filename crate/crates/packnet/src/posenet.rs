//! Ego-motion network: predicts the 6-DoF transform between a target frame
//! and one source frame.
//!
//! The two frames are channel-concatenated and pushed through seven stride-2
//! convolutions with ReLU activations, a final 1x1 convolution down to six
//! channels, and a global spatial average. The result is scaled by a small
//! constant so a fresh network starts near the identity transform, and with
//! the default zero-initialized head it starts exactly there.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depthnet::Conv2dLayer;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::tensor::{Element, Param, Tape, Tensor};

/// Structural description of the pose network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseNetConfig {
    /// Output channels of the seven stride-2 convolutions.
    pub channels: [usize; 7],
    /// Kernel sizes of the seven convolutions (odd; padding preserves dims
    /// up to the stride).
    pub kernels: [usize; 7],
    /// Multiplier applied to the averaged head output. Keeps early
    /// predictions within a small neighbourhood of the identity.
    pub output_scale: f64,
    /// Zero the head so a fresh network predicts the exact identity.
    pub zero_init_head: bool,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            channels: [16, 32, 64, 128, 256, 256, 256],
            kernels: [7, 5, 3, 3, 3, 3, 3],
            output_scale: 0.01,
            zero_init_head: true,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("pose conv channels must be positive".into()));
        }
        if self.kernels.iter().any(|&k| k % 2 == 0 || k == 0) {
            return Err(Error::InvalidConfig("pose conv kernels must be odd".into()));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "output_scale must be positive and finite, got {}",
                self.output_scale
            )));
        }
        Ok(())
    }

    /// The same topology with every channel count divided by `divisor`.
    pub fn scaled(&self, divisor: usize) -> Result<PoseNetConfig> {
        if divisor == 0 {
            return Err(Error::InvalidConfig("divisor must be >= 1".into()));
        }
        let mut cfg = self.clone();
        for c in cfg.channels.iter_mut() {
            if *c % divisor != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channel count {c} is not divisible by {divisor}"
                )));
            }
            *c /= divisor;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A predicted transform as the network emits it: rotation as an axis-angle
/// vector (radians), translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVector {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseVector {
    pub fn identity() -> Self {
        PoseVector { axis_angle: [0.0; 3], translation: [0.0; 3] }
    }

    /// Read a 6-element tensor laid out as [axis-angle, translation].
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        if t.shape() != [6] {
            return Err(Error::shape("pose vector", "[6]", t.shape()));
        }
        let v = t.array();
        let at = |i: usize| v[[i]].into_f64();
        Ok(PoseVector {
            axis_angle: [at(0), at(1), at(2)],
            translation: [at(3), at(4), at(5)],
        })
    }

    /// Exponential-map conversion to a rigid transform; the zero vector maps
    /// to the identity and the translation passes through unchanged.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_axis_angle_translation(self.axis_angle, self.translation)
    }

    /// Rotation magnitude in radians.
    pub fn rotation_angle(&self) -> f64 {
        let [x, y, z] = self.axis_angle;
        (x * x + y * y + z * z).sqrt()
    }

    pub fn translation_norm(&self) -> f64 {
        let [x, y, z] = self.translation;
        (x * x + y * y + z * z).sqrt()
    }
}

/// The pose network. Parameter names are stable and form the checkpoint
/// schema, exactly as for the depth network.
pub struct PoseNet<T> {
    cfg: PoseNetConfig,
    convs: Vec<Conv2dLayer<T>>,
    head: Conv2dLayer<T>,
}

impl<T: Element> PoseNet<T> {
    pub fn new(cfg: PoseNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(7);
        let mut c_in = 6; // two RGB frames, channel-concatenated
        for (i, (&c_out, &k)) in cfg.channels.iter().zip(&cfg.kernels).enumerate() {
            convs.push(Conv2dLayer::new(&format!("pose.conv{}", i + 1), c_in, c_out, k, 2, rng));
            c_in = c_out;
        }
        let head = Conv2dLayer::new("pose.head", c_in, 6, 1, 1, rng);
        if cfg.zero_init_head {
            head.w.update(|w| w.fill(T::zero()));
            head.b.update(|b| b.fill(T::zero()));
        }
        Ok(PoseNet { cfg, convs, head })
    }

    pub fn config(&self) -> &PoseNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            c.collect(&mut out);
        }
        self.head.collect(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Predict the transform mapping target-frame points into the source
    /// frame. Output is a tracked 6-tensor [axis-angle, translation] ready
    /// for the differentiable warp.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        target: &Tensor<T>,
        source: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if target.shape() != source.shape() {
            return Err(Error::shape(
                "pose network input pair",
                format!("matching shapes (target is {:?})", target.shape()),
                source.shape(),
            ));
        }
        if target.shape().len() != 3 || target.shape()[0] != 3 {
            return Err(Error::shape("pose network input", "[3, H, W]", target.shape()));
        }
        let mut x = tape.concat0(&[target, source]);
        for conv in &self.convs {
            x = tape.relu(&conv.forward(tape, &x));
        }
        let logits = self.head.forward(tape, &x);
        Ok(tape.mul_scalar(&tape.mean_spatial(&logits), T::from_f64(self.cfg.output_scale)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{warp_frame, CameraIntrinsics};
    use crate::losses::{photometric_loss, LossWeights};
    use crate::testutil::TestAdam;
    use approx::assert_relative_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[3, h, w]), || r.gen_range(0.0..1.0))
    }

    fn tiny_cfg() -> PoseNetConfig {
        PoseNetConfig {
            channels: [4, 8, 8, 8, 16, 16, 16],
            ..PoseNetConfig::default()
        }
    }

    #[test]
    fn config_validation_and_scaling() {
        assert!(PoseNetConfig::default().validate().is_ok());
        let bad = PoseNetConfig { kernels: [7, 4, 3, 3, 3, 3, 3], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PoseNetConfig { output_scale: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let small = PoseNetConfig::default().scaled(4).unwrap();
        assert_eq!(small.channels, [4, 8, 16, 32, 64, 64, 64]);
        assert!(PoseNetConfig::default().scaled(5).is_err());
    }

    #[test]
    fn fresh_network_with_zeroed_head_predicts_exact_identity() {
        let net = PoseNet::<f64>::new(tiny_cfg(), 3).unwrap();
        let tape = Tape::<f64>::no_grad();
        let t = tape.constant(random_image(32, 32, 0));
        let s = tape.constant(random_image(32, 32, 1));
        let pose = net.forward(&tape, &t, &s).unwrap();
        assert_eq!(pose.shape(), &[6]);
        assert!(pose.array().iter().all(|&v| v == 0.0));
        let pv = PoseVector::from_tensor(&pose).unwrap();
        assert_eq!(pv, PoseVector::identity());
        assert_eq!(pv.to_transform().rotation(), RigidTransform::identity().rotation());
    }

    #[test]
    fn random_head_output_is_finite_and_near_identity() {
        let cfg = PoseNetConfig { zero_init_head: false, ..tiny_cfg() };
        let net = PoseNet::<f64>::new(cfg, 5).unwrap();
        let tape = Tape::<f64>::no_grad();
        for seed in 0..4 {
            let t = tape.constant(random_image(64, 64, seed * 2));
            let s = tape.constant(random_image(64, 64, seed * 2 + 1));
            let pose = net.forward(&tape, &t, &s).unwrap();
            assert!(pose.is_finite());
            let pv = PoseVector::from_tensor(&pose).unwrap();
            assert!(pv.translation_norm() < 0.05, "translation {}", pv.translation_norm());
            assert!(pv.rotation_angle() < 0.05, "rotation {}", pv.rotation_angle());
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let net = PoseNet::<f64>::new(tiny_cfg(), 0).unwrap();
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(ArrayD::zeros(IxDyn(&[3, 32, 32])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[3, 32, 64])));
        assert!(net.forward(&tape, &a, &b).is_err());
        let gray = tape.constant(ArrayD::zeros(IxDyn(&[1, 32, 32])));
        assert!(net.forward(&tape, &gray, &gray).is_err());
    }

    #[test]
    fn pose_to_transform_matches_rodrigues_closed_form() {
        let quarter = std::f64::consts::FRAC_PI_2;
        let pv = PoseVector {
            axis_angle: [0.0, 0.0, quarter],
            translation: [1.0, -2.0, 3.0],
        };
        let tf = pv.to_transform();
        let r = tf.rotation();
        // 90 degree rotation about z: x axis lands on y.
        assert_relative_eq!(r[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(r[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r[(0, 1)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(r[(2, 2)], 1.0, epsilon = 1e-12);
        assert_eq!(tf.translation().as_slice(), &[1.0, -2.0, 3.0]);
        assert_relative_eq!(pv.rotation_angle(), quarter, epsilon = 1e-12);
    }

    /// Finite-difference check of d‖t̂‖/dθ for a handful of parameters in
    /// every layer, with a randomly initialized head so gradients are
    /// nonzero throughout.
    #[test]
    fn translation_norm_gradients_match_finite_differences() {
        let cfg = PoseNetConfig {
            channels: [4, 4, 8, 8, 8, 8, 8],
            zero_init_head: false,
            ..PoseNetConfig::default()
        };
        let net = PoseNet::<f64>::new(cfg, 9).unwrap();
        let target = random_image(16, 16, 10);
        let source = random_image(16, 16, 11);

        let eval = |tape: &Tape<f64>| -> Tensor<f64> {
            let t = tape.constant(target.clone());
            let s = tape.constant(source.clone());
            let pose = net.forward(tape, &t, &s).unwrap();
            let tr = tape.narrow(&pose, 0, 3, 3);
            tape.sqrt(&tape.add_scalar(&tape.sum(&tape.mul(&tr, &tr)), 1e-12))
        };

        let tape = Tape::<f64>::new();
        let loss = eval(&tape);
        let grads = tape.backward(&loss);

        let mut checked = 0usize;
        for p in net.params() {
            let analytic = grads.param(p).cloned().unwrap_or_else(|| {
                ArrayD::zeros(IxDyn(&p.shape()))
            });
            // Probe a few strided elements per parameter.
            let n = p.len();
            for j in [0, n / 2, n - 1] {
                let orig = p.value().as_slice().unwrap()[j];
                let h = 1e-6 * orig.abs().max(1.0);
                p.update(|v| v.as_slice_mut().unwrap()[j] = orig + h);
                let plus = eval(&Tape::no_grad()).scalar();
                p.update(|v| v.as_slice_mut().unwrap()[j] = orig - h);
                let minus = eval(&Tape::no_grad()).scalar();
                p.update(|v| v.as_slice_mut().unwrap()[j] = orig);
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "{} [{j}]: analytic {a}, numeric {numeric}",
                    p.name()
                );
                checked += 1;
            }
        }
        assert!(checked >= 3 * 16, "expected to probe every layer");
    }

    /// Two frames of a synthetic rig related by a known translation; the
    /// network is trained self-supervised (photometric error through the
    /// differentiable warp, both frame orderings) and must discover a pair
    /// of approximately inverse transforms.
    #[test]
    fn converged_pose_swaps_to_approximate_inverse() {
        let (h, w) = (32usize, 32usize);
        // Wide field of view: rotation and z-translation then bend the flow
        // field visibly, so the photometric optimum pins the true motion.
        let k = CameraIntrinsics::new(16.0, 16.0, 15.5, 15.5, w, h).unwrap();
        let depth0 = 4.0;
        let (sx, sy) = (1.2, 0.9); // px shift of the source pattern
        let img = |ox: f64, oy: f64| {
            ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
                let (c, y, x) = (ix[0] as f64, ix[1] as f64 + oy, ix[2] as f64 + ox);
                0.2 + 0.02 * x
                    + 0.015 * y
                    + 0.25 * (0.55 * x + 0.2 * y + 0.3 * c).sin() * (0.17 * y - 0.1 * c).cos()
            })
        };
        let target = img(0.0, 0.0);
        let source = img(sx, sy);
        let depth = ArrayD::from_elem(IxDyn(&[h, w]), depth0);
        let weights = LossWeights::default();
        // Score a fixed interior window. A mean over the warp's own validity
        // mask would let the optimizer shrink the flow field to re-weight
        // the average instead of aligning the images.
        let interior = ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
            let (y, x) = (ix[0], ix[1]);
            if (3..h - 3).contains(&y) && (3..w - 3).contains(&x) { 1.0 } else { 0.0 }
        });

        let cfg = PoseNetConfig {
            channels: [8, 16, 16, 16, 16, 16, 16],
            // A coarser output scale moves the head into the basin within a
            // few hundred steps; the swap property is scale-independent.
            output_scale: 0.1,
            ..PoseNetConfig::default()
        };
        let net = PoseNet::<f64>::new(cfg, 17).unwrap();
        let params = net.params();
        let mut opt = TestAdam::new(&params, 2e-3);
        for _ in 0..1000 {
            let tape = Tape::<f64>::new();
            let t = tape.constant(target.clone());
            let s = tape.constant(source.clone());
            let d = tape.constant(depth.clone());
            let pose_ts = net.forward(&tape, &t, &s).unwrap();
            let pose_st = net.forward(&tape, &s, &t).unwrap();
            let warp_t = warp_frame(&tape, &s, &d, &pose_ts, &k).unwrap();
            let warp_s = warp_frame(&tape, &t, &d, &pose_st, &k).unwrap();
            let lt = photometric_loss(&tape, &t, &warp_t.image, &weights).unwrap();
            let ls = photometric_loss(&tape, &s, &warp_s.image, &weights).unwrap();
            let loss = tape.add(
                &tape.mean_where(&lt, &interior),
                &tape.mean_where(&ls, &interior),
            );
            let grads = tape.backward(&loss);
            opt.step(&params, &grads);
        }

        let tape = Tape::<f64>::no_grad();
        let t = tape.constant(target.clone());
        let s = tape.constant(source.clone());
        let fwd = PoseVector::from_tensor(&net.forward(&tape, &t, &s).unwrap()).unwrap();
        let rev = PoseVector::from_tensor(&net.forward(&tape, &s, &t).unwrap()).unwrap();

        // The rig moves, and the two orderings see opposite motions.
        let expected = (sx * depth0 / k.fx).hypot(sy * depth0 / k.fy);
        assert!(
            fwd.translation_norm() > 0.5 * expected,
            "forward pose barely moved: {:?}",
            fwd.translation
        );
        let residual: f64 = fwd
            .translation
            .iter()
            .zip(&rev.translation)
            .map(|(a, b)| (a + b) * (a + b))
            .sum::<f64>()
            .sqrt();
        let scale = fwd.translation_norm().max(rev.translation_norm());
        assert!(
            residual <= 0.15 * scale,
            "swapped translation must be antiparallel within 15%: fwd {:?}, rev {:?}",
            fwd.translation,
            rev.translation
        );
    }
}
