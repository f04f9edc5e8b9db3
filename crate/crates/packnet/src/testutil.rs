//! Small helpers shared by unit tests across modules.

use ndarray::{ArrayD, IxDyn};

use crate::data::{BoxSpec, SceneConfig, SyntheticScene, TrajectoryConfig};
use crate::depthnet::PackNetConfig;
use crate::geometry::CameraIntrinsics;
use crate::posenet::PoseNetConfig;
use crate::tensor::{Gradients, Param};
use crate::trainer::{TrainConfig, Trainer};

/// A 64x32 scene: small enough for optimizer-loop tests, still fully
/// textured with ground, boxes, and a back wall.
pub(crate) fn tiny_scene() -> SyntheticScene {
    let cfg = SceneConfig {
        intrinsics: CameraIntrinsics::new(40.0, 40.0, 31.5, 15.5, 64, 32).unwrap(),
        boxes: vec![
            BoxSpec { min: [-2.8, 0.3, 5.0], max: [-0.8, 1.5, 7.0] },
            BoxSpec { min: [0.7, -0.1, 8.0], max: [2.4, 1.5, 10.0] },
        ],
        trajectory: TrajectoryConfig { frames: 6, ..TrajectoryConfig::default() },
        ..SceneConfig::default()
    };
    SyntheticScene::new(cfg).unwrap()
}

/// A trainer with networks shrunk far below production size, for tests that
/// exercise the optimization loop rather than model capacity.
pub(crate) fn tiny_trainer(seed: u64, velocity: bool) -> Trainer {
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 2,
        velocity_supervision: velocity,
        seed,
        ..TrainConfig::default()
    };
    let depth = PackNetConfig::default().scaled(8).unwrap();
    let pose = PoseNetConfig::default().scaled(4).unwrap();
    Trainer::new(cfg, depth, pose).unwrap()
}

/// Minimal Adam optimizer for test-local training loops; the production
/// trainer has its own, configurable implementation.
pub(crate) struct TestAdam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
    lr: f64,
}

impl TestAdam {
    pub(crate) fn new(params: &[&Param<f64>], lr: f64) -> Self {
        TestAdam {
            m: params.iter().map(|p| ArrayD::zeros(IxDyn(&p.shape()))).collect(),
            v: params.iter().map(|p| ArrayD::zeros(IxDyn(&p.shape()))).collect(),
            t: 0,
            lr,
        }
    }

    pub(crate) fn step(&mut self, params: &[&Param<f64>], grads: &Gradients<f64>) {
        self.t += 1;
        let bc1 = 1.0 - 0.9f64.powi(self.t);
        let bc2 = 1.0 - 0.999f64.powi(self.t);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = grads.param(p) else { continue };
            self.m[i].zip_mut_with(g, |m, &g| *m = 0.9 * *m + 0.1 * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = 0.999 * *v + 0.001 * g * g);
            let (m, v, lr) = (&self.m[i], &self.v[i], self.lr);
            p.update(|val| {
                ndarray::Zip::from(val).and(m).and(v).for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + 1e-8);
                });
            });
        }
    }
}
