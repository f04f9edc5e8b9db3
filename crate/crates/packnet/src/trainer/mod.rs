//! The optimization loop: Adam over both networks with separate learning
//! rates, stepwise decay, per-step structured diagnostics, and binary
//! checkpoints that resume training exactly.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SampleSource, SequenceSample};
use crate::depthnet::{invdepth_to_depth, PackNet, PackNetConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights, PhotometricContext, VelocityRecord};
use crate::posenet::{PoseNet, PoseNetConfig, PoseVector};
use crate::tensor::{Gradients, Param, Tape, Tensor};

const ADAM_EPS: f64 = 1e-8;

/// Optimization hyperparameters. The defaults are the published schedule:
/// Adam with distinct depth/pose rates, halved every 40 epochs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_depth: f64,
    pub lr_pose: f64,
    /// Learning rates are multiplied by `lr_decay_factor^-1` every this
    /// many epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    /// Expected training resolution `(height, width)`; `None` accepts any
    /// input whose sides are multiples of 32.
    pub resolution: Option<(usize, usize)>,
    /// Add the speed-supervision term when samples carry odometry, which
    /// pins the metric scale of depth and pose.
    pub velocity_supervision: bool,
    /// Metric depth range the sigmoid output maps onto.
    pub depth_min: f64,
    pub depth_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr_depth: 2e-4,
            lr_pose: 5e-4,
            lr_decay_every: 40,
            lr_decay_factor: 2.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            resolution: None,
            velocity_supervision: false,
            depth_min: 0.1,
            depth_max: 100.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "epochs ({}) and batch_size ({}) must be positive",
                self.epochs, self.batch_size
            )));
        }
        if !(self.lr_depth > 0.0 && self.lr_pose > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rates must be positive, got {} and {}",
                self.lr_depth, self.lr_pose
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidConfig("lr_decay_every must be positive".into()));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay_factor must exceed 1, got {}",
                self.lr_decay_factor
            )));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {beta}")));
            }
        }
        self.weights.validate()?;
        if let Some((h, w)) = self.resolution {
            if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
                return Err(Error::InvalidConfig(format!(
                    "training resolution {w}x{h} must be a positive multiple of 32"
                )));
            }
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < depth_min < depth_max, got {} and {}",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }
}

/// Stepwise decay: both rates are divided by `lr_decay_factor` once per
/// completed `lr_decay_every` epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let drops = (epoch / cfg.lr_decay_every) as i32;
    let scale = cfg.lr_decay_factor.powi(-drops);
    (cfg.lr_depth * scale, cfg.lr_pose * scale)
}

/// Everything worth logging about one optimizer step. Serializes to a
/// single structured record, one line per step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub epoch: usize,
    pub lr_depth: f64,
    pub lr_pose: f64,
    pub batch: usize,
    pub total: f64,
    /// Batch-mean photometric term per scale, finest first.
    pub photometric: Vec<f64>,
    /// Batch-mean smoothness term per scale.
    pub smoothness: Vec<f64>,
    /// Batch-mean velocity term; exactly zero when supervision is off.
    pub velocity: f64,
    /// Batch-mean fraction of pixels surviving masking, per scale.
    pub mask_coverage: Vec<f64>,
}

/// Per-epoch roll-up.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
}

/// Adam moments for one flat list of parameters (depth first, then pose).
struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl AdamState {
    fn new(params: &[&Param<f64>]) -> Self {
        let zeros = |p: &&Param<f64>| ArrayD::zeros(IxDyn(&p.shape()));
        Self { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }
}

/// Owns both networks and the optimizer state; one instance per run.
pub struct Trainer {
    cfg: TrainConfig,
    depth_net: PackNet<f64>,
    pose_net: PoseNet<f64>,
    adam: AdamState,
    n_depth_params: usize,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, depth: PackNetConfig, pose: PoseNetConfig) -> Result<Self> {
        cfg.validate()?;
        let depth_net = PackNet::new(depth, cfg.seed)?;
        // A different stream than the depth net, still derived from the
        // single run seed.
        let pose_net = PoseNet::new(pose, splitmix64(cfg.seed ^ 0x706F_7365))?;
        let params: Vec<&Param<f64>> =
            depth_net.params().into_iter().chain(pose_net.params()).collect();
        let adam = AdamState::new(&params);
        let n_depth_params = depth_net.params().len();
        Ok(Self { cfg, depth_net, pose_net, adam, n_depth_params, epoch: 0, step: 0 })
    }

    /// Rebuild a trainer exactly as saved: configs, parameters, optimizer
    /// moments, and step counters all come from the file.
    pub fn resume(path: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint::resume(path.as_ref())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn depth_net(&self) -> &PackNet<f64> {
        &self.depth_net
    }

    pub fn pose_net(&self) -> &PoseNet<f64> {
        &self.pose_net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn all_params(&self) -> Vec<&Param<f64>> {
        self.depth_net.params().into_iter().chain(self.pose_net.params()).collect()
    }

    /// Dropout stream for the current step: a pure function of the run seed
    /// and the step counter, so a resumed run replays the same draws.
    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.cfg.seed ^ splitmix64(self.step as u64 + 1)))
    }

    fn check_resolution(&self, sample: &SequenceSample) -> Result<()> {
        let (h, w) = (sample.target.height(), sample.target.width());
        if let Some((rh, rw)) = self.cfg.resolution {
            if (h, w) != (rh, rw) {
                return Err(Error::shape(
                    "training sample",
                    format!("[3,{rh},{rw}]"),
                    sample.target.pixels.shape(),
                ));
            }
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!(
                "sample resolution {w}x{h} must be a multiple of 32 for the packing pyramid"
            )));
        }
        Ok(())
    }

    /// One optimizer update over a batch: depth and pose forward passes,
    /// the full objective, one backward pass, one Adam step for both
    /// parameter groups. Any non-finite term aborts before the update.
    pub fn train_step(&mut self, batch: &[SequenceSample]) -> Result<StepDiagnostics> {
        if batch.is_empty() {
            return Err(Error::invalid("cannot train on an empty batch"));
        }
        let (lr_depth, lr_pose) = lr_schedule(self.epoch, &self.cfg);
        let tape = Tape::<f64>::new();
        let mut rng = self.step_rng();

        let mut batch_loss: Option<Tensor<f64>> = None;
        let mut photometric: Vec<f64> = Vec::new();
        let mut smoothness: Vec<f64> = Vec::new();
        let mut mask_coverage: Vec<f64> = Vec::new();
        let mut velocity = 0.0;
        let mut total = 0.0;

        for sample in batch {
            sample.validate()?;
            self.check_resolution(sample)?;

            let target = tape.constant(sample.target.pixels.clone());
            let sources: Vec<Tensor<f64>> =
                sample.contexts.iter().map(|(f, _)| tape.constant(f.pixels.clone())).collect();

            let inv_maps = self.depth_net.forward_train(&tape, &target, &mut rng)?;
            let mut invs = Vec::with_capacity(inv_maps.len());
            let mut depths = Vec::with_capacity(inv_maps.len());
            for map in &inv_maps {
                depths.push(invdepth_to_depth(
                    &tape,
                    &map.values,
                    self.cfg.depth_min,
                    self.cfg.depth_max,
                )?);
                invs.push(map.values.clone());
            }

            let mut poses = Vec::with_capacity(sources.len());
            for source in &sources {
                poses.push(self.pose_net.forward(&tape, &target, source)?);
            }

            let records: Option<Vec<VelocityRecord>> = match (self.cfg.velocity_supervision, sample.speed) {
                (true, Some(speed)) => Some(
                    sample
                        .contexts
                        .iter()
                        .map(|(_, dt)| VelocityRecord::new(speed, *dt))
                        .collect::<Result<_>>()?,
                ),
                _ => None,
            };

            let ctx = PhotometricContext {
                target,
                sources,
                intrinsics: sample.intrinsics,
            };
            let (loss, diag) =
                total_loss(&tape, &ctx, &invs, &depths, &poses, records.as_deref(), &self.cfg.weights)?;
            self.guard_finite(&diag)?;

            if photometric.is_empty() {
                photometric = vec![0.0; diag.photometric.len()];
                smoothness = vec![0.0; diag.smoothness.len()];
                mask_coverage = vec![0.0; diag.mask_coverage.len()];
            }
            for (acc, x) in photometric.iter_mut().zip(&diag.photometric) {
                *acc += x;
            }
            for (acc, x) in smoothness.iter_mut().zip(&diag.smoothness) {
                *acc += x;
            }
            for (acc, x) in mask_coverage.iter_mut().zip(&diag.mask_coverage) {
                *acc += x;
            }
            velocity += diag.velocity;
            total += diag.total;

            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => tape.add(&acc, &loss),
            });
        }

        let n = batch.len() as f64;
        let loss = tape.mul_scalar(&batch_loss.expect("nonempty batch"), 1.0 / n);
        let grads = tape.backward(&loss);
        self.adam_step(&grads, lr_depth, lr_pose);

        let diagnostics = StepDiagnostics {
            step: self.step,
            epoch: self.epoch,
            lr_depth,
            lr_pose,
            batch: batch.len(),
            total: total / n,
            photometric: photometric.iter().map(|x| x / n).collect(),
            smoothness: smoothness.iter().map(|x| x / n).collect(),
            velocity: velocity / n,
            mask_coverage: mask_coverage.iter().map(|x| x / n).collect(),
        };
        self.step += 1;
        Ok(diagnostics)
    }

    /// Name the first non-finite term so the failure is actionable.
    fn guard_finite(&self, diag: &crate::losses::LossDiagnostics) -> Result<()> {
        let bad = |term: String| Error::NonFiniteLoss { term, step: self.step };
        for (s, x) in diag.photometric.iter().enumerate() {
            if !x.is_finite() {
                return Err(bad(format!("photometric[{s}]")));
            }
        }
        for (s, x) in diag.smoothness.iter().enumerate() {
            if !x.is_finite() {
                return Err(bad(format!("smoothness[{s}]")));
            }
        }
        if !diag.velocity.is_finite() {
            return Err(bad("velocity".into()));
        }
        if !diag.total.is_finite() {
            return Err(bad("total".into()));
        }
        Ok(())
    }

    fn adam_step(&mut self, grads: &Gradients<f64>, lr_depth: f64, lr_pose: f64) {
        let Trainer { cfg, depth_net, pose_net, adam, n_depth_params, .. } = self;
        adam.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(adam.t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(adam.t);
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let params: Vec<&Param<f64>> =
            depth_net.params().into_iter().chain(pose_net.params()).collect();
        for (i, p) in params.iter().enumerate() {
            let Some(g) = grads.param(p) else { continue };
            let lr = if i < *n_depth_params { lr_depth } else { lr_pose };
            let m = &mut adam.m[i];
            let v = &mut adam.v[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            p.update(|w| {
                ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
            });
        }
    }

    /// One pass over the dataset in a seed-determined shuffled order,
    /// reporting each step to `on_step`. Advances the epoch counter.
    pub fn run_epoch(
        &mut self,
        data: &dyn SampleSource,
        on_step: &mut dyn FnMut(&StepDiagnostics),
    ) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::invalid("dataset holds no usable samples"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            self.cfg.seed ^ splitmix64(0xE70C ^ self.epoch as u64),
        ));
        order.shuffle(&mut rng);

        let mut steps = 0usize;
        let mut sum_total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<SequenceSample> =
                chunk.iter().map(|&i| data.get(i)).collect::<Result<_>>()?;
            let diag = self.train_step(&batch)?;
            sum_total += diag.total;
            steps += 1;
            on_step(&diag);
        }
        let summary =
            EpochSummary { epoch: self.epoch, steps, mean_total: sum_total / steps as f64 };
        self.epoch += 1;
        Ok(summary)
    }

    /// Train from the current epoch up to the configured total.
    pub fn train(
        &mut self,
        data: &dyn SampleSource,
        on_step: &mut dyn FnMut(&StepDiagnostics),
    ) -> Result<Vec<EpochSummary>> {
        let mut summaries = Vec::new();
        while self.epoch < self.cfg.epochs {
            summaries.push(self.run_epoch(data, on_step)?);
        }
        Ok(summaries)
    }

    /// Metric depth at the finest scale, in evaluation mode (no dropout).
    pub fn infer_depth(&self, image: &ArrayD<f64>) -> Result<Array2<f64>> {
        let tape = Tape::<f64>::no_grad();
        let input = tape.constant(image.clone());
        let inv_maps = self.depth_net.forward(&tape, &input)?;
        let finest = &inv_maps[0].values;
        let depth = invdepth_to_depth(&tape, finest, self.cfg.depth_min, self.cfg.depth_max)?;
        let arr = depth.array().clone();
        arr.into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::invalid("depth head produced a non-2d raster"))
    }

    /// Relative motion mapping target-frame points into the source frame.
    pub fn infer_pose(&self, target: &ArrayD<f64>, source: &ArrayD<f64>) -> Result<PoseVector> {
        let tape = Tape::<f64>::no_grad();
        let t = tape.constant(target.clone());
        let s = tape.constant(source.clone());
        let pose = self.pose_net.forward(&tape, &t, &s)?;
        PoseVector::from_tensor(&pose)
    }

    /// Write the full training state; see [`save_checkpoint`].
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save_checkpoint(self, path.as_ref())
    }
}

/// SplitMix64 finalizer; spreads structured seeds over the whole space.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
