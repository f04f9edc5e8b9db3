//! The JSON run configuration: one file describes the networks, the
//! optimization schedule, the data source, and the evaluation protocol.
//! The schema is versioned so stale files fail loudly instead of being
//! reinterpreted.

use std::fs;
use std::path::{Path, PathBuf};

use packnet::data::{AugmentConfig, SceneConfig};
use packnet::depthnet::PackNetConfig;
use packnet::metrics::EvalConfig;
use packnet::posenet::PoseNetConfig;
use packnet::trainer::TrainConfig;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Where training samples come from.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The built-in ray-traced scene; exact depth and poses, no files.
    Synthetic { scene: SceneConfig },
    /// A dataset directory of numbered frames with calibration and
    /// optional depth, speeds, and exclusions.
    Disk {
        root: PathBuf,
        #[serde(default)]
        resolution: Option<(usize, usize)>,
        #[serde(default)]
        augment: Option<AugmentConfig>,
    },
}

/// Everything one run needs. Unknown fields are rejected so typos cannot
/// silently fall back to defaults.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "PackNetConfig::default")]
    pub depth: PackNetConfig,
    #[serde(default = "PoseNetConfig::default")]
    pub pose: PoseNetConfig,
    pub data: DataSource,
    #[serde(default = "EvalConfig::default")]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::msg(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::msg(format!("config {}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::msg(format!(
                "config {} has schema version {}, this build reads version {}",
                path.display(),
                cfg.version,
                CONFIG_VERSION
            )));
        }
        Ok(cfg)
    }
}

/// Flag-level overrides for every optimization field; unset flags leave the
/// configuration file untouched.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per optimization step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Depth-network learning rate.
    #[arg(long)]
    pub lr_depth: Option<f64>,
    /// Pose-network learning rate.
    #[arg(long)]
    pub lr_pose: Option<f64>,
    /// Epochs between learning-rate decays.
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    /// Factor the learning rate divides by at each decay.
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    /// Adam first-moment coefficient.
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    /// Adam second-moment coefficient.
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    /// SSIM share of the photometric term.
    #[arg(long)]
    pub ssim_alpha: Option<f64>,
    /// Edge-aware smoothness weight.
    #[arg(long)]
    pub smoothness_weight: Option<f64>,
    /// Speed-supervision weight.
    #[arg(long)]
    pub velocity_weight: Option<f64>,
    /// Per-pyramid-level loss decay factor.
    #[arg(long)]
    pub scale_decay: Option<f64>,
    /// Training resolution as HEIGHTxWIDTH, e.g. 192x640.
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
    /// Supervise translation magnitude with instantaneous speed.
    #[arg(long)]
    pub velocity_supervision: Option<bool>,
    /// Closest representable depth in meters.
    #[arg(long)]
    pub depth_min: Option<f64>,
    /// Farthest representable depth in meters.
    #[arg(long)]
    pub depth_max: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig, seed: Option<u64>) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            epochs,
            batch_size,
            lr_depth,
            lr_pose,
            lr_decay_every,
            lr_decay_factor,
            adam_beta1,
            adam_beta2,
            velocity_supervision,
            depth_min,
            depth_max
        );
        if let Some(v) = self.ssim_alpha {
            cfg.weights.alpha = v;
        }
        if let Some(v) = self.smoothness_weight {
            cfg.weights.lambda1 = v;
        }
        if let Some(v) = self.velocity_weight {
            cfg.weights.lambda2 = v;
        }
        if let Some(v) = self.scale_decay {
            cfg.weights.scale_decay = v;
        }
        if let Some(v) = self.resolution {
            cfg.resolution = Some(v);
        }
        if let Some(v) = seed {
            cfg.seed = v;
        }
    }
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("expected HEIGHTxWIDTH with integer sides, got {s:?}"))
    };
    Ok((parse(h)?, parse(w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_strings_parse_or_reject() {
        assert_eq!(parse_resolution("192x640").unwrap(), (192, 640));
        assert_eq!(parse_resolution("64X96").unwrap(), (64, 96));
        assert!(parse_resolution("192").is_err());
        assert!(parse_resolution("ax640").is_err());
    }

    #[test]
    fn overrides_touch_only_set_fields() {
        let mut cfg = TrainConfig::default();
        let o = TrainOverrides {
            lr_depth: Some(1e-3),
            ssim_alpha: Some(0.5),
            velocity_supervision: Some(true),
            ..TrainOverrides::default()
        };
        o.apply(&mut cfg, Some(9));
        assert_eq!(cfg.lr_depth, 1e-3);
        assert_eq!(cfg.weights.alpha, 0.5);
        assert!(cfg.velocity_supervision);
        assert_eq!(cfg.seed, 9);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.lr_pose, TrainConfig::default().lr_pose);
        assert_eq!(cfg.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn config_versions_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let scene = serde_json::to_string(&SceneConfig::default()).unwrap();
        std::fs::write(
            &path,
            format!(r#"{{"version": 2, "data": {{"kind": "synthetic", "scene": {scene}}}}}"#),
        )
        .unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("schema version 2"), "{err}");

        std::fs::write(
            &path,
            format!(r#"{{"version": 1, "data": {{"kind": "synthetic", "scene": {scene}}}}}"#),
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());

        // Typos must not silently vanish.
        std::fs::write(
            &path,
            format!(
                r#"{{"version": 1, "epocs": 3, "data": {{"kind": "synthetic", "scene": {scene}}}}}"#
            ),
        )
        .unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
