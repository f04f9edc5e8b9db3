//! `packnet train`: build the data source and trainer from the run
//! configuration, then run epochs to completion, checkpointing after each
//! one and logging every step as a JSON line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use packnet::data::{DatasetConfig, DiskDataset, SampleSource, SyntheticScene};
use packnet::trainer::{StepDiagnostics, Trainer};

use crate::config::{DataSource, RunConfig, TrainOverrides};
use crate::CliError;

pub fn run(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    resume: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<(), CliError> {
    let config = config.ok_or_else(|| CliError::msg("train requires --config"))?;
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg.train, seed);

    let data = open_source(&cfg.data)?;
    let mut trainer = match resume {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::msg(format!(
                    "--resume {} does not exist; remove the flag to start fresh",
                    path.display()
                )));
            }
            let t = Trainer::resume(path)?;
            log::info!(
                "resumed from {} at epoch {}, step {}",
                path.display(),
                t.epoch(),
                t.step()
            );
            t
        }
        None => Trainer::new(cfg.train.clone(), cfg.depth.clone(), cfg.pose.clone())?,
    };

    fs::create_dir_all(out)?;
    // Echo the effective configuration: the file plus every override, as
    // the run actually used it.
    let effective = RunConfig { train: trainer.config().clone(), ..cfg.clone() };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&effective)?)?;

    let mut log_file = BufWriter::new(File::create(out.join("train.log"))?);
    writeln!(
        log_file,
        "{}",
        serde_json::json!({ "record": "config", "data": &effective })
    )?;

    let checkpoint_path = out.join("checkpoint.ckpt");
    let total_epochs = trainer.config().epochs;
    while trainer.epoch() < total_epochs {
        let mut on_step = |d: &StepDiagnostics| {
            let line = serde_json::json!({ "record": "step", "data": d });
            if let Err(e) = writeln!(log_file, "{line}") {
                log::warn!("could not append to train.log: {e}");
            }
            log::info!(
                "epoch {} step {} loss {:.6} (photo {:.6}, lr {:.2e})",
                d.epoch,
                d.step,
                d.total,
                d.photometric.first().copied().unwrap_or(f64::NAN),
                d.lr_depth
            );
        };
        let summary = trainer.run_epoch(data.as_ref(), &mut on_step)?;
        writeln!(
            log_file,
            "{}",
            serde_json::json!({ "record": "epoch", "data": &summary })
        )?;
        log_file.flush()?;
        trainer.save(&checkpoint_path)?;
        log::info!(
            "epoch {} done: mean loss {:.6}; checkpoint {}",
            summary.epoch,
            summary.mean_total,
            checkpoint_path.display()
        );
    }
    Ok(())
}

fn open_source(data: &DataSource) -> Result<Box<dyn SampleSource>, CliError> {
    match data {
        DataSource::Synthetic { scene } => Ok(Box::new(SyntheticScene::new(scene.clone())?)),
        DataSource::Disk { root, resolution, augment } => {
            let cfg = DatasetConfig { resolution: *resolution, augment: *augment };
            Ok(Box::new(DiskDataset::open(root, cfg)?))
        }
    }
}
