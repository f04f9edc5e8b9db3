//! `packnet evaluate`: score depth predictions — from a checkpoint or from
//! a directory of precomputed rasters — against a dataset's ground-truth
//! depth, writing per-frame, aggregate, and optional per-range reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use packnet::data::{read_depth, read_image, DepthMap};
use packnet::error::Error;
use packnet::metrics::{
    aggregate_reports, binned_metrics, depth_metrics, EvalConfig, MetricReport,
};
use packnet::tensor::Tape;
use packnet::trainer::Trainer;

use crate::config::RunConfig;
use crate::CliError;

pub struct Request<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
    pub out: &'a Path,
    pub min_depth: Option<f64>,
    pub max_depth: Option<f64>,
    pub median_scaling: Option<bool>,
    pub bins: Option<Vec<(f64, f64)>>,
    pub resolution: Option<(usize, usize)>,
}

/// One `--bins` argument: a full set of ranges. Wrapped in a newtype so the
/// flag parses as a single value rather than clap appending per occurrence.
#[derive(Debug, Clone)]
pub struct BinRanges(pub Vec<(f64, f64)>);

/// Comma-separated ascending edges; each consecutive pair is one bin.
pub fn parse_bins(s: &str) -> Result<BinRanges, String> {
    let edges: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad bin edge {t:?}")))
        .collect::<Result<_, _>>()?;
    if edges.len() < 2 {
        return Err("need at least two bin edges".into());
    }
    Ok(BinRanges(edges.windows(2).map(|w| (w[0], w[1])).collect()))
}

pub fn run(req: Request<'_>) -> Result<(), CliError> {
    let mut eval = match req.config {
        Some(path) => RunConfig::load(path)?.eval,
        None => EvalConfig::default(),
    };
    if let Some(v) = req.min_depth {
        eval.min_depth = v;
    }
    if let Some(v) = req.max_depth {
        eval.max_depth = v;
    }
    if let Some(v) = req.median_scaling {
        eval.median_scaling = v;
    }
    if let Some(v) = req.bins.clone() {
        eval.range_bins = Some(v);
    }
    eval.validate().map_err(CliError::from)?;

    let gt_dir = req.data.join("depth");
    let frames = numbered_pngs(&gt_dir)?;
    if frames.is_empty() {
        return Err(CliError::msg(format!(
            "no ground-truth depth rasters found under {}",
            gt_dir.display()
        )));
    }

    let mut predictor = open_predictor(&req)?;

    fs::create_dir_all(req.out)?;
    let mut frame_log = BufWriter::new(File::create(req.out.join("frames.jsonl"))?);
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut scored = Vec::new();
    // One accumulator per configured range: per-frame reports, averaged at
    // the end so every frame weighs equally, as in the aggregate.
    let mut bin_acc: Vec<Vec<MetricReport>> =
        eval.range_bins.as_ref().map(|b| vec![Vec::new(); b.len()]).unwrap_or_default();

    for (number, gt_path) in &frames {
        let gt = read_depth(gt_path)?;
        let pred = predictor.predict(*number, &gt)?;
        let report = match depth_metrics(&pred, &gt, &eval) {
            Ok(r) => r,
            Err(Error::NoValidPixels) => {
                log::warn!("frame {number}: no ground truth inside the depth range, skipped");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(
            frame_log,
            "{}",
            serde_json::json!({ "frame": number, "report": &report })
        )?;
        reports.push(report);
        scored.push(*number);

        if eval.range_bins.is_some() {
            for (i, (_, r)) in binned_metrics(&pred, &gt, &eval)?.into_iter().enumerate() {
                if let Some(r) = r {
                    bin_acc[i].push(r);
                }
            }
        }
    }
    frame_log.flush()?;

    let aggregate = aggregate_reports(&reports).ok_or_else(|| {
        CliError::msg("no frame had ground truth inside the evaluation range")
    })?;
    let summary = serde_json::json!({
        "frames": scored.len(),
        "eval": &eval,
        "aggregate": &aggregate,
    });
    let pretty = serde_json::to_string_pretty(&summary)?;
    fs::write(req.out.join("summary.json"), &pretty)?;
    println!("{pretty}");

    if let Some(bins) = &eval.range_bins {
        let rows: Vec<serde_json::Value> = bins
            .iter()
            .zip(&bin_acc)
            .map(|(range, acc)| {
                serde_json::json!({
                    "range": range,
                    "frames": acc.len(),
                    "report": aggregate_reports(acc),
                })
            })
            .collect();
        fs::write(req.out.join("bins.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

/// Frames are `NNNNNN.png` files; anything without a numeric stem is not a
/// frame and is ignored.
fn numbered_pngs(dir: &Path) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::msg(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(n) =
                path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok())
            {
                out.push((n, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

enum Predictor {
    /// Precomputed rasters, one per ground-truth frame.
    Files(PathBuf),
    /// Checkpoint inference at a fixed network resolution.
    Network { trainer: Box<Trainer>, data: PathBuf, resolution: Option<(usize, usize)> },
}

impl Predictor {
    fn predict(&mut self, number: u64, gt: &DepthMap) -> Result<DepthMap, CliError> {
        let (gh, gw) = gt.values.dim();
        match self {
            Predictor::Files(dir) => {
                let path = dir.join(format!("{number:06}.png"));
                let pred = read_depth(&path)
                    .map_err(|e| CliError::msg(format!("prediction for frame {number}: {e}")))?;
                if pred.values.dim() != (gh, gw) {
                    return Err(CliError::msg(format!(
                        "prediction {} is {:?}, ground truth is {:?}",
                        path.display(),
                        pred.values.dim(),
                        (gh, gw)
                    )));
                }
                Ok(pred)
            }
            Predictor::Network { trainer, data, resolution } => {
                let image = read_image(data.join(format!("{number:06}.png")))
                    .map_err(|e| CliError::msg(format!("image for frame {number}: {e}")))?;
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let (nh, nw) = resolution.unwrap_or((h, w));
                if nh % 32 != 0 || nw % 32 != 0 {
                    return Err(CliError::msg(format!(
                        "network resolution {nw}x{nh} must be a multiple of 32; pass \
                         --resolution or train with one configured"
                    )));
                }
                let input = if (nh, nw) == (h, w) {
                    image
                } else {
                    let tape = Tape::<f64>::no_grad();
                    let t = tape.constant(image);
                    tape.resize_bilinear(&t, nh, nw).array().clone()
                };
                let depth = trainer.infer_depth(&input)?;
                // Test-time protocol: only the finest scale, resized to the
                // ground-truth resolution with nearest neighbor.
                Ok(DepthMap::new(resize_nearest(&depth, gh, gw))?)
            }
        }
    }
}

fn open_predictor(req: &Request<'_>) -> Result<Predictor, CliError> {
    match (req.checkpoint, req.predictions) {
        (Some(_), Some(_)) => {
            Err(CliError::msg("--checkpoint and --predictions are mutually exclusive"))
        }
        (None, None) => Err(CliError::msg("evaluate needs --checkpoint or --predictions")),
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(CliError::msg(format!("{} is not a directory", dir.display())));
            }
            Ok(Predictor::Files(dir.to_path_buf()))
        }
        (Some(ckpt), None) => {
            let trainer = Box::new(Trainer::resume(ckpt)?);
            let resolution = req.resolution.or(trainer.config().resolution);
            Ok(Predictor::Network {
                trainer,
                data: req.data.to_path_buf(),
                resolution,
            })
        }
    }
}

/// Nearest-neighbor resize with the same linear coordinate convention the
/// dataset loader uses, so resampled rasters stay aligned with rescaled
/// intrinsics.
pub fn resize_nearest(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(v, u)| {
        let sv = ((v as f64 * sh as f64 / h as f64).round() as usize).min(sh - 1);
        let su = ((u as f64 * sw as f64 / w as f64).round() as usize).min(sw - 1);
        src[[sv, su]]
    })
}
