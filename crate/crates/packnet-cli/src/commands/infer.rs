//! `packnet infer`: depth rasters for standalone images. Each input runs
//! through the checkpointed network at a fixed resolution; the finest-scale
//! output is resized back to the input's resolution with nearest neighbor
//! and written in the dataset depth format (16-bit, meters x 256).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use packnet::data::{read_image, write_depth, DepthMap};
use packnet::tensor::Tape;
use packnet::trainer::Trainer;

use super::evaluate::resize_nearest;
use crate::CliError;

pub fn run(
    checkpoint: &Path,
    out: &Path,
    resolution: Option<(usize, usize)>,
    images: &[PathBuf],
) -> Result<(), CliError> {
    let trainer = Trainer::resume(checkpoint)?;
    let resolution = resolution.or(trainer.config().resolution);

    let mut stems = BTreeSet::new();
    for path in images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::msg(format!("{} has no usable file name", path.display())))?;
        if !stems.insert(stem.to_string()) {
            return Err(CliError::msg(format!(
                "two inputs are both named {stem}; outputs would overwrite each other"
            )));
        }
    }

    fs::create_dir_all(out)?;
    for path in images {
        let image = read_image(path)
            .map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let (nh, nw) = resolution.unwrap_or((h, w));
        if nh % 32 != 0 || nw % 32 != 0 {
            return Err(CliError::msg(format!(
                "network resolution {nw}x{nh} must be a multiple of 32; pass --resolution"
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
        let full = DepthMap::new(resize_nearest(&depth, h, w))?;

        let stem = path.file_stem().and_then(|s| s.to_str()).expect("checked above");
        let target = out.join(format!("{stem}.png"));
        write_depth(&target, &full)?;
        let (lo, hi) = full.values.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
        println!(
            "{}",
            serde_json::json!({
                "image": path,
                "raster": target,
                "depth_min": lo,
                "depth_max": hi,
            })
        );
    }
    Ok(())
}
