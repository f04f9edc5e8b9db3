//! `packnet reconstruct-demo`: train a single packing/unpacking pair and a
//! pooling/upsampling baseline to reproduce one image, then report the final
//! L1 error of each. A quick way to see the packing blocks preserve detail
//! that pooling discards.

use std::fs;
use std::path::Path;

use packnet::data::read_image;
use packnet::depthnet::reconstruction_benchmark;

use crate::CliError;

pub fn run(
    image: &Path,
    steps: usize,
    lr: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let pixels = read_image(image).map_err(|e| CliError::msg(format!("{}: {e}", image.display())))?;
    let report = reconstruction_benchmark(&pixels, steps, lr, seed)?;
    let rendered = serde_json::to_string_pretty(&report)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, format!("{rendered}\n"))?;
    }
    println!("{rendered}");
    Ok(())
}
