//! `packnet plot`: render training logs and evaluation bins as PNG charts.
//! `--log` draws the total loss per step, `--bins` draws Abs Rel per depth
//! range; either or both may be given.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::chart;
use crate::CliError;

#[derive(Deserialize)]
struct StepRecord {
    record: String,
    data: serde_json::Value,
}

#[derive(Deserialize)]
struct StepData {
    step: u64,
    total: f64,
}

#[derive(Deserialize)]
struct BinRow {
    range: (f64, f64),
    report: Option<BinReport>,
}

#[derive(Deserialize)]
struct BinReport {
    abs_rel: f64,
}

pub fn run(log: Option<&Path>, bins: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if log.is_none() && bins.is_none() {
        return Err(CliError::msg(
            "nothing to plot; pass --log and/or --bins".to_string(),
        ));
    }
    fs::create_dir_all(out)?;

    if let Some(path) = log {
        let curve = read_loss_curve(path)?;
        if curve.is_empty() {
            return Err(CliError::msg(format!(
                "{} holds no step records",
                path.display()
            )));
        }
        let target = out.join("loss.png");
        chart::line_chart(&curve)
            .save(&target)
            .map_err(|e| CliError::msg(format!("{}: {e}", target.display())))?;
        println!("{}", serde_json::json!({"chart": target, "points": curve.len()}));
    }

    if let Some(path) = bins {
        let rows = read_bins(path)?;
        if rows.is_empty() {
            return Err(CliError::msg(format!("{} holds no bins", path.display())));
        }
        let target = out.join("bins.png");
        chart::bar_chart(&rows)
            .save(&target)
            .map_err(|e| CliError::msg(format!("{}: {e}", target.display())))?;
        println!("{}", serde_json::json!({"chart": target, "bars": rows.len()}));
    }
    Ok(())
}

fn read_loss_curve(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
    let mut curve = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord = serde_json::from_str(line)
            .map_err(|e| CliError::msg(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if record.record == "step" {
            let step: StepData = serde_json::from_value(record.data)
                .map_err(|e| CliError::msg(format!("{} line {}: {e}", path.display(), n + 1)))?;
            curve.push((step.step as f64, step.total));
        }
    }
    Ok(curve)
}

fn read_bins(path: &Path) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
    let rows: Vec<BinRow> = serde_json::from_str(&text)
        .map_err(|e| CliError::msg(format!("{}: {e}", path.display())))?;
    Ok(rows
        .into_iter()
        .map(|row| {
            let label = format!("{}-{}", row.range.0, row.range.1);
            (label, row.report.map(|r| r.abs_rel))
        })
        .collect())
}
