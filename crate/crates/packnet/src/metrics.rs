//! Depth-error metrics with the usual median-scaling protocol, range-binned
//! evaluation, and trajectory error over short overlapping pose snippets.

use nalgebra::Matrix3;

use crate::data::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Standard depth-error summary over one set of pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    /// Mean of `|pred - gt| / gt`.
    pub abs_rel: f64,
    /// Mean of `(pred - gt)^2 / gt`.
    pub sq_rel: f64,
    /// Root mean squared error in meters.
    pub rmse: f64,
    /// RMSE between log depths.
    pub rmse_log: f64,
    /// Fraction of pixels with `max(pred/gt, gt/pred) < 1.25`.
    pub a1: f64,
    /// Same with threshold `1.25^2`.
    pub a2: f64,
    /// Same with threshold `1.25^3`.
    pub a3: f64,
    /// Number of pixels the report covers.
    pub n_pixels: usize,
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    /// Ground-truth pixels below this depth (meters) are ignored and
    /// predictions are clamped up to it.
    pub min_depth: f64,
    /// Upper evaluation cap in meters; the usual protocol stops at 80.
    pub max_depth: f64,
    /// Rescale predictions by the ratio of ground-truth to predicted
    /// medians before comparing, which removes the global scale ambiguity
    /// of self-supervised models.
    pub median_scaling: bool,
    /// Optional `(lo, hi)` ranges for [`binned_metrics`], ascending and
    /// non-overlapping. Each bin keeps ground truth in `[lo, hi)`.
    pub range_bins: Option<Vec<(f64, f64)>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { min_depth: 1e-3, max_depth: 80.0, median_scaling: true, range_bins: None }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        if let Some(bins) = &self.range_bins {
            let mut last_hi = f64::NEG_INFINITY;
            for &(lo, hi) in bins {
                if !(lo < hi) {
                    return Err(Error::InvalidConfig(format!("bin ({lo}, {hi}) is empty")));
                }
                if lo < last_hi {
                    return Err(Error::InvalidConfig(format!(
                        "bin ({lo}, {hi}) overlaps or disorders the previous one"
                    )));
                }
                last_hi = hi;
            }
        }
        Ok(())
    }
}

/// Median of a nonempty slice; averages the two middle values when the
/// count is even. Quickselect rather than a full sort.
fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let (below, mid, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    let mid = *mid;
    if n % 2 == 1 {
        mid
    } else {
        let lower = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + mid) / 2.0
    }
}

/// Rescale a prediction so its median matches the ground-truth median over
/// the pixels where ground truth exists. Returns the scaled map and the
/// ratio applied.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, f64)> {
    if pred.values.dim() != gt.values.dim() {
        let (h, w) = gt.values.dim();
        let (ph, pw) = pred.values.dim();
        return Err(Error::shape("median_scale", format!("[{h},{w}]"), &[ph, pw]));
    }
    let mut gt_vals = Vec::new();
    let mut pred_vals = Vec::new();
    for (g, p) in gt.values.iter().zip(pred.values.iter()) {
        if *g > 0.0 {
            gt_vals.push(*g);
            pred_vals.push(*p);
        }
    }
    if gt_vals.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let pred_median = median(&mut pred_vals);
    if !(pred_median > 0.0) {
        return Err(Error::invalid(format!(
            "median predicted depth must be positive, got {pred_median}"
        )));
    }
    let ratio = median(&mut gt_vals) / pred_median;
    Ok((DepthMap::new(pred.values.mapv(|p| p * ratio))?, ratio))
}

/// Collect `(pred, gt)` pairs where ground truth exists and lies in
/// `[lo, hi]`, with the prediction clamped to the evaluation range.
fn masked_pairs(
    pred: &DepthMap,
    gt: &DepthMap,
    scale: f64,
    lo: f64,
    hi: f64,
    clamp: (f64, f64),
) -> Vec<(f64, f64)> {
    gt.values
        .iter()
        .zip(pred.values.iter())
        .filter(|(g, _)| **g > 0.0 && **g >= lo && **g <= hi)
        .map(|(g, p)| ((p * scale).clamp(clamp.0, clamp.1), *g))
        .collect()
}

fn report_from_pairs(pairs: &[(f64, f64)]) -> MetricReport {
    let n = pairs.len();
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let (mut a1, mut a2, mut a3) = (0usize, 0usize, 0usize);
    for &(p, g) in pairs {
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        a1 += (ratio < 1.25) as usize;
        a2 += (ratio < 1.25f64.powi(2)) as usize;
        a3 += (ratio < 1.25f64.powi(3)) as usize;
    }
    let nf = n as f64;
    MetricReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        a1: a1 as f64 / nf,
        a2: a2 as f64 / nf,
        a3: a3 as f64 / nf,
        n_pixels: n,
    }
}

/// How much to scale `pred` for evaluation over ground-truth pixels within
/// `[lo, hi]`: the median ratio when the protocol asks for it, 1 otherwise.
fn eval_scale(pred: &DepthMap, gt: &DepthMap, lo: f64, hi: f64, scaling: bool) -> Result<f64> {
    if !scaling {
        return Ok(1.0);
    }
    let mut gt_vals = Vec::new();
    let mut pred_vals = Vec::new();
    for (g, p) in gt.values.iter().zip(pred.values.iter()) {
        if *g > 0.0 && *g >= lo && *g <= hi {
            gt_vals.push(*g);
            pred_vals.push(*p);
        }
    }
    if gt_vals.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let pred_median = median(&mut pred_vals);
    if !(pred_median > 0.0) {
        return Err(Error::invalid(format!(
            "median predicted depth must be positive, got {pred_median}"
        )));
    }
    Ok(median(&mut gt_vals) / pred_median)
}

/// Evaluate a dense prediction against sparse ground truth. Only pixels
/// with a measurement inside `[min_depth, max_depth]` count; predictions
/// are clamped to that range, after median scaling when configured.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if pred.values.dim() != gt.values.dim() {
        let (h, w) = gt.values.dim();
        let (ph, pw) = pred.values.dim();
        return Err(Error::shape("depth_metrics", format!("[{h},{w}]"), &[ph, pw]));
    }
    let scale = eval_scale(pred, gt, cfg.min_depth, cfg.max_depth, cfg.median_scaling)?;
    let pairs = masked_pairs(
        pred,
        gt,
        scale,
        cfg.min_depth,
        cfg.max_depth,
        (cfg.min_depth, cfg.max_depth),
    );
    if pairs.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(report_from_pairs(&pairs))
}

/// Combine per-frame reports into one summary: every error and accuracy is
/// the plain mean over frames (the usual test-set protocol weights frames
/// equally, not pixels) and `n_pixels` sums. Empty input yields `None`.
pub fn aggregate_reports(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricReport {
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        a1: mean(|r| r.a1),
        a2: mean(|r| r.a2),
        a3: mean(|r| r.a3),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
    })
}

/// Evaluate each configured range independently: a bin keeps ground truth
/// in `[lo, hi)` intersected with the global evaluation range, computes its
/// own median scale, and reports `None` when it holds no pixels.
pub fn binned_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    cfg: &EvalConfig,
) -> Result<Vec<((f64, f64), Option<MetricReport>)>> {
    cfg.validate()?;
    let bins = cfg
        .range_bins
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("binned evaluation needs range_bins".into()))?;
    if pred.values.dim() != gt.values.dim() {
        let (h, w) = gt.values.dim();
        let (ph, pw) = pred.values.dim();
        return Err(Error::shape("binned_metrics", format!("[{h},{w}]"), &[ph, pw]));
    }
    let mut out = Vec::with_capacity(bins.len());
    for &(lo, hi) in bins {
        // Half-open bins tile a range without double counting; the global
        // caps still apply on both sides.
        let bin_lo = lo.max(cfg.min_depth);
        let bin_hi = next_down(hi).min(cfg.max_depth);
        let report = if bin_lo > bin_hi {
            None
        } else {
            match eval_scale(pred, gt, bin_lo, bin_hi, cfg.median_scaling) {
                Err(Error::NoValidPixels) => None,
                Err(e) => return Err(e),
                Ok(scale) => {
                    let pairs = masked_pairs(
                        pred,
                        gt,
                        scale,
                        bin_lo,
                        bin_hi,
                        (cfg.min_depth, cfg.max_depth),
                    );
                    (!pairs.is_empty()).then(|| report_from_pairs(&pairs))
                }
            }
        };
        out.push(((lo, hi), report));
    }
    Ok(out)
}

/// Largest float strictly below `x`, used to make bin upper bounds
/// exclusive while sharing the inclusive-range plumbing.
fn next_down(x: f64) -> f64 {
    if x.is_infinite() {
        return x;
    }
    let bits = x.to_bits();
    let next = if x > 0.0 {
        bits - 1
    } else if x < 0.0 {
        bits + 1
    } else {
        return -f64::MIN_POSITIVE;
    };
    f64::from_bits(next)
}

/// Chain per-step motions into overlapping fixed-length trajectories.
///
/// `relative[i]` maps frame `i+1` coordinates into frame `i`, which is what
/// the pose network yields for target `i+1` and source `i`. Every window of
/// `length` consecutive frames becomes one snippet of absolute poses in
/// the coordinates of its first frame, so each snippet starts at identity.
pub fn compose_snippets(
    relative: &[RigidTransform],
    length: usize,
) -> Result<Vec<Vec<RigidTransform>>> {
    if length < 2 {
        return Err(Error::invalid(format!("snippet length must be >= 2, got {length}")));
    }
    if relative.len() < length - 1 {
        return Err(Error::invalid(format!(
            "need at least {} relative transforms for snippets of {length} poses, got {}",
            length - 1,
            relative.len()
        )));
    }
    let mut snippets = Vec::with_capacity(relative.len() - (length - 1) + 1);
    for start in 0..=relative.len() - (length - 1) {
        let mut poses = Vec::with_capacity(length);
        poses.push(RigidTransform::identity());
        for step in &relative[start..start + length - 1] {
            let last = poses.last().expect("snippet starts with identity");
            poses.push(last.compose(step));
        }
        snippets.push(poses);
    }
    Ok(snippets)
}

/// Absolute trajectory error between two equally long pose snippets that
/// both start at identity: the RMS distance between camera positions, after
/// optionally rescaling the prediction so its total path length matches the
/// ground truth (self-supervised odometry is scale-ambiguous).
pub fn ate(pred: &[RigidTransform], gt: &[RigidTransform], scale_with_gt: bool) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "snippet lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("cannot score an empty snippet"));
    }
    for (name, snippet) in [("predicted", pred), ("ground-truth", gt)] {
        let first = &snippet[0];
        let rot_dev = (first.rotation() - Matrix3::identity()).norm();
        if first.translation().norm() > 1e-9 || rot_dev > 1e-9 {
            return Err(Error::invalid(format!(
                "{name} snippet must start at the identity pose"
            )));
        }
    }
    let scale = if scale_with_gt {
        let pred_total: f64 = pred.iter().map(|p| p.translation().norm()).sum();
        let gt_total: f64 = gt.iter().map(|p| p.translation().norm()).sum();
        if pred_total > 0.0 {
            gt_total / pred_total
        } else {
            1.0
        }
    } else {
        1.0
    };
    let sum_sq: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (scale * p.translation() - g.translation()).norm_squared())
        .sum();
    Ok((sum_sq / pred.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn depth_from(values: Vec<f64>, h: usize, w: usize) -> DepthMap {
        DepthMap::new(Array2::from_shape_vec((h, w), values).unwrap()).unwrap()
    }

    #[test]
    fn aggregation_averages_frames_and_sums_pixels() {
        assert_eq!(aggregate_reports(&[]), None);
        let r = |x: f64, n: usize| MetricReport {
            abs_rel: x,
            sq_rel: 2.0 * x,
            rmse: 3.0 * x,
            rmse_log: 4.0 * x,
            a1: x / 2.0,
            a2: x / 3.0,
            a3: x / 4.0,
            n_pixels: n,
        };
        let agg = aggregate_reports(&[r(0.1, 100), r(0.3, 50)]).unwrap();
        assert_eq!(agg.abs_rel, 0.2);
        assert_eq!(agg.sq_rel, 0.4);
        assert!((agg.rmse - 0.6).abs() < 1e-15);
        assert_eq!(agg.a1, 0.1);
        assert_eq!(agg.n_pixels, 150);
    }

    /// Independent elementwise recomputation used as the oracle.
    fn brute_force(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> MetricReport {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for (g, p) in gt.values.iter().zip(pred.values.iter()) {
            if *g > 0.0 && *g >= cfg.min_depth && *g <= cfg.max_depth {
                gts.push(*g);
                preds.push(*p);
            }
        }
        let sort_median = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        };
        let ratio =
            if cfg.median_scaling { sort_median(&gts) / sort_median(&preds) } else { 1.0 };
        let clamped: Vec<f64> = preds
            .iter()
            .map(|p| (p * ratio).clamp(cfg.min_depth, cfg.max_depth))
            .collect();

        let n = gts.len() as f64;
        let mean = |f: &dyn Fn(f64, f64) -> f64| {
            clamped.iter().zip(gts.iter()).map(|(&p, &g)| f(p, g)).sum::<f64>() / n
        };
        MetricReport {
            abs_rel: mean(&|p, g| (p - g).abs() / g),
            sq_rel: mean(&|p, g| (p - g).powi(2) / g),
            rmse: mean(&|p, g| (p - g).powi(2)).sqrt(),
            rmse_log: mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
            a1: mean(&|p, g| (((p / g).max(g / p) < 1.25) as usize) as f64),
            a2: mean(&|p, g| (((p / g).max(g / p) < 1.25f64.powi(2)) as usize) as f64),
            a3: mean(&|p, g| (((p / g).max(g / p) < 1.25f64.powi(3)) as usize) as f64),
            n_pixels: gts.len(),
        }
    }

    #[test]
    fn median_scale_recovers_known_factor() {
        let gt = depth_from(vec![2.0, 4.0, 0.0, 8.0, 10.0, 0.0], 2, 3);
        let pred = DepthMap::new(gt.values.mapv(|g| if g > 0.0 { 2.0 * g } else { 1.0 })).unwrap();
        let (scaled, ratio) = median_scale(&pred, &gt).unwrap();
        assert_eq!(ratio, 0.5);
        for (s, g) in scaled.values.iter().zip(gt.values.iter()) {
            if *g > 0.0 {
                assert_eq!(s, g);
            }
        }

        let (_, unit) = median_scale(&gt, &gt).unwrap();
        assert_eq!(unit, 1.0);

        let empty = depth_from(vec![0.0; 6], 2, 3);
        assert!(matches!(median_scale(&pred, &empty), Err(Error::NoValidPixels)));
    }

    #[test]
    fn perfect_prediction_scores_perfectly() {
        let gt = depth_from(vec![5.0, 12.0, 0.0, 44.0, 7.5, 61.0], 2, 3);
        let report = depth_metrics(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(report.abs_rel, 0.0);
        assert_eq!(report.sq_rel, 0.0);
        assert_eq!(report.rmse, 0.0);
        assert_eq!(report.rmse_log, 0.0);
        assert_eq!((report.a1, report.a2, report.a3), (1.0, 1.0, 1.0));
        assert_eq!(report.n_pixels, 5);
    }

    #[test]
    fn constant_overestimate_has_closed_form_errors() {
        let gt = depth_from(vec![5.0, 12.0, 20.0, 44.0], 2, 2);
        let pred = DepthMap::new(gt.values.mapv(|g| 1.2 * g)).unwrap();
        let cfg = EvalConfig { median_scaling: false, ..EvalConfig::default() };
        let report = depth_metrics(&pred, &gt, &cfg).unwrap();
        assert!((report.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(report.a1, 1.0, "1.2 sits below the 1.25 threshold");
        let expected_sq_rel = 0.04 * gt.values.mean().unwrap();
        assert!((report.sq_rel - expected_sq_rel).abs() < 1e-12);
    }

    #[test]
    fn predictions_outside_range_are_clamped_not_dropped() {
        let gt = depth_from(vec![5.0, 50.0], 1, 2);
        let pred = depth_from(vec![0.0001, 500.0], 1, 2);
        let cfg = EvalConfig { median_scaling: false, ..EvalConfig::default() };
        let report = depth_metrics(&pred, &gt, &cfg).unwrap();
        assert_eq!(report.n_pixels, 2);
        // Clamped to [1e-3, 80]: errors follow from those values.
        let expected = ((5.0f64 - 1e-3).powi(2) + (80.0f64 - 50.0).powi(2)) / 2.0;
        assert!((report.rmse - expected.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_ground_truth_is_ignored() {
        let gt = depth_from(vec![0.0, 90.0, 5.0, 81.0], 2, 2);
        let pred = depth_from(vec![1.0, 1.0, 5.0, 1.0], 2, 2);
        let report = depth_metrics(&pred, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(report.n_pixels, 1);
        assert_eq!(report.abs_rel, 0.0);

        let all_far = depth_from(vec![90.0, 100.0, 0.0, 85.0], 2, 2);
        assert!(matches!(
            depth_metrics(&pred, &all_far, &EvalConfig::default()),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn bins_partition_the_range_and_match_masked_recomputation() {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        // Continuous values keep clear of bin boundaries.
        for i in 0..48 {
            let g = 1.37 + (i as f64) * 1.618;
            gts.push(g);
            preds.push(g * (1.0 + 0.1 * ((i % 5) as f64 - 2.0)));
        }
        let gt = depth_from(gts.clone(), 6, 8);
        let pred = depth_from(preds.clone(), 6, 8);
        let bins = vec![(0.0, 20.0), (20.0, 40.0), (40.0, 60.0), (60.0, 80.0)];
        let cfg = EvalConfig {
            median_scaling: false,
            range_bins: Some(bins.clone()),
            ..EvalConfig::default()
        };

        let per_bin = binned_metrics(&pred, &gt, &cfg).unwrap();
        assert_eq!(per_bin.len(), 4);
        let whole = depth_metrics(&pred, &gt, &cfg).unwrap();
        let binned_total: usize =
            per_bin.iter().filter_map(|(_, r)| r.map(|r| r.n_pixels)).sum();
        assert_eq!(binned_total, whole.n_pixels);

        for ((lo, hi), report) in &per_bin {
            let pairs: Vec<(f64, f64)> = preds
                .iter()
                .zip(gts.iter())
                .filter(|(_, g)| **g >= *lo && **g < *hi && **g >= cfg.min_depth)
                .map(|(p, g)| (p.clamp(cfg.min_depth, cfg.max_depth), *g))
                .collect();
            let report = report.expect("every bin holds pixels here");
            assert_eq!(report.n_pixels, pairs.len());
            let abs_rel =
                pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / pairs.len() as f64;
            assert!((report.abs_rel - abs_rel).abs() < 1e-12, "bin ({lo}, {hi})");
        }
    }

    #[test]
    fn empty_bins_report_none_rather_than_error() {
        let gt = depth_from(vec![5.0, 6.0, 7.0, 8.0], 2, 2);
        let pred = depth_from(vec![5.5, 6.5, 7.5, 8.5], 2, 2);
        let cfg = EvalConfig {
            range_bins: Some(vec![(0.0, 10.0), (10.0, 20.0), (20.0, 80.0)]),
            ..EvalConfig::default()
        };
        let per_bin = binned_metrics(&pred, &gt, &cfg).unwrap();
        assert!(per_bin[0].1.is_some());
        assert!(per_bin[1].1.is_none());
        assert!(per_bin[2].1.is_none());
        assert_eq!(per_bin[0].1.unwrap().n_pixels, 4);
    }

    #[test]
    fn snippets_compose_identities_and_constant_steps() {
        let ident = vec![RigidTransform::identity(); 6];
        for snippet in compose_snippets(&ident, 5).unwrap() {
            assert_eq!(snippet.len(), 5);
            for pose in snippet {
                assert!(pose.translation().norm() == 0.0);
            }
        }

        let step = RigidTransform::from_axis_angle_translation([0.0; 3], [0.0, 0.0, 1.0]);
        let snippets = compose_snippets(&vec![step.clone(); 4], 5).unwrap();
        assert_eq!(snippets.len(), 1);
        for (i, pose) in snippets[0].iter().enumerate() {
            assert_eq!(pose.translation().z, i as f64);
        }

        assert!(compose_snippets(&vec![step; 3], 5).is_err());
    }

    #[test]
    fn snippet_composition_matches_matrix_products() {
        let mut relative = Vec::new();
        for i in 0..7 {
            let s = i as f64;
            relative.push(RigidTransform::from_axis_angle_translation(
                [0.02 * s, -0.03, 0.01 * s],
                [0.1 * s, 0.2, 1.0 - 0.05 * s],
            ));
        }
        let to_mat = |p: &RigidTransform| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
            m
        };
        let snippets = compose_snippets(&relative, 5).unwrap();
        assert_eq!(snippets.len(), 4);
        for (start, snippet) in snippets.iter().enumerate() {
            let mut product = Matrix4::identity();
            for (j, pose) in snippet.iter().enumerate() {
                if j > 0 {
                    product *= to_mat(&relative[start + j - 1]);
                }
                assert!((to_mat(pose) - product).norm() < 1e-9, "snippet {start} pose {j}");
            }
        }
    }

    #[test]
    fn ate_is_zero_for_exact_and_rescaled_trajectories() {
        let step = RigidTransform::from_axis_angle_translation([0.0, 0.01, 0.0], [0.1, 0.0, 1.0]);
        let gt = &compose_snippets(&vec![step; 4], 5).unwrap()[0];
        assert_eq!(ate(gt, gt, false).unwrap(), 0.0);

        let doubled: Vec<RigidTransform> = gt
            .iter()
            .map(|p| {
                let t = p.translation() * 2.0;
                RigidTransform::new(*p.rotation(), t).unwrap()
            })
            .collect();
        assert!(ate(&doubled, gt, true).unwrap() < 1e-9);
        assert!(ate(&doubled, gt, false).unwrap() > 0.1);
    }

    #[test]
    fn ate_matches_hand_computed_rms() {
        let pose = |t: [f64; 3]| RigidTransform::from_axis_angle_translation([0.0; 3], t);
        let gt = vec![pose([0.0; 3]), pose([0.0, 0.0, 1.0]), pose([0.0, 0.0, 2.0])];
        let pred = vec![pose([0.0; 3]), pose([0.3, 0.0, 1.0]), pose([0.0, 0.4, 2.0])];
        let expected = ((0.0 + 0.09 + 0.16) / 3.0f64).sqrt();
        assert!((ate(&pred, &gt, false).unwrap() - expected).abs() < 1e-12);

        let shifted = vec![pose([0.1, 0.0, 0.0]), pose([0.0; 3]), pose([0.0; 3])];
        assert!(ate(&shifted, &gt, false).is_err(), "must start at identity");
        assert!(ate(&gt[..2], &gt, false).is_err(), "length mismatch");
    }

    proptest! {
        #[test]
        fn report_matches_brute_force_oracle(
            raw in proptest::collection::vec((0.5f64..95.0, prop_oneof![Just(0.0), 0.9f64..90.0]), 12..40),
            scaling in proptest::bool::ANY,
        ) {
            let n = raw.len();
            let pred = depth_from(raw.iter().map(|(p, _)| *p).collect(), 1, n);
            let gt = depth_from(raw.iter().map(|(_, g)| *g).collect(), 1, n);
            let cfg = EvalConfig { median_scaling: scaling, ..EvalConfig::default() };
            prop_assume!(gt.values.iter().any(|&g| g > cfg.min_depth && g <= cfg.max_depth));
            let report = depth_metrics(&pred, &gt, &cfg).unwrap();
            let oracle = brute_force(&pred, &gt, &cfg);
            prop_assert_eq!(report.n_pixels, oracle.n_pixels);
            for (got, want) in [
                (report.abs_rel, oracle.abs_rel),
                (report.sq_rel, oracle.sq_rel),
                (report.rmse, oracle.rmse),
                (report.rmse_log, oracle.rmse_log),
                (report.a1, oracle.a1),
                (report.a2, oracle.a2),
                (report.a3, oracle.a3),
            ] {
                prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
            }
        }

        #[test]
        fn threshold_accuracies_are_monotone(
            raw in proptest::collection::vec((0.5f64..95.0, 0.9f64..90.0), 8..32),
        ) {
            let n = raw.len();
            let pred = depth_from(raw.iter().map(|(p, _)| *p).collect(), 1, n);
            let gt = depth_from(raw.iter().map(|(_, g)| *g).collect(), 1, n);
            prop_assume!(gt.values.iter().any(|&g| g > 1e-3 && g <= 80.0));
            let report = depth_metrics(&pred, &gt, &EvalConfig::default()).unwrap();
            prop_assert!(report.a1 <= report.a2);
            prop_assert!(report.a2 <= report.a3);
            prop_assert!((0.0..=1.0).contains(&report.a1));
            prop_assert!((0.0..=1.0).contains(&report.a3));
            prop_assert!(report.abs_rel >= 0.0 && report.rmse >= 0.0);
        }

        #[test]
        fn median_scaling_cancels_any_global_factor(
            raw in proptest::collection::vec((1.0f64..60.0, 1.0f64..60.0), 8..24),
            factor in 0.05f64..20.0,
        ) {
            let n = raw.len();
            let pred = depth_from(raw.iter().map(|(p, _)| *p).collect(), 1, n);
            let scaled_pred = DepthMap::new(pred.values.mapv(|p| p * factor)).unwrap();
            let gt = depth_from(raw.iter().map(|(_, g)| *g).collect(), 1, n);
            let cfg = EvalConfig::default();
            let a = depth_metrics(&pred, &gt, &cfg).unwrap();
            let b = depth_metrics(&scaled_pred, &gt, &cfg).unwrap();
            for (x, y) in [
                (a.abs_rel, b.abs_rel),
                (a.sq_rel, b.sq_rel),
                (a.rmse, b.rmse),
                (a.rmse_log, b.rmse_log),
                (a.a1, b.a1),
                (a.a2, b.a2),
                (a.a3, b.a3),
            ] {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }

        #[test]
        fn ate_scaling_removes_any_uniform_factor(
            steps in proptest::collection::vec(
                ([-0.05f64..0.05, -0.05f64..0.05, -0.05f64..0.05],
                 [-0.4f64..0.4, -0.4f64..0.4, 0.2f64..1.0]),
                4..6usize,
            ),
            factor in 0.1f64..10.0,
        ) {
            let relative = |scale: f64| -> Vec<RigidTransform> {
                steps
                    .iter()
                    .map(|&(w, t)| {
                        RigidTransform::from_axis_angle_translation(
                            w,
                            [t[0] * scale, t[1] * scale, t[2] * scale],
                        )
                    })
                    .collect()
            };
            // Scaling every step translation scales all absolute positions,
            // which the ground-truth alignment must cancel.
            let length = steps.len() + 1;
            let gt = &compose_snippets(&relative(1.0), length).unwrap()[0];
            let pred = &compose_snippets(&relative(factor), length).unwrap()[0];
            prop_assert!(ate(pred, gt, true).unwrap() < 1e-9);
        }
    }
}
