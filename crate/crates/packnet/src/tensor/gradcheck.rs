//! Central-difference verification of tape gradients.
//!
//! Used by tests only, but lives in the library so every module can check
//! its own operators against the same reference.

use ndarray::ArrayD;

use super::{Tape, Tensor};

/// Outcome of a finite-difference sweep. `max_rel_err` is the largest
/// relative disagreement across all checked elements.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn assert_close(&self, tol_rel: f64) {
        assert!(
            self.max_rel_err <= tol_rel,
            "gradient check failed: rel err {:.3e} > {:.1e} at {:?} ({} elements checked)",
            self.max_rel_err,
            tol_rel,
            self.worst,
            self.checked
        );
    }
}

/// Compare analytic gradients of `f` against central differences.
///
/// `f` must evaluate a scalar from the given leaves and be deterministic.
/// At most `max_per_input` elements per input are probed (evenly strided)
/// to keep the cost of large inputs bounded.
pub fn check_gradients<F>(inputs: &[ArrayD<f64>], f: F, eps: f64, max_per_input: usize) -> GradCheckReport
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    // Analytic pass.
    let tape = Tape::<f64>::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &leaves);
    assert_eq!(loss.array().len(), 1, "gradient check needs a scalar loss");
    let grads = tape.backward(&loss);
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|l| {
            grads
                .wrt(l)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(l.array().raw_dim()))
        })
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::<f64>::no_grad();
        let leaves: Vec<Tensor<f64>> = xs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&tape, &leaves);
        out.array().iter().next().copied().unwrap()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(max_per_input).max(1);
        for j in (0..n).step_by(stride) {
            let x0 = input.as_slice().map(|s| s[j]).unwrap_or_else(|| {
                *input.iter().nth(j).unwrap()
            });
            let h = eps * x0.abs().max(1.0);
            set_flat(&mut work[i], j, x0 + h);
            let up = eval(&work);
            set_flat(&mut work[i], j, x0 - h);
            let down = eval(&work);
            set_flat(&mut work[i], j, x0);
            let numeric = (up - down) / (2.0 * h);
            let a = *analytic[i].iter().nth(j).unwrap();
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if abs_err > report.max_abs_err {
                report.max_abs_err = abs_err;
            }
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}

fn set_flat(a: &mut ArrayD<f64>, j: usize, v: f64) {
    if let Some(s) = a.as_slice_mut() {
        s[j] = v;
    } else {
        *a.iter_mut().nth(j).unwrap() = v;
    }
}
