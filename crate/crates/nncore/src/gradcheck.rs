use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Input tensor and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares tape gradients of a scalar function against central finite
/// differences with step `h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one gradient-tracking leaf per input tensor.
/// The error for each coordinate is relative with an absolute floor of 1, so
/// near-zero gradients are judged by absolute error.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].numel());
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
