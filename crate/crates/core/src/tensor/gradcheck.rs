//! Central finite-difference gradient checking.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Magnitude below which errors are measured absolutely rather than relative
/// to the gradient size.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, perturbing every element of every input.
///
/// The error per element is `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t)).collect();
        let out = build(&mut g, &vars)?;
        g.item(out).ok_or_else(|| TensorError::Invalid("gradcheck: output is not scalar".into()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.shape().to_vec(), t.data().to_vec(), true))
        .collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (idx, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[idx].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for e in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[e].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let err = (analytic[e] - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
