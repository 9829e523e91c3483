use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation switched a discrete branch (relu sign,
    /// pooling winner, pointer choice) and were therefore not compared.
    pub skipped: usize,
    /// `(leaf, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, leaves: &[Tensor], grads: bool) -> Result<(f64, u64, Option<Vec<Tensor>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("finite_difference_check"));
    }
    let grads = if grads {
        tape.backward(loss)?;
        Some(
            vars.iter()
                .map(|v| tape.grad(*v).cloned().expect("leaf gradient"))
                .collect(),
        )
    } else {
        None
    };
    Ok((value, tape.discrete_signature(), grads))
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `eps`, perturbing every coordinate of every leaf.
pub fn finite_difference_check<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Validation(format!("eps {eps} not in (0, 1e-2]")));
    }
    let (_, signature, grads) = evaluate(&f, leaves, true)?;
    let grads = grads.expect("requested");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut work = leaves.to_vec();
    for li in 0..leaves.len() {
        for j in 0..leaves[li].len() {
            let orig = leaves[li].data()[j];
            work[li].data_mut()[j] = orig + eps;
            let (plus, sig_plus, _) = evaluate(&f, &work, false)?;
            work[li].data_mut()[j] = orig - eps;
            let (minus, sig_minus, _) = evaluate(&f, &work, false)?;
            work[li].data_mut()[j] = orig;

            if sig_plus != signature || sig_minus != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[li].data()[j];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((li, j));
            }
        }
    }
    Ok(report)
}
