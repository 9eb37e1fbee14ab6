//! Central finite-difference verification of analytic parameter gradients.
//!
//! Runs at `f64`: central differences with step `h = h_base * max(1, |w|)`
//! have truncation error O(h^2), far below the acceptance threshold, only
//! at 64-bit precision.

use super::Parameterized;

/// Outcome of one verification sweep over every parameter element.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Elements compared.
    pub checked: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// Parameter element where it occurred.
    pub worst: String,
}

fn with_param_elem<M, R>(
    model: &mut M,
    tensor: usize,
    elem: usize,
    f: impl FnOnce(&mut f64) -> R,
) -> R
where
    M: Parameterized<f64>,
{
    let mut params = Vec::new();
    model.collect_params("", &mut params);
    f(params[tensor]
        .value
        .iter_mut()
        .nth(elem)
        .expect("element index in range"))
}

/// Verifies every parameter gradient of `model` against central finite
/// differences of the scalar loss.
///
/// The closure contract: `loss(model, true)` runs forward and backward,
/// accumulating gradients (the harness zeroes them first) and returning the
/// loss; `loss(model, false)` runs forward only and returns the loss without
/// touching gradients. The loss must be a deterministic function of the
/// parameters.
///
/// Gradient pairs where both |analytic| and |numeric| fall below 1e-7 count
/// as matches; elsewhere the relative error is `|a - n| / max(|a|, |n|)`.
pub fn check_params<M, L>(model: &mut M, mut loss: L, h_base: f64) -> GradCheckReport
where
    M: Parameterized<f64>,
    L: FnMut(&mut M, bool) -> f64,
{
    super::zero_grads(model);
    let _ = loss(model, true);
    let (names, grads): (Vec<String>, Vec<Vec<f64>>) = {
        let mut params = Vec::new();
        model.collect_params("", &mut params);
        params
            .into_iter()
            .map(|p| (p.name, p.grad.iter().copied().collect()))
            .unzip()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (t, grad) in grads.iter().enumerate() {
        for (e, &analytic) in grad.iter().enumerate() {
            let theta = with_param_elem(model, t, e, |v| *v);
            let h = h_base * theta.abs().max(1.0);
            with_param_elem(model, t, e, |v| *v = theta + h);
            let lp = loss(model, false);
            with_param_elem(model, t, e, |v| *v = theta - h);
            let lm = loss(model, false);
            with_param_elem(model, t, e, |v| *v = theta);
            let numeric = (lp - lm) / (2.0 * h);

            report.checked += 1;
            if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!(
                    "{}[{e}]: analytic {analytic:.6e} vs numeric {numeric:.6e}",
                    names[t]
                );
            }
        }
    }
    report
}
