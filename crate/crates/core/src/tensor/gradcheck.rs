//! Finite-difference gradient verification.
//!
//! The checker only ever calls the forward closure, so it stays independent
//! of the backward implementation it is used to validate.

use super::{backward, zero_grad, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `forward` must rebuild the scalar loss from the current values of
/// `params` (and any captured constant inputs) on every call. Each parameter
/// element is perturbed by `±h`; at most `max_per_param` elements are probed
/// per tensor (evenly strided) to bound runtime on larger parameters.
///
/// The relative error of element `i` is
/// `|analytic - fd| / max(|analytic|, |fd|, 1)`.
pub fn check_gradients(
    params: &[Tensor],
    mut forward: impl FnMut() -> Result<Tensor>,
    h: f64,
    max_per_param: usize,
) -> Result<GradCheckReport> {
    zero_grad(params);
    let loss = forward()?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("parameter missing gradient after backward"))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (p, grads) in params.iter().zip(analytic.iter()) {
        let base = p.to_vec();
        let n = base.len();
        let stride = (n / max_per_param.max(1)).max(1);
        let mut i = 0;
        while i < n {
            let mut bumped = base.clone();
            bumped[i] = base[i] + h;
            p.set_data(&bumped);
            let plus = forward()?.item();
            bumped[i] = base[i] - h;
            p.set_data(&bumped);
            let minus = forward()?.item();
            p.set_data(&base);

            let fd = (plus - minus) / (2.0 * h);
            let a = grads[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
            i += stride;
        }
    }
    zero_grad(params);
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}
