use super::{no_grad, Element, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// Parameter and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Checks `d loss / d x` for a scalar function of one tensor.
///
/// `h` is the central-difference half step; 1e-3 suits `f32`, smaller steps
/// suit `f64`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let leaf = x.detach().into_param();
    Ok(check_params(std::slice::from_ref(&leaf), || f(&leaf), h)?.max_rel_err)
}

/// Checks the gradient of `loss` with respect to every coordinate of every
/// tensor in `params`, perturbing them in place.
pub fn check_params<T, F>(params: &[Tensor<T>], mut loss: F, h: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: FnMut() -> Result<Tensor<T>>,
{
    if let Some(p) = params.iter().find(|p| !p.requires_grad() || !p.is_leaf()) {
        return Err(Error::Contract(format!(
            "grad check needs gradient-carrying leaves, got shape {:?}",
            p.shape()
        )));
    }
    params.iter().for_each(Tensor::zero_grad);
    let l = loss()?;
    if l.requires_grad() {
        l.backward()?;
    }
    drop(l);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    params.iter().for_each(Tensor::zero_grad);

    let _guard = no_grad();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            let up = orig + T::of(h);
            let down = orig - T::of(h);
            p.update_data(|d| d[i] = up);
            let fp = loss()?.item().f64();
            p.update_data(|d| d[i] = down);
            let fm = loss()?.item().f64();
            p.update_data(|d| d[i] = orig);
            // divide by the step actually taken after rounding
            let numeric = (fp - fm) / (up - down).f64();
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst = (pi, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
