//! Numerical verification of the distance-bound identity behind prodsig.
//!
//! With L(t) = loss(x, t*theta) and phi(t) = g(x, t*theta) . theta, the
//! fundamental theorem of calculus gives
//!     log f(x, theta) - log f(x, 0) = L(0) - L(1) = -Integral_0^1 phi(t) dt.
//! Replacing the integral by its right endpoint phi(1) yields the cheap
//! approximation log f(x, theta) ~ C - g . theta with C = log(1/k), whose
//! error shrinks as theta shrinks. Both steps are checked numerically here:
//! the integral against composite Simpson quadrature, the endpoint rule
//! against the quadrature value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralCheck {
    /// L(0) - L(1), the exact log-probability shift.
    pub lhs: f64,
    /// -Simpson estimate of the path integral of phi.
    pub quadrature: f64,
    pub gap: f64,
    pub panels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointCheck {
    /// log f(x, theta) = -L(1).
    pub log_f: f64,
    /// C - g(x, theta) . theta with C = log(1/k).
    pub approx: f64,
    pub endpoint_gap: f64,
}

/// Composite Simpson rule over [0, 1] with an even number of panels.
pub fn simpson<F: FnMut(f64) -> Result<f64>>(mut f: F, panels: usize) -> Result<f64> {
    if panels == 0 || panels % 2 != 0 {
        return Err(Error::InvalidPanels(panels));
    }
    let h = 1.0 / panels as f64;
    let mut acc = f(0.0)? + f(1.0)?;
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h)?;
    }
    Ok(acc * h / 3.0)
}

/// Integral identity check from closures: `loss_at(t)` evaluates L(t) and
/// `grad_dot_theta(t)` evaluates phi(t).
pub fn integral_check_with<L, G>(
    mut loss_at: L,
    grad_dot_theta: G,
    panels: usize,
) -> Result<IntegralCheck>
where
    L: FnMut(f64) -> Result<f64>,
    G: FnMut(f64) -> Result<f64>,
{
    let lhs = loss_at(0.0)? - loss_at(1.0)?;
    let quadrature = -simpson(grad_dot_theta, panels)?;
    Ok(IntegralCheck {
        lhs,
        quadrature,
        gap: (lhs - quadrature).abs(),
        panels,
    })
}

/// Endpoint approximation check from closures. `c` is the value of the loss
/// at t = 0 with its sign flipped, i.e. log f(x, 0).
pub fn endpoint_check_with<L, G>(mut loss_at: L, mut grad_dot_theta: G, c: f64) -> Result<EndpointCheck>
where
    L: FnMut(f64) -> Result<f64>,
    G: FnMut(f64) -> Result<f64>,
{
    let log_f = -loss_at(1.0)?;
    let approx = c - grad_dot_theta(1.0)?;
    Ok(EndpointCheck {
        log_f,
        approx,
        endpoint_gap: (log_f - approx).abs(),
    })
}

fn scaled_params(params: &ParamVector, t: f64) -> ParamVector {
    ParamVector {
        values: params.values.iter().map(|v| v * t).collect(),
        layout: std::sync::Arc::clone(&params.layout),
    }
}

fn phi(model: &Model, params: &ParamVector, x: &[f64], label: usize, t: f64) -> Result<f64> {
    let (_, g) = model.loss_and_grad_label(&scaled_params(params, t), x, label)?;
    Ok(g.values.iter().zip(&params.values).map(|(a, b)| a * b).sum())
}

fn loss_at_t(model: &Model, params: &ParamVector, x: &[f64], label: usize, t: f64) -> Result<f64> {
    let (l, _) = model.loss_and_grad_label(&scaled_params(params, t), x, label)?;
    Ok(l)
}

/// Checks the path-integral identity on a concrete model and sample.
pub fn verify_integral(
    model: &Model,
    params: &ParamVector,
    x: &[f64],
    label: usize,
    panels: usize,
) -> Result<IntegralCheck> {
    integral_check_with(
        |t| loss_at_t(model, params, x, label, t),
        |t| phi(model, params, x, label, t),
        panels,
    )
}

/// Checks the endpoint approximation on a concrete model and sample, with
/// C = log(1/k). The model's loss at zero parameters equals log k exactly,
/// so C is consistent with `verify_integral`'s left end.
pub fn verify_lemma_approx(
    model: &Model,
    params: &ParamVector,
    x: &[f64],
    label: usize,
) -> Result<EndpointCheck> {
    let c = -(model.classes() as f64).ln();
    endpoint_check_with(
        |t| loss_at_t(model, params, x, label, t),
        |t| phi(model, params, x, label, t),
        c,
    )
}
