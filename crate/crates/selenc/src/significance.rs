//! Per-coordinate significance metrics over flat gradients.
//!
//! All metrics return non-negative scores aligned with the parameter layout;
//! higher means more worth encrypting. The two sensitivity variants measure
//! how strongly each gradient coordinate reacts to the input: the exact one
//! differentiates the gradient itself (second-order, one extra reverse pass
//! per input coordinate), the discrete one uses central differences on the
//! input (two gradient evaluations per input coordinate).

use std::fmt;
use std::time::Instant;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{FlatGradient, Model, ParamLayout, ParamVector};
use crate::parallel::{map_collect, Execution};

pub const DEFAULT_SENS_BUDGET: u64 = 5_000_000;
pub const DEFAULT_SENS_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricId {
    Sens,
    SensDiscrete,
    ProdSig,
    Grad,
    Param,
    LayerSlice,
}

impl std::fmt::Display for MetricId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MetricId::Sens => "sens",
            MetricId::SensDiscrete => "sens-discrete",
            MetricId::ProdSig => "prodsig",
            MetricId::Grad => "grad",
            MetricId::Param => "param",
            MetricId::LayerSlice => "layer-slice",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SignificanceScores {
    pub metric: MetricId,
    pub scores: Vec<f64>,
    /// Wall time spent computing the scores. Metrics derived from values
    /// already at hand (grad, param) report zero.
    pub compute_seconds: f64,
}

/// Runs `f` and pairs its result with elapsed wall seconds.
pub fn timed<T, F: FnOnce() -> T>(f: F) -> (T, f64) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed().as_secs_f64())
}

/// |g_i * theta_i|: first-order estimate of how much coordinate i moves the
/// model's output distribution, so large entries are the ones worth hiding.
pub fn prodsig(g: &FlatGradient, theta: &ParamVector) -> Result<SignificanceScores> {
    if g.values.len() != theta.values.len() {
        return Err(Error::LengthMismatch {
            context: "prodsig gradient vs params",
            expected: theta.values.len(),
            got: g.values.len(),
        });
    }
    let (scores, secs) = timed(|| {
        g.values
            .iter()
            .zip(&theta.values)
            .map(|(gi, ti)| (gi * ti).abs())
            .collect()
    });
    Ok(SignificanceScores {
        metric: MetricId::ProdSig,
        scores,
        compute_seconds: secs,
    })
}

/// |g_i|. Free: the gradient is already computed by training.
pub fn grad_magnitude(g: &FlatGradient) -> SignificanceScores {
    SignificanceScores {
        metric: MetricId::Grad,
        scores: g.values.iter().map(|v| v.abs()).collect(),
        compute_seconds: 0.0,
    }
}

/// |theta_i|. Free: parameters are already at hand.
pub fn param_magnitude(theta: &ParamVector) -> SignificanceScores {
    SignificanceScores {
        metric: MetricId::Param,
        scores: theta.values.iter().map(|v| v.abs()).collect(),
        compute_seconds: 0.0,
    }
}

/// Exact input sensitivity of the gradient:
/// scores[i] = (1/n) * sum_j |d g_i / d x_j|,
/// with each column d g / d x_j obtained by a second reverse pass through
/// the first one. Cost scales with n forward+backward pairs; `budget` caps
/// n*m before any work starts.
pub fn sensitivity_exact_with<F>(
    loss: F,
    theta: &[f64],
    x: &[f64],
    budget: u64,
    exec: Execution,
) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &Tensor, &Tensor) -> Tensor + Sync + Send,
{
    let n = x.len();
    let m = theta.len();
    if n == 0 || m == 0 {
        return Err(Error::Empty("sensitivity inputs"));
    }
    let cost = n as u64 * m as u64;
    if cost > budget {
        return Err(Error::BudgetExceeded {
            inputs: n,
            params: m,
            cost,
            budget,
        });
    }
    let cols: Vec<Result<Vec<f64>>> = map_collect(exec, n, |j| {
        let tape = Tape::new();
        let th = tape.var(theta.to_vec(), vec![m]);
        let xv = tape.var(x.to_vec(), vec![n]);
        let l = loss(&tape, &th, &xv);
        let gx = tape.grad(&l, &[&xv], true)?;
        let gxj = gx[0].gather_slice(&[j]).sum();
        let col = tape.grad(&gxj, &[&th], false)?;
        Ok(col[0].data().to_vec())
    });
    let mut acc = vec![0.0; m];
    for col in cols {
        let col = col?;
        for (a, c) in acc.iter_mut().zip(&col) {
            *a += c.abs();
        }
    }
    let scale = 1.0 / n as f64;
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

/// Central-difference estimate of the same quantity from gradient
/// evaluations only: 2n calls of `grad_fn`.
pub fn sensitivity_discrete_with<F>(
    grad_fn: F,
    x: &[f64],
    m: usize,
    step: f64,
    exec: Execution,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("sensitivity step {step} must be positive")));
    }
    let n = x.len();
    if n == 0 || m == 0 {
        return Err(Error::Empty("sensitivity inputs"));
    }
    let cols: Vec<Result<Vec<f64>>> = map_collect(exec, n, |j| {
        let mut xp = x.to_vec();
        xp[j] += step;
        let mut xm = x.to_vec();
        xm[j] -= step;
        let gp = grad_fn(&xp)?;
        let gm = grad_fn(&xm)?;
        if gp.len() != m || gm.len() != m {
            return Err(Error::LengthMismatch {
                context: "sensitivity gradient",
                expected: m,
                got: gp.len(),
            });
        }
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(p, q)| ((p - q) / (2.0 * step)).abs())
            .collect())
    });
    let mut acc = vec![0.0; m];
    for col in cols {
        let col = col?;
        for (a, c) in acc.iter_mut().zip(&col) {
            *a += c;
        }
    }
    let scale = 1.0 / n as f64;
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

pub fn sensitivity_exact(
    model: &Model,
    params: &ParamVector,
    x: &[f64],
    label: usize,
    budget: u64,
    exec: Execution,
) -> Result<SignificanceScores> {
    let t0 = Instant::now();
    let scores = sensitivity_exact_with(
        |_, th, xv| model.loss_tensor(th, xv, label),
        &params.values,
        x,
        budget,
        exec,
    )?;
    Ok(SignificanceScores {
        metric: MetricId::Sens,
        scores,
        compute_seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn sensitivity_discrete(
    model: &Model,
    params: &ParamVector,
    x: &[f64],
    label: usize,
    step: f64,
    exec: Execution,
) -> Result<SignificanceScores> {
    let t0 = Instant::now();
    let scores = sensitivity_discrete_with(
        |xs| {
            model
                .loss_and_grad_label(params, xs, label)
                .map(|(_, g)| g.values)
        },
        x,
        params.values.len(),
        step,
        exec,
    )?;
    Ok(SignificanceScores {
        metric: MetricId::SensDiscrete,
        scores,
        compute_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Binary scores selecting whole parameterized layers.
pub fn layer_slice(layout: &ParamLayout, layers: &[usize]) -> Result<SignificanceScores> {
    for &l in layers {
        if l >= layout.layers {
            return Err(Error::InvalidLayerGroup {
                group: l,
                groups: layout.layers,
            });
        }
    }
    let mut scores = vec![0.0; layout.total];
    for r in &layout.ranges {
        if layers.contains(&r.layer) {
            for s in &mut scores[r.start..r.end] {
                *s = 1.0;
            }
        }
    }
    Ok(SignificanceScores {
        metric: MetricId::LayerSlice,
        scores,
        compute_seconds: 0.0,
    })
}

/// Splits `layers` parameterized layers into 5 contiguous groups, as equal
/// as possible with earlier groups taking the remainder. Returns the 0-based
/// layer indices of 1-indexed `group`.
pub fn one_fifth_layers(layers: usize, group: usize) -> Result<Vec<usize>> {
    if group == 0 || group > 5 {
        return Err(Error::InvalidLayerGroup { group, groups: 5 });
    }
    let base = layers / 5;
    let rem = layers % 5;
    let size = |g: usize| base + usize::from(g <= rem); // g is 1-indexed
    let start: usize = (1..group).map(size).sum();
    Ok((start..start + size(group)).collect())
}

pub fn one_fifth(layout: &ParamLayout, group: usize) -> Result<SignificanceScores> {
    let layers = one_fifth_layers(layout.layers, group)?;
    layer_slice(layout, &layers)
}

/// Fully specified metric request, as named in configs and on the CLI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricSpec {
    Sens { budget: u64 },
    SensDiscrete { step: f64 },
    ProdSig,
    Grad,
    Param,
    OneFifth { group: usize },
}

impl MetricSpec {
    /// Parse a metric name. Sens budget and step are supplied by the caller
    /// because they are configuration, not part of the name.
    pub fn parse(name: &str, sens_budget: u64, sens_step: f64) -> Result<MetricSpec> {
        match name {
            "sens" => Ok(MetricSpec::Sens {
                budget: sens_budget,
            }),
            "sens-discrete" => Ok(MetricSpec::SensDiscrete { step: sens_step }),
            "prodsig" => Ok(MetricSpec::ProdSig),
            "grad" => Ok(MetricSpec::Grad),
            "param" => Ok(MetricSpec::Param),
            _ => match name.strip_prefix("onefifth-") {
                Some(g) => {
                    let group: usize = g
                        .parse()
                        .map_err(|_| Error::Config(format!("bad layer group in {name:?}")))?;
                    one_fifth_layers(5, group)?;
                    Ok(MetricSpec::OneFifth { group })
                }
                None => Err(Error::Config(format!(
                    "unknown metric {name:?}; expected sens, sens-discrete, \
                     prodsig, grad, param, or onefifth-1..onefifth-5"
                ))),
            },
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Sens { .. } => write!(f, "sens"),
            MetricSpec::SensDiscrete { .. } => write!(f, "sens-discrete"),
            MetricSpec::ProdSig => write!(f, "prodsig"),
            MetricSpec::Grad => write!(f, "grad"),
            MetricSpec::Param => write!(f, "param"),
            MetricSpec::OneFifth { group } => write!(f, "onefifth-{group}"),
        }
    }
}

/// Score one sample's parameters under any metric. `grad` must be the loss
/// gradient at (`params`, `x`, `label`) so the cheap metrics reuse it.
pub fn score_metric(
    model: &Model,
    params: &ParamVector,
    grad: &FlatGradient,
    x: &[f64],
    label: usize,
    spec: MetricSpec,
    exec: Execution,
) -> Result<SignificanceScores> {
    match spec {
        MetricSpec::Sens { budget } => sensitivity_exact(model, params, x, label, budget, exec),
        MetricSpec::SensDiscrete { step } => {
            sensitivity_discrete(model, params, x, label, step, exec)
        }
        MetricSpec::ProdSig => prodsig(grad, params),
        MetricSpec::Grad => Ok(grad_magnitude(grad)),
        MetricSpec::Param => Ok(param_magnitude(params)),
        MetricSpec::OneFifth { group } => one_fifth(&params.layout, group),
    }
}
