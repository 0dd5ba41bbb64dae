//! Optimization-based gradient inversion.
//!
//! The adversary knows model, parameters, and label, observes the (possibly
//! selectively encrypted) gradient, and optimizes a candidate input so that
//! its gradient matches the observation on the known coordinates, plus a
//! total-variation prior. Masked coordinates never enter the matching loss:
//! the candidate gradient is physically gathered down to the known index set
//! first, so perturbing hidden coordinates cannot change anything the
//! attacker computes.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encryption::AttackerView;
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::model::{FlatGradient, Model, ParamVector};
use crate::parallel::{map_collect, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matching {
    L2,
    Cosine,
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub matching: Matching,
    /// Weight of the anisotropic total-variation prior.
    pub alpha_tv: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub step_size: f64,
    /// Use the sign of the gradient in the Adam update.
    pub signed: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            matching: Matching::Cosine,
            alpha_tv: 1e-4,
            iterations: 2000,
            restarts: 5,
            step_size: 0.1,
            signed: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    /// Best iterate of the winning restart.
    pub x_star: Vec<f64>,
    pub shape: [usize; 3],
    /// Minimum matching loss seen along the winning restart's trace.
    pub final_rec_loss: f64,
    /// Per-iteration matching loss of the winning restart.
    pub loss_trace: Vec<f64>,
    pub restart_index: usize,
    pub wall_seconds: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Step size after the 3/8, 5/8, 7/8 decay milestones, each a 10x cut.
pub fn step_size_at(iteration: usize, total: usize, base: f64) -> f64 {
    let mut lr = base;
    for num in [3, 5, 7] {
        if iteration >= num * total / 8 {
            lr *= 0.1;
        }
    }
    lr
}

/// Known-coordinate view prepared for tape evaluation.
struct PreparedView {
    idx: Arc<Vec<usize>>,
    target: Vec<f64>,
    target_norm: f64,
}

fn prepare_view(view: &AttackerView) -> Result<PreparedView> {
    let idx: Vec<usize> = view
        .known
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(Error::AttackInfeasible);
    }
    let target: Vec<f64> = idx.iter().map(|&i| view.values[i]).collect();
    let target_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(PreparedView {
        idx: Arc::new(idx),
        target,
        target_norm,
    })
}

/// Matching loss over the known coordinates, on tape. Cosine distance with a
/// zero-norm side is defined as 1 (no directional information).
fn matching_loss_tensor(prepared: &PreparedView, g: &Tensor, matching: Matching) -> Tensor {
    let u = g.gather(Arc::clone(&prepared.idx));
    let t = Tensor::detached(prepared.target.clone(), vec![prepared.target.len()]);
    match matching {
        Matching::L2 => u.sub(&t).pow(2.0).sum(),
        Matching::Cosine => {
            let nu_sq = u.dot(&u);
            if prepared.target_norm == 0.0 || nu_sq.item() == 0.0 {
                return Tensor::scalar(1.0);
            }
            let dot = u.dot(&t);
            let inv = nu_sq.pow(-0.5).mul_scalar(1.0 / prepared.target_norm);
            dot.mul(&inv).neg().add_scalar(1.0)
        }
    }
}

/// Data-level matching loss between an observed view and a candidate
/// gradient.
pub fn matching_loss(view: &AttackerView, g: &FlatGradient, matching: Matching) -> Result<f64> {
    if view.values.len() != g.values.len() {
        return Err(Error::LengthMismatch {
            context: "attacker view vs gradient",
            expected: g.values.len(),
            got: view.values.len(),
        });
    }
    let prepared = prepare_view(view)?;
    let gt = Tensor::detached(g.values.clone(), vec![g.values.len()]);
    Ok(matching_loss_tensor(&prepared, &gt, matching).item())
}

/// Index pairs for anisotropic TV: all vertically and horizontally adjacent
/// pixel pairs per channel.
fn tv_index_pairs(shape: [usize; 3]) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let [c, h, w] = shape;
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    hi.push(base + (i + 1) * w + j);
                    lo.push(base + i * w + j);
                }
                if j + 1 < w {
                    hi.push(base + i * w + j + 1);
                    lo.push(base + i * w + j);
                }
            }
        }
    }
    (Arc::new(hi), Arc::new(lo))
}

fn tv_tensor(x: &Tensor, hi: &Arc<Vec<usize>>, lo: &Arc<Vec<usize>>) -> Tensor {
    x.gather(Arc::clone(hi))
        .sub(&x.gather(Arc::clone(lo)))
        .abs()
        .sum()
}

/// Anisotropic total variation (sum convention) of an image.
pub fn total_variation(x: &[f64], shape: [usize; 3]) -> Result<f64> {
    let [c, h, w] = shape;
    if c * h * w != x.len() {
        return Err(Error::ShapeMismatch {
            context: "total variation",
            expected: shape.to_vec(),
            got: vec![x.len()],
        });
    }
    let (hi, lo) = tv_index_pairs(shape);
    Ok(tv_tensor(&Tensor::detached(x.to_vec(), vec![x.len()]), &hi, &lo).item())
}

struct RestartRun {
    best_loss: f64,
    best_x: Vec<f64>,
    trace: Vec<f64>,
    aborted: bool,
}

fn run_restart(
    model: &Model,
    params: &ParamVector,
    label: usize,
    prepared: &PreparedView,
    cfg: &AttackConfig,
    restart: usize,
    tv_hi: &Arc<Vec<usize>>,
    tv_lo: &Arc<Vec<usize>>,
) -> RestartRun {
    let n = model.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, restart as u64));
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();

    let mut adam_m = vec![0.0; n];
    let mut adam_v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best_loss = f64::INFINITY;
    let mut best_x = x.clone();

    for it in 0..cfg.iterations {
        let tape = Tape::new();
        let theta = tape.var(params.values.clone(), vec![params.values.len()]);
        let xv = tape.var(x.clone(), vec![n]);
        let loss = model.loss_tensor(&theta, &xv, label);
        let g = match tape.grad(&loss, &[&theta], true) {
            Ok(g) => g,
            Err(_) => {
                return RestartRun {
                    best_loss,
                    best_x,
                    trace,
                    aborted: true,
                }
            }
        };
        let rec = matching_loss_tensor(prepared, &g[0], cfg.matching);
        let rec_val = rec.item();
        let total = if cfg.alpha_tv != 0.0 {
            rec.add(&tv_tensor(&xv, tv_hi, tv_lo).mul_scalar(cfg.alpha_tv))
        } else {
            rec
        };
        let dx = match tape.grad(&total, &[&xv], false) {
            Ok(d) => d,
            Err(_) => {
                return RestartRun {
                    best_loss,
                    best_x,
                    trace,
                    aborted: true,
                }
            }
        };
        let dx = dx[0].data();
        if !rec_val.is_finite() || dx.iter().any(|v| !v.is_finite()) {
            log::warn!(
                "restart {restart}: non-finite loss or gradient at iteration {it}, aborting"
            );
            return RestartRun {
                best_loss,
                best_x,
                trace,
                aborted: true,
            };
        }

        trace.push(rec_val);
        if rec_val < best_loss {
            best_loss = rec_val;
            best_x.copy_from_slice(&x);
        }

        let lr = step_size_at(it, cfg.iterations, cfg.step_size);
        let t = (it + 1) as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..n {
            let d = if cfg.signed {
                if dx[i] > 0.0 {
                    1.0
                } else if dx[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            } else {
                dx[i]
            };
            adam_m[i] = ADAM_BETA1 * adam_m[i] + (1.0 - ADAM_BETA1) * d;
            adam_v[i] = ADAM_BETA2 * adam_v[i] + (1.0 - ADAM_BETA2) * d * d;
            let mhat = adam_m[i] / bias1;
            let vhat = adam_v[i] / bias2;
            x[i] = (x[i] - lr * mhat / (vhat.sqrt() + ADAM_EPS)).clamp(0.0, 1.0);
        }
    }

    RestartRun {
        best_loss,
        best_x,
        trace,
        aborted: false,
    }
}

pub fn invert(
    model: &Model,
    params: &ParamVector,
    label: usize,
    view: &AttackerView,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    invert_with_exec(model, params, label, view, cfg, Execution::Auto)
}

pub fn invert_with_exec(
    model: &Model,
    params: &ParamVector,
    label: usize,
    view: &AttackerView,
    cfg: &AttackConfig,
    exec: Execution,
) -> Result<ReconstructionResult> {
    if cfg.iterations == 0 || cfg.restarts == 0 {
        return Err(Error::Config(
            "attack needs at least one iteration and one restart".into(),
        ));
    }
    if !(cfg.step_size.is_finite() && cfg.step_size > 0.0) {
        return Err(Error::Config(format!(
            "attack step size {} must be positive",
            cfg.step_size
        )));
    }
    if !(cfg.alpha_tv.is_finite() && cfg.alpha_tv >= 0.0) {
        return Err(Error::Config(format!(
            "alpha_tv {} must be finite and non-negative",
            cfg.alpha_tv
        )));
    }
    if view.values.len() != params.values.len() {
        return Err(Error::LengthMismatch {
            context: "attacker view vs parameters",
            expected: params.values.len(),
            got: view.values.len(),
        });
    }
    if label >= model.classes() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            model.classes()
        )));
    }
    let prepared = prepare_view(view)?;
    let (tv_hi, tv_lo) = tv_index_pairs(model.input_shape());

    let t0 = Instant::now();
    let runs: Vec<RestartRun> = map_collect(exec, cfg.restarts, |r| {
        run_restart(model, params, label, &prepared, cfg, r, &tv_hi, &tv_lo)
    });
    let wall_seconds = t0.elapsed().as_secs_f64();

    let mut winner: Option<(usize, &RestartRun)> = None;
    for (i, run) in runs.iter().enumerate() {
        if run.aborted {
            continue;
        }
        if winner.is_none_or(|(_, w)| run.best_loss < w.best_loss) {
            winner = Some((i, run));
        }
    }
    let Some((restart_index, run)) = winner else {
        return Err(Error::AllRestartsAborted(cfg.restarts));
    };
    Ok(ReconstructionResult {
        x_star: run.best_x.clone(),
        shape: model.input_shape(),
        final_rec_loss: run.best_loss,
        loss_trace: run.trace.clone(),
        restart_index,
        wall_seconds,
    })
}

/// Trace wire format: `iter,rec_loss` header, one row per iteration, losses
/// printed with 17 significant digits so parsing them back is bit-exact.
pub fn trace_to_csv(trace: &[f64]) -> String {
    let mut out = String::from("iter,rec_loss\n");
    for (i, v) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{v:.16e}\n"));
    }
    out
}

pub fn trace_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,rec_loss") => {}
        other => {
            return Err(Error::TraceFormat(format!(
                "bad header {:?}",
                other.unwrap_or("<empty>")
            )))
        }
    }
    let mut trace = Vec::new();
    for (row, line) in lines.enumerate() {
        let Some((iter, loss)) = line.split_once(',') else {
            return Err(Error::TraceFormat(format!("row {row}: missing comma")));
        };
        let it: usize = iter
            .parse()
            .map_err(|_| Error::TraceFormat(format!("row {row}: bad iter `{iter}`")))?;
        if it != row {
            return Err(Error::TraceFormat(format!(
                "row {row}: iteration index {it} out of order"
            )));
        }
        let v: f64 = loss
            .parse()
            .map_err(|_| Error::TraceFormat(format!("row {row}: bad loss `{loss}`")))?;
        trace.push(v);
    }
    Ok(trace)
}

pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<f64>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    trace_from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encryption::{attacker_view, EncryptionMask, SubstitutionMode};
    use crate::model::{ModelSpec, ParamLayout, ParamRange, ParamRole};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn grad(values: Vec<f64>) -> FlatGradient {
        let total = values.len();
        FlatGradient {
            values,
            layout: std::sync::Arc::new(ParamLayout {
                ranges: vec![ParamRange {
                    layer: 0,
                    role: ParamRole::Weight,
                    start: 0,
                    end: total,
                }],
                total,
                layers: 1,
            }),
        }
    }

    fn full_view(values: Vec<f64>) -> AttackerView {
        AttackerView {
            known: vec![true; values.len()],
            values,
            mode: SubstitutionMode::Exclude,
        }
    }

    #[test]
    fn l2_matching_restricted_to_known_coords() {
        let mut view = full_view(vec![1.0, 2.0, 3.0]);
        view.known[1] = false;
        // Candidate differs by 0.5 on coords 0 and 2, wildly on hidden 1.
        let g = grad(vec![1.5, 99.0, 2.5]);
        let got = matching_loss(&view, &g, Matching::L2).unwrap();
        assert!(close(got, 0.5, 1e-15), "{got}");
    }

    #[test]
    fn cosine_matching_known_values() {
        let view = full_view(vec![1.0, 0.0]);
        let ortho = grad(vec![0.0, 5.0]);
        let para = grad(vec![3.0, 0.0]);
        let anti = grad(vec![-2.0, 0.0]);
        assert!(close(matching_loss(&view, &ortho, Matching::Cosine).unwrap(), 1.0, 1e-15));
        assert!(close(matching_loss(&view, &para, Matching::Cosine).unwrap(), 0.0, 1e-15));
        assert!(close(matching_loss(&view, &anti, Matching::Cosine).unwrap(), 2.0, 1e-15));
    }

    #[test]
    fn cosine_zero_norm_is_one() {
        let view = full_view(vec![0.0, 0.0]);
        let g = grad(vec![1.0, 2.0]);
        assert_eq!(matching_loss(&view, &g, Matching::Cosine).unwrap(), 1.0);
        let view2 = full_view(vec![1.0, 2.0]);
        let zero = grad(vec![0.0, 0.0]);
        assert_eq!(matching_loss(&view2, &zero, Matching::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn matching_with_no_known_coords_is_infeasible() {
        let view = AttackerView {
            values: vec![0.0, 0.0],
            known: vec![false, false],
            mode: SubstitutionMode::Exclude,
        };
        assert!(matches!(
            matching_loss(&view, &grad(vec![1.0, 2.0]), Matching::L2),
            Err(Error::AttackInfeasible)
        ));
    }

    #[test]
    fn matching_gradient_ignores_hidden_coordinates() {
        // d(matching)/d(candidate) must be zero on hidden coords by
        // construction: they are never gathered.
        let mut view = full_view(vec![0.3, -0.7, 0.9, 0.1]);
        view.known[2] = false;
        let prepared = prepare_view(&view).unwrap();
        let tape = Tape::new();
        let g = tape.var(vec![0.5, 0.5, 0.5, 0.5], vec![4]);
        let loss = matching_loss_tensor(&prepared, &g, Matching::Cosine);
        let dg = tape.grad(&loss, &[&g], false).unwrap();
        assert_eq!(dg[0].data()[2], 0.0);
        assert!(dg[0].data()[0] != 0.0);
    }

    #[test]
    fn total_variation_hand_case_and_grad() {
        // 1x2x2 image [[0, 1], [3, 6]]: vertical |3-0|+|6-1| = 8,
        // horizontal |1-0|+|6-3| = 4, total 12.
        let x = vec![0.0, 1.0, 3.0, 6.0];
        assert_eq!(total_variation(&x, [1, 2, 2]).unwrap(), 12.0);

        let (hi, lo) = tv_index_pairs([1, 2, 2]);
        let tape = Tape::new();
        let xv = tape.var(x.clone(), vec![4]);
        let tv = tv_tensor(&xv, &hi, &lo);
        let g = tape.grad(&tv, &[&xv], false).unwrap();
        // d/dx of sum of |diffs|: x0 appears as lower in two pairs (-1each),
        // x3 as upper in two pairs (+1 each), x1/x2 mixed.
        assert_eq!(g[0].data(), &[-2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn step_decay_milestones() {
        let t = 2000;
        assert_eq!(step_size_at(0, t, 0.1), 0.1);
        assert_eq!(step_size_at(749, t, 0.1), 0.1);
        assert!(close(step_size_at(750, t, 0.1), 0.01, 1e-12));
        assert!(close(step_size_at(1249, t, 0.1), 0.01, 1e-12));
        assert!(close(step_size_at(1250, t, 0.1), 1e-3, 1e-12));
        assert!(close(step_size_at(1750, t, 0.1), 1e-4, 1e-12));
    }

    fn tiny_setup() -> (Model, ParamVector, Vec<f64>, usize) {
        let (model, params) = Model::build(ModelSpec::lenet_small([1, 4, 4], 3), 77).unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i * 5 % 16) as f64) / 16.0).collect();
        (model, params, x, 2)
    }

    #[test]
    fn invert_reduces_matching_loss_and_is_deterministic() {
        let (model, params, x, label) = tiny_setup();
        let (_, g) = model.loss_and_grad_label(&params, &x, label).unwrap();
        let mask = EncryptionMask::from_bits(vec![false; g.values.len()]);
        let view = attacker_view(&g, &mask, SubstitutionMode::Exclude, 0).unwrap();
        let cfg = AttackConfig {
            iterations: 120,
            restarts: 2,
            seed: 5,
            ..AttackConfig::default()
        };
        let a = invert_with_exec(&model, &params, label, &view, &cfg, Execution::Sequential)
            .unwrap();
        assert_eq!(a.loss_trace.len(), 120);
        assert!(a.final_rec_loss < a.loss_trace[0]);
        let min = a.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(a.final_rec_loss, min);
        assert!(a.x_star.iter().all(|v| (0.0..=1.0).contains(v)));

        let b = invert_with_exec(&model, &params, label, &view, &cfg, Execution::Auto).unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.restart_index, b.restart_index);

        let cfg2 = AttackConfig { seed: 6, ..cfg };
        let c = invert(&model, &params, label, &view, &cfg2).unwrap();
        assert_ne!(a.x_star, c.x_star);
    }

    #[test]
    fn invert_with_everything_masked_is_infeasible() {
        let (model, params, x, label) = tiny_setup();
        let (_, g) = model.loss_and_grad_label(&params, &x, label).unwrap();
        let mask = EncryptionMask::from_bits(vec![true; g.values.len()]);
        let view = attacker_view(&g, &mask, SubstitutionMode::Exclude, 0).unwrap();
        assert!(matches!(
            invert(&model, &params, label, &view, &AttackConfig::default()),
            Err(Error::AttackInfeasible)
        ));
    }

    #[test]
    fn invert_validates_config() {
        let (model, params, x, label) = tiny_setup();
        let (_, g) = model.loss_and_grad_label(&params, &x, label).unwrap();
        let mask = EncryptionMask::from_bits(vec![false; g.values.len()]);
        let view = attacker_view(&g, &mask, SubstitutionMode::Exclude, 0).unwrap();
        for bad in [
            AttackConfig {
                iterations: 0,
                ..AttackConfig::default()
            },
            AttackConfig {
                restarts: 0,
                ..AttackConfig::default()
            },
            AttackConfig {
                step_size: -1.0,
                ..AttackConfig::default()
            },
            AttackConfig {
                alpha_tv: f64::NAN,
                ..AttackConfig::default()
            },
        ] {
            assert!(matches!(
                invert(&model, &params, label, &view, &bad),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn trace_csv_round_trip_is_bit_exact() {
        let trace = vec![
            1.0,
            0.1234567890123456789,
            f64::MIN_POSITIVE,
            1.0 / 3.0,
            6.02214076e23,
        ];
        let csv = trace_to_csv(&trace);
        assert!(csv.starts_with("iter,rec_loss\n0,"));
        let back = trace_from_csv(&csv).unwrap();
        assert_eq!(
            trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn trace_csv_rejects_malformed_input() {
        assert!(trace_from_csv("nope\n0,1.0\n").is_err());
        assert!(trace_from_csv("iter,rec_loss\n0;1.0\n").is_err());
        assert!(trace_from_csv("iter,rec_loss\n1,1.0\n").is_err());
        assert!(trace_from_csv("iter,rec_loss\n0,abc\n").is_err());
    }
}
