//! Ratio-sweep orchestration: score, mask, attack, evaluate, aggregate.
//!
//! Cells form an embarrassingly parallel work set keyed (sample, metric,
//! ratio) with the ratio index innermost; results are collected in key order
//! so output never depends on scheduling. Significance scores are computed
//! once per (sample, metric) and shared by every ratio, which is also where
//! the reported compute_seconds comes from. Cell failures are recorded in
//! the report and do not stop the run.

use crate::attack::invert_with_exec;
use crate::encryption::{attacker_view, top_s_mask};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{
    aggregate_cells, minimal_protective_ratio, CellRecord, CellStatus, ExperimentReport,
    LemmaReport, ProtectiveRatio,
};
use crate::lemma::{verify_integral, verify_lemma_approx};
use crate::mix_seed;
use crate::model::{FlatGradient, Model, ParamVector};
use crate::parallel::{map_collect, Execution};
use crate::quality::quality;
use crate::significance::{score_metric, SignificanceScores};

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_sweep_with_exec(cfg, Execution::Auto)
}

pub fn run_sweep_with_exec(
    cfg: &ExperimentConfig,
    exec: Execution,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (model, params) = Model::build(cfg.model_spec()?, cfg.model.seed)?;
    let samples = cfg.load_samples()?;
    let metrics = cfg.metric_specs()?;
    let metric_names: Vec<String> = metrics.iter().map(|m| m.to_string()).collect();
    let atk = cfg.attack_config()?;
    let mode = cfg.substitution_mode()?;
    let threshold = cfg.threshold()?;
    let ratios = &cfg.sweep.ratios;
    let (ns, nm, nr) = (samples.len(), metrics.len(), ratios.len());

    let grads: Vec<std::result::Result<FlatGradient, String>> = map_collect(exec, ns, |s| {
        model
            .loss_and_grad_label(&params, &samples[s].pixels, samples[s].label)
            .map(|(_, g)| g)
            .map_err(|e| e.to_string())
    });

    let scores: Vec<std::result::Result<SignificanceScores, String>> =
        map_collect(exec, ns * nm, |k| {
            let (s, mi) = (k / nm, k % nm);
            let g = grads[s].as_ref().map_err(Clone::clone)?;
            score_metric(
                &model,
                &params,
                g,
                &samples[s].pixels,
                samples[s].label,
                metrics[mi],
                exec,
            )
            .map_err(|e| e.to_string())
        });

    let cells: Vec<CellRecord> = map_collect(exec, ns * nm * nr, |k| {
        let ri = k % nr;
        let mi = (k / nr) % nm;
        let s = k / (nr * nm);
        let img = &samples[s];
        let mut cell = CellRecord {
            sample: s,
            metric: metric_names[mi].clone(),
            ratio: ratios[ri],
            quality: None,
            rec_loss: None,
            compute_seconds: 0.0,
            status: CellStatus::Ok,
            trace: None,
        };
        let (g0, sc) = match (&grads[s], &scores[s * nm + mi]) {
            (Ok(g), Ok(sc)) => (g, sc),
            (Err(e), _) | (_, Err(e)) => {
                cell.status = CellStatus::Error(e.clone());
                return cell;
            }
        };
        cell.compute_seconds = sc.compute_seconds;
        let view = match top_s_mask(sc, ratios[ri]).and_then(|mask| {
            attacker_view(g0, &mask, mode, mix_seed(cfg.defense.seed, k as u64))
        }) {
            Ok(v) => v,
            Err(e) => {
                cell.status = CellStatus::Error(e.to_string());
                return cell;
            }
        };
        match invert_with_exec(&model, &params, img.label, &view, &atk, exec) {
            Ok(rec) => match quality(&img.pixels, &rec.x_star, img.shape) {
                Ok(q) => {
                    cell.quality = Some(q);
                    cell.rec_loss = Some(rec.final_rec_loss);
                    if cfg.output.write_traces {
                        cell.trace = Some(rec.loss_trace);
                    }
                }
                Err(e) => cell.status = CellStatus::Error(e.to_string()),
            },
            Err(Error::AttackInfeasible) => cell.status = CellStatus::AttackInfeasible,
            Err(e) => cell.status = CellStatus::Error(e.to_string()),
        }
        cell
    });

    let lemma = match &cfg.lemma {
        Some(l) => {
            let mut integral = Vec::with_capacity(ns);
            let mut endpoint = Vec::with_capacity(ns);
            for img in &samples {
                integral.push(verify_integral(
                    &model,
                    &params,
                    &img.pixels,
                    img.label,
                    l.panels,
                )?);
                let mut row = Vec::with_capacity(l.scales.len());
                for &scale in &l.scales {
                    let scaled = ParamVector {
                        values: params.values.iter().map(|v| v * scale).collect(),
                        layout: params.layout.clone(),
                    };
                    row.push(verify_lemma_approx(&model, &scaled, &img.pixels, img.label)?);
                }
                endpoint.push(row);
            }
            Some(LemmaReport {
                panels: l.panels,
                integral,
                scales: l.scales.clone(),
                endpoint,
            })
        }
        None => None,
    };

    let aggregates = aggregate_cells(&cells, &metric_names, ratios);
    let protective = metric_names
        .iter()
        .map(|m| ProtectiveRatio {
            metric: m.clone(),
            ratio: minimal_protective_ratio(&aggregates, m, &threshold),
        })
        .collect();
    let distance_table = aggregates
        .iter()
        .filter(|a| a.ratio == cfg.sweep.table_ratio)
        .cloned()
        .collect();

    Ok(ExperimentReport {
        cells,
        aggregates,
        protective,
        table_ratio: cfg.sweep.table_ratio,
        distance_table,
        lemma,
    })
}

pub fn had_errors(report: &ExperimentReport) -> bool {
    report
        .cells
        .iter()
        .any(|c| matches!(c.status, CellStatus::Error(_)))
}
