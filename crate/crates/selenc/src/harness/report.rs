//! Experiment report: per-cell records, aggregates, and emission.
//!
//! A cell is one (sample, metric, ratio) combination. The CSV view is flat
//! and fixed-header for downstream tooling; the JSON view mirrors the whole
//! in-memory structure (including optional loss traces and lemma checks) and
//! round-trips losslessly. Infinite statistics serialize as JSON null.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Threshold, ThresholdMetric};
use crate::lemma::{EndpointCheck, IntegralCheck};
use crate::quality::{option_inf, QualityReport};

pub const CSV_HEADER: &str = "sample,metric,ratio,mse,psnr,ssim,rec_loss,compute_seconds,status";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    /// The view leaves the attacker nothing to match against.
    AttackInfeasible,
    Error(String),
}

impl CellStatus {
    pub fn csv_label(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::AttackInfeasible => "AttackInfeasible",
            CellStatus::Error(_) => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub sample: usize,
    pub metric: String,
    pub ratio: f64,
    /// Present only for Ok cells.
    pub quality: Option<QualityReport>,
    pub rec_loss: Option<f64>,
    /// Significance scoring time, measured once per (sample, metric).
    pub compute_seconds: f64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

/// Mean and sample standard deviation over the Ok cells of one (metric,
/// ratio) pair. Any non-finite observation forces both statistics to
/// infinity; an empty pool reports infinity with samples = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub ratio: f64,
    pub samples: usize,
    pub infeasible: usize,
    pub errors: usize,
    #[serde(with = "option_inf")]
    pub mean_mse: f64,
    #[serde(with = "option_inf")]
    pub std_mse: f64,
    #[serde(with = "option_inf")]
    pub mean_psnr: f64,
    #[serde(with = "option_inf")]
    pub std_psnr: f64,
    #[serde(with = "option_inf")]
    pub mean_ssim: f64,
    #[serde(with = "option_inf")]
    pub std_ssim: f64,
    #[serde(with = "option_inf")]
    pub mean_rec_loss: f64,
    #[serde(with = "option_inf")]
    pub std_rec_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectiveRatio {
    pub metric: String,
    /// Smallest configured ratio that crosses the protection threshold;
    /// None renders as NA.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub panels: usize,
    /// One integral identity check per sample.
    pub integral: Vec<IntegralCheck>,
    pub scales: Vec<f64>,
    /// endpoint[sample][scale index], scales as listed above.
    pub endpoint: Vec<Vec<EndpointCheck>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<Aggregate>,
    pub protective: Vec<ProtectiveRatio>,
    /// Ratio anchoring the distance table below.
    pub table_ratio: f64,
    /// Per-metric aggregate at the anchor ratio, when that ratio was swept.
    pub distance_table: Vec<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma: Option<LemmaReport>,
}

fn stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return (f64::INFINITY, f64::INFINITY);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregate cells per (metric, ratio) in the given configured order.
pub fn aggregate_cells(
    cells: &[CellRecord],
    metric_names: &[String],
    ratios: &[f64],
) -> Vec<Aggregate> {
    let mut out = Vec::with_capacity(metric_names.len() * ratios.len());
    for metric in metric_names {
        for &ratio in ratios {
            let pool: Vec<&CellRecord> = cells
                .iter()
                .filter(|c| &c.metric == metric && c.ratio == ratio)
                .collect();
            let ok: Vec<&QualityReport> = pool
                .iter()
                .filter(|c| c.status == CellStatus::Ok)
                .filter_map(|c| c.quality.as_ref())
                .collect();
            let pick = |f: fn(&QualityReport) -> f64| -> Vec<f64> { ok.iter().map(|q| f(q)).collect() };
            let (mean_mse, std_mse) = stats(&pick(|q| q.mse));
            let (mean_psnr, std_psnr) = stats(&pick(|q| q.psnr));
            let (mean_ssim, std_ssim) = stats(&pick(|q| q.ssim));
            let losses: Vec<f64> = pool
                .iter()
                .filter(|c| c.status == CellStatus::Ok)
                .filter_map(|c| c.rec_loss)
                .collect();
            let (mean_rec_loss, std_rec_loss) = stats(&losses);
            out.push(Aggregate {
                metric: metric.clone(),
                ratio,
                samples: ok.len(),
                infeasible: pool
                    .iter()
                    .filter(|c| c.status == CellStatus::AttackInfeasible)
                    .count(),
                errors: pool
                    .iter()
                    .filter(|c| matches!(c.status, CellStatus::Error(_)))
                    .count(),
                mean_mse,
                std_mse,
                mean_psnr,
                std_psnr,
                mean_ssim,
                std_ssim,
                mean_rec_loss,
                std_rec_loss,
            });
        }
    }
    out
}

fn aggregate_stat(a: &Aggregate, metric: ThresholdMetric) -> f64 {
    match metric {
        ThresholdMetric::Mse => a.mean_mse,
        ThresholdMetric::Psnr => a.mean_psnr,
        ThresholdMetric::Ssim => a.mean_ssim,
    }
}

/// Smallest configured ratio whose aggregate crosses the threshold. A ratio
/// where every cell is AttackInfeasible counts as protected outright: there
/// is no reconstruction to measure.
pub fn minimal_protective_ratio(
    aggregates: &[Aggregate],
    metric: &str,
    threshold: &Threshold,
) -> Option<f64> {
    for a in aggregates.iter().filter(|a| a.metric == metric) {
        if a.samples == 0 && a.errors == 0 && a.infeasible > 0 {
            return Some(a.ratio);
        }
        if a.samples > 0 && threshold.crossed(aggregate_stat(a, threshold.metric)) {
            return Some(a.ratio);
        }
    }
    None
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn report_to_csv(report: &ExperimentReport) -> String {
    let mut s = String::with_capacity(64 * (report.cells.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for c in &report.cells {
        let (mse, psnr, ssim) = match &c.quality {
            Some(q) => (fmt_f(q.mse), fmt_f(q.psnr), fmt_f(q.ssim)),
            None => (String::new(), String::new(), String::new()),
        };
        let rec = c.rec_loss.map(fmt_f).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.sample,
            c.metric,
            fmt_f(c.ratio),
            mse,
            psnr,
            ssim,
            rec,
            fmt_f(c.compute_seconds),
            c.status.csv_label()
        )
        .expect("string write");
    }
    s
}

/// Write report.csv and report.json under `dir`, creating it if needed.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, report_to_csv(report))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok((csv_path, json_path))
}

pub fn read_report_json(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Direction;

    fn ok_cell(sample: usize, metric: &str, ratio: f64, mse: f64) -> CellRecord {
        CellRecord {
            sample,
            metric: metric.into(),
            ratio,
            quality: Some(QualityReport {
                mse,
                psnr: -10.0 * mse.log10(),
                ssim: 0.5,
            }),
            rec_loss: Some(mse / 10.0),
            compute_seconds: 0.0,
            status: CellStatus::Ok,
            trace: None,
        }
    }

    fn empty_report() -> ExperimentReport {
        ExperimentReport {
            cells: vec![],
            aggregates: vec![],
            protective: vec![],
            table_ratio: 0.3,
            distance_table: vec![],
            lemma: None,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(report_to_csv(&empty_report()), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_rows_match_cells_exactly() {
        let mut r = empty_report();
        r.cells.push(ok_cell(0, "grad", 0.1, 0.25));
        r.cells.push(CellRecord {
            sample: 0,
            metric: "grad".into(),
            ratio: 1.0,
            quality: None,
            rec_loss: None,
            compute_seconds: 0.0,
            status: CellStatus::AttackInfeasible,
            trace: None,
        });
        let csv = report_to_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(
            lines[1],
            "0,grad,0.1,0.25,6.020599913279624,0.5,0.025,0,ok"
        );
        assert_eq!(lines[2], "0,grad,1,,,,,0,AttackInfeasible");
    }

    #[test]
    fn aggregates_hand_walked() {
        let cells = vec![
            ok_cell(0, "grad", 0.1, 0.1),
            ok_cell(1, "grad", 0.1, 0.3),
            CellRecord {
                sample: 2,
                metric: "grad".into(),
                ratio: 0.1,
                quality: None,
                rec_loss: None,
                compute_seconds: 0.0,
                status: CellStatus::Error("boom".into()),
                trace: None,
            },
        ];
        let aggs = aggregate_cells(&cells, &["grad".into()], &[0.1]);
        assert_eq!(aggs.len(), 1);
        let a = &aggs[0];
        assert_eq!((a.samples, a.infeasible, a.errors), (2, 0, 1));
        assert!((a.mean_mse - 0.2).abs() < 1e-15);
        // Sample std of {0.1, 0.3}: sqrt(((0.1-0.2)^2 + (0.3-0.2)^2) / 1).
        assert!((a.std_mse - 0.1414213562373095).abs() < 1e-12);

        // Single observation: std pinned at zero.
        let one = aggregate_cells(&cells[..1], &["grad".into()], &[0.1]);
        assert_eq!(one[0].std_mse, 0.0);
        assert_eq!(one[0].samples, 1);

        // Non-finite observation forces infinite stats.
        let mut perfect = ok_cell(0, "grad", 0.1, 0.0);
        perfect.quality.as_mut().unwrap().psnr = f64::INFINITY;
        let aggs = aggregate_cells(&[perfect], &["grad".into()], &[0.1]);
        assert!(aggs[0].mean_psnr.is_infinite() && aggs[0].std_psnr.is_infinite());
    }

    #[test]
    fn protective_ratio_hand_walked_table() {
        let th = Threshold {
            metric: ThresholdMetric::Mse,
            direction: Direction::AtLeast,
            value: 0.05,
        };
        let cells = vec![
            ok_cell(0, "grad", 0.0, 0.01),
            ok_cell(0, "grad", 0.2, 0.06),
            ok_cell(0, "weak", 0.0, 0.01),
            ok_cell(0, "weak", 0.2, 0.02),
        ];
        let names = vec!["grad".to_string(), "weak".to_string()];
        let aggs = aggregate_cells(&cells, &names, &[0.0, 0.2]);
        assert_eq!(minimal_protective_ratio(&aggs, "grad", &th), Some(0.2));
        assert_eq!(minimal_protective_ratio(&aggs, "weak", &th), None);

        // A fully infeasible ratio is protected by definition.
        let cells = vec![CellRecord {
            sample: 0,
            metric: "grad".into(),
            ratio: 1.0,
            quality: None,
            rec_loss: None,
            compute_seconds: 0.0,
            status: CellStatus::AttackInfeasible,
            trace: None,
        }];
        let aggs = aggregate_cells(&cells, &["grad".to_string()], &[1.0]);
        assert_eq!(minimal_protective_ratio(&aggs, "grad", &th), Some(1.0));
    }

    #[test]
    fn json_round_trip_preserves_report() {
        let mut r = empty_report();
        let mut cell = ok_cell(0, "grad", 0.0, 0.0);
        cell.quality.as_mut().unwrap().psnr = f64::INFINITY; // null in JSON
        cell.trace = Some(vec![1.5, 0.25, 0.125]);
        r.cells.push(cell);
        r.cells.push(CellRecord {
            sample: 1,
            metric: "param".into(),
            ratio: 0.3,
            quality: None,
            rec_loss: None,
            compute_seconds: 0.125,
            status: CellStatus::Error("cell failed".into()),
            trace: None,
        });
        r.aggregates = aggregate_cells(&r.cells, &["grad".into(), "param".into()], &[0.0, 0.3]);
        r.protective = vec![ProtectiveRatio {
            metric: "grad".into(),
            ratio: None,
        }];
        r.lemma = Some(LemmaReport {
            panels: 8,
            integral: vec![IntegralCheck {
                lhs: 1.0,
                quadrature: 1.0 + 1e-9,
                gap: 1e-9,
                panels: 8,
            }],
            scales: vec![1.0, 0.1],
            endpoint: vec![vec![
                EndpointCheck {
                    log_f: -1.0,
                    approx: -1.1,
                    endpoint_gap: 0.1,
                },
                EndpointCheck {
                    log_f: -0.5,
                    approx: -0.51,
                    endpoint_gap: 0.01,
                },
            ]],
        });
        let json = serde_json::to_string(&r).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn write_report_creates_files_and_fails_on_bad_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested").join("run");
        let (csv, json) = write_report(&out, &empty_report()).unwrap();
        assert!(csv.exists() && json.exists());
        assert_eq!(read_report_json(&json).unwrap(), empty_report());

        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(matches!(
            write_report(&blocker.join("sub"), &empty_report()),
            Err(Error::Io { .. })
        ));
    }
}
