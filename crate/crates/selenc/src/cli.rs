//! Command line interface.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 sweep finished
//! but some cells failed (the report is still written).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack::{invert, trace_to_csv, AttackConfig, Matching};
use crate::data::{synth_images, LabeledImage};
use crate::encryption::{attacker_view, top_s_mask, SubstitutionMode};
use crate::error::{Error, Result};
use crate::fedsim::{adversary_pipeline, run_round, AdversaryReport, ClientSpec, FedRoundConfig};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::write_report;
use crate::harness::sweep::{had_errors, run_sweep_with_exec};
use crate::lemma::{verify_integral, verify_lemma_approx};
use crate::model::{Model, ModelSpec, ParamVector};
use crate::parallel::Execution;
use crate::quality::{quality, QualityReport};
use crate::significance::{
    score_metric, MetricSpec, DEFAULT_SENS_BUDGET, DEFAULT_SENS_STEP,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Parser)]
#[command(
    name = "selenc",
    version,
    about = "Selective gradient encryption workbench",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a config-driven ratio sweep and write CSV/JSON reports.
    Sweep {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Force sequential execution.
        #[arg(long)]
        sequential: bool,
    },
    /// Attack one synthetic sample at a single metric and ratio.
    AttackOne(AttackOneArgs),
    /// Check the loss-difference integral identity and its endpoint
    /// approximation on synthetic samples.
    VerifyLemma(VerifyLemmaArgs),
    /// Simulate one FedAvg round with selective encryption.
    Fedsim(FedsimArgs),
    /// Time each significance metric on one sample.
    BenchMetrics(BenchMetricsArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Architecture: lenet-small or cnn-small.
    #[arg(long, default_value = "lenet-small")]
    model: String,
    /// Input shape as channels,height,width.
    #[arg(long, value_delimiter = ',', default_value = "1,8,8")]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Parameter initialization seed.
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
    /// Synthetic sample stream seed.
    #[arg(long, default_value_t = 11)]
    data_seed: u64,
}

impl ModelArgs {
    fn input_shape(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            [c, h, w] => Ok([*c, *h, *w]),
            other => Err(Error::Config(format!(
                "--shape needs three comma-separated values, got {}",
                other.len()
            ))),
        }
    }

    fn build(&self) -> Result<(Model, ParamVector)> {
        let spec = ModelSpec::by_name(&self.model, self.input_shape()?, self.classes)?;
        Model::build(spec, self.model_seed)
    }

    fn samples(&self, count: usize) -> Result<Vec<LabeledImage>> {
        Ok(synth_images(
            count,
            self.data_seed,
            self.classes,
            self.input_shape()?,
        ))
    }
}

#[derive(Args)]
struct AttackOneArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.3)]
    ratio: f64,
    /// sens, sens-discrete, prodsig, grad, param, or onefifth-1..5.
    #[arg(long, default_value = "grad")]
    metric: String,
    /// exclude or bounded-noise.
    #[arg(long, default_value = "exclude")]
    mode: String,
    /// Noise bound for bounded-noise.
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    /// cosine or l2.
    #[arg(long, default_value_t = String::from("cosine"))]
    matching: String,
    #[arg(long, default_value_t = 1e-4)]
    alpha_tv: f64,
    #[arg(long, default_value_t = 400)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    restarts: usize,
    #[arg(long, default_value_t = 0.1)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index into the synthetic sample stream.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Write the winning restart's loss trace CSV here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyLemmaArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 64)]
    panels: usize,
    /// Parameter scales for the endpoint check.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.1,0.01")]
    scales: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Args)]
struct FedsimArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    #[arg(long, default_value_t = 0.3)]
    ratio: f64,
    #[arg(long, default_value = "grad")]
    metric: String,
    /// Samples per client shard.
    #[arg(long, default_value_t = 2)]
    shard: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value = "exclude")]
    mode: String,
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the inversion attack on every intercepted upload.
    #[arg(long)]
    attack: bool,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

#[derive(Args)]
struct BenchMetricsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Metrics to time, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "prodsig,grad,param,sens-discrete")]
    metrics: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_SENS_STEP)]
    sens_step: f64,
    #[arg(long, default_value_t = DEFAULT_SENS_BUDGET)]
    sens_budget: u64,
    /// Timing repetitions; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn parse_mode(mode: &str, xi: f64) -> Result<SubstitutionMode> {
    match mode {
        "exclude" => Ok(SubstitutionMode::Exclude),
        "bounded-noise" => {
            if !(xi.is_finite() && xi > 0.0) {
                return Err(Error::InvalidNoiseBound(xi));
            }
            Ok(SubstitutionMode::BoundedNoise { xi })
        }
        other => Err(Error::Config(format!(
            "unknown mode {other:?}; expected exclude or bounded-noise"
        ))),
    }
}

fn parse_matching(name: &str) -> Result<Matching> {
    match name {
        "cosine" => Ok(Matching::Cosine),
        "l2" => Ok(Matching::L2),
        other => Err(Error::Config(format!(
            "unknown matching {other:?}; expected cosine or l2"
        ))),
    }
}

#[derive(Serialize)]
struct AttackOneOutput {
    metric: String,
    ratio: f64,
    encrypted_coords: usize,
    total_coords: usize,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    quality: Option<QualityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rec_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    restart_index: Option<usize>,
    compute_seconds: f64,
}

fn cmd_attack_one(a: &AttackOneArgs) -> Result<i32> {
    let (model, params) = a.model.build()?;
    let img = a
        .model
        .samples(a.sample + 1)?
        .pop()
        .expect("synthetic stream");
    let spec = MetricSpec::parse(&a.metric, DEFAULT_SENS_BUDGET, DEFAULT_SENS_STEP)?;
    let mode = parse_mode(&a.mode, a.xi)?;
    let cfg = AttackConfig {
        matching: parse_matching(&a.matching)?,
        alpha_tv: a.alpha_tv,
        iterations: a.iterations,
        restarts: a.restarts,
        step_size: a.step_size,
        signed: true,
        seed: a.seed,
    };

    let (_, g0) = model.loss_and_grad_label(&params, &img.pixels, img.label)?;
    let scores = score_metric(
        &model,
        &params,
        &g0,
        &img.pixels,
        img.label,
        spec,
        Execution::Auto,
    )?;
    let mask = top_s_mask(&scores, a.ratio)?;
    let view = attacker_view(&g0, &mask, mode, a.seed)?;

    let mut out = AttackOneOutput {
        metric: spec.to_string(),
        ratio: a.ratio,
        encrypted_coords: mask.count_ones(),
        total_coords: mask.len(),
        status: "ok",
        quality: None,
        rec_loss: None,
        restart_index: None,
        compute_seconds: scores.compute_seconds,
    };
    match invert(&model, &params, img.label, &view, &cfg) {
        Ok(rec) => {
            out.quality = Some(quality(&img.pixels, &rec.x_star, img.shape)?);
            out.rec_loss = Some(rec.final_rec_loss);
            out.restart_index = Some(rec.restart_index);
            if let Some(path) = &a.trace_out {
                std::fs::write(path, trace_to_csv(&rec.loss_trace))
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
        Err(Error::AttackInfeasible) => out.status = "AttackInfeasible",
        Err(e) => return Err(e),
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("serialize"));
    Ok(EXIT_OK)
}

fn cmd_verify_lemma(a: &VerifyLemmaArgs) -> Result<i32> {
    if a.samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let (model, params) = a.model.build()?;
    let images = a.model.samples(a.samples)?;
    for (i, img) in images.iter().enumerate() {
        let ic = verify_integral(&model, &params, &img.pixels, img.label, a.panels)?;
        println!(
            "sample {i}: lhs {:+.9e}  quadrature {:+.9e}  gap {:.3e}  panels {}",
            ic.lhs, ic.quadrature, ic.gap, ic.panels
        );
        for &scale in &a.scales {
            let scaled = ParamVector {
                values: params.values.iter().map(|v| v * scale).collect(),
                layout: params.layout.clone(),
            };
            let ec = verify_lemma_approx(&model, &scaled, &img.pixels, img.label)?;
            println!(
                "sample {i} scale {scale}: log_f {:+.9e}  approx {:+.9e}  gap {:.3e}",
                ec.log_f, ec.approx, ec.endpoint_gap
            );
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct FedsimOutput {
    transcript: crate::fedsim::RoundTranscript,
    fedavg_bitwise_equal: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    adversary: Option<Vec<AdversaryReport>>,
}

fn cmd_fedsim(a: &FedsimArgs) -> Result<i32> {
    if a.clients == 0 || a.shard == 0 {
        return Err(Error::Config("--clients and --shard must be positive".into()));
    }
    let (model, params) = a.model.build()?;
    let images = a.model.samples(a.clients * a.shard)?;
    let weight = 1.0 / a.clients as f64;
    let clients: Vec<ClientSpec> = images
        .chunks(a.shard)
        .map(|shard| ClientSpec {
            shard: shard.to_vec(),
            weight,
        })
        .collect();
    let cfg = FedRoundConfig {
        ratio: a.ratio,
        metric: MetricSpec::parse(&a.metric, DEFAULT_SENS_BUDGET, DEFAULT_SENS_STEP)?,
        mode: parse_mode(&a.mode, a.xi)?,
        local_epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
    };
    let out = run_round(&model, &params, &clients, &cfg)?;

    // The mock cipher promises exact aggregation; cross-check against a
    // ratio-0 round, which never routes through ciphertexts.
    let plain = run_round(
        &model,
        &params,
        &clients,
        &FedRoundConfig { ratio: 0.0, ..cfg },
    )?;
    let equal = out
        .updated
        .values
        .iter()
        .zip(&plain.updated.values)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let adversary = if a.attack {
        let atk = AttackConfig {
            iterations: a.iterations,
            restarts: a.restarts,
            seed: a.seed,
            ..AttackConfig::default()
        };
        Some(adversary_pipeline(
            &model,
            &params,
            &out.intercepts,
            &atk,
            Execution::Auto,
        )?)
    } else {
        None
    };

    let report = FedsimOutput {
        transcript: out.transcript(),
        fedavg_bitwise_equal: equal,
        adversary,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("serialize"));
    Ok(EXIT_OK)
}

fn cmd_bench_metrics(a: &BenchMetricsArgs) -> Result<i32> {
    if a.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let (model, params) = a.model.build()?;
    let img = a.model.samples(1)?.pop().expect("synthetic stream");
    let (_, g0) = model.loss_and_grad_label(&params, &img.pixels, img.label)?;
    println!("{:<14} {:>12}  ({} params)", "metric", "seconds", params.values.len());
    for name in &a.metrics {
        let spec = MetricSpec::parse(name, a.sens_budget, a.sens_step)?;
        let mut best = f64::INFINITY;
        for _ in 0..a.repeats {
            let scores = score_metric(
                &model,
                &params,
                &g0,
                &img.pixels,
                img.label,
                spec,
                Execution::Auto,
            )?;
            best = best.min(scores.compute_seconds);
        }
        println!("{:<14} {:>12.6}", spec.to_string(), best);
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Sweep { config, sequential } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Auto
            };
            let report = run_sweep_with_exec(&cfg, exec)?;
            let (csv, json) = write_report(&cfg.output.dir, &report)?;
            for p in &report.protective {
                match p.ratio {
                    Some(r) => println!("minimal protective ratio {}: {r}", p.metric),
                    None => println!("minimal protective ratio {}: NA", p.metric),
                }
            }
            println!("wrote {} and {}", csv.display(), json.display());
            if had_errors(&report) {
                eprintln!("some cells failed; see report");
                Ok(EXIT_PARTIAL)
            } else {
                Ok(EXIT_OK)
            }
        }
        Cmd::AttackOne(a) => cmd_attack_one(&a),
        Cmd::VerifyLemma(a) => cmd_verify_lemma(&a),
        Cmd::Fedsim(a) => cmd_fedsim(&a),
        Cmd::BenchMetrics(a) => cmd_bench_metrics(&a),
    }
}

/// Parse argv and run; returns the process exit code. Usage errors exit(2)
/// inside clap with its usage text.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}
