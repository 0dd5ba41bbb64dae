//! Declarative experiment configuration.
//!
//! Experiments are described by a TOML file of typed sections; every knob
//! lives in the file so a config plus the binary reproduces a run exactly.
//! The only environment override is `SELENC_OUTPUT_DIR`, which redirects the
//! output directory without touching the experiment itself.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Matching};
use crate::data::{read_cifar10_file, read_cifar100_file, synth_images, LabeledImage};
use crate::encryption::SubstitutionMode;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quality::QualityReport;
use crate::significance::{MetricSpec, DEFAULT_SENS_BUDGET, DEFAULT_SENS_STEP};

pub const OUTPUT_DIR_ENV: &str = "SELENC_OUTPUT_DIR";

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub attack: AttackSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub protection: ProtectionSection,
    pub output: OutputSection,
    #[serde(default)]
    pub lemma: Option<LemmaSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "lenet-small" or "cnn-small".
    pub arch: String,
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic", "cifar10", or "cifar100".
    pub source: String,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Binary file path; required for the CIFAR sources.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// "cosine" or "l2".
    pub matching: String,
    pub alpha_tv: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub step_size: f64,
    pub signed: bool,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        AttackSection {
            matching: "cosine".into(),
            alpha_tv: d.alpha_tv,
            iterations: d.iterations,
            restarts: d.restarts,
            step_size: d.step_size,
            signed: d.signed,
            seed: d.seed,
        }
    }
}

fn default_sens_step() -> f64 {
    DEFAULT_SENS_STEP
}

fn default_sens_budget() -> u64 {
    DEFAULT_SENS_BUDGET
}

fn default_table_ratio() -> f64 {
    0.3
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub metrics: Vec<String>,
    /// Strictly increasing, each in [0, 1].
    pub ratios: Vec<f64>,
    #[serde(default = "default_sens_step")]
    pub sens_step: f64,
    #[serde(default = "default_sens_budget")]
    pub sens_budget: u64,
    /// Ratio at which the per-metric distance table is extracted.
    #[serde(default = "default_table_ratio")]
    pub table_ratio: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// "exclude" or "bounded-noise".
    pub mode: String,
    /// Noise bound; required positive for bounded-noise.
    pub xi: f64,
    pub seed: u64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            mode: "exclude".into(),
            xi: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtectionSection {
    /// "mse", "psnr", or "ssim".
    pub metric: String,
    /// "at-least" or "at-most".
    pub direction: String,
    pub value: f64,
}

impl Default for ProtectionSection {
    fn default() -> Self {
        ProtectionSection {
            metric: "mse".into(),
            direction: "at-least".into(),
            value: 0.05,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Store the winning restart's loss trace in each report cell.
    #[serde(default)]
    pub write_traces: bool,
}

fn default_panels() -> usize {
    64
}

fn default_scales() -> Vec<f64> {
    vec![1.0, 0.1, 0.01]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaSection {
    pub panels: usize,
    /// Parameter scales for the endpoint check, strictly decreasing.
    pub scales: Vec<f64>,
}

impl Default for LemmaSection {
    fn default() -> Self {
        LemmaSection {
            panels: default_panels(),
            scales: default_scales(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMetric {
    Mse,
    Psnr,
    Ssim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AtLeast,
    AtMost,
}

/// Protection threshold: a reconstruction counts as defended when the chosen
/// quality statistic sits on the configured side of the value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub metric: ThresholdMetric,
    pub direction: Direction,
    pub value: f64,
}

impl Threshold {
    pub fn pick(&self, q: &QualityReport) -> f64 {
        match self.metric {
            ThresholdMetric::Mse => q.mse,
            ThresholdMetric::Psnr => q.psnr,
            ThresholdMetric::Ssim => q.ssim,
        }
    }

    pub fn crossed(&self, stat: f64) -> bool {
        match self.direction {
            Direction::AtLeast => stat >= self.value,
            Direction::AtMost => stat <= self.value,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        if let Ok(dir) = env::var(OUTPUT_DIR_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "cifar10" | "cifar100" => {
                if self.dataset.path.is_none() {
                    return Err(Error::Config(format!(
                        "dataset source {:?} needs a path",
                        self.dataset.source
                    )));
                }
                if self.model.input_shape != [3, 32, 32] {
                    return Err(Error::Config(
                        "CIFAR sources require input_shape = [3, 32, 32]".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset source {other:?}; expected synthetic, cifar10, or cifar100"
                )));
            }
        }
        if self.dataset.samples == 0 {
            return Err(Error::Config("dataset.samples must be at least 1".into()));
        }
        if self.sweep.metrics.is_empty() {
            return Err(Error::Config("sweep.metrics must not be empty".into()));
        }
        self.metric_specs()?;
        if self.sweep.ratios.is_empty() {
            return Err(Error::Config("sweep.ratios must not be empty".into()));
        }
        for pair in self.sweep.ratios.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(format!(
                    "sweep.ratios must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        for &r in &self.sweep.ratios {
            if !(r.is_finite() && (0.0..=1.0).contains(&r)) {
                return Err(Error::InvalidRatio(r));
            }
        }
        if !(self.sweep.table_ratio.is_finite() && (0.0..=1.0).contains(&self.sweep.table_ratio)) {
            return Err(Error::InvalidRatio(self.sweep.table_ratio));
        }
        self.attack_config()?;
        self.substitution_mode()?;
        self.threshold()?;
        if let Some(lemma) = &self.lemma {
            if lemma.panels == 0 || lemma.panels % 2 != 0 {
                return Err(Error::InvalidPanels(lemma.panels));
            }
            if lemma.scales.is_empty() {
                return Err(Error::Config("lemma.scales must not be empty".into()));
            }
            for pair in lemma.scales.windows(2) {
                if pair[0] <= pair[1] {
                    return Err(Error::Config(
                        "lemma.scales must be strictly decreasing".into(),
                    ));
                }
            }
            if lemma.scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                return Err(Error::Config("lemma.scales must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::by_name(&self.model.arch, self.model.input_shape, self.model.classes)
    }

    pub fn metric_specs(&self) -> Result<Vec<MetricSpec>> {
        self.sweep
            .metrics
            .iter()
            .map(|m| MetricSpec::parse(m, self.sweep.sens_budget, self.sweep.sens_step))
            .collect()
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let matching = match self.attack.matching.as_str() {
            "cosine" => Matching::Cosine,
            "l2" => Matching::L2,
            other => {
                return Err(Error::Config(format!(
                    "unknown matching {other:?}; expected cosine or l2"
                )));
            }
        };
        Ok(AttackConfig {
            matching,
            alpha_tv: self.attack.alpha_tv,
            iterations: self.attack.iterations,
            restarts: self.attack.restarts,
            step_size: self.attack.step_size,
            signed: self.attack.signed,
            seed: self.attack.seed,
        })
    }

    pub fn substitution_mode(&self) -> Result<SubstitutionMode> {
        match self.defense.mode.as_str() {
            "exclude" => Ok(SubstitutionMode::Exclude),
            "bounded-noise" => {
                if !(self.defense.xi.is_finite() && self.defense.xi > 0.0) {
                    return Err(Error::InvalidNoiseBound(self.defense.xi));
                }
                Ok(SubstitutionMode::BoundedNoise {
                    xi: self.defense.xi,
                })
            }
            other => Err(Error::Config(format!(
                "unknown defense mode {other:?}; expected exclude or bounded-noise"
            ))),
        }
    }

    pub fn threshold(&self) -> Result<Threshold> {
        let metric = match self.protection.metric.as_str() {
            "mse" => ThresholdMetric::Mse,
            "psnr" => ThresholdMetric::Psnr,
            "ssim" => ThresholdMetric::Ssim,
            other => {
                return Err(Error::Config(format!(
                    "unknown protection metric {other:?}; expected mse, psnr, or ssim"
                )));
            }
        };
        let direction = match self.protection.direction.as_str() {
            "at-least" => Direction::AtLeast,
            "at-most" => Direction::AtMost,
            other => {
                return Err(Error::Config(format!(
                    "unknown protection direction {other:?}; expected at-least or at-most"
                )));
            }
        };
        if !self.protection.value.is_finite() {
            return Err(Error::Config("protection.value must be finite".into()));
        }
        Ok(Threshold {
            metric,
            direction,
            value: self.protection.value,
        })
    }

    /// Load the configured number of samples, checked against the model.
    pub fn load_samples(&self) -> Result<Vec<LabeledImage>> {
        let images = match self.dataset.source.as_str() {
            "synthetic" => synth_images(
                self.dataset.samples,
                self.dataset.seed,
                self.model.classes,
                self.model.input_shape,
            ),
            "cifar10" => read_cifar10_file(self.dataset.path.as_ref().unwrap())?,
            "cifar100" => read_cifar100_file(self.dataset.path.as_ref().unwrap())?,
            other => return Err(Error::Config(format!("unknown dataset source {other:?}"))),
        };
        if images.len() < self.dataset.samples {
            return Err(Error::Config(format!(
                "dataset holds {} samples, config asks for {}",
                images.len(),
                self.dataset.samples
            )));
        }
        let images: Vec<LabeledImage> = images.into_iter().take(self.dataset.samples).collect();
        for (i, img) in images.iter().enumerate() {
            if img.shape != self.model.input_shape {
                return Err(Error::ShapeMismatch {
                    context: "dataset sample",
                    expected: self.model.input_shape.to_vec(),
                    got: img.shape.to_vec(),
                });
            }
            if img.label >= self.model.classes {
                return Err(Error::Config(format!(
                    "sample {i} label {} out of range for {} classes",
                    img.label, self.model.classes
                )));
            }
        }
        Ok(images)
    }
}
