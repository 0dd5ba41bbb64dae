//! One round of weighted federated averaging with selective encryption.
//!
//! Every client walks its shard with per-sample SGD, scales its update by
//! its aggregation weight, and splits the result along a shared round mask:
//! unmasked coordinates travel in the clear, masked ones inside additively
//! homomorphic ciphertexts. The server folds both halves in client order,
//! so the updated parameters are bit-for-bit the plaintext FedAvg result.
//! The round also records what a wire eavesdropper sees of each client's
//! first gradient, the input the attack machinery consumes.

use serde::Serialize;

use crate::attack::{invert_with_exec, AttackConfig};
use crate::data::LabeledImage;
use crate::encryption::{
    attacker_view, mock_add, mock_decrypt, mock_encrypt, top_s_mask, AttackerView,
    EncryptionMask, SubstitutionMode,
};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::model::{Model, ParamVector};
use crate::parallel::Execution;
use crate::quality::{quality, QualityReport};
use crate::significance::{score_metric, MetricSpec};

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ClientSpec {
    pub shard: Vec<LabeledImage>,
    /// Aggregation weight; all weights must sum to 1.
    pub weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FedRoundConfig {
    pub ratio: f64,
    pub metric: MetricSpec,
    pub mode: SubstitutionMode,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FedRoundConfig {
    fn default() -> Self {
        FedRoundConfig {
            ratio: 0.3,
            metric: MetricSpec::Grad,
            mode: SubstitutionMode::Exclude,
            local_epochs: 1,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// A client upload as seen from the wire, plus the ground truth needed to
/// judge a reconstruction against it.
#[derive(Clone, Debug)]
pub struct Intercept {
    pub client: usize,
    pub view: AttackerView,
    pub x0: Vec<f64>,
    pub shape: [usize; 3],
    pub label: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClientSummary {
    pub client: usize,
    pub weight: f64,
    pub samples: usize,
    pub update_norm: f64,
    pub plain_coords: usize,
    pub cipher_coords: usize,
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub updated: ParamVector,
    pub mask: EncryptionMask,
    pub intercepts: Vec<Intercept>,
    pub clients: Vec<ClientSummary>,
    pub aggregate_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundTranscript {
    pub ratio_requested: f64,
    pub encrypted_coords: usize,
    pub total_coords: usize,
    pub aggregate_norm: f64,
    pub clients: Vec<ClientSummary>,
}

impl RoundOutcome {
    pub fn transcript(&self) -> RoundTranscript {
        RoundTranscript {
            ratio_requested: self.mask.requested_ratio,
            encrypted_coords: self.mask.count_ones(),
            total_coords: self.mask.len(),
            aggregate_norm: self.aggregate_norm,
            clients: self.clients.clone(),
        }
    }
}

fn validate_clients(model: &Model, clients: &[ClientSpec]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let mut sum = 0.0;
    for (i, c) in clients.iter().enumerate() {
        if c.shard.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        if !(c.weight.is_finite() && c.weight > 0.0) {
            return Err(Error::Config(format!(
                "client {i} weight {} must be positive",
                c.weight
            )));
        }
        for img in &c.shard {
            if img.shape != model.spec().input_shape {
                return Err(Error::ShapeMismatch {
                    context: "client sample",
                    expected: model.spec().input_shape.to_vec(),
                    got: img.shape.to_vec(),
                });
            }
        }
        sum += c.weight;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!(
            "client weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn local_update(
    model: &Model,
    global: &ParamVector,
    client: &ClientSpec,
    cfg: &FedRoundConfig,
) -> Result<Vec<f64>> {
    let mut theta = global.clone();
    for _ in 0..cfg.local_epochs {
        for img in &client.shard {
            let (_, g) = model.loss_and_grad_label(&theta, &img.pixels, img.label)?;
            for (t, gi) in theta.values.iter_mut().zip(&g.values) {
                *t -= cfg.learning_rate * gi;
            }
        }
    }
    Ok(theta
        .values
        .iter()
        .zip(&global.values)
        .map(|(t, g)| client.weight * (t - g))
        .collect())
}

pub fn run_round(
    model: &Model,
    global: &ParamVector,
    clients: &[ClientSpec],
    cfg: &FedRoundConfig,
) -> Result<RoundOutcome> {
    run_round_with_exec(model, global, clients, cfg, Execution::Auto)
}

pub fn run_round_with_exec(
    model: &Model,
    global: &ParamVector,
    clients: &[ClientSpec],
    cfg: &FedRoundConfig,
    exec: Execution,
) -> Result<RoundOutcome> {
    validate_clients(model, clients)?;
    if cfg.local_epochs == 0 {
        return Err(Error::Config("local_epochs must be at least 1".into()));
    }

    // Client 0's first sample calibrates the shared round mask; every
    // client must split the same coordinates or the sums would not align.
    let cal = &clients[0].shard[0];
    let (_, g_cal) = model.loss_and_grad_label(global, &cal.pixels, cal.label)?;
    let scores = score_metric(model, global, &g_cal, &cal.pixels, cal.label, cfg.metric, exec)?;
    let mask = top_s_mask(&scores, cfg.ratio)?;
    let masked_idx = mask.indices();

    let m = global.values.len();
    let key_id = cfg.seed;

    let mut summaries = Vec::with_capacity(clients.len());
    let mut plain_acc = vec![0.0; m];
    let mut cipher_acc = mock_encrypt(&vec![0.0; masked_idx.len()], key_id);
    for (ci, client) in clients.iter().enumerate() {
        let scaled = local_update(model, global, client, cfg)?;
        for (i, acc) in plain_acc.iter_mut().enumerate() {
            if !mask.bits[i] {
                *acc += scaled[i];
            }
        }
        let masked_part: Vec<f64> = masked_idx.iter().map(|&i| scaled[i]).collect();
        cipher_acc = mock_add(&cipher_acc, &mock_encrypt(&masked_part, key_id))?;
        summaries.push(ClientSummary {
            client: ci,
            weight: client.weight,
            samples: client.shard.len(),
            update_norm: scaled.iter().map(|v| v * v).sum::<f64>().sqrt(),
            plain_coords: m - masked_idx.len(),
            cipher_coords: masked_idx.len(),
        });
    }
    let cipher_sum = mock_decrypt(&cipher_acc, key_id)?;

    let mut updated = global.clone();
    let mut aggregate_sq = 0.0;
    for i in 0..m {
        if !mask.bits[i] {
            updated.values[i] += plain_acc[i];
            aggregate_sq += plain_acc[i] * plain_acc[i];
        }
    }
    for (j, &i) in masked_idx.iter().enumerate() {
        updated.values[i] += cipher_sum[j];
        aggregate_sq += cipher_sum[j] * cipher_sum[j];
    }

    let mut intercepts = Vec::with_capacity(clients.len());
    for (ci, client) in clients.iter().enumerate() {
        let img = &client.shard[0];
        let (_, g) = model.loss_and_grad_label(global, &img.pixels, img.label)?;
        intercepts.push(Intercept {
            client: ci,
            view: attacker_view(&g, &mask, cfg.mode, mix_seed(cfg.seed, ci as u64))?,
            x0: img.pixels.clone(),
            shape: img.shape,
            label: img.label,
        });
    }

    Ok(RoundOutcome {
        updated,
        mask,
        intercepts,
        clients: summaries,
        aggregate_norm: aggregate_sq.sqrt(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AdversaryReport {
    pub client: usize,
    pub label: usize,
    pub quality: QualityReport,
    pub rec_loss: f64,
    pub restart_index: usize,
    pub wall_seconds: f64,
}

/// Run the inversion attack against every intercepted upload and score the
/// reconstructions against the ground-truth samples.
pub fn adversary_pipeline(
    model: &Model,
    global: &ParamVector,
    intercepts: &[Intercept],
    cfg: &AttackConfig,
    exec: Execution,
) -> Result<Vec<AdversaryReport>> {
    intercepts
        .iter()
        .map(|it| {
            let rec = invert_with_exec(model, global, it.label, &it.view, cfg, exec)?;
            let q = quality(&it.x0, &rec.x_star, it.shape)?;
            Ok(AdversaryReport {
                client: it.client,
                label: it.label,
                quality: q,
                rec_loss: rec.final_rec_loss,
                restart_index: rec.restart_index,
                wall_seconds: rec.wall_seconds,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Matching;
    use crate::data::synth_images;
    use crate::model::{Model, ModelSpec};

    fn setup() -> (Model, ParamVector, Vec<ClientSpec>) {
        let (model, params) =
            Model::build(ModelSpec::lenet_small([1, 8, 8], 4), 71).unwrap();
        let imgs = synth_images(6, 5, 4, [1, 8, 8]);
        let clients = vec![
            ClientSpec {
                shard: imgs[0..2].to_vec(),
                weight: 0.25,
            },
            ClientSpec {
                shard: imgs[2..3].to_vec(),
                weight: 0.25,
            },
            ClientSpec {
                shard: imgs[3..6].to_vec(),
                weight: 0.5,
            },
        ];
        (model, params, clients)
    }

    /// Plaintext FedAvg with the same fold order as the server.
    fn fedavg_oracle(
        model: &Model,
        global: &ParamVector,
        clients: &[ClientSpec],
        cfg: &FedRoundConfig,
    ) -> Vec<f64> {
        let mut acc = vec![0.0; global.values.len()];
        for client in clients {
            let scaled = local_update(model, global, client, cfg).unwrap();
            for (a, s) in acc.iter_mut().zip(&scaled) {
                *a += s;
            }
        }
        global
            .values
            .iter()
            .zip(&acc)
            .map(|(g, a)| g + a)
            .collect()
    }

    #[test]
    fn round_matches_plaintext_fedavg_bitwise() {
        let (model, params, clients) = setup();
        let cfg = FedRoundConfig::default();
        let want = fedavg_oracle(&model, &params, &clients, &cfg);
        let out = run_round(&model, &params, &clients, &cfg).unwrap();
        assert_eq!(out.updated.values.len(), want.len());
        for (u, w) in out.updated.values.iter().zip(&want) {
            assert_eq!(u.to_bits(), w.to_bits());
        }

        // Substitution mode changes intercepts only, not the aggregate.
        let noisy = FedRoundConfig {
            mode: SubstitutionMode::BoundedNoise { xi: 0.1 },
            ..cfg
        };
        let out2 = run_round(&model, &params, &clients, &noisy).unwrap();
        for (u, w) in out2.updated.values.iter().zip(&want) {
            assert_eq!(u.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn mask_counts_and_summaries() {
        let (model, params, clients) = setup();
        let out = run_round(&model, &params, &clients, &FedRoundConfig::default()).unwrap();
        let m = params.values.len();
        let s = (0.3f64 * m as f64).ceil() as usize;
        assert_eq!(out.mask.count_ones(), s);
        assert_eq!(out.clients.len(), 3);
        for (ci, cs) in out.clients.iter().enumerate() {
            assert_eq!(cs.client, ci);
            assert_eq!(cs.plain_coords + cs.cipher_coords, m);
            assert_eq!(cs.cipher_coords, s);
            assert!(cs.update_norm > 0.0);
        }
        assert_eq!(out.clients[2].samples, 3);
        let t = out.transcript();
        assert_eq!(t.encrypted_coords, s);
        assert_eq!(t.total_coords, m);
        serde_json::to_string(&t).unwrap();
    }

    #[test]
    fn intercepts_respect_substitution_mode() {
        let (model, params, clients) = setup();
        let cfg = FedRoundConfig::default();
        let out = run_round(&model, &params, &clients, &cfg).unwrap();
        assert_eq!(out.intercepts.len(), 3);
        for it in &out.intercepts {
            let (_, g) = model
                .loss_and_grad_label(&params, &it.x0, it.label)
                .unwrap();
            for i in 0..g.values.len() {
                if out.mask.bits[i] {
                    assert!(!it.view.known[i]);
                    assert_eq!(it.view.values[i], 0.0);
                } else {
                    assert!(it.view.known[i]);
                    assert_eq!(it.view.values[i].to_bits(), g.values[i].to_bits());
                }
            }
        }

        let noisy = FedRoundConfig {
            mode: SubstitutionMode::BoundedNoise { xi: 0.05 },
            ..cfg
        };
        let out2 = run_round(&model, &params, &clients, &noisy).unwrap();
        for it in &out2.intercepts {
            let (_, g) = model
                .loss_and_grad_label(&params, &it.x0, it.label)
                .unwrap();
            assert!(it.view.known.iter().all(|k| *k));
            for i in 0..g.values.len() {
                if out2.mask.bits[i] {
                    // Substituted, not perturbed: the draw lives in [-xi, xi].
                    assert!(it.view.values[i].abs() <= 0.05);
                } else {
                    assert_eq!(it.view.values[i].to_bits(), g.values[i].to_bits());
                }
            }
        }
        // Different clients draw different noise.
        assert_ne!(out2.intercepts[0].view.values, out2.intercepts[1].view.values);
    }

    #[test]
    fn client_validation_errors() {
        let (model, params, mut clients) = setup();
        clients[0].weight = 0.15;
        assert!(matches!(
            run_round(&model, &params, &clients, &FedRoundConfig::default()),
            Err(Error::Config(_))
        ));
        clients[0].weight = -0.25;
        assert!(matches!(
            run_round(&model, &params, &clients, &FedRoundConfig::default()),
            Err(Error::Config(_))
        ));
        clients[0].weight = 0.25;
        clients[1].shard.clear();
        assert!(matches!(
            run_round(&model, &params, &clients, &FedRoundConfig::default()),
            Err(Error::Empty("client shard"))
        ));
    }

    #[test]
    fn adversary_pipeline_scores_each_intercept() {
        let (model, params, clients) = setup();
        let out = run_round(&model, &params, &clients, &FedRoundConfig::default()).unwrap();
        let atk = AttackConfig {
            matching: Matching::Cosine,
            alpha_tv: 1e-4,
            iterations: 30,
            restarts: 1,
            seed: 3,
            ..AttackConfig::default()
        };
        let reports =
            adversary_pipeline(&model, &params, &out.intercepts, &atk, Execution::Auto).unwrap();
        assert_eq!(reports.len(), 3);
        for (ci, r) in reports.iter().enumerate() {
            assert_eq!(r.client, ci);
            assert!(r.rec_loss.is_finite());
            assert!(r.quality.mse.is_finite());
            serde_json::to_string(r).unwrap();
        }
    }
}
