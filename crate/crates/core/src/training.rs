//! Loss assembly and the training loop.
//!
//! A step's total loss is `ce + lambda_adv * adv + lambda_vat * vat`, where
//! `adv` is cross-entropy under the variant's adversarial perturbation
//! (labels required) and `vat` is the KL divergence between the clean and
//! perturbed predictive distributions (labels never read). Perturbation
//! directions are detached constants: only the loss terms that consume them
//! backpropagate. The loop itself is single-threaded and, given a seed and
//! the deterministic kernels, bit-reproducible.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{
    at_perturbation_from_grads, vat_components, AdvConfig, Attachment, Perturbation, Variant,
};
use crate::data::{
    encode_batch, tokenize, CorpusSplit, LabelVocabulary, TokenBatch, Vocabulary,
};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::model::{
    forward, predict, save_checkpoint, supervised_gradients, ModelDims, ModelParams, ScoreKind,
};

/// Additive decomposition of one step's loss.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub adv: f64,
    pub vat: f64,
    pub lambda_adv: f64,
    pub lambda_vat: f64,
}

impl LossBreakdown {
    fn compose(ce: f64, adv: f64, vat: f64, lambda_adv: f64, lambda_vat: f64) -> Self {
        LossBreakdown {
            total: ce + lambda_adv * adv + lambda_vat * vat,
            ce,
            adv,
            vat,
            lambda_adv,
            lambda_vat,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ce.is_finite()
            && self.adv.is_finite()
            && self.vat.is_finite()
    }
}

/// Loss value, parameter gradients, and the perturbation that produced the
/// regularization term (when the variant has one).
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
    pub perturbation: Option<Perturbation>,
}

/// Mean cross-entropy of a labeled batch, no regularization.
pub fn supervised_loss(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
) -> Result<LossBreakdown> {
    Ok(supervised_loss_with_grads(params, batch, kind)?.breakdown)
}

pub fn supervised_loss_with_grads(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
) -> Result<LossOutput> {
    if !batch.is_labeled() {
        return Err(Error::invalid("supervised loss needs a labeled batch"));
    }
    let grads = supervised_gradients(params, batch, kind)?;
    Ok(LossOutput {
        breakdown: LossBreakdown::compose(grads.ce, 0.0, 0.0, 0.0, 0.0),
        grads: grads.param_grads,
        perturbation: None,
    })
}

/// Clean cross-entropy plus cross-entropy under the variant's adversarial
/// perturbation. The clean gradient both drives the perturbation and
/// contributes to the returned parameter gradients.
pub fn adversarial_loss(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    cfg: &AdvConfig,
    lambda_adv: f64,
) -> Result<LossBreakdown> {
    Ok(adversarial_loss_with_grads(params, batch, kind, cfg, lambda_adv)?.breakdown)
}

pub fn adversarial_loss_with_grads(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    cfg: &AdvConfig,
    lambda_adv: f64,
) -> Result<LossOutput> {
    if !cfg.variant.uses_adversarial() {
        return Err(Error::invalid(format!(
            "variant {} has no supervised adversarial term",
            cfg.variant.as_str()
        )));
    }
    if !batch.is_labeled() {
        return Err(Error::invalid("adversarial loss needs a labeled batch"));
    }
    cfg.validate()?;

    let clean = supervised_gradients(params, batch, kind)?;
    let perturbation =
        at_perturbation_from_grads(&clean, &batch.lengths, cfg.variant, cfg.epsilon)?;

    let mut pass = forward(params, batch, kind, Some(&perturbation))?;
    let adv_var = pass.mean_ce.expect("labeled batch has mean ce");
    pass.graph.backward(adv_var);
    let adv = pass.graph.value(adv_var)[(0, 0)];
    let adv_grads = pass.param_grads(params);

    let mut grads = clean.param_grads;
    for (dst, src) in grads.tensors_mut().into_iter().zip(adv_grads.tensors()) {
        dst.zip_mut_with(src, |a, &b| *a += lambda_adv * b);
    }
    Ok(LossOutput {
        breakdown: LossBreakdown::compose(clean.ce, adv, 0.0, lambda_adv, 0.0),
        grads,
        perturbation: Some(perturbation),
    })
}

/// KL divergence between the clean predictive distribution (held constant)
/// and the distribution under the virtual adversarial perturbation. Labels
/// are never read; the `ce` component of the breakdown is zero.
pub fn virtual_adversarial_loss<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    cfg: &AdvConfig,
    lambda_vat: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    Ok(virtual_adversarial_loss_with_grads(params, batch, kind, cfg, lambda_vat, rng)?.breakdown)
}

pub fn virtual_adversarial_loss_with_grads<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    cfg: &AdvConfig,
    lambda_vat: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    if !cfg.variant.uses_vat() {
        return Err(Error::invalid(format!(
            "variant {} has no virtual adversarial term",
            cfg.variant.as_str()
        )));
    }
    cfg.validate()?;
    let attachment = Attachment::AttentionScores;
    let unlabeled = batch.without_labels();
    let parts = vat_components(
        params,
        &unlabeled,
        kind,
        attachment,
        cfg.vat_xi,
        cfg.vat_power_iters,
        rng,
    )?;

    let perturbation = match parts.perturbation(cfg.variant, cfg.epsilon) {
        Some(p) => p,
        None => {
            // Flat KL surface: zero perturbation, zero divergence.
            let zero = Perturbation::zero(attachment, cfg.epsilon, parts.dim);
            return Ok(LossOutput {
                breakdown: LossBreakdown::compose(0.0, 0.0, 0.0, 0.0, lambda_vat),
                grads: params.zeros_like(),
                perturbation: Some(zero),
            });
        }
    };

    let mut pass = forward(params, &unlabeled, kind, Some(&perturbation))?;
    let kl_var = pass.add_mean_kl(&parts.reference);
    pass.graph.backward(kl_var);
    let vat = pass.graph.value(kl_var)[(0, 0)];
    let mut grads = pass.param_grads(params);
    for dst in grads.tensors_mut() {
        dst.mapv_inplace(|v| v * lambda_vat);
    }
    Ok(LossOutput {
        breakdown: LossBreakdown::compose(0.0, 0.0, vat, 0.0, lambda_vat),
        grads,
        perturbation: Some(perturbation),
    })
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(shape: &ModelParams, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shape.zeros_like(),
            v: shape.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let correction1 = 1.0 - b1.powi(self.step as i32);
        let correction2 = 1.0 - b2.powi(self.step as i32);
        let scale = self.learning_rate / correction1;
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let denom = (*v / correction2).sqrt() + self.eps;
                    *p -= scale * *m / denom;
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

/// Everything the loop needs for one run over one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub score_kind: ScoreKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub adv: AdvConfig,
    pub lambda_adv: f64,
    pub lambda_vat: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_freq: usize,
    pub t_max: usize,
    pub seed: u64,
    pub divergence_threshold: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            score_kind: ScoreKind::Additive,
            embed_dim: 100,
            hidden_dim: 128,
            attn_dim: 64,
            adv: AdvConfig::default(),
            lambda_adv: 1.0,
            lambda_vat: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            min_freq: 2,
            t_max: 64,
            seed: 13,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::invalid("max_epochs must be >= 1"));
        }
        if self.t_max < 1 {
            return Err(Error::invalid("t_max must be >= 1"));
        }
        if self.min_freq < 1 {
            return Err(Error::invalid("min_freq must be >= 1"));
        }
        self.adv.validate()
    }

    /// Stable hash over the serialized settings, stored in checkpoints.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("settings serialize");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One metrics line per optimizer step; `val_acc` is filled on the last
/// step of each epoch, right after validation runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub ce: f64,
    pub adv: f64,
    pub vat: f64,
    pub total: f64,
    pub val_acc: Option<f64>,
}

/// Mutable state of one run.
pub struct TrainState {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub step: u64,
    pub optimizer: Adam,
    pub seed: u64,
    pub best_val_acc: f64,
}

/// A finished run: final state, per-step metrics, and the vocabularies the
/// model was trained against.
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsRecord>,
    pub vocab: Vocabulary,
    pub labels: LabelVocabulary,
}

/// Output locations for checkpoints and the metrics log.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            final_checkpoint: dir.join("final.ckpt"),
            best_checkpoint: dir.join("best.ckpt"),
            metrics: dir.join("metrics.jsonl"),
        }
    }
}

/// Tokenize labeled examples, map their labels, and drop records that
/// tokenize to nothing (the model needs at least one real token).
pub fn prepare_labeled(
    examples: &[crate::data::LabeledExample],
    labels: &LabelVocabulary,
) -> Result<Vec<(Vec<String>, usize)>> {
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let tokens = tokenize(&e.text);
        if tokens.is_empty() {
            continue;
        }
        out.push((tokens, labels.class(&e.label)?));
    }
    Ok(out)
}

/// Chunk prepared examples into encoded batches in order.
pub fn batches_from(
    prepared: &[(Vec<String>, usize)],
    vocab: &Vocabulary,
    t_max: usize,
    batch_size: usize,
) -> Result<Vec<TokenBatch>> {
    prepared
        .chunks(batch_size)
        .map(|chunk| {
            let examples: Vec<(Vec<String>, Option<usize>)> = chunk
                .iter()
                .map(|(tokens, y)| (tokens.clone(), Some(*y)))
                .collect();
            encode_batch(&examples, vocab, t_max)
        })
        .collect()
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn evaluate_accuracy(
    params: &ModelParams,
    kind: ScoreKind,
    batches: &[TokenBatch],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("accuracy needs labeled batches"))?;
        let (preds, _) = predict(batch, params, kind, None)?;
        for (p, &y) in preds.iter().zip(labels) {
            if p.predicted_class() == y {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("accuracy over an empty split"));
    }
    Ok(correct as f64 / total as f64)
}

fn audit_enabled() -> bool {
    std::env::var("ATTNROBUST_PERT_AUDIT").map_or(false, |v| v == "1")
}

/// Run the full loop: epochs over shuffled labeled batches, an interleaved
/// unlabeled stream for the virtual variants, Adam steps on the composed
/// loss, early stopping on validation accuracy, and deterministic
/// checkpointing. Aborts with [`Error::Diverged`] when the total loss goes
/// non-finite or past the divergence threshold.
pub fn train(
    settings: &TrainSettings,
    corpus: &CorpusSplit,
    paths: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::invalid("corpus has no training examples"));
    }
    let labels = LabelVocabulary::from_train(&corpus.train)?;
    let train_set = prepare_labeled(&corpus.train, &labels)?;
    if train_set.is_empty() {
        return Err(Error::invalid("every training example tokenized to nothing"));
    }
    let train_tokens: Vec<Vec<String>> =
        train_set.iter().map(|(tokens, _)| tokens.clone()).collect();
    let vocab = Vocabulary::build(&train_tokens, settings.min_freq)?;
    let valid_set = prepare_labeled(&corpus.validation, &labels)?;
    let valid_batches = if valid_set.is_empty() {
        Vec::new()
    } else {
        batches_from(&valid_set, &vocab, settings.t_max, settings.batch_size)?
    };

    // Unlabeled stream for the virtual variants; falls back to the labeled
    // batches with labels stripped when the pool is empty.
    let pool: Vec<Vec<String>> = corpus
        .unlabeled_pool
        .iter()
        .map(|t| tokenize(t))
        .filter(|t| !t.is_empty())
        .collect();

    let dims = ModelDims {
        vocab: vocab.len(),
        embed: settings.embed_dim,
        hidden: settings.hidden_dim,
        attn: settings.attn_dim,
        classes: labels.len(),
    };
    let mut master = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut vat_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let mut params = ModelParams::init(dims, &mut init_rng);
    let mut optimizer = Adam::new(&params, settings.learning_rate);
    let mut history: Vec<MetricsRecord> = Vec::new();
    let mut best_params = params.clone();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut bad_epochs = 0usize;
    let mut step = 0u64;
    let variant = settings.adv.variant;
    let kind = settings.score_kind;

    let mut pool_order: Vec<usize> = (0..pool.len()).collect();
    let mut pool_cursor = pool.len(); // trigger shuffle on first use

    let mut metrics_file = match paths {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(&p.metrics)?)),
        None => None,
    };

    'epochs: for epoch in 0..settings.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let batch_starts: Vec<usize> = (0..order.len()).step_by(settings.batch_size).collect();

        for (bi, &start) in batch_starts.iter().enumerate() {
            let end = (start + settings.batch_size).min(order.len());
            let chunk: Vec<(Vec<String>, Option<usize>)> = order[start..end]
                .iter()
                .map(|&idx| (train_set[idx].0.clone(), Some(train_set[idx].1)))
                .collect();
            let batch = encode_batch(&chunk, &vocab, settings.t_max)?;

            let (breakdown, grads) = match variant {
                Variant::Vanilla => {
                    let out = supervised_loss_with_grads(&params, &batch, kind)?;
                    (out.breakdown, out.grads)
                }
                v if v.uses_adversarial() => {
                    if settings.lambda_adv == 0.0 {
                        // Weightless regularizer: skip the extra passes so a
                        // zero-lambda run is step-for-step the vanilla run.
                        let out = supervised_loss_with_grads(&params, &batch, kind)?;
                        (out.breakdown, out.grads)
                    } else {
                        let out = adversarial_loss_with_grads(
                            &params,
                            &batch,
                            kind,
                            &settings.adv,
                            settings.lambda_adv,
                        )?;
                        if audit_enabled() {
                            if let Some(p) = &out.perturbation {
                                eprintln!("{}", p.audit_line(variant));
                            }
                        }
                        (out.breakdown, out.grads)
                    }
                }
                _ => {
                    // Virtual variants: supervised term on the labeled batch
                    // plus KL on the next unlabeled batch.
                    let sup = supervised_loss_with_grads(&params, &batch, kind)?;
                    if settings.lambda_vat == 0.0 {
                        (sup.breakdown, sup.grads)
                    } else {
                        let vat_batch = if pool.is_empty() {
                            batch.without_labels()
                        } else {
                            let mut chunk = Vec::with_capacity(batch.batch_size());
                            for _ in 0..batch.batch_size() {
                                if pool_cursor >= pool_order.len() {
                                    pool_order.shuffle(&mut shuffle_rng);
                                    pool_cursor = 0;
                                }
                                chunk.push((pool[pool_order[pool_cursor]].clone(), None));
                                pool_cursor += 1;
                            }
                            encode_batch(&chunk, &vocab, settings.t_max)?
                        };
                        // Label hygiene: the virtual stream must not carry
                        // labels into the loss.
                        assert!(
                            !vat_batch.is_labeled(),
                            "unlabeled stream produced a labeled batch"
                        );
                        let vat_out = virtual_adversarial_loss_with_grads(
                            &params,
                            &vat_batch,
                            kind,
                            &settings.adv,
                            settings.lambda_vat,
                            &mut vat_rng,
                        )?;
                        if audit_enabled() {
                            if let Some(p) = &vat_out.perturbation {
                                eprintln!("{}", p.audit_line(variant));
                            }
                        }
                        let mut grads = sup.grads;
                        for (dst, src) in
                            grads.tensors_mut().into_iter().zip(vat_out.grads.tensors())
                        {
                            dst.zip_mut_with(src, |a, &b| *a += b);
                        }
                        let breakdown = LossBreakdown::compose(
                            sup.breakdown.ce,
                            0.0,
                            vat_out.breakdown.vat,
                            0.0,
                            settings.lambda_vat,
                        );
                        (breakdown, grads)
                    }
                }
            };

            if !breakdown.is_finite() || breakdown.total > settings.divergence_threshold {
                return Err(Error::Diverged {
                    step,
                    ce: breakdown.ce,
                    adv: breakdown.adv,
                    vat: breakdown.vat,
                    total: breakdown.total,
                });
            }
            optimizer.apply(&mut params, &grads);
            step += 1;

            let is_last_in_epoch = bi + 1 == batch_starts.len();
            let val_acc = if is_last_in_epoch && !valid_batches.is_empty() {
                Some(evaluate_accuracy(&params, kind, &valid_batches)?)
            } else {
                None
            };
            let record = MetricsRecord {
                step,
                epoch,
                ce: breakdown.ce,
                adv: breakdown.adv,
                vat: breakdown.vat,
                total: breakdown.total,
                val_acc,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", jsonfmt::to_string(&record)?)?;
            }
            history.push(record);

            if let Some(acc) = val_acc {
                if acc > best_val_acc {
                    best_val_acc = acc;
                    best_params = params.clone();
                    bad_epochs = 0;
                } else {
                    if acc == best_val_acc {
                        // Ties refresh the checkpoint (the regularizers keep
                        // shaping attention after accuracy saturates) but do
                        // not reset the patience clock.
                        best_params = params.clone();
                    }
                    bad_epochs += 1;
                    if bad_epochs >= settings.patience {
                        break 'epochs;
                    }
                }
            }
        }
    }
    drop(metrics_file);

    if best_val_acc == f64::NEG_INFINITY {
        best_params = params.clone();
    }
    if let Some(p) = paths {
        let hash = settings.config_hash();
        save_checkpoint(&params, kind, &hash, &p.final_checkpoint)?;
        save_checkpoint(&best_params, kind, &hash, &p.best_checkpoint)?;
    }
    Ok(TrainOutcome {
        state: TrainState {
            params,
            best_params,
            step,
            optimizer,
            seed: settings.seed,
            best_val_acc,
        },
        history,
        vocab,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledExample;
    use crate::synth::{sentiment_corpus, SynthSpec};
    use crate::test_support::{batch_of, plain_probs, random_params, tiny_dims};

    const KIND: ScoreKind = ScoreKind::Additive;

    fn adv_cfg(variant: Variant, epsilon: f64) -> AdvConfig {
        AdvConfig {
            variant,
            epsilon,
            vat_xi: 1.0,
            vat_power_iters: 1,
        }
    }

    #[test]
    fn supervised_loss_uniform_predictor_is_ln2() {
        let mut params = random_params(tiny_dims(6, 2), 40);
        params.clf_w.fill(0.0);
        params.clf_b.fill(0.0);
        let batch = batch_of(&["alpha beta", "gamma delta"], Some(&[0, 1]), 4);
        let out = supervised_loss(&params, &batch, KIND).unwrap();
        approx::assert_abs_diff_eq!(out.ce, (2.0f64).ln(), epsilon = 1e-12);
        assert_eq!(out.total, out.ce);
    }

    #[test]
    fn supervised_loss_saturated_predictor_is_zero() {
        // A huge class bias drives the softmax to an exact one-hot in f64.
        let mut params = random_params(tiny_dims(6, 2), 41);
        params.clf_w.fill(0.0);
        params.clf_b[(0, 0)] = 1000.0;
        params.clf_b[(1, 0)] = -1000.0;
        let batch = batch_of(&["alpha beta"], Some(&[0]), 4);
        let out = supervised_loss(&params, &batch, KIND).unwrap();
        assert_eq!(out.ce, 0.0);
    }

    #[test]
    fn supervised_loss_matches_per_example_loop() {
        let params = random_params(tiny_dims(6, 3), 42);
        let batch = batch_of(
            &["alpha beta gamma", "delta alpha", "beta beta beta gamma"],
            Some(&[0, 2, 1]),
            5,
        );
        let out = supervised_loss(&params, &batch, KIND).unwrap();
        let probs = plain_probs(&params, &batch, KIND, None);
        let labels = batch.labels.as_ref().unwrap();
        let expect: f64 = probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| -p[y].ln())
            .sum::<f64>()
            / labels.len() as f64;
        approx::assert_abs_diff_eq!(out.ce, expect, epsilon = 1e-12);
        assert!(supervised_loss(&params, &batch.without_labels(), KIND).is_err());
    }

    #[test]
    fn adversarial_loss_approaches_ce_as_epsilon_vanishes() {
        let params = random_params(tiny_dims(6, 2), 43);
        let batch = batch_of(&["alpha beta gamma", "delta alpha"], Some(&[0, 1]), 4);
        let out =
            adversarial_loss(&params, &batch, KIND, &adv_cfg(Variant::AttentionAt, 1e-9), 1.0)
                .unwrap();
        assert!((out.adv - out.ce).abs() < 1e-6, "{} vs {}", out.adv, out.ce);
    }

    #[test]
    fn adversarial_loss_zero_gradient_batch_has_adv_equal_ce() {
        let params = ModelParams::zeros(tiny_dims(6, 2));
        let batch = batch_of(&["alpha beta"], Some(&[0]), 4);
        let out =
            adversarial_loss(&params, &batch, KIND, &adv_cfg(Variant::AttentionAt, 2.0), 1.0)
                .unwrap();
        assert_eq!(out.adv, out.ce);
    }

    #[test]
    fn adversarial_loss_matches_replay_with_dumped_perturbation() {
        for variant in [Variant::AttentionAt, Variant::AttentionIat, Variant::WordAt] {
            let params = random_params(tiny_dims(6, 2), 44);
            let batch = batch_of(&["alpha beta gamma delta", "beta delta"], Some(&[1, 0]), 4);
            let out =
                adversarial_loss_with_grads(&params, &batch, KIND, &adv_cfg(variant, 1.5), 1.0)
                    .unwrap();
            let pert = out.perturbation.expect("adversarial variants perturb");
            // Replay: a fresh perturbed pass through the tape must give the
            // same adversarial term.
            let mut pass = forward(&params, &batch, KIND, Some(&pert)).unwrap();
            let ce_var = pass.mean_ce.unwrap();
            pass.graph.backward(ce_var);
            let replay = pass.graph.value(ce_var)[(0, 0)];
            assert_eq!(out.breakdown.adv, replay, "variant {}", variant.as_str());
            // Decomposition identity at the step level.
            let b = out.breakdown;
            assert_eq!(b.total, b.ce + b.lambda_adv * b.adv + b.lambda_vat * b.vat);
        }
    }

    #[test]
    fn vat_loss_is_zero_for_flat_model_and_matches_direct_kl() {
        // Flat model: zero parameters give a constant predictive
        // distribution, so the virtual term vanishes with a zero direction.
        let flat = ModelParams::zeros(tiny_dims(6, 2));
        let batch = batch_of(&["alpha beta gamma"], None, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = virtual_adversarial_loss(
            &flat,
            &batch,
            KIND,
            &adv_cfg(Variant::AttentionVat, 1.0),
            1.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.vat, 0.0);

        // Direct KL oracle: recompute KL(p0 || p_perturbed) from the two
        // categorical vectors produced by predict.
        let params = random_params(tiny_dims(6, 2), 45);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = virtual_adversarial_loss_with_grads(
            &params,
            &batch,
            KIND,
            &adv_cfg(Variant::AttentionVat, 1.0),
            1.0,
            &mut rng,
        )
        .unwrap();
        let pert = out.perturbation.unwrap();
        let (clean, _) = predict(&batch, &params, KIND, None).unwrap();
        let (pushed, _) = predict(&batch, &params, KIND, Some(&pert)).unwrap();
        let kl: f64 = clean[0]
            .probs
            .iter()
            .zip(&pushed[0].probs)
            .filter(|(&p0, _)| p0 > 0.0)
            .map(|(&p0, &p1)| p0 * (p0.ln() - p1.ln()))
            .sum();
        approx::assert_abs_diff_eq!(out.breakdown.vat, kl, epsilon = 1e-9);
    }

    #[test]
    fn vat_loss_ignores_labels() {
        let params = random_params(tiny_dims(6, 2), 46);
        let labeled = batch_of(&["alpha beta gamma", "delta beta"], Some(&[0, 1]), 4);
        let run = |batch: &TokenBatch| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            virtual_adversarial_loss(
                &params,
                batch,
                KIND,
                &adv_cfg(Variant::AttentionIvat, 1.0),
                1.0,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(&labeled);
        let b = run(&labeled.without_labels());
        assert_eq!(a.vat, b.vat);
        assert_eq!(a.ce, 0.0);
    }

    fn fast_settings(variant: Variant, seed: u64) -> TrainSettings {
        TrainSettings {
            embed_dim: 12,
            hidden_dim: 10,
            attn_dim: 8,
            adv: adv_cfg(variant, 1.0),
            learning_rate: 5e-3,
            batch_size: 8,
            max_epochs: 6,
            patience: 10,
            min_freq: 1,
            t_max: 16,
            seed,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn training_fits_a_separable_corpus() {
        let corpus = sentiment_corpus(&SynthSpec {
            train: 24,
            valid: 0,
            test: 0,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 9,
        });
        let mut settings = fast_settings(Variant::Vanilla, 20);
        settings.max_epochs = 50;
        settings.learning_rate = 1e-2;
        let outcome = train(&settings, &corpus, None).unwrap();
        let prepared = prepare_labeled(&corpus.train, &outcome.labels).unwrap();
        let batches =
            batches_from(&prepared, &outcome.vocab, settings.t_max, settings.batch_size)
                .unwrap();
        let acc =
            evaluate_accuracy(&outcome.state.params, settings.score_kind, &batches).unwrap();
        assert_eq!(acc, 1.0, "training accuracy should saturate");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let corpus = sentiment_corpus(&SynthSpec {
            train: 32,
            valid: 16,
            test: 0,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 10,
        });
        let settings = fast_settings(Variant::AttentionAt, 21);
        let a = train(&settings, &corpus, None).unwrap();
        let b = train(&settings, &corpus, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state.params, b.state.params);
        // Loss decomposition holds at every logged step.
        for r in &a.history {
            assert_eq!(r.total, r.ce + 1.0 * r.adv + 1.0 * r.vat);
        }
    }

    #[test]
    fn zero_lambda_matches_vanilla_step_for_step() {
        let corpus = sentiment_corpus(&SynthSpec {
            train: 32,
            valid: 16,
            test: 0,
            unlabeled: 24,
            out_of_domain_pool: false,
            seed: 11,
        });
        let vanilla = train(&fast_settings(Variant::Vanilla, 22), &corpus, None).unwrap();
        let mut at = fast_settings(Variant::WordAt, 22);
        at.lambda_adv = 0.0;
        let at_run = train(&at, &corpus, None).unwrap();
        assert_eq!(vanilla.history, at_run.history);
        assert_eq!(vanilla.state.params, at_run.state.params);
        let mut vat = fast_settings(Variant::AttentionVat, 22);
        vat.lambda_vat = 0.0;
        let vat_run = train(&vat, &corpus, None).unwrap();
        assert_eq!(vanilla.history, vat_run.history);
        assert_eq!(vanilla.state.params, vat_run.state.params);
    }

    #[test]
    fn vat_training_degrades_gracefully_without_pool() {
        let corpus = sentiment_corpus(&SynthSpec {
            train: 24,
            valid: 8,
            test: 0,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 12,
        });
        let mut settings = fast_settings(Variant::AttentionVat, 23);
        settings.max_epochs = 2;
        let outcome = train(&settings, &corpus, None).unwrap();
        assert!(outcome.history.iter().all(|r| r.vat.is_finite()));
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let corpus = sentiment_corpus(&SynthSpec {
            train: 16,
            valid: 0,
            test: 0,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 13,
        });
        let mut settings = fast_settings(Variant::Vanilla, 24);
        settings.divergence_threshold = 1e-9;
        match train(&settings, &corpus, None) {
            Err(Error::Diverged { step, total, .. }) => {
                assert_eq!(step, 0);
                assert!(total > 1e-9);
            }
            other => panic!("expected divergence, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn checkpoints_reproduce_validation_accuracy_exactly() {
        let corpus = sentiment_corpus(&SynthSpec {
            train: 32,
            valid: 16,
            test: 0,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 14,
        });
        let settings = fast_settings(Variant::Vanilla, 25);
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::in_dir(dir.path());
        let outcome = train(&settings, &corpus, Some(&paths)).unwrap();

        let prepared = prepare_labeled(&corpus.validation, &outcome.labels).unwrap();
        let batches =
            batches_from(&prepared, &outcome.vocab, settings.t_max, settings.batch_size)
                .unwrap();
        let live = evaluate_accuracy(&outcome.state.best_params, KIND, &batches).unwrap();
        assert_eq!(live, outcome.state.best_val_acc);

        let (loaded, kind, hash) =
            crate::model::load_checkpoint(&paths.best_checkpoint).unwrap();
        assert_eq!(hash, settings.config_hash());
        let reloaded = evaluate_accuracy(&loaded, kind, &batches).unwrap();
        assert_eq!(reloaded, outcome.state.best_val_acc);
        assert_eq!(loaded, outcome.state.best_params);

        // Metrics file round-trips line by line.
        let text = std::fs::read_to_string(&paths.metrics).unwrap();
        let parsed: Vec<MetricsRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, outcome.history);
    }

    #[test]
    fn unseen_validation_label_is_an_error() {
        let mut corpus = sentiment_corpus(&SynthSpec {
            train: 8,
            valid: 4,
            test: 0,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 15,
        });
        corpus.validation.push(LabeledExample {
            text: "strange movie".into(),
            label: "neutral".into(),
        });
        let settings = fast_settings(Variant::Vanilla, 26);
        assert!(matches!(
            train(&settings, &corpus, None),
            Err(Error::UnknownLabel(_))
        ));
    }
}
