//! Adversarial and virtual-adversarial perturbation directions.
//!
//! All perturbations are pure functions of (model snapshot, batch, magnitude)
//! plus an explicit RNG for the virtual variants. They attach either to the
//! word embeddings or to the attention scores, always as a single direction
//! flattened over the masked-in positions of the whole batch tensor, L2
//! normalized and scaled by epsilon. A vanishing generating gradient yields
//! the zero perturbation rather than an error: training hits that case at
//! perfect-confidence saturation and must not abort.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{forward, supervised_gradients, ModelParams, ScoreKind};

/// Guard against division by zero in the deviation weighting.
const DEVIATION_EPS: f64 = 1e-8;

/// Where a perturbation is added during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    WordEmbedding,
    AttentionScores,
}

impl Attachment {
    pub fn as_str(self) -> &'static str {
        match self {
            Attachment::WordEmbedding => "word_embedding",
            Attachment::AttentionScores => "attention_scores",
        }
    }
}

/// Training variant. `Vanilla` adds no regularization term; the others name
/// the perturbation construction and its attachment point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    WordAt,
    AttentionAt,
    AttentionIat,
    AttentionVat,
    AttentionIvat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vanilla,
        Variant::WordAt,
        Variant::AttentionAt,
        Variant::AttentionIat,
        Variant::AttentionVat,
        Variant::AttentionIvat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::WordAt => "word_at",
            Variant::AttentionAt => "attention_at",
            Variant::AttentionIat => "attention_iat",
            Variant::AttentionVat => "attention_vat",
            Variant::AttentionIvat => "attention_ivat",
        }
    }

    /// Supervised adversarial term (needs labels).
    pub fn uses_adversarial(self) -> bool {
        matches!(
            self,
            Variant::WordAt | Variant::AttentionAt | Variant::AttentionIat
        )
    }

    /// Virtual adversarial term (label-free).
    pub fn uses_vat(self) -> bool {
        matches!(self, Variant::AttentionVat | Variant::AttentionIvat)
    }

    pub fn attachment(self) -> Option<Attachment> {
        match self {
            Variant::Vanilla => None,
            Variant::WordAt => Some(Attachment::WordEmbedding),
            _ => Some(Attachment::AttentionScores),
        }
    }
}

/// Configuration for the adversarial loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdvConfig {
    pub variant: Variant,
    /// L2 budget of the realized perturbation.
    pub epsilon: f64,
    /// Finite-difference scale of the virtual-adversarial power iteration.
    pub vat_xi: f64,
    pub vat_power_iters: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            variant: Variant::Vanilla,
            epsilon: 1.0,
            vat_xi: 1.0,
            vat_power_iters: 1,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant != Variant::Vanilla && self.epsilon <= 0.0 {
            return Err(Error::invalid(format!(
                "epsilon must be > 0 for variant {}, got {}",
                self.variant.as_str(),
                self.epsilon
            )));
        }
        if self.variant.uses_vat() {
            if self.vat_xi <= 0.0 {
                return Err(Error::invalid(format!(
                    "vat_xi must be > 0, got {}",
                    self.vat_xi
                )));
            }
            if self.vat_power_iters < 1 {
                return Err(Error::invalid("vat_power_iters must be >= 1"));
            }
        }
        Ok(())
    }
}

/// A direction-plus-magnitude perturbation flattened over the masked-in
/// positions of its attachment tensor: examples in batch order, tokens in
/// position order, and for word embeddings the coordinate index innermost.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub attachment: Attachment,
    /// Unit vector, or all zeros when the generating gradient vanished.
    pub direction: Vec<f64>,
    pub epsilon: f64,
    /// `direction * epsilon`.
    pub realized: Vec<f64>,
}

impl Perturbation {
    fn from_direction(attachment: Attachment, direction: Vec<f64>, epsilon: f64) -> Self {
        let realized = direction.iter().map(|&v| v * epsilon).collect();
        Perturbation {
            attachment,
            direction,
            epsilon,
            realized,
        }
    }

    /// The no-op perturbation of the right flattened size.
    pub fn zero(attachment: Attachment, epsilon: f64, len: usize) -> Self {
        Perturbation {
            attachment,
            direction: vec![0.0; len],
            epsilon,
            realized: vec![0.0; len],
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.realized)
    }

    /// Expected flattened length for `batch` at this attachment.
    pub fn flattened_len(&self, batch: &TokenBatch, embed_dim: usize) -> usize {
        match self.attachment {
            Attachment::AttentionScores => batch.masked_in(),
            Attachment::WordEmbedding => batch.masked_in() * embed_dim,
        }
    }

    /// Split the realized vector into per-example score slices.
    pub fn score_slices(&self, batch: &TokenBatch) -> Vec<Vec<f64>> {
        assert_eq!(self.attachment, Attachment::AttentionScores);
        let mut out = Vec::with_capacity(batch.batch_size());
        let mut offset = 0;
        for &len in &batch.lengths {
            out.push(self.realized[offset..offset + len].to_vec());
            offset += len;
        }
        out
    }

    /// Split the realized vector into per-example `(d, T)` embedding slices.
    pub fn embed_slices(&self, batch: &TokenBatch, embed_dim: usize) -> Vec<Array2<f64>> {
        assert_eq!(self.attachment, Attachment::WordEmbedding);
        let mut out = Vec::with_capacity(batch.batch_size());
        let mut offset = 0;
        for &len in &batch.lengths {
            let mut slice = Array2::zeros((embed_dim, len));
            for t in 0..len {
                for j in 0..embed_dim {
                    slice[(j, t)] = self.realized[offset + t * embed_dim + j];
                }
            }
            offset += len * embed_dim;
            out.push(slice);
        }
        out
    }

    /// One-line JSON audit record.
    pub fn audit_line(&self, variant: Variant) -> String {
        format!(
            r#"{{"variant":"{}","epsilon":{},"norm":{},"attachment":"{}"}}"#,
            variant.as_str(),
            self.epsilon,
            self.norm(),
            self.attachment.as_str()
        )
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Scale to unit L2 norm; `None` when the input is exactly zero.
pub(crate) fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 {
        None
    } else {
        Some(v.iter().map(|&x| x / n).collect())
    }
}

/// Build the supervised adversarial perturbation for an AT variant from an
/// already-computed gradient pass.
pub(crate) fn at_perturbation_from_grads(
    grads: &crate::model::LossGradients,
    lengths: &[usize],
    variant: Variant,
    epsilon: f64,
) -> Result<Perturbation> {
    match variant {
        Variant::WordAt => {
            let attachment = Attachment::WordEmbedding;
            Ok(match normalize(&grads.embed_grads) {
                Some(d) => Perturbation::from_direction(attachment, d, epsilon),
                None => Perturbation::zero(attachment, epsilon, grads.embed_grads.len()),
            })
        }
        Variant::AttentionAt => {
            let attachment = Attachment::AttentionScores;
            Ok(match normalize(&grads.score_grads) {
                Some(d) => Perturbation::from_direction(attachment, d, epsilon),
                None => Perturbation::zero(attachment, epsilon, grads.score_grads.len()),
            })
        }
        Variant::AttentionIat => {
            let attachment = Attachment::AttentionScores;
            let weights = deviation_weights(&grads.scores, lengths);
            let weighted: Vec<f64> = grads
                .score_grads
                .iter()
                .zip(&weights)
                .map(|(&g, &w)| g * w)
                .collect();
            if let Some(d) = normalize(&weighted) {
                return Ok(Perturbation::from_direction(attachment, d, epsilon));
            }
            // Uniform-score degenerate case: plain AT direction.
            Ok(match normalize(&grads.score_grads) {
                Some(d) => Perturbation::from_direction(attachment, d, epsilon),
                None => Perturbation::zero(attachment, epsilon, grads.score_grads.len()),
            })
        }
        other => Err(Error::invalid(format!(
            "variant {} is not a supervised adversarial variant",
            other.as_str()
        ))),
    }
}

/// Fast-gradient adversarial direction: normalize the gradient of the
/// supervised loss at the attachment tensor and scale by epsilon. The
/// gradient is a detached constant in the loss that later consumes it.
pub fn perturb_at(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    attachment: Attachment,
    epsilon: f64,
) -> Result<Perturbation> {
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    if !batch.is_labeled() {
        return Err(Error::invalid(
            "adversarial perturbations need a labeled batch",
        ));
    }
    let grads = supervised_gradients(params, batch, kind)?;
    let variant = match attachment {
        Attachment::WordEmbedding => Variant::WordAt,
        Attachment::AttentionScores => Variant::AttentionAt,
    };
    at_perturbation_from_grads(&grads, &batch.lengths, variant, epsilon)
}

/// Per-example deviation weights `|s - mean(s)| / (mean|s - mean(s)| + eps)`
/// over the masked-in scores, flattened in batch order.
fn deviation_weights(scores_flat: &[f64], lengths: &[usize]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(scores_flat.len());
    let mut offset = 0;
    for &len in lengths {
        let s = &scores_flat[offset..offset + len];
        let mean = s.iter().sum::<f64>() / len as f64;
        let dev: Vec<f64> = s.iter().map(|&v| (v - mean).abs()).collect();
        let mean_dev = dev.iter().sum::<f64>() / len as f64;
        weights.extend(dev.iter().map(|&d| d / (mean_dev + DEVIATION_EPS)));
        offset += len;
    }
    weights
}

/// Interpretable attention AT: the gradient direction reweighted by how far
/// each attention score sits from its example mean, emphasizing tokens the
/// attention already distinguishes. Falls back to the plain AT direction
/// when the weighting collapses to zero (uniform scores).
pub fn perturb_iat(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    epsilon: f64,
) -> Result<Perturbation> {
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    if !batch.is_labeled() {
        return Err(Error::invalid(
            "adversarial perturbations need a labeled batch",
        ));
    }
    let grads = supervised_gradients(params, batch, kind)?;
    at_perturbation_from_grads(&grads, &batch.lengths, Variant::AttentionIat, epsilon)
}

/// Generic power iteration: repeatedly evaluate the gradient closure at the
/// current unit direction and renormalize. Returns `None` when the gradient
/// vanishes, which callers map to the zero perturbation.
pub fn power_iteration<R: Rng>(
    dim: usize,
    iters: usize,
    rng: &mut R,
    mut grad_at: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Option<Vec<f64>>> {
    let start: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut u = match normalize(&start) {
        Some(u) => u,
        None => return Ok(None),
    };
    for _ in 0..iters {
        let g = grad_at(&u)?;
        match normalize(&g) {
            Some(next) => u = next,
            None => return Ok(None),
        }
    }
    Ok(Some(u))
}

/// Intermediate products of the virtual-adversarial construction, shared by
/// the perturbation ops and the loss path.
pub(crate) struct VatComponents {
    pub direction: Option<Vec<f64>>,
    pub clean_scores: Vec<f64>,
    /// Clean per-example class distributions (the KL reference).
    pub reference: Vec<Vec<f64>>,
    pub dim: usize,
    lengths: Vec<usize>,
    attachment: Attachment,
}

impl VatComponents {
    /// Finish the construction for the given variant; `None` when the KL
    /// surface was flat and the direction vanished.
    pub fn perturbation(&self, variant: Variant, epsilon: f64) -> Option<Perturbation> {
        let direction = self.direction.as_ref()?;
        if variant == Variant::AttentionIvat {
            let weights = deviation_weights(&self.clean_scores, &self.lengths);
            let weighted: Vec<f64> = direction
                .iter()
                .zip(&weights)
                .map(|(&u, &w)| u * w)
                .collect();
            if let Some(reweighted) = normalize(&weighted) {
                return Some(Perturbation::from_direction(
                    self.attachment,
                    reweighted,
                    epsilon,
                ));
            }
            // Uniform scores: keep the plain VAT direction.
        }
        Some(Perturbation::from_direction(
            self.attachment,
            direction.clone(),
            epsilon,
        ))
    }
}

pub(crate) fn vat_components<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    attachment: Attachment,
    xi: f64,
    iters: usize,
    rng: &mut R,
) -> Result<VatComponents> {
    // Labels are dropped up front: the virtual objective never sees them.
    let unlabeled = batch.without_labels();
    let clean = forward(params, &unlabeled, kind, None)?;
    let reference = clean.probs();
    let clean_scores = clean.scores().concat();
    drop(clean);

    let dim = match attachment {
        Attachment::AttentionScores => unlabeled.masked_in(),
        Attachment::WordEmbedding => unlabeled.masked_in() * params.dims.embed,
    };
    let direction = power_iteration(dim, iters, rng, |u| {
        let probe = Perturbation::from_direction(attachment, u.to_vec(), xi);
        let mut pass = forward(params, &unlabeled, kind, Some(&probe))?;
        let kl = pass.add_mean_kl(&reference);
        pass.graph.backward(kl);
        Ok(match attachment {
            Attachment::AttentionScores => pass.score_grads_flat(),
            Attachment::WordEmbedding => pass.embed_grads_flat(),
        })
    })?;
    Ok(VatComponents {
        direction,
        clean_scores,
        reference,
        dim,
        lengths: unlabeled.lengths,
        attachment,
    })
}

/// Virtual adversarial direction: the dominant direction of the KL
/// divergence between the clean predictive distribution and the perturbed
/// one, found by power iteration. Works identically on labeled and
/// unlabeled batches because labels are never read.
pub fn perturb_vat<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    attachment: Attachment,
    epsilon: f64,
    xi: f64,
    iters: usize,
    rng: &mut R,
) -> Result<Perturbation> {
    if epsilon <= 0.0 || xi <= 0.0 {
        return Err(Error::invalid("epsilon and xi must be > 0"));
    }
    if iters < 1 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    let parts = vat_components(params, batch, kind, attachment, xi, iters, rng)?;
    let variant = match attachment {
        Attachment::AttentionScores => Variant::AttentionVat,
        Attachment::WordEmbedding => Variant::AttentionVat,
    };
    Ok(parts
        .perturbation(variant, epsilon)
        .unwrap_or_else(|| Perturbation::zero(attachment, epsilon, parts.dim)))
}

/// Interpretable VAT: the VAT direction reweighted by the attention-score
/// deviation factor, renormalized. Uniform scores fall back to the plain
/// VAT direction; labels are never read.
pub fn perturb_ivat<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    epsilon: f64,
    xi: f64,
    iters: usize,
    rng: &mut R,
) -> Result<Perturbation> {
    if epsilon <= 0.0 || xi <= 0.0 {
        return Err(Error::invalid("epsilon and xi must be > 0"));
    }
    if iters < 1 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    let attachment = Attachment::AttentionScores;
    let parts = vat_components(params, batch, kind, attachment, xi, iters, rng)?;
    Ok(parts
        .perturbation(Variant::AttentionIvat, epsilon)
        .unwrap_or_else(|| Perturbation::zero(attachment, epsilon, parts.dim)))
}
