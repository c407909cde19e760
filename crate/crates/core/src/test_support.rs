//! Shared fixtures for unit tests: tiny vocabularies, batches, random
//! parameters, and the plain-path (tape-free) probability/loss oracle.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_batch, tokenize, TokenBatch, Vocabulary};
use crate::model::{
    align, embed, encode, pool, score_additive, score_scaled_dot, ModelDims, ModelParams,
    ScoreKind,
};

pub fn tiny_dims(vocab: usize, classes: usize) -> ModelDims {
    ModelDims {
        vocab,
        embed: 3,
        hidden: 3,
        attn: 4,
        classes,
    }
}

pub fn tiny_vocab() -> Vocabulary {
    let docs: Vec<Vec<String>> = vec![
        tokenize("alpha beta gamma delta"),
        tokenize("alpha beta gamma delta"),
    ];
    Vocabulary::build(&docs, 1).unwrap()
}

pub fn batch_of(texts: &[&str], labels: Option<&[usize]>, t_max: usize) -> TokenBatch {
    let vocab = tiny_vocab();
    let examples: Vec<(Vec<String>, Option<usize>)> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| (tokenize(t), labels.map(|l| l[i])))
        .collect();
    encode_batch(&examples, &vocab, t_max).unwrap()
}

pub fn random_params(dims: ModelDims, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(dims, &mut rng)
}

/// Composition of the plain stages: the staged oracle for the tape path.
pub fn plain_probs(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    score_pert: Option<&[Vec<f64>]>,
) -> Vec<Vec<f64>> {
    let embedded = embed(batch, params).unwrap();
    let enc = encode(&embedded, batch, params).unwrap();
    let mut out = Vec::new();
    for i in 0..batch.batch_size() {
        let mask: Vec<bool> = batch.mask.row(i).to_vec();
        let mut scores = match kind {
            ScoreKind::Additive => score_additive(&enc.hidden[i], &mask, params),
            ScoreKind::ScaledDot => score_scaled_dot(&enc.hidden[i], &mask, &params.query),
        };
        if let Some(pert) = score_pert {
            for t in 0..batch.lengths[i] {
                scores[t] += pert[i][t];
            }
        }
        let weights = align(&scores, &mask).unwrap();
        let h_a = pool(&enc.hidden[i], &weights);
        let logits = &params.clf_w.dot(&h_a) + &params.clf_b;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.mapv(|v| (v - max).exp());
        let sum: f64 = exp.sum();
        out.push(exp.iter().map(|&e| e / sum).collect());
    }
    out
}

/// Mean cross-entropy through the plain path only.
pub fn plain_ce(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    score_pert: Option<&[Vec<f64>]>,
) -> f64 {
    let probs = plain_probs(params, batch, kind, score_pert);
    let labels = batch.labels.as_ref().unwrap();
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| -p[y].ln()).sum();
    total / labels.len() as f64
}

/// Mean cross-entropy with a perturbation at the word-embedding attachment,
/// applied by editing a copy of the embedding table lookup results.
pub fn plain_ce_embed_pert(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    pert: &[Array2<f64>],
) -> f64 {
    let mut embedded = embed(batch, params).unwrap();
    for (i, e) in embedded.iter_mut().enumerate() {
        for t in 0..batch.lengths[i] {
            for j in 0..params.dims.embed {
                e[(j, t)] += pert[i][(j, t)];
            }
        }
    }
    let enc = encode(&embedded, batch, params).unwrap();
    let labels = batch.labels.as_ref().unwrap();
    let mut total = 0.0;
    for i in 0..batch.batch_size() {
        let mask: Vec<bool> = batch.mask.row(i).to_vec();
        let scores = match kind {
            ScoreKind::Additive => score_additive(&enc.hidden[i], &mask, params),
            ScoreKind::ScaledDot => score_scaled_dot(&enc.hidden[i], &mask, &params.query),
        };
        let weights = align(&scores, &mask).unwrap();
        let h_a = pool(&enc.hidden[i], &weights);
        let logits = &params.clf_w.dot(&h_a) + &params.clf_b;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
        total += lse - logits[(labels[i], 0)];
    }
    total / labels.len() as f64
}
