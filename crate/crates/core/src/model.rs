//! Attention-based classifier: embedding -> bidirectional GRU -> attention
//! (additive or scaled-dot) -> weighted instance vector -> class distribution.
//!
//! Two forward paths exist on purpose. The plain `ndarray` functions
//! ([`embed`], [`encode`], [`score_additive`], [`score_scaled_dot`],
//! [`align`], [`pool`]) are direct, gradient-free stage implementations.
//! [`predict`] and the gradient machinery run on the [`crate::graph`] tape,
//! which exposes attention scores and word embeddings as perturbation
//! attachment points. Tests hold the two paths against each other.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{Attachment, Perturbation};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};

/// Attention score function selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Additive,
    ScaledDot,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Additive => "additive",
            ScoreKind::ScaledDot => "scaled_dot",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(ScoreKind::Additive),
            "scaled_dot" => Ok(ScoreKind::ScaledDot),
            other => Err(Error::Checkpoint(format!("unknown score kind {other:?}"))),
        }
    }
}

/// Model shape configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Vocabulary size |V| (including PAD and UNK).
    pub vocab: usize,
    /// Word embedding width d.
    pub embed: usize,
    /// Hidden width m per direction; keys are 2m wide.
    pub hidden: usize,
    /// Internal width of the additive score function.
    pub attn: usize,
    /// Number of classes |C|.
    pub classes: usize,
}

impl ModelDims {
    /// Key (and learned query) width: both GRU directions concatenated.
    pub fn key_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// One direction of the gated recurrent encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_update: Array2<f64>,
    pub w_reset: Array2<f64>,
    pub w_cand: Array2<f64>,
    pub u_update: Array2<f64>,
    pub u_reset: Array2<f64>,
    pub u_cand: Array2<f64>,
    pub b_update: Array2<f64>,
    pub b_reset: Array2<f64>,
    pub b_cand: Array2<f64>,
}

impl GruParams {
    fn zeros(embed: usize, hidden: usize) -> Self {
        GruParams {
            w_update: Array2::zeros((hidden, embed)),
            w_reset: Array2::zeros((hidden, embed)),
            w_cand: Array2::zeros((hidden, embed)),
            u_update: Array2::zeros((hidden, hidden)),
            u_reset: Array2::zeros((hidden, hidden)),
            u_cand: Array2::zeros((hidden, hidden)),
            b_update: Array2::zeros((hidden, 1)),
            b_reset: Array2::zeros((hidden, 1)),
            b_cand: Array2::zeros((hidden, 1)),
        }
    }

    fn tensors(&self) -> [&Array2<f64>; 9] {
        [
            &self.w_update,
            &self.w_reset,
            &self.w_cand,
            &self.u_update,
            &self.u_reset,
            &self.u_cand,
            &self.b_update,
            &self.b_reset,
            &self.b_cand,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.w_update,
            &mut self.w_reset,
            &mut self.w_cand,
            &mut self.u_update,
            &mut self.u_reset,
            &mut self.u_cand,
            &mut self.b_update,
            &mut self.b_reset,
            &mut self.b_cand,
        ]
    }
}

/// All learnable tensors. The order returned by [`ModelParams::tensors`] is
/// the declared order used by checkpoints and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embedding: Array2<f64>,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub attn_w1: Array2<f64>,
    pub attn_w2: Array2<f64>,
    pub attn_v: Array2<f64>,
    /// Learned global query vector, width `2m` to fit both score kinds.
    pub query: Array2<f64>,
    pub clf_w: Array2<f64>,
    pub clf_b: Array2<f64>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl ModelParams {
    /// Uniform fan-based initialization; biases start at zero.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Self {
        let (d, m, a, k) = (dims.embed, dims.hidden, dims.attn, dims.key_dim());
        let emb_bound = (3.0 / d as f64).sqrt();
        let embedding =
            Array2::from_shape_fn((dims.vocab, d), |_| rng.gen_range(-emb_bound..emb_bound));
        let mut gru = || GruParams {
            w_update: glorot(rng, m, d),
            w_reset: glorot(rng, m, d),
            w_cand: glorot(rng, m, d),
            u_update: glorot(rng, m, m),
            u_reset: glorot(rng, m, m),
            u_cand: glorot(rng, m, m),
            b_update: Array2::zeros((m, 1)),
            b_reset: Array2::zeros((m, 1)),
            b_cand: Array2::zeros((m, 1)),
        };
        let gru_fwd = gru();
        let gru_bwd = gru();
        ModelParams {
            dims,
            embedding,
            gru_fwd,
            gru_bwd,
            attn_w1: glorot(rng, a, k),
            attn_w2: glorot(rng, a, k),
            attn_v: glorot(rng, a, 1),
            query: glorot(rng, k, 1),
            clf_w: glorot(rng, dims.classes, k),
            clf_b: Array2::zeros((dims.classes, 1)),
        }
    }

    /// Same shapes, all zeros; used as a gradient/moment container.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// All-zero parameters for the given shape.
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            dims,
            embedding: Array2::zeros((dims.vocab, dims.embed)),
            gru_fwd: GruParams::zeros(dims.embed, dims.hidden),
            gru_bwd: GruParams::zeros(dims.embed, dims.hidden),
            attn_w1: Array2::zeros((dims.attn, dims.key_dim())),
            attn_w2: Array2::zeros((dims.attn, dims.key_dim())),
            attn_v: Array2::zeros((dims.attn, 1)),
            query: Array2::zeros((dims.key_dim(), 1)),
            clf_w: Array2::zeros((dims.classes, dims.key_dim())),
            clf_b: Array2::zeros((dims.classes, 1)),
        }
    }

    /// Tensors in declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.embedding];
        out.extend(self.gru_fwd.tensors());
        out.extend(self.gru_bwd.tensors());
        out.extend([
            &self.attn_w1,
            &self.attn_w2,
            &self.attn_v,
            &self.query,
            &self.clf_w,
            &self.clf_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.gru_fwd.tensors_mut());
        out.extend(self.gru_bwd.tensors_mut());
        out.extend([
            &mut self.attn_w1,
            &mut self.attn_w2,
            &mut self.attn_v,
            &mut self.query,
            &mut self.clf_w,
            &mut self.clf_b,
        ]);
        out
    }

    /// True when every tensor entry is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Hidden states from the bidirectional encoder. Columns at masked-out
/// positions stay zero.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    /// Per example, a `(2m, t_max)` matrix of hidden states.
    pub hidden: Vec<Array2<f64>>,
    pub lengths: Vec<usize>,
}

/// Per-example attention scores and weights from a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Scores after any perturbation, `-inf` sentinel at masked-out slots.
    pub scores: Vec<f64>,
    /// Probability weights, exactly zero at masked-out slots.
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub score_kind: ScoreKind,
}

/// Classifier output for one example.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Attention-weighted instance vector (2m).
    pub instance: Vec<f64>,
    pub logits: Vec<f64>,
    /// Class distribution; nonnegative and sums to one.
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Plain stage implementations (gradient-free oracle path).
// ---------------------------------------------------------------------------

/// Look up embeddings for every position, pads included.
pub fn embed(batch: &TokenBatch, params: &ModelParams) -> Result<Vec<Array2<f64>>> {
    let d = params.dims.embed;
    let vocab = params.dims.vocab;
    let mut out = Vec::with_capacity(batch.batch_size());
    for i in 0..batch.batch_size() {
        let mut e = Array2::zeros((d, batch.t_max()));
        for t in 0..batch.t_max() {
            let id = batch.ids[(i, t)] as usize;
            if id >= vocab {
                return Err(Error::invalid(format!(
                    "token id {id} out of range for vocabulary of {vocab}"
                )));
            }
            for j in 0..d {
                e[(j, t)] = params.embedding[(id, j)];
            }
        }
        out.push(e);
    }
    Ok(out)
}

fn gru_cell(p: &GruParams, x: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
    let z = (&(&p.w_update.dot(x) + &p.u_update.dot(h)) + &p.b_update).mapv(sigmoid);
    let r = (&(&p.w_reset.dot(x) + &p.u_reset.dot(h)) + &p.b_reset).mapv(sigmoid);
    let n = (&(&p.w_cand.dot(x) + &(&r * &p.u_cand.dot(h))) + &p.b_cand).mapv(f64::tanh);
    &(&(1.0 - &z) * &n) + &(&z * h)
}

/// Bidirectional encoding with zero initial hidden state in both directions.
pub fn encode(
    embedded: &[Array2<f64>],
    batch: &TokenBatch,
    params: &ModelParams,
) -> Result<EncodedSequence> {
    if batch.lengths.iter().any(|&l| l == 0) {
        return Err(Error::invalid("cannot encode a zero-length example"));
    }
    let m = params.dims.hidden;
    let mut hidden = Vec::with_capacity(embedded.len());
    for (i, e) in embedded.iter().enumerate() {
        let len = batch.lengths[i];
        let col =
            |t: usize| Array2::from_shape_fn((params.dims.embed, 1), |(j, _)| e[(j, t)]);
        let mut fwd = Vec::with_capacity(len);
        let mut h = Array2::zeros((m, 1));
        for t in 0..len {
            h = gru_cell(&params.gru_fwd, &col(t), &h);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Array2::zeros((m, 1)); len];
        let mut hb = Array2::zeros((m, 1));
        for t in (0..len).rev() {
            hb = gru_cell(&params.gru_bwd, &col(t), &hb);
            bwd[t] = hb.clone();
        }
        let mut out = Array2::zeros((2 * m, batch.t_max()));
        for t in 0..len {
            for j in 0..m {
                out[(j, t)] = fwd[t][(j, 0)];
                out[(m + j, t)] = bwd[t][(j, 0)];
            }
        }
        hidden.push(out);
    }
    Ok(EncodedSequence {
        hidden,
        lengths: batch.lengths.clone(),
    })
}

/// Additive score `v' tanh(W1 K_t + W2 Q)` per key; `-inf` at masked-out.
pub fn score_additive(keys: &Array2<f64>, mask: &[bool], params: &ModelParams) -> Vec<f64> {
    let w2q = params.attn_w2.dot(&params.query);
    (0..keys.ncols())
        .map(|t| {
            if !mask[t] {
                return f64::NEG_INFINITY;
            }
            let k = Array2::from_shape_fn((keys.nrows(), 1), |(j, _)| keys[(j, t)]);
            let s = (&params.attn_w1.dot(&k) + &w2q).mapv(f64::tanh);
            (&params.attn_v * &s).sum()
        })
        .collect()
}

/// Scaled-dot score `K_t . Q / sqrt(dim)`; `-inf` at masked-out.
pub fn score_scaled_dot(keys: &Array2<f64>, mask: &[bool], query: &Array2<f64>) -> Vec<f64> {
    let scale = 1.0 / (query.nrows() as f64).sqrt();
    (0..keys.ncols())
        .map(|t| {
            if !mask[t] {
                return f64::NEG_INFINITY;
            }
            let mut dot = 0.0;
            for j in 0..keys.nrows() {
                dot += keys[(j, t)] * query[(j, 0)];
            }
            dot * scale
        })
        .collect()
}

/// Exp-normalize scores over masked-in positions; masked-out weights are
/// exactly zero. Errors if no position is masked in.
pub fn align(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::invalid("scores and mask lengths differ"));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid(
            "alignment needs at least one masked-in position with finite score",
        ));
    }
    let mut weights = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for t in 0..scores.len() {
        if mask[t] {
            let e = (scores[t] - max).exp();
            weights[t] = e;
            sum += e;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}

/// Attention-weighted sum of hidden states.
pub fn pool(hidden: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((hidden.nrows(), 1));
    for (t, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            for j in 0..hidden.nrows() {
                out[(j, 0)] += w * hidden[(j, t)];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape-based forward pass with perturbation attachment points.
// ---------------------------------------------------------------------------

pub(crate) struct GruVars {
    w_update: Var,
    w_reset: Var,
    w_cand: Var,
    u_update: Var,
    u_reset: Var,
    u_cand: Var,
    b_update: Var,
    b_reset: Var,
    b_cand: Var,
}

pub(crate) struct ParamVars {
    pub embedding: Var,
    gru_fwd: GruVars,
    gru_bwd: GruVars,
    pub attn_w1: Var,
    pub attn_w2: Var,
    pub attn_v: Var,
    pub query: Var,
    pub clf_w: Var,
    pub clf_b: Var,
}

impl ParamVars {
    fn insert(g: &mut Graph, p: &ModelParams) -> Self {
        let gru = |g: &mut Graph, q: &GruParams| GruVars {
            w_update: g.leaf(q.w_update.clone()),
            w_reset: g.leaf(q.w_reset.clone()),
            w_cand: g.leaf(q.w_cand.clone()),
            u_update: g.leaf(q.u_update.clone()),
            u_reset: g.leaf(q.u_reset.clone()),
            u_cand: g.leaf(q.u_cand.clone()),
            b_update: g.leaf(q.b_update.clone()),
            b_reset: g.leaf(q.b_reset.clone()),
            b_cand: g.leaf(q.b_cand.clone()),
        };
        ParamVars {
            embedding: g.leaf(p.embedding.clone()),
            gru_fwd: gru(g, &p.gru_fwd),
            gru_bwd: gru(g, &p.gru_bwd),
            attn_w1: g.leaf(p.attn_w1.clone()),
            attn_w2: g.leaf(p.attn_w2.clone()),
            attn_v: g.leaf(p.attn_v.clone()),
            query: g.leaf(p.query.clone()),
            clf_w: g.leaf(p.clf_w.clone()),
            clf_b: g.leaf(p.clf_b.clone()),
        }
    }

    fn vars_in_order(&self) -> Vec<Var> {
        let gru = |q: &GruVars| {
            vec![
                q.w_update, q.w_reset, q.w_cand, q.u_update, q.u_reset, q.u_cand,
                q.b_update, q.b_reset, q.b_cand,
            ]
        };
        let mut out = vec![self.embedding];
        out.extend(gru(&self.gru_fwd));
        out.extend(gru(&self.gru_bwd));
        out.extend([
            self.attn_w1,
            self.attn_w2,
            self.attn_v,
            self.query,
            self.clf_w,
            self.clf_b,
        ]);
        out
    }
}

pub(crate) struct ExampleVars {
    /// One `(d, 1)` perturbation leaf per real token.
    pub embed_pert: Vec<Var>,
    /// `(T, 1)` perturbation leaf added to the attention scores.
    pub score_pert: Var,
    /// Perturbed scores over masked-in positions.
    pub scores: Var,
    pub weights: Var,
    pub instance: Var,
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Var,
}

pub(crate) struct ForwardPass {
    pub graph: Graph,
    pub params: ParamVars,
    pub examples: Vec<ExampleVars>,
    /// Mean cross-entropy over the batch when labels were supplied.
    pub mean_ce: Option<Var>,
}

fn gru_step(g: &mut Graph, p: &GruVars, ones: Var, x: Var, h: Var) -> Var {
    let zx = g.matmul(p.w_update, x);
    let zh = g.matmul(p.u_update, h);
    let zs = g.add(zx, zh);
    let zb = g.add(zs, p.b_update);
    let z = g.sigmoid(zb);

    let rx = g.matmul(p.w_reset, x);
    let rh = g.matmul(p.u_reset, h);
    let rs = g.add(rx, rh);
    let rb = g.add(rs, p.b_reset);
    let r = g.sigmoid(rb);

    let nx = g.matmul(p.w_cand, x);
    let nh = g.matmul(p.u_cand, h);
    let rnh = g.mul(r, nh);
    let ns = g.add(nx, rnh);
    let nb = g.add(ns, p.b_cand);
    let n = g.tanh(nb);

    let keep = g.sub(ones, z);
    let new_part = g.mul(keep, n);
    let old_part = g.mul(z, h);
    g.add(new_part, old_part)
}

/// Build the full tape for one batch. Perturbation leaves are always present
/// (zero when unperturbed) so attachment gradients are read the same way in
/// every pass.
pub(crate) fn forward(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
    perturbation: Option<&Perturbation>,
) -> Result<ForwardPass> {
    if batch.lengths.iter().any(|&l| l == 0) {
        return Err(Error::invalid(
            "cannot run the model on a zero-length example",
        ));
    }
    for id in batch.ids.iter() {
        if *id as usize >= params.dims.vocab {
            return Err(Error::invalid(format!(
                "token id {id} out of range for vocabulary of {}",
                params.dims.vocab
            )));
        }
    }
    let (score_pert, embed_pert) = match perturbation {
        None => (None, None),
        Some(p) => {
            let expect = p.flattened_len(batch, params.dims.embed);
            if expect != p.realized.len() {
                return Err(Error::invalid(format!(
                    "perturbation length {} does not match batch attachment size {expect}",
                    p.realized.len(),
                )));
            }
            match p.attachment {
                Attachment::AttentionScores => (Some(p.score_slices(batch)), None),
                Attachment::WordEmbedding => {
                    (None, Some(p.embed_slices(batch, params.dims.embed)))
                }
            }
        }
    };

    let mut g = Graph::new();
    let pv = ParamVars::insert(&mut g, params);
    let m = params.dims.hidden;
    let d = params.dims.embed;
    let zeros_m = g.leaf(Array2::zeros((m, 1)));
    let ones_m = g.leaf(Array2::ones((m, 1)));
    // W2 Q is key-independent; hoist it out of the per-token loop.
    let w2q = match kind {
        ScoreKind::Additive => Some(g.matmul(pv.attn_w2, pv.query)),
        ScoreKind::ScaledDot => None,
    };
    let dot_scale = 1.0 / (params.dims.key_dim() as f64).sqrt();

    let mut examples = Vec::with_capacity(batch.batch_size());
    for i in 0..batch.batch_size() {
        let len = batch.lengths[i];
        // Embedded tokens with their perturbation leaves.
        let mut xs = Vec::with_capacity(len);
        let mut pert_leaves = Vec::with_capacity(len);
        for t in 0..len {
            let row = g.row(pv.embedding, batch.ids[(i, t)] as usize);
            let pert_val = match &embed_pert {
                Some(slices) => Array2::from_shape_fn((d, 1), |(j, _)| slices[i][(j, t)]),
                None => Array2::zeros((d, 1)),
            };
            let pert = g.leaf(pert_val);
            pert_leaves.push(pert);
            xs.push(g.add(row, pert));
        }
        // Bidirectional recurrence.
        let mut fwd = Vec::with_capacity(len);
        let mut h = zeros_m;
        for &x in &xs {
            h = gru_step(&mut g, &pv.gru_fwd, ones_m, x, h);
            fwd.push(h);
        }
        let mut bwd = vec![zeros_m; len];
        let mut hb = zeros_m;
        for t in (0..len).rev() {
            hb = gru_step(&mut g, &pv.gru_bwd, ones_m, xs[t], hb);
            bwd[t] = hb;
        }
        let keys: Vec<Var> = (0..len).map(|t| g.concat_rows(fwd[t], bwd[t])).collect();
        // Scores over real tokens only; padding never enters the tape.
        let per_token: Vec<Var> = keys
            .iter()
            .map(|&k| match kind {
                ScoreKind::Additive => {
                    let w1k = g.matmul(pv.attn_w1, k);
                    let s = g.add(w1k, w2q.expect("additive has w2q"));
                    let t = g.tanh(s);
                    g.dot(pv.attn_v, t)
                }
                ScoreKind::ScaledDot => {
                    let dp = g.dot(k, pv.query);
                    g.scale(dp, dot_scale)
                }
            })
            .collect();
        let raw_scores = g.stack_scalars(&per_token);
        let pert_val = match &score_pert {
            Some(slices) => Array2::from_shape_fn((len, 1), |(t, _)| slices[i][t]),
            None => Array2::zeros((len, 1)),
        };
        let score_pert_leaf = g.leaf(pert_val);
        let scores = g.add(raw_scores, score_pert_leaf);
        let weights = g.softmax(scores);
        let key_mat = g.cols_concat(&keys);
        let instance = g.matmul(key_mat, weights);
        let wh = g.matmul(pv.clf_w, instance);
        let logits = g.add(wh, pv.clf_b);
        let log_probs = g.log_softmax(logits);
        let probs = g.softmax(logits);
        examples.push(ExampleVars {
            embed_pert: pert_leaves,
            score_pert: score_pert_leaf,
            scores,
            weights,
            instance,
            logits,
            log_probs,
            probs,
        });
    }

    let mean_ce = batch.labels.as_ref().map(|labels| {
        let per: Vec<Var> = examples
            .iter()
            .zip(labels)
            .map(|(ex, &y)| {
                let lp = g.pick(ex.log_probs, y);
                g.scale(lp, -1.0)
            })
            .collect();
        let total = g.add_n(&per);
        g.scale(total, 1.0 / labels.len() as f64)
    });

    Ok(ForwardPass {
        graph: g,
        params: pv,
        examples,
        mean_ce,
    })
}

impl ForwardPass {
    /// Copy accumulated parameter gradients out of the tape, in declared
    /// tensor order.
    pub fn param_grads(&self, params: &ModelParams) -> ModelParams {
        let mut grads = params.zeros_like();
        for (dst, var) in grads
            .tensors_mut()
            .into_iter()
            .zip(self.params.vars_in_order())
        {
            *dst = self.graph.grad(var);
        }
        grads
    }

    /// Gradient w.r.t. the attention scores, flattened over masked-in
    /// positions in batch order.
    pub fn score_grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for ex in &self.examples {
            out.extend(self.graph.grad(ex.score_pert).iter().copied());
        }
        out
    }

    /// Gradient w.r.t. the embedded tokens, flattened example-major then
    /// token-major then coordinate.
    pub fn embed_grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for ex in &self.examples {
            for &leaf in &ex.embed_pert {
                out.extend(self.graph.grad(leaf).iter().copied());
            }
        }
        out
    }

    /// Per-example class distributions.
    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.examples
            .iter()
            .map(|ex| self.graph.value(ex.probs).iter().copied().collect())
            .collect()
    }

    /// Per-example attention score values over masked-in positions.
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.examples
            .iter()
            .map(|ex| self.graph.value(ex.scores).iter().copied().collect())
            .collect()
    }

    /// Append mean KL(p0 || p) nodes against constant reference
    /// distributions. Gradient flows into the current pass only; the
    /// reference enters as data.
    pub fn add_mean_kl(&mut self, reference: &[Vec<f64>]) -> Var {
        let g = &mut self.graph;
        let per: Vec<Var> = self
            .examples
            .iter()
            .zip(reference)
            .map(|(ex, p0)| {
                // sum_c p0 ln p0, with the 0 ln 0 = 0 convention.
                let entropy: f64 = p0
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum();
                let c = g.leaf(Array2::from_elem((1, 1), entropy));
                let p0_leaf = g.leaf(Array2::from_shape_fn((p0.len(), 1), |(j, _)| p0[j]));
                let cross = g.dot(p0_leaf, ex.log_probs);
                let neg_cross = g.scale(cross, -1.0);
                g.add(c, neg_cross)
            })
            .collect();
        let total = g.add_n(&per);
        g.scale(total, 1.0 / per.len() as f64)
    }
}

/// Full forward pass for a batch. An optional perturbation is added to the
/// attention scores before alignment; the returned records report the
/// perturbed scores and resulting weights.
pub fn predict(
    batch: &TokenBatch,
    params: &ModelParams,
    kind: ScoreKind,
    score_perturbation: Option<&Perturbation>,
) -> Result<(Vec<Prediction>, Vec<AttentionRecord>)> {
    if let Some(p) = score_perturbation {
        if p.attachment != Attachment::AttentionScores {
            return Err(Error::invalid(
                "predict only attaches perturbations to attention scores",
            ));
        }
    }
    let pass = forward(params, batch, kind, score_perturbation)?;
    let mut predictions = Vec::with_capacity(batch.batch_size());
    let mut records = Vec::with_capacity(batch.batch_size());
    for (i, ex) in pass.examples.iter().enumerate() {
        let len = batch.lengths[i];
        let t_max = batch.t_max();
        let mut scores = vec![f64::NEG_INFINITY; t_max];
        let mut weights = vec![0.0; t_max];
        for t in 0..len {
            scores[t] = pass.graph.value(ex.scores)[(t, 0)];
            weights[t] = pass.graph.value(ex.weights)[(t, 0)];
        }
        records.push(AttentionRecord {
            scores,
            weights,
            mask: (0..t_max).map(|t| t < len).collect(),
            score_kind: kind,
        });
        predictions.push(Prediction {
            instance: pass.graph.value(ex.instance).iter().copied().collect(),
            logits: pass.graph.value(ex.logits).iter().copied().collect(),
            probs: pass.graph.value(ex.probs).iter().copied().collect(),
        });
    }
    Ok((predictions, records))
}

/// Supervised cross-entropy value and gradients for one labeled batch,
/// including the gradients at both perturbation attachment points.
pub struct LossGradients {
    pub ce: f64,
    pub param_grads: ModelParams,
    /// d ce / d score, flattened over masked-in positions.
    pub score_grads: Vec<f64>,
    /// d ce / d embedded token, flattened example-major, token-major.
    pub embed_grads: Vec<f64>,
    /// Clean attention scores, flattened the same way as `score_grads`.
    pub scores: Vec<f64>,
}

/// Run forward + backward of the mean cross-entropy on a labeled batch.
pub fn supervised_gradients(
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ScoreKind,
) -> Result<LossGradients> {
    if !batch.is_labeled() {
        return Err(Error::invalid("supervised gradients need a labeled batch"));
    }
    let mut pass = forward(params, batch, kind, None)?;
    let ce_var = pass.mean_ce.expect("labeled batch has mean ce");
    pass.graph.backward(ce_var);
    Ok(LossGradients {
        ce: pass.graph.value(ce_var)[(0, 0)],
        param_grads: pass.param_grads(params),
        score_grads: pass.score_grads_flat(),
        embed_grads: pass.embed_grads_flat(),
        scores: pass.scores().concat(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: header + flat 64-bit float arrays in declared order.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"ATNRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    vocab: usize,
    embed: usize,
    hidden: usize,
    attn: usize,
    classes: usize,
    score_kind: String,
    config_hash: String,
}

/// Serialize parameters to `path`. The header records shapes, the score
/// kind, and a caller-supplied configuration hash.
pub fn save_checkpoint(
    params: &ModelParams,
    kind: ScoreKind,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        vocab: params.dims.vocab,
        embed: params.dims.embed,
        hidden: params.dims.hidden,
        attn: params.dims.attn,
        classes: params.dims.classes,
        score_kind: kind.as_str().to_string(),
        config_hash: config_hash.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for tensor in params.tensors() {
        for v in tensor.iter() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back. Returns the parameters, the score kind, and the
/// stored config hash.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ScoreKind, String)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    if u32::from_le_bytes(version) != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            u32::from_le_bytes(version)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let dims = ModelDims {
        vocab: header.vocab,
        embed: header.embed,
        hidden: header.hidden,
        attn: header.attn,
        classes: header.classes,
    };
    let kind = ScoreKind::parse(&header.score_kind)?;
    let mut params = ModelParams::zeros(dims);
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *v = f64::from_bits(u64::from_le_bytes(buf));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter arrays",
            rest.len()
        )));
    }
    Ok((params, kind, header.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{batch_of, plain_ce, plain_probs, random_params, tiny_dims};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_returns_table_rows_exactly() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 1);
        let batch = batch_of(&["alpha beta"], None, 4);
        let e = embed(&batch, &params).unwrap();
        for t in 0..4 {
            let id = batch.ids[(0, t)] as usize;
            for j in 0..dims.embed {
                assert_eq!(e[0][(j, t)], params.embedding[(id, j)]);
            }
        }
        // Pad positions carry the PAD row itself.
        assert_eq!(batch.ids[(0, 3)], crate::data::PAD_ID);
        assert_eq!(e[0][(0, 3)], params.embedding[(0, 0)]);
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let dims = tiny_dims(2, 2);
        let params = random_params(dims, 1);
        let batch = batch_of(&["alpha beta"], None, 4);
        assert!(embed(&batch, &params).is_err());
    }

    #[test]
    fn encode_base_case_matches_single_cell() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 2);
        let batch = batch_of(&["alpha"], None, 2);
        let embedded = embed(&batch, &params).unwrap();
        let enc = encode(&embedded, &batch, &params).unwrap();
        let x = Array2::from_shape_fn((dims.embed, 1), |(j, _)| embedded[0][(j, 0)]);
        let h0 = Array2::zeros((dims.hidden, 1));
        let f = gru_cell(&params.gru_fwd, &x, &h0);
        let b = gru_cell(&params.gru_bwd, &x, &h0);
        for j in 0..dims.hidden {
            assert_eq!(enc.hidden[0][(j, 0)], f[(j, 0)]);
            assert_eq!(enc.hidden[0][(dims.hidden + j, 0)], b[(j, 0)]);
        }
    }

    #[test]
    fn encode_zero_params_zero_input_gives_zero_states() {
        let dims = tiny_dims(6, 2);
        let params = ModelParams::zeros(dims);
        let batch = batch_of(&["alpha beta gamma"], None, 4);
        let embedded = embed(&batch, &params).unwrap();
        let enc = encode(&embedded, &batch, &params).unwrap();
        assert!(enc.hidden[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_matches_scalar_unrolled_oracle() {
        // Step-by-step scalar re-implementation without any matrix library.
        let dims = tiny_dims(8, 2);
        let params = random_params(dims, 3);
        let batch = batch_of(&["alpha beta gamma delta"], None, 4);
        let embedded = embed(&batch, &params).unwrap();
        let enc = encode(&embedded, &batch, &params).unwrap();

        let m = dims.hidden;
        let d = dims.embed;
        let cell = |p: &GruParams, x: &[f64], h: &[f64]| -> Vec<f64> {
            let matvec = |w: &Array2<f64>, v: &[f64]| -> Vec<f64> {
                (0..w.nrows())
                    .map(|i| (0..w.ncols()).map(|j| w[(i, j)] * v[j]).sum())
                    .collect()
            };
            let wzx = matvec(&p.w_update, x);
            let uzh = matvec(&p.u_update, h);
            let wrx = matvec(&p.w_reset, x);
            let urh = matvec(&p.u_reset, h);
            let wnx = matvec(&p.w_cand, x);
            let unh = matvec(&p.u_cand, h);
            (0..m)
                .map(|i| {
                    let z = sigmoid(wzx[i] + uzh[i] + p.b_update[(i, 0)]);
                    let r = sigmoid(wrx[i] + urh[i] + p.b_reset[(i, 0)]);
                    let n = (wnx[i] + r * unh[i] + p.b_cand[(i, 0)]).tanh();
                    (1.0 - z) * n + z * h[i]
                })
                .collect()
        };
        let x_at = |t: usize| -> Vec<f64> { (0..d).map(|j| embedded[0][(j, t)]).collect() };
        let mut h = vec![0.0; m];
        let mut fwd = Vec::new();
        for t in 0..4 {
            h = cell(&params.gru_fwd, &x_at(t), &h);
            fwd.push(h.clone());
        }
        let mut hb = vec![0.0; m];
        let mut bwd = vec![vec![]; 4];
        for t in (0..4).rev() {
            hb = cell(&params.gru_bwd, &x_at(t), &hb);
            bwd[t] = hb.clone();
        }
        for t in 0..4 {
            for j in 0..m {
                approx::assert_abs_diff_eq!(
                    enc.hidden[0][(j, t)],
                    fwd[t][j],
                    epsilon = 1e-12
                );
                approx::assert_abs_diff_eq!(
                    enc.hidden[0][(m + j, t)],
                    bwd[t][j],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn additive_score_zero_v_is_zero() {
        let dims = tiny_dims(6, 2);
        let mut params = random_params(dims, 4);
        params.attn_v.fill(0.0);
        let keys = Array2::from_shape_fn((dims.key_dim(), 3), |(i, j)| (i + j) as f64);
        let scores = score_additive(&keys, &[true, true, false], &params);
        assert_eq!(scores[0], 0.0);
        assert_eq!(scores[1], 0.0);
        assert_eq!(scores[2], f64::NEG_INFINITY);
    }

    #[test]
    fn additive_score_identity_case_is_zero() {
        // W1 = I, W2 = 0, v = e1, K_t = 0 => v' tanh(0) = 0.
        let dims = ModelDims { vocab: 4, embed: 2, hidden: 1, attn: 2, classes: 2 };
        let mut params = ModelParams::zeros(dims);
        params.attn_w1 = array![[1.0, 0.0], [0.0, 1.0]];
        params.attn_v = array![[1.0], [0.0]];
        let keys = Array2::zeros((2, 1));
        let scores = score_additive(&keys, &[true], &params);
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn additive_score_matches_loop_oracle() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 5);
        let keys = Array2::from_shape_fn((dims.key_dim(), 4), |(i, j)| {
            ((i * 7 + j * 3) as f64).sin()
        });
        let mask = [true, true, true, true];
        let scores = score_additive(&keys, &mask, &params);
        for t in 0..4 {
            let mut expect = 0.0;
            for a in 0..dims.attn {
                let mut pre = 0.0;
                for j in 0..dims.key_dim() {
                    pre += params.attn_w1[(a, j)] * keys[(j, t)];
                    pre += params.attn_w2[(a, j)] * params.query[(j, 0)];
                }
                expect += params.attn_v[(a, 0)] * pre.tanh();
            }
            approx::assert_abs_diff_eq!(scores[t], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn scaled_dot_forced_arithmetic() {
        let keys = Array2::ones((4, 1));
        let query = Array2::ones((4, 1));
        let scores = score_scaled_dot(&keys, &[true], &query);
        assert_eq!(scores, vec![2.0]);
        let zero_q = Array2::zeros((4, 1));
        assert_eq!(score_scaled_dot(&keys, &[true], &zero_q), vec![0.0]);
    }

    #[test]
    fn align_examples_from_first_principles() {
        let w = align(&[0.0, 0.0], &[true, true]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = align(&[(2.0f64).ln(), 0.0], &[true, true]).unwrap();
        approx::assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-12);
        let w = align(&[5.0, f64::NEG_INFINITY], &[true, true]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        assert!(align(&[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn align_simplex_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let n = rng.gen_range(1..12);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            mask[rng.gen_range(0..n)] = true;
            let w = align(&scores, &mask).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            approx::assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
            for t in 0..n {
                if !mask[t] {
                    assert_eq!(w[t], 0.0);
                }
            }
            let c = rng.gen_range(-50.0..50.0);
            let shifted: Vec<f64> = scores.iter().map(|&s| s + c).collect();
            let w2 = align(&shifted, &mask).unwrap();
            for t in 0..n {
                approx::assert_abs_diff_eq!(w[t], w2[t], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pool_selection_mean_and_linearity() {
        // One-hot selects a single hidden state.
        let hidden = array![[1.0, 3.0], [2.0, 4.0]];
        let sel = pool(&hidden, &[0.0, 1.0]);
        assert_eq!(sel, array![[3.0], [4.0]]);
        // Uniform over h_1 = [1,2], h_2 = [3,4] is the mean [2,3].
        let mean = pool(&hidden, &[0.5, 0.5]);
        assert_eq!(mean, array![[2.0], [3.0]]);
        // Linearity across weight mixtures.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-2.0..2.0));
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let alpha: f64 = rng.gen_range(0.0..1.0);
            let mixed: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| alpha * x + (1.0 - alpha) * y)
                .collect();
            let lhs = pool(&h, &mixed);
            let rhs = &(&pool(&h, &a) * alpha) + &(&pool(&h, &b) * (1.0 - alpha));
            for j in 0..4 {
                approx::assert_abs_diff_eq!(lhs[(j, 0)], rhs[(j, 0)], epsilon = 1e-9);
            }
        }
        // Random weighted sums match a scalar accumulation loop.
        for _ in 0..20 {
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = pool(&h, &w);
            for j in 0..4 {
                let expect: f64 = (0..5).map(|t| w[t] * h[(j, t)]).sum();
                approx::assert_abs_diff_eq!(got[(j, 0)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predict_zero_perturbation_is_bitwise_identical() {
        let dims = tiny_dims(6, 3);
        let params = random_params(dims, 8);
        let batch = batch_of(&["alpha beta gamma", "delta alpha"], None, 4);
        let zero = Perturbation::zero(Attachment::AttentionScores, 1.0, batch.masked_in());
        let (clean, rec_clean) = predict(&batch, &params, ScoreKind::Additive, None).unwrap();
        let (pert, rec_pert) =
            predict(&batch, &params, ScoreKind::Additive, Some(&zero)).unwrap();
        for i in 0..2 {
            assert_eq!(clean[i].probs, pert[i].probs);
            assert_eq!(clean[i].logits, pert[i].logits);
            assert_eq!(rec_clean[i].weights, rec_pert[i].weights);
        }
    }

    #[test]
    fn predict_zero_classifier_is_uniform() {
        let dims = tiny_dims(6, 2);
        let mut params = random_params(dims, 9);
        params.clf_w.fill(0.0);
        params.clf_b.fill(0.0);
        let batch = batch_of(&["alpha beta"], None, 4);
        let (preds, _) = predict(&batch, &params, ScoreKind::Additive, None).unwrap();
        assert_eq!(preds[0].probs, vec![0.5, 0.5]);
    }

    #[test]
    fn predict_matches_staged_plain_oracle() {
        for kind in [ScoreKind::Additive, ScoreKind::ScaledDot] {
            let dims = tiny_dims(6, 3);
            let params = random_params(dims, 10);
            let batch = batch_of(&["alpha beta gamma delta", "gamma delta"], None, 5);
            let (preds, records) = predict(&batch, &params, kind, None).unwrap();
            let oracle = plain_probs(&params, &batch, kind, None);
            for i in 0..2 {
                for c in 0..3 {
                    approx::assert_abs_diff_eq!(
                        preds[i].probs[c],
                        oracle[i][c],
                        epsilon = 1e-12
                    );
                }
                let sum: f64 = records[i].weights.iter().sum();
                approx::assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn predict_rejects_wrong_perturbation_length() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 11);
        let batch = batch_of(&["alpha beta gamma"], None, 4);
        let bad = Perturbation::zero(Attachment::AttentionScores, 1.0, 99);
        assert!(predict(&batch, &params, ScoreKind::Additive, Some(&bad)).is_err());
    }

    #[test]
    fn masked_out_content_never_changes_predictions() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 12);
        let mut batch = batch_of(&["alpha beta"], Some(&[1]), 5);
        let (before, _) = predict(&batch, &params, ScoreKind::Additive, None).unwrap();
        // Overwrite pad slots with arbitrary in-range ids; mask is unchanged.
        batch.ids[(0, 3)] = 4;
        batch.ids[(0, 4)] = 2;
        let (after, _) = predict(&batch, &params, ScoreKind::Additive, None).unwrap();
        assert_eq!(before[0].probs, after[0].probs);
    }

    #[test]
    fn supervised_gradients_match_plain_finite_differences() {
        let dims = ModelDims { vocab: 8, embed: 3, hidden: 3, attn: 3, classes: 2 };
        let params = random_params(dims, 13);
        let batch = batch_of(&["alpha beta gamma", "delta alpha"], Some(&[0, 1]), 4);
        let kind = ScoreKind::Additive;
        let grads = supervised_gradients(&params, &batch, kind).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

        // Attention-score coordinates via score perturbations in the plain path.
        let mut flat = 0;
        for i in 0..batch.batch_size() {
            for t in 0..batch.lengths[i] {
                let mut bump = vec![vec![0.0; batch.lengths[0]], vec![0.0; batch.lengths[1]]];
                bump[i][t] = h;
                let up = plain_ce(&params, &batch, kind, Some(&bump));
                bump[i][t] = -h;
                let down = plain_ce(&params, &batch, kind, Some(&bump));
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(grads.score_grads[flat], fd) < 1e-4,
                    "score ({i},{t}): {} vs {}",
                    grads.score_grads[flat],
                    fd
                );
                flat += 1;
            }
        }

        // Used embedding rows through the parameter table.
        for &id in batch.ids.iter() {
            for j in 0..dims.embed {
                let mut up_p = params.clone();
                up_p.embedding[(id as usize, j)] += h;
                let mut down_p = params.clone();
                down_p.embedding[(id as usize, j)] -= h;
                let fd =
                    (plain_ce(&up_p, &batch, kind, None) - plain_ce(&down_p, &batch, kind, None))
                        / (2.0 * h);
                let an = grads.param_grads.embedding[(id as usize, j)];
                if an.abs().max(fd.abs()) > 1e-10 {
                    assert!(rel(an, fd) < 1e-4, "embedding ({id},{j}): {an} vs {fd}");
                }
            }
        }

        // Attention parameters W1, W2, v.
        let check_tensor = |name: &str,
                            an: &Array2<f64>,
                            write: &dyn Fn(&mut ModelParams, (usize, usize), f64)| {
            for i in 0..an.nrows() {
                for j in 0..an.ncols() {
                    let mut up_p = params.clone();
                    write(&mut up_p, (i, j), h);
                    let mut down_p = params.clone();
                    write(&mut down_p, (i, j), -h);
                    let fd = (plain_ce(&up_p, &batch, kind, None)
                        - plain_ce(&down_p, &batch, kind, None))
                        / (2.0 * h);
                    if an[(i, j)].abs().max(fd.abs()) > 1e-10 {
                        assert!(
                            rel(an[(i, j)], fd) < 1e-4,
                            "{name} ({i},{j}): {} vs {fd}",
                            an[(i, j)]
                        );
                    }
                }
            }
        };
        check_tensor("w1", &grads.param_grads.attn_w1, &|p, ij, d| {
            p.attn_w1[ij] += d
        });
        check_tensor("w2", &grads.param_grads.attn_w2, &|p, ij, d| {
            p.attn_w2[ij] += d
        });
        check_tensor("v", &grads.param_grads.attn_v, &|p, ij, d| {
            p.attn_v[ij] += d
        });
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, ScoreKind::ScaledDot, "cfg-hash-123", &path).unwrap();
        let (loaded, kind, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(kind, ScoreKind::ScaledDot);
        assert_eq!(hash, "cfg-hash-123");
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dims = tiny_dims(6, 2);
        let params = random_params(dims, 15);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, ScoreKind::Additive, "h", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
