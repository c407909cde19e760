//! Gradient-based word importance, attention/gradient agreement via Kendall
//! rank correlation, and heatmap rendering.
//!
//! Importance of token t for class c is the gradient of the predicted
//! probability for c with respect to the token's embedding vector, reduced
//! to a scalar either as |gradient . embedding| (the default) or as the
//! gradient's L2 norm. Agreement between that ranking and the attention
//! weights is measured with tie-corrected tau-b against the class the model
//! actually predicted.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, Vocabulary};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::model::{forward, predict, ModelParams, ScoreKind};

/// Scalar reduction of the per-token gradient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// |gradient . embedding| per token.
    GradXInput,
    /// L2 norm of the gradient per token.
    GradL2,
}

/// Per-token, per-class attribution over the masked-in positions.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// One nonnegative importance value per real token, per example.
    pub values: Vec<Vec<f64>>,
    pub reduction: Reduction,
}

/// Gradient importance of every real token for class `class`, using the
/// gradient of the predicted probability (not the loss).
pub fn gradient_importance(
    params: &ModelParams,
    batch: &crate::data::TokenBatch,
    kind: ScoreKind,
    class: usize,
    reduction: Reduction,
) -> Result<SaliencyMap> {
    if class >= params.dims.classes {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            params.dims.classes
        )));
    }
    saliency_for_classes(
        params,
        batch,
        kind,
        &vec![class; batch.batch_size()],
        reduction,
    )
}

/// Like [`gradient_importance`] but with one target class per example; used
/// to attribute each example's own predicted class.
pub fn saliency_for_classes(
    params: &ModelParams,
    batch: &crate::data::TokenBatch,
    kind: ScoreKind,
    classes: &[usize],
    reduction: Reduction,
) -> Result<SaliencyMap> {
    if classes.len() != batch.batch_size() {
        return Err(Error::invalid("one target class per example required"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= params.dims.classes) {
        return Err(Error::invalid(format!(
            "class {c} out of range for {} classes",
            params.dims.classes
        )));
    }
    let mut pass = forward(params, batch, kind, None)?;
    // Examples are independent, so one backward over the summed picked
    // probabilities yields every per-example gradient at once.
    let prob_vars: Vec<_> = pass.examples.iter().map(|ex| ex.probs).collect();
    let picks: Vec<_> = prob_vars
        .iter()
        .zip(classes)
        .map(|(&p, &c)| pass.graph.pick(p, c))
        .collect();
    let target = pass.graph.add_n(&picks);
    pass.graph.backward(target);

    let mut values = Vec::with_capacity(batch.batch_size());
    for (i, ex) in pass.examples.iter().enumerate() {
        let mut per_token = Vec::with_capacity(batch.lengths[i]);
        for (t, &leaf) in ex.embed_pert.iter().enumerate() {
            let g = pass.graph.grad(leaf);
            let v = match reduction {
                Reduction::GradXInput => {
                    let id = batch.ids[(i, t)] as usize;
                    let mut dot = 0.0;
                    for j in 0..params.dims.embed {
                        dot += g[(j, 0)] * params.embedding[(id, j)];
                    }
                    dot.abs()
                }
                Reduction::GradL2 => g.iter().map(|&x| x * x).sum::<f64>().sqrt(),
            };
            per_token.push(v);
        }
        values.push(per_token);
    }
    Ok(SaliencyMap { values, reduction })
}

/// Attention weights from a clean forward pass, one padded vector per
/// example (zero at masked-out positions).
pub fn attention_importance(
    params: &ModelParams,
    batch: &crate::data::TokenBatch,
    kind: ScoreKind,
) -> Result<Vec<Vec<f64>>> {
    let (_, records) = predict(batch, params, kind, None)?;
    Ok(records.into_iter().map(|r| r.weights).collect())
}

// ---------------------------------------------------------------------------
// Kendall rank correlation, tau-b.
// ---------------------------------------------------------------------------

/// Tie-corrected Kendall rank correlation (tau-b) via the merge-sort
/// inversion count. Errors on length mismatch, length < 2, non-finite
/// values, and rankings where one side is entirely tied (tau undefined).
pub fn kendall_tau(r1: &[f64], r2: &[f64]) -> Result<f64> {
    if r1.len() != r2.len() {
        return Err(Error::invalid(format!(
            "rank lists differ in length: {} vs {}",
            r1.len(),
            r2.len()
        )));
    }
    let n = r1.len();
    if n < 2 {
        return Err(Error::invalid("rank correlation needs at least 2 items"));
    }
    if r1.iter().chain(r2).any(|v| !v.is_finite()) {
        return Err(Error::invalid("rank values must be finite"));
    }

    let mut pairs: Vec<(f64, f64)> = r1.iter().copied().zip(r2.iter().copied()).collect();
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite")
            .then(a.1.partial_cmp(&b.1).expect("finite"))
    });

    let run_pairs = |count: i64| count * (count - 1) / 2;

    // Tie counts in x and joint (x, y) ties over the x-sorted order.
    let mut tied_x: i64 = 0;
    let mut tied_xy: i64 = 0;
    let mut x_run: i64 = 1;
    let mut xy_run: i64 = 1;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            x_run += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                xy_run += 1;
            } else {
                tied_xy += run_pairs(xy_run);
                xy_run = 1;
            }
        } else {
            tied_x += run_pairs(x_run);
            x_run = 1;
            tied_xy += run_pairs(xy_run);
            xy_run = 1;
        }
    }
    tied_x += run_pairs(x_run);
    tied_xy += run_pairs(xy_run);

    // Discordant pairs are inversions by y once sorted by (x, y).
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let mut swaps: i64 = 0;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid || j < end {
                if i < mid && (j >= end || ys[i] <= ys[j]) {
                    buf[k] = ys[i];
                    i += 1;
                } else {
                    buf[k] = ys[j];
                    swaps += (mid - i) as i64;
                    j += 1;
                }
                k += 1;
            }
            ys[start..end].copy_from_slice(&buf[start..end]);
            start = end;
        }
        width *= 2;
    }

    // Tie count in y over the now y-sorted values.
    let mut tied_y: i64 = 0;
    let mut y_run: i64 = 1;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            y_run += 1;
        } else {
            tied_y += run_pairs(y_run);
            y_run = 1;
        }
    }
    tied_y += run_pairs(y_run);

    let n0 = run_pairs(n as i64);
    if n0 == tied_x || n0 == tied_y {
        return Err(Error::DegenerateRanking);
    }
    let s = n0 - tied_x - tied_y + tied_xy - 2 * swaps;
    let denom = ((n0 - tied_x) as f64 * (n0 - tied_y) as f64).sqrt();
    Ok(s as f64 / denom)
}

// ---------------------------------------------------------------------------
// Agreement reports.
// ---------------------------------------------------------------------------

/// Attention/gradient agreement for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub tokens: Vec<String>,
    /// Gradient importance per real token, for the predicted class.
    pub grad_importance: Vec<f64>,
    /// Attention weights per real token.
    pub attention: Vec<f64>,
    /// Kendall tau-b between the two rankings.
    pub tau: f64,
    pub predicted_class: usize,
}

/// Mean agreement for one predicted class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAgreement {
    pub class: usize,
    pub count: usize,
    pub mean_tau: f64,
}

/// Aggregates over an [`agreement_report`] run. Examples whose tau is
/// undefined (fewer than two tokens, or fully tied rankings) are skipped
/// and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub count: usize,
    pub skipped: usize,
    pub mean_tau: f64,
    pub median_tau: f64,
    pub per_class: Vec<ClassAgreement>,
}

#[derive(Debug, Clone)]
pub struct AgreementReport {
    pub reports: Vec<AttributionReport>,
    pub summary: AgreementSummary,
}

/// Run attribution over a text collection: for each example, predict, take
/// the predicted class, compute gradient importance and attention weights,
/// and correlate them. Tokens beyond `t_max` are truncated exactly as in
/// training; OOV tokens keep their surface form in the report.
pub fn agreement_report<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocabulary,
    kind: ScoreKind,
    texts: &[S],
    t_max: usize,
    reduction: Reduction,
) -> Result<AgreementReport> {
    let mut reports = Vec::new();
    let mut skipped = 0usize;
    for text in texts {
        let mut tokens = crate::data::tokenize(text.as_ref());
        tokens.truncate(t_max);
        if tokens.len() < 2 {
            skipped += 1;
            continue;
        }
        let batch = encode_batch(&[(tokens.clone(), None)], vocab, tokens.len())?;
        let (preds, records) = predict(&batch, params, kind, None)?;
        let predicted = preds[0].predicted_class();
        let saliency =
            saliency_for_classes(params, &batch, kind, &[predicted], reduction)?;
        let attention: Vec<f64> = records[0].weights[..tokens.len()].to_vec();
        let grad_importance = saliency.values[0].clone();
        let tau = match kendall_tau(&grad_importance, &attention) {
            Ok(t) => t,
            Err(Error::DegenerateRanking) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        reports.push(AttributionReport {
            tokens,
            grad_importance,
            attention,
            tau,
            predicted_class: predicted,
        });
    }
    let summary = summarize(&reports, skipped);
    Ok(AgreementReport { reports, summary })
}

/// Recompute the aggregates from per-example reports.
pub fn summarize(reports: &[AttributionReport], skipped: usize) -> AgreementSummary {
    let count = reports.len();
    let mean_tau = if count == 0 {
        f64::NAN
    } else {
        reports.iter().map(|r| r.tau).sum::<f64>() / count as f64
    };
    let median_tau = if count == 0 {
        f64::NAN
    } else {
        let mut taus: Vec<f64> = reports.iter().map(|r| r.tau).collect();
        taus.sort_by(|a, b| a.partial_cmp(b).expect("finite tau"));
        if count % 2 == 1 {
            taus[count / 2]
        } else {
            (taus[count / 2 - 1] + taus[count / 2]) / 2.0
        }
    };
    let max_class = reports.iter().map(|r| r.predicted_class).max().unwrap_or(0);
    let mut per_class = Vec::new();
    for class in 0..=max_class {
        let members: Vec<&AttributionReport> = reports
            .iter()
            .filter(|r| r.predicted_class == class)
            .collect();
        if !members.is_empty() {
            per_class.push(ClassAgreement {
                class,
                count: members.len(),
                mean_tau: members.iter().map(|r| r.tau).sum::<f64>() / members.len() as f64,
            });
        }
    }
    AgreementSummary {
        count,
        skipped,
        mean_tau,
        median_tau,
        per_class,
    }
}

/// Write one report per line with floats at 17 significant digits.
pub fn write_reports_jsonl(reports: &[AttributionReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        writeln!(f, "{}", jsonfmt::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<AttributionReport>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Heatmap rendering.
// ---------------------------------------------------------------------------

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&#39;")
}

fn span_row(tokens: &[String], values: &[f64], rgb: (u8, u8, u8)) -> String {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut row = String::new();
    for (tok, &v) in tokens.iter().zip(values) {
        let alpha = if max > 0.0 { v / max } else { 0.0 };
        row.push_str(&format!(
            "<span style=\"background-color:rgba({},{},{},{:.4})\">{}</span> ",
            rgb.0,
            rgb.1,
            rgb.2,
            alpha,
            escape_html(tok)
        ));
    }
    row
}

/// Render one report as a self-contained HTML fragment: attention weights in
/// the first row, gradient importance in the second, each shaded linearly
/// from white (zero) to full saturation (that row's maximum).
pub fn render_heatmap(report: &AttributionReport) -> String {
    let attn = span_row(&report.tokens, &report.attention, (214, 84, 48));
    let grad = span_row(&report.tokens, &report.grad_importance, (48, 105, 214));
    format!(
        "<div class=\"example\">\n\
         <div class=\"meta\">predicted class {} &middot; tau {:.4}</div>\n\
         <div class=\"row\"><span class=\"tag\">attention</span> {}</div>\n\
         <div class=\"row\"><span class=\"tag\">gradient</span> {}</div>\n\
         </div>",
        report.predicted_class, report.tau, attn, grad
    )
}

/// Full standalone document with every example's heatmap; no external
/// assets.
pub fn render_heatmaps_document(reports: &[AttributionReport]) -> String {
    let mut body = String::new();
    for r in reports {
        body.push_str(&render_heatmap(r));
        body.push('\n');
    }
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\
         <title>attention and gradient heatmaps</title>\n<style>\n\
         body {{ font-family: sans-serif; margin: 2em; }}\n\
         .example {{ margin-bottom: 1.2em; }}\n\
         .meta {{ color: #555; font-size: 0.85em; }}\n\
         .row {{ margin: 0.15em 0; }}\n\
         .tag {{ display: inline-block; width: 6em; color: #888; font-size: 0.8em; }}\n\
         span {{ padding: 0 0.15em; }}\n\
         </style></head><body>\n<h1>attention vs. gradient importance</h1>\n{body}</body></html>\n"
    )
}

pub fn write_heatmaps_html(reports: &[AttributionReport], path: &Path) -> Result<()> {
    std::fs::write(path, render_heatmaps_document(reports))?;
    Ok(())
}
