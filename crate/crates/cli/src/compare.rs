//! The `compare` command: line up completed runs over the same corpus and
//! seed battery, with paired per-seed differences.

use std::path::{Path, PathBuf};

use attnrobust_core::jsonfmt;
use serde::{Deserialize, Serialize};

use crate::run::{mean, RunSummary};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedDiff {
    pub seed: u64,
    /// second run minus first run.
    pub acc_diff: f64,
    pub tau_diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub first: String,
    pub second: String,
    pub per_seed: Vec<SeedDiff>,
    pub acc_mean_diff: f64,
    pub tau_mean_diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub dir: String,
    pub variant: String,
    pub epsilon: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub tau_mean: f64,
    pub tau_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub corpus_fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    pub pairs: Vec<PairedComparison>,
}

fn load_summary(dir: &Path) -> Result<RunSummary, CliError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::validation(format!("{} is not a completed run: {e}", dir.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn build(dirs: &[PathBuf]) -> Result<CompareSummary, CliError> {
    if dirs.len() < 2 {
        return Err(CliError::validation("compare needs at least two run directories"));
    }
    let summaries: Vec<(String, RunSummary)> = dirs
        .iter()
        .map(|d| load_summary(d).map(|s| (d.display().to_string(), s)))
        .collect::<Result<_, _>>()?;

    let (_, first) = &summaries[0];
    for (name, s) in &summaries[1..] {
        if s.corpus_fingerprint != first.corpus_fingerprint {
            return Err(CliError::validation(format!(
                "{name} was produced on a different corpus"
            )));
        }
        if s.seeds != first.seeds {
            return Err(CliError::validation(format!(
                "{name} used a different seed battery"
            )));
        }
    }

    let rows = summaries
        .iter()
        .map(|(name, s)| CompareRow {
            dir: name.clone(),
            variant: s.variant.clone(),
            epsilon: s.epsilon,
            acc_mean: s.aggregates.acc_mean,
            acc_std: s.aggregates.acc_std,
            tau_mean: s.aggregates.tau_mean,
            tau_std: s.aggregates.tau_std,
        })
        .collect();

    let mut pairs = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let (name_a, a) = &summaries[i];
            let (name_b, b) = &summaries[j];
            let per_seed: Vec<SeedDiff> = a
                .per_seed
                .iter()
                .zip(&b.per_seed)
                .map(|(ra, rb)| SeedDiff {
                    seed: ra.seed,
                    acc_diff: rb.test_acc - ra.test_acc,
                    tau_diff: rb.mean_tau - ra.mean_tau,
                })
                .collect();
            let acc_diffs: Vec<f64> = per_seed.iter().map(|d| d.acc_diff).collect();
            let tau_diffs: Vec<f64> = per_seed.iter().map(|d| d.tau_diff).collect();
            pairs.push(PairedComparison {
                first: name_a.clone(),
                second: name_b.clone(),
                acc_mean_diff: mean(&acc_diffs),
                tau_mean_diff: mean(&tau_diffs),
                per_seed,
            });
        }
    }

    Ok(CompareSummary {
        corpus_fingerprint: first.corpus_fingerprint.clone(),
        seeds: first.seeds.clone(),
        rows,
        pairs,
    })
}

fn render_html(summary: &CompareSummary) -> String {
    let mut rows = String::new();
    for r in &summary.rows {
        rows.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td>\
             <td>{:.4}</td><td>{:.4}</td></tr>\n",
            r.dir, r.variant, r.epsilon, r.acc_mean, r.acc_std, r.tau_mean, r.tau_std
        ));
    }
    let mut pair_rows = String::new();
    for p in &summary.pairs {
        pair_rows.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{:+.4}</td><td>{:+.4}</td></tr>\n",
            p.first, p.second, p.acc_mean_diff, p.tau_mean_diff
        ));
    }
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>run comparison</title>\n\
         <style>body{{font-family:sans-serif;margin:2em}}table{{border-collapse:collapse}}\
         td,th{{border:1px solid #bbb;padding:0.3em 0.7em;text-align:left}}</style>\
         </head><body>\n<h1>run comparison</h1>\n\
         <table><tr><th>run</th><th>variant</th><th>epsilon</th><th>acc mean</th>\
         <th>acc std</th><th>tau mean</th><th>tau std</th></tr>\n{rows}</table>\n\
         <h2>paired differences (second − first)</h2>\n\
         <table><tr><th>first</th><th>second</th><th>acc diff</th><th>tau diff</th></tr>\n\
         {pair_rows}</table>\n</body></html>\n"
    )
}

pub fn execute(dirs: &[PathBuf], out: &Path) -> Result<PathBuf, CliError> {
    let summary = build(dirs)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::other(e.to_string()))?;
    let json_path = out.join("compare.json");
    std::fs::write(&json_path, jsonfmt::to_string(&summary)?)
        .map_err(|e| CliError::other(e.to_string()))?;
    std::fs::write(out.join("compare.html"), render_html(&summary))
        .map_err(|e| CliError::other(e.to_string()))?;
    Ok(json_path)
}
