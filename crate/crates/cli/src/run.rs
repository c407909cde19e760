//! The `run` command: train each seed, evaluate test accuracy and
//! attention/gradient agreement, write per-seed artifacts and summary.json.

use std::path::{Path, PathBuf};

use attnrobust_core::attribution::{
    agreement_report, write_heatmaps_html, write_reports_jsonl, Reduction,
};
use attnrobust_core::data::{corpus_fingerprint, load_corpus, CorpusSplit};
use attnrobust_core::jsonfmt;
use attnrobust_core::training::{
    batches_from, evaluate_accuracy, prepare_labeled, train, RunPaths,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_acc: f64,
    pub mean_tau: f64,
    pub median_tau: f64,
    pub skipped: usize,
    pub best_val_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub tau_mean: f64,
    pub tau_std: f64,
}

/// summary.json: everything downstream tooling needs, with aggregates that
/// are exactly recomputable from the per-seed values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub epsilon: f64,
    pub score_kind: String,
    pub corpus_fingerprint: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub aggregates: Aggregates,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation; zero for a single value.
pub fn std_pop(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn aggregates_of(per_seed: &[SeedResult]) -> Aggregates {
    let accs: Vec<f64> = per_seed.iter().map(|r| r.test_acc).collect();
    let taus: Vec<f64> = per_seed.iter().map(|r| r.mean_tau).collect();
    Aggregates {
        acc_mean: mean(&accs),
        acc_std: std_pop(&accs),
        tau_mean: mean(&taus),
        tau_std: std_pop(&taus),
    }
}

/// Train one seed of an experiment, writing checkpoints, metrics, reports,
/// and heatmaps into `seed_dir` when given. Returns the seed's evaluation.
pub fn run_seed(
    config: &ExperimentConfig,
    corpus: &CorpusSplit,
    epsilon: f64,
    seed: u64,
    seed_dir: Option<&Path>,
) -> Result<SeedResult, CliError> {
    let mut settings = config.settings_for_seed(seed);
    settings.adv.epsilon = epsilon;

    let paths = match seed_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::other(e.to_string()))?;
            Some(RunPaths::in_dir(dir))
        }
        None => None,
    };
    let outcome = train(&settings, corpus, paths.as_ref())?;
    let model = &outcome.state.best_params;

    let test_set = prepare_labeled(&corpus.test, &outcome.labels)?;
    if test_set.is_empty() {
        return Err(CliError::validation("corpus has no usable test examples"));
    }
    let test_batches = batches_from(
        &test_set,
        &outcome.vocab,
        settings.t_max,
        settings.batch_size,
    )?;
    let test_acc = evaluate_accuracy(model, settings.score_kind, &test_batches)?;

    let test_texts: Vec<&str> = corpus.test.iter().map(|e| e.text.as_str()).collect();
    let agreement = agreement_report(
        model,
        &outcome.vocab,
        settings.score_kind,
        &test_texts,
        settings.t_max,
        Reduction::GradXInput,
    )?;
    if let Some(dir) = seed_dir {
        write_reports_jsonl(&agreement.reports, &dir.join("reports.jsonl"))?;
        let shown = agreement
            .reports
            .iter()
            .take(config.heatmap_examples)
            .cloned()
            .collect::<Vec<_>>();
        write_heatmaps_html(&shown, &dir.join("heatmaps.html"))?;
    }

    Ok(SeedResult {
        seed,
        test_acc,
        mean_tau: agreement.summary.mean_tau,
        median_tau: agreement.summary.median_tau,
        skipped: agreement.summary.skipped,
        best_val_acc: outcome.state.best_val_acc,
    })
}

/// Full run over the seed battery; returns the summary.json path.
pub fn execute(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let corpus = load_corpus(&config.corpus_dir, config.format)?;
    let fingerprint = corpus_fingerprint(&config.corpus_dir)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| CliError::other(e.to_string()))?;

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let seed_dir = config.output_dir.join(format!("seed_{seed}"));
        per_seed.push(run_seed(config, &corpus, config.epsilon, seed, Some(&seed_dir))?);
    }
    let summary = RunSummary {
        variant: config.variant.as_str().to_string(),
        epsilon: config.epsilon,
        score_kind: config.model.score.as_str().to_string(),
        corpus_fingerprint: fingerprint,
        seeds: config.seeds.clone(),
        aggregates: aggregates_of(&per_seed),
        per_seed,
    };
    let path = config.output_dir.join("summary.json");
    std::fs::write(&path, jsonfmt::to_string(&summary)?)
        .map_err(|e| CliError::other(e.to_string()))?;
    Ok(path)
}
