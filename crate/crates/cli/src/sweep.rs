//! The `sweep` command: cross an epsilon grid with the seed battery and
//! summarize how accuracy depends on the perturbation size.

use std::path::PathBuf;

use attnrobust_core::adversarial::Variant;
use attnrobust_core::data::{corpus_fingerprint, load_corpus};
use attnrobust_core::jsonfmt;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::{mean, run_seed, std_pop};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub seed: u64,
    pub test_acc: f64,
    pub mean_tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonAggregate {
    pub epsilon: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub tau_mean: f64,
    pub tau_std: f64,
}

/// sweep.json: the full grid cross plus per-epsilon aggregates and the
/// robustness scalar (std of per-epsilon mean accuracies; smaller means
/// less dependence on perturbation size).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variant: String,
    pub corpus_fingerprint: String,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
    pub per_epsilon: Vec<EpsilonAggregate>,
    pub robustness: f64,
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let grid: Result<Vec<f64>, _> = text
        .split(',')
        .map(|part| part.trim().parse::<f64>())
        .collect();
    let grid = grid.map_err(|e| CliError::validation(format!("epsilon grid: {e}")))?;
    ExperimentConfig::validate_grid(&grid)?;
    Ok(grid)
}

/// Aggregate finished cells; separated out so emitted numbers stay exactly
/// recomputable from the emitted per-cell values.
pub fn summarize_cells(grid: &[f64], cells: &[SweepCell]) -> (Vec<EpsilonAggregate>, f64) {
    let per_epsilon: Vec<EpsilonAggregate> = grid
        .iter()
        .map(|&eps| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.epsilon == eps)
                .map(|c| c.test_acc)
                .collect();
            let taus: Vec<f64> = cells
                .iter()
                .filter(|c| c.epsilon == eps)
                .map(|c| c.mean_tau)
                .collect();
            EpsilonAggregate {
                epsilon: eps,
                acc_mean: mean(&accs),
                acc_std: std_pop(&accs),
                tau_mean: mean(&taus),
                tau_std: std_pop(&taus),
            }
        })
        .collect();
    let means: Vec<f64> = per_epsilon.iter().map(|a| a.acc_mean).collect();
    let robustness = std_pop(&means);
    (per_epsilon, robustness)
}

pub fn execute(config: &ExperimentConfig, grid: &[f64]) -> Result<PathBuf, CliError> {
    ExperimentConfig::validate_grid(grid)?;
    if config.variant == Variant::Vanilla {
        return Err(CliError::validation(
            "variant: vanilla has no perturbation size to sweep",
        ));
    }
    let corpus = load_corpus(&config.corpus_dir, config.format)?;
    let fingerprint = corpus_fingerprint(&config.corpus_dir)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| CliError::other(e.to_string()))?;

    let mut cells = Vec::with_capacity(grid.len() * config.seeds.len());
    for &epsilon in grid {
        for &seed in &config.seeds {
            let cell_dir = config
                .output_dir
                .join(format!("eps_{epsilon}"))
                .join(format!("seed_{seed}"));
            let result = run_seed(config, &corpus, epsilon, seed, Some(&cell_dir))?;
            cells.push(SweepCell {
                epsilon,
                seed,
                test_acc: result.test_acc,
                mean_tau: result.mean_tau,
            });
        }
    }
    let (per_epsilon, robustness) = summarize_cells(grid, &cells);
    let summary = SweepSummary {
        variant: config.variant.as_str().to_string(),
        corpus_fingerprint: fingerprint,
        grid: grid.to_vec(),
        seeds: config.seeds.clone(),
        cells,
        per_epsilon,
        robustness,
    };
    let path = config.output_dir.join("sweep.json");
    std::fs::write(&path, jsonfmt::to_string(&summary)?)
        .map_err(|e| CliError::other(e.to_string()))?;
    Ok(path)
}
