//! The `gen-corpus` command: write a deterministic synthetic sentiment
//! corpus in the standard directory layout.

use std::path::Path;

use attnrobust_core::synth::{sentiment_corpus, write_corpus_jsonl, SynthSpec};

use crate::CliError;

pub fn execute(
    dir: &Path,
    train: usize,
    valid: usize,
    test: usize,
    unlabeled: usize,
    ood_unlabeled: bool,
    seed: u64,
) -> Result<(), CliError> {
    if train == 0 {
        return Err(CliError::validation("train: need at least one example"));
    }
    let spec = SynthSpec {
        train,
        valid,
        test,
        unlabeled,
        out_of_domain_pool: ood_unlabeled,
        seed,
    };
    let corpus = sentiment_corpus(&spec);
    write_corpus_jsonl(&corpus, dir)?;
    Ok(())
}
