//! Deterministic synthetic corpora for experiments and tests.
//!
//! The sentiment generator builds short review-like sentences where a
//! handful of polarity words decide the label and the rest is neutral
//! filler. Polarity words are sometimes negated ("not wonderful"), which
//! flips their contribution, and a small fraction of labels is flipped
//! outright, so a trained model keeps real uncertainty instead of
//! saturating. The out-of-domain generator produces weather/sports chatter
//! over the same fillers for semi-supervised runs with a mismatched
//! unlabeled pool.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CorpusSplit, LabeledExample};
use crate::error::Result;

const POSITIVE: &[&str] = &[
    "wonderful",
    "superb",
    "delightful",
    "brilliant",
    "charming",
    "gripping",
    "hilarious",
    "masterful",
    "touching",
    "stunning",
    "inventive",
    "nuanced",
    "riveting",
    "luminous",
    "graceful",
    "exhilarating",
    "heartfelt",
    "sharp",
];

const NEGATIVE: &[&str] = &[
    "dreadful",
    "tedious",
    "clumsy",
    "lifeless",
    "bland",
    "shallow",
    "grating",
    "dismal",
    "plodding",
    "hollow",
    "stilted",
    "murky",
    "leaden",
    "contrived",
    "overwrought",
    "aimless",
    "forgettable",
    "sloppy",
];

const FILLER: &[&str] = &[
    "the", "a", "this", "that", "movie", "film", "plot", "story", "acting", "cast",
    "script", "pacing", "scene", "ending", "director", "camera", "it", "was", "felt",
    "seemed", "with", "and", "overall", "really", "quite", "rather", "somewhat", "mostly",
];

const TOPIC: &[&str] = &[
    "rain", "clouds", "sunny", "storm", "wind", "forecast", "match", "team", "score",
    "season", "playing", "stadium", "cold", "warm", "tomorrow", "morning", "kickoff",
    "umbrella",
];

/// Sizes and seed for one generated corpus.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub unlabeled: usize,
    /// Draw the unlabeled pool from the out-of-domain topic generator
    /// instead of the sentiment domain.
    pub out_of_domain_pool: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 800,
            valid: 200,
            test: 200,
            unlabeled: 0,
            out_of_domain_pool: false,
            seed: 7,
        }
    }
}

/// Fraction of sentences whose label is flipped after construction.
const LABEL_NOISE: f64 = 0.06;
/// Probability that a polarity word is negated, flipping its contribution.
const NEGATION_RATE: f64 = 0.25;

fn sentiment_sentence(rng: &mut ChaCha8Rng) -> (String, &'static str) {
    let lean_positive = rng.gen_bool(0.5);
    let (own, other) = if lean_positive {
        (POSITIVE, NEGATIVE)
    } else {
        (NEGATIVE, POSITIVE)
    };
    // Polarity-bearing chunks: mostly from the leaned lexicon, sometimes a
    // distractor from the other side, each possibly negated. The label is
    // whatever polarity actually wins after negation.
    let signal = rng.gen_range(1..=3usize);
    let distractors = if signal >= 2 && rng.gen_bool(0.35) { 1 } else { 0 };
    let mut chunks: Vec<(Vec<&str>, i32)> = Vec::new();
    let mut balance = 0i32;
    for i in 0..signal + distractors {
        let (lexicon, mut polarity) = if i < signal { (own, 1) } else { (other, -1) };
        let word = lexicon[rng.gen_range(0..lexicon.len())];
        let negated = rng.gen_bool(NEGATION_RATE);
        let chunk = if negated {
            polarity = -polarity;
            vec!["not", word]
        } else {
            vec![word]
        };
        balance += polarity;
        chunks.push((chunk, polarity));
    }
    if balance == 0 {
        // Break ties with one plain word from the leaned lexicon.
        let word = own[rng.gen_range(0..own.len())];
        balance += 1;
        chunks.push((vec![word], 1));
    }
    let positive = (balance > 0) == lean_positive;

    let fillers = rng.gen_range(5..=10usize);
    let mut parts: Vec<Vec<&str>> = chunks.into_iter().map(|(c, _)| c).collect();
    for _ in 0..fillers {
        parts.push(vec![FILLER[rng.gen_range(0..FILLER.len())]]);
    }
    parts.shuffle(rng);
    let mut words: Vec<&str> = parts.into_iter().flatten().collect();
    words.push(if rng.gen_bool(0.2) { "!" } else { "." });
    let text = words.join(" ");

    let mut label = positive;
    if rng.gen_bool(LABEL_NOISE) {
        label = !label;
    }
    (text, if label { "pos" } else { "neg" })
}

fn topic_sentence(rng: &mut ChaCha8Rng) -> String {
    let topical = rng.gen_range(2..=4usize);
    let fillers = rng.gen_range(4..=8usize);
    let mut words: Vec<&str> = Vec::with_capacity(topical + fillers);
    for _ in 0..topical {
        words.push(TOPIC[rng.gen_range(0..TOPIC.len())]);
    }
    for _ in 0..fillers {
        words.push(FILLER[rng.gen_range(0..FILLER.len())]);
    }
    words.shuffle(rng);
    let mut text = words.join(" ");
    text.push_str(" .");
    text
}

/// Generate a binary sentiment corpus. Two calls with the same spec produce
/// identical splits.
pub fn sentiment_corpus(spec: &SynthSpec) -> CorpusSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labeled = |n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledExample> {
        (0..n)
            .map(|_| {
                let (text, label) = sentiment_sentence(rng);
                LabeledExample {
                    text,
                    label: label.to_string(),
                }
            })
            .collect()
    };
    let train = labeled(spec.train, &mut rng);
    let validation = labeled(spec.valid, &mut rng);
    let test = labeled(spec.test, &mut rng);
    let unlabeled_pool = (0..spec.unlabeled)
        .map(|_| {
            if spec.out_of_domain_pool {
                topic_sentence(&mut rng)
            } else {
                sentiment_sentence(&mut rng).0
            }
        })
        .collect();
    CorpusSplit {
        train,
        validation,
        test,
        unlabeled_pool,
    }
}

fn write_labeled(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        writeln!(
            f,
            "{}",
            serde_json::json!({"text": e.text, "label": e.label})
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Write the split into a corpus directory using the standard file names.
/// Empty splits produce no file.
pub fn write_corpus_jsonl(split: &CorpusSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_labeled(&dir.join("train.jsonl"), &split.train)?;
    if !split.validation.is_empty() {
        write_labeled(&dir.join("valid.jsonl"), &split.validation)?;
    }
    if !split.test.is_empty() {
        write_labeled(&dir.join("test.jsonl"), &split.test)?;
    }
    if !split.unlabeled_pool.is_empty() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("unlabeled.jsonl"))?);
        for text in &split.unlabeled_pool {
            writeln!(f, "{}", serde_json::json!({ "text": text }))?;
        }
        f.flush()?;
    }
    Ok(())
}
