//! Corpus ingestion: tokenization, vocabulary construction, and padded
//! integer batches with masks.
//!
//! File conventions: a corpus directory holds `train`, `valid`, `test`, and
//! `unlabeled` files in either JSONL (`{"text": ..., "label": ...}` with the
//! label optional) or TSV (`text<TAB>label`, label column optional). Records
//! without a label are routed to the unlabeled pool regardless of which file
//! they appear in.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved id for padding positions.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercased whitespace/punctuation tokenization. Alphanumeric runs become
/// tokens; every other non-whitespace character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token-to-id mapping with reserved PAD and UNK entries.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub min_freq: usize,
}

impl Vocabulary {
    /// Build from tokenized documents. Tokens with frequency >= `min_freq`
    /// get ids starting at 2, assigned in descending frequency order with
    /// lexicographic tie-break, so two builds over the same corpus agree.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if min_freq < 1 {
            return Err(Error::invalid("min_freq must be >= 1"));
        }
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_ref()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(kept.iter().map(|&(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_freq,
        })
    }

    /// Total number of ids, including PAD and UNK.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for `token`, falling back to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }
}

/// Class-name vocabulary, fixed from the train split only.
#[derive(Debug, Clone)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// Collect distinct label strings in lexicographic order.
    pub fn from_train(train: &[LabeledExample]) -> Result<Self> {
        let mut names: Vec<String> = train.iter().map(|e| e.label.clone()).collect();
        names.sort();
        names.dedup();
        if names.len() < 2 {
            return Err(Error::invalid(format!(
                "train split defines {} class(es); need at least 2",
                names.len()
            )));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(LabelVocabulary { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    /// Class index for `label`; unseen labels are an error rather than a
    /// silent extra class.
    pub fn class(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// Padded integer batch. `mask[(i, t)]` is true exactly at real tokens, and
/// ids at masked-out positions are PAD.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Array2<u32>,
    pub lengths: Vec<usize>,
    pub mask: Array2<bool>,
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn t_max(&self) -> usize {
        self.ids.ncols()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Copy with the label column dropped.
    pub fn without_labels(&self) -> TokenBatch {
        TokenBatch {
            ids: self.ids.clone(),
            lengths: self.lengths.clone(),
            mask: self.mask.clone(),
            labels: None,
        }
    }

    /// Total number of masked-in positions across the batch.
    pub fn masked_in(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Encode tokenized examples into a padded batch. Sequences are truncated or
/// padded to `t_max`; OOV tokens map to UNK. Labels must be present for all
/// examples or none.
pub fn encode_batch<S: AsRef<str>>(
    examples: &[(Vec<S>, Option<usize>)],
    vocab: &Vocabulary,
    t_max: usize,
) -> Result<TokenBatch> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot encode an empty example list"));
    }
    if t_max < 1 {
        return Err(Error::invalid("t_max must be >= 1"));
    }
    let labeled = examples[0].1.is_some();
    if examples.iter().any(|(_, l)| l.is_some() != labeled) {
        return Err(Error::invalid(
            "examples mix labeled and unlabeled records in one batch",
        ));
    }
    let b = examples.len();
    let mut ids = Array2::from_elem((b, t_max), PAD_ID);
    let mut mask = Array2::from_elem((b, t_max), false);
    let mut lengths = Vec::with_capacity(b);
    for (i, (tokens, _)) in examples.iter().enumerate() {
        let len = tokens.len().min(t_max);
        lengths.push(len);
        for (t, tok) in tokens.iter().take(len).enumerate() {
            ids[(i, t)] = vocab.id(tok.as_ref());
            mask[(i, t)] = true;
        }
    }
    let labels = labeled.then(|| examples.iter().map(|(_, l)| l.unwrap()).collect());
    Ok(TokenBatch {
        ids,
        lengths,
        mask,
        labels,
    })
}

/// One labeled record as read from disk; labels stay strings until a
/// [`LabelVocabulary`] maps them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub label: String,
}

/// Train/validation/test splits plus the unlabeled pool. Entries in the pool
/// carry no label field at all.
#[derive(Debug, Clone, Default)]
pub struct CorpusSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub unlabeled_pool: Vec<String>,
}

/// On-disk corpus file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    fn extension(self) -> &'static str {
        match self {
            CorpusFormat::Jsonl => "jsonl",
            CorpusFormat::Tsv => "tsv",
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

fn label_to_string(path: &str, line: usize, value: serde_json::Value) -> Result<String> {
    match value {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(Error::Parse {
            path: path.to_string(),
            line,
            msg: format!("label must be a string or integer, got {other}"),
        }),
    }
}

fn read_split_file(
    path: &Path,
    format: CorpusFormat,
    labeled: &mut Vec<LabeledExample>,
    pool: &mut Vec<String>,
) -> Result<()> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            CorpusFormat::Jsonl => {
                let rec: JsonRecord =
                    serde_json::from_str(&line).map_err(|e| Error::Parse {
                        path: display.clone(),
                        line: lineno,
                        msg: e.to_string(),
                    })?;
                match rec.label {
                    Some(v) if !v.is_null() => labeled.push(LabeledExample {
                        text: rec.text,
                        label: label_to_string(&display, lineno, v)?,
                    }),
                    _ => pool.push(rec.text),
                }
            }
            CorpusFormat::Tsv => {
                let mut parts = line.splitn(2, '\t');
                let text = parts.next().unwrap_or_default().to_string();
                match parts.next() {
                    Some(label) if !label.is_empty() => labeled.push(LabeledExample {
                        text,
                        label: label.to_string(),
                    }),
                    _ => pool.push(text),
                }
            }
        }
    }
    Ok(())
}

/// Load a corpus directory (`train.*` required; `valid.*`, `test.*`, and
/// `unlabeled.*` optional). Records missing a label go to the unlabeled pool
/// no matter which file they came from.
pub fn load_corpus(dir: &Path, format: CorpusFormat) -> Result<CorpusSplit> {
    let mut split = CorpusSplit::default();
    let ext = format.extension();

    let train_path = dir.join(format!("train.{ext}"));
    if !train_path.is_file() {
        return Err(Error::invalid(format!(
            "corpus directory {} has no {}",
            dir.display(),
            train_path.file_name().unwrap().to_string_lossy()
        )));
    }
    read_split_file(
        &train_path,
        format,
        &mut split.train,
        &mut split.unlabeled_pool,
    )?;

    let valid_path = dir.join(format!("valid.{ext}"));
    if valid_path.is_file() {
        read_split_file(
            &valid_path,
            format,
            &mut split.validation,
            &mut split.unlabeled_pool,
        )?;
    }
    let test_path = dir.join(format!("test.{ext}"));
    if test_path.is_file() {
        read_split_file(&test_path, format, &mut split.test, &mut split.unlabeled_pool)?;
    }
    let unlabeled_path = dir.join(format!("unlabeled.{ext}"));
    if unlabeled_path.is_file() {
        let mut stray = Vec::new();
        read_split_file(&unlabeled_path, format, &mut stray, &mut split.unlabeled_pool)?;
        // Labels in the unlabeled file are dropped, not trusted.
        split.unlabeled_pool.extend(stray.into_iter().map(|e| e.text));
    }
    Ok(split)
}

/// Content hash over the corpus files, used to detect mismatched run inputs.
pub fn corpus_fingerprint(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in ["train", "valid", "test", "unlabeled"] {
        for ext in ["jsonl", "tsv"] {
            let path = dir.join(format!("{name}.{ext}"));
            if path.is_file() {
                hasher.update(name.as_bytes());
                hasher.update([b'.']);
                hasher.update(ext.as_bytes());
                hasher.update([0u8]);
                hasher.update(std::fs::read(&path)?);
                hasher.update([0u8]);
            }
        }
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
