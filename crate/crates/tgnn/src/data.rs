//! Corpus loading and preprocessing: labeled `<label>\t<text>` files,
//! vocabulary construction with a trained UNK bucket, validation splits,
//! and pretrained embedding loading.
//!
//! Tokenization is lowercase + whitespace split; the standard R8/R52/Ohsumed
//! distributions are already tokenized, so nothing further is done here.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Reserved id for the unknown-word bucket. Rare training words are mapped
/// here so its parameters get trained; unseen test words land here too.
pub const UNK_ID: u32 = 0;
/// Surface form used for the UNK bucket in dumps and checkpoints.
pub const UNK_WORD: &str = "<unk>";

/// A document before vocabulary ids exist: dense label id plus raw tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub label_id: usize,
    pub tokens: Vec<String>,
}

/// A document encoded against a [`Vocabulary`]: every token is a word id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub label_id: usize,
    pub tokens: Vec<u32>,
}

/// Label-name <-> dense-id map, ordered by first appearance in the
/// training file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { names, index }
    }

    pub fn get_or_insert(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Corpus as loaded from disk, before vocabulary encoding.
#[derive(Debug, Clone)]
pub struct RawCorpus {
    pub train: Vec<RawDocument>,
    pub test: Vec<RawDocument>,
    pub labels: LabelMap,
    /// Documents dropped because preprocessing left them without tokens.
    pub dropped_train: usize,
    pub dropped_test: usize,
}

/// Encoded corpus with train/val/test partitions.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
    pub labels: LabelMap,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Deterministic text serialization of the encoded corpus, used by the
    /// reproducibility checks: one line per document,
    /// `partition\tlabel_id\tid id id ...`.
    pub fn write_tsv(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (name, docs) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for doc in docs.iter() {
                let ids: Vec<String> = doc.tokens.iter().map(|t| t.to_string()).collect();
                writeln!(w, "{}\t{}\t{}", name, doc.label_id, ids.join(" "))?;
            }
        }
        Ok(())
    }
}

/// Word <-> id map with the reserved UNK bucket at id 0 and per-word
/// training frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    freq: Vec<u64>,
}

impl Vocabulary {
    /// Rebuild from an ordered word list (index 0 must be the UNK bucket).
    /// Frequencies are unknown in this path and set to zero; checkpoints do
    /// not carry them.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(|w| w.as_str()) != Some(UNK_WORD) {
            return Err(Error::Data(format!(
                "vocabulary word list must start with {UNK_WORD}"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        let freq = vec![0; words.len()];
        Ok(Self { words, index, freq })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id for a word; anything outside the vocabulary resolves to UNK.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.freq.get(id as usize).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_doc(&self, doc: &RawDocument) -> Document {
        Document {
            label_id: doc.label_id,
            tokens: self.encode(&doc.tokens),
        }
    }

    pub fn encode_docs(&self, docs: &[RawDocument]) -> Vec<Document> {
        docs.iter().map(|d| self.encode_doc(d)).collect()
    }
}

/// Lowercase + whitespace tokenization, the only scheme used anywhere.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

fn load_partition(
    path: &Path,
    labels: &mut LabelMap,
    allow_new_labels: bool,
) -> Result<(Vec<RawDocument>, usize)> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut dropped = 0;
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(Error::parse(
                path,
                lineno,
                "expected `<label>\\t<text>`, found no tab separator",
            ));
        };
        let label_id = if allow_new_labels {
            labels.get_or_insert(label)
        } else {
            labels.id(label).ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: test label {label:?} does not appear in the training set",
                    path.display(),
                    lineno
                ))
            })?
        };
        let tokens = tokenize(text);
        if tokens.is_empty() {
            dropped += 1;
            continue;
        }
        docs.push(RawDocument { label_id, tokens });
    }
    Ok((docs, dropped))
}

/// Load a train/test dataset pair. Each nonempty line is `<label>\t<text>`;
/// labels are assigned dense ids in first-appearance order over the training
/// file, and documents that end up with no tokens are dropped (the count is
/// reported on the returned corpus).
pub fn load_dataset(train_path: &Path, test_path: &Path) -> Result<RawCorpus> {
    let mut labels = LabelMap::new();
    let (train, dropped_train) = load_partition(train_path, &mut labels, true)?;
    if train.is_empty() {
        return Err(Error::Data(format!(
            "training file {} contains no usable documents",
            train_path.display()
        )));
    }
    let (test, dropped_test) = load_partition(test_path, &mut labels, false)?;
    Ok(RawCorpus {
        train,
        test,
        labels,
        dropped_train,
        dropped_test,
    })
}

/// Load one labeled file against an existing label set (e.g. evaluating a
/// checkpoint on new text). Unknown labels are an error; the second return
/// is the number of dropped empty documents.
pub fn load_labeled_file(path: &Path, labels: &LabelMap) -> Result<(Vec<RawDocument>, usize)> {
    let mut labels = labels.clone();
    load_partition(path, &mut labels, false)
}

/// Build the vocabulary from training documents. Words seen fewer than
/// `min_freq` times fold into the UNK bucket, whose recorded frequency is
/// the total count it absorbed.
pub fn build_vocabulary(train: &[RawDocument], min_freq: u64) -> Result<Vocabulary> {
    if min_freq < 1 {
        return Err(Error::Config("min_freq must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty training set".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut total: u64 = 0;
    for doc in train {
        for tok in &doc.tokens {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut words = vec![UNK_WORD.to_string()];
    let mut index = HashMap::new();
    index.insert(UNK_WORD.to_string(), UNK_ID);
    let mut freq = vec![0u64];
    let mut kept: u64 = 0;
    // Ids by first appearance in the training stream, for determinism.
    for doc in train {
        for tok in &doc.tokens {
            if tok == UNK_WORD || index.contains_key(tok) {
                continue;
            }
            let c = counts[tok.as_str()];
            if c >= min_freq {
                index.insert(tok.clone(), words.len() as u32);
                words.push(tok.clone());
                freq.push(c);
                kept += c;
            }
        }
    }
    freq[UNK_ID as usize] = total - kept;
    Ok(Vocabulary { words, index, freq })
}

/// Split raw training documents into (train, val). `|val|` is
/// `round(ratio * n)`; selection is a seeded shuffle, and both partitions
/// keep the original document order.
pub fn split_validation(
    docs: Vec<RawDocument>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<RawDocument>, Vec<RawDocument>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "validation ratio must be in (0, 1), got {ratio}"
        )));
    }
    if docs.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 training documents to split, got {}",
            docs.len()
        )));
    }
    let n = docs.len();
    let n_val = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let mut slots: Vec<Option<RawDocument>> = docs.into_iter().map(Some).collect();
    let take = |idx: &[usize], slots: &mut Vec<Option<RawDocument>>| {
        idx.iter()
            .map(|&i| slots[i].take().expect("index used twice"))
            .collect::<Vec<_>>()
    };
    let val = take(&val_idx, &mut slots);
    let train = take(&train_idx, &mut slots);
    Ok((train, val))
}

/// Encode all three partitions against a vocabulary.
pub fn encode_corpus(
    train: &[RawDocument],
    val: &[RawDocument],
    test: &[RawDocument],
    labels: LabelMap,
    vocab: &Vocabulary,
) -> Corpus {
    Corpus {
        train: vocab.encode_docs(train),
        val: vocab.encode_docs(val),
        test: vocab.encode_docs(test),
        labels,
    }
}

/// Initial embedding matrix (one row per vocabulary word) plus the fraction
/// of non-UNK words that were found in the pretrained file.
#[derive(Debug, Clone)]
pub struct EmbeddingInit {
    pub matrix: Array2<f64>,
    pub coverage: f64,
}

/// Load pretrained vectors in the GloVe text format (`word v1 ... vd` per
/// line). Vocabulary words not present in the file, including UNK, are
/// initialized uniformly in [-0.01, 0.01] from `seed`.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingInit> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = Array2::<f64>::zeros((vocab.len(), dim));
    for v in matrix.iter_mut() {
        *v = rng.random_range(-0.01..0.01);
    }
    let mut found = vec![false; vocab.len()];
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        if !vocab.contains(word) {
            continue;
        }
        let id = vocab.id(word) as usize;
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::parse(
                path,
                lineno,
                format!(
                    "embedding for {word:?} has {} values, expected {dim}",
                    values.len()
                ),
            ));
        }
        for (t, v) in values.iter().enumerate() {
            matrix[[id, t]] = v.parse::<f64>().map_err(|_| {
                Error::parse(path, lineno, format!("bad float {v:?} for word {word:?}"))
            })?;
        }
        found[id] = true;
    }
    let non_unk = vocab.len().saturating_sub(1);
    let coverage = if non_unk == 0 {
        0.0
    } else {
        found
            .iter()
            .enumerate()
            .filter(|&(id, &f)| f && id != UNK_ID as usize)
            .count() as f64
            / non_unk as f64
    };
    Ok(EmbeddingInit { matrix, coverage })
}
