//! Shared helpers for integration tests: synthetic corpora and discovery
//! of the optional benchmark datasets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub struct SynthCorpus {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Labeled synthetic corpus: each class has three marker words that only
/// appear under that label, mixed with fillers shared by every class. A
/// model that learns the markers classifies it perfectly; the fillers keep
/// the problem from collapsing to trivial vocabulary separation.
pub fn synth_corpus(
    dir: &Path,
    classes: usize,
    train_docs: usize,
    test_docs: usize,
    seed: u64,
) -> SynthCorpus {
    let fillers = ["the", "of", "and", "to", "a", "in", "is", "it"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |docs: usize, salt: u64| {
        let _ = salt;
        let mut out = String::new();
        for i in 0..docs {
            let class = i % classes;
            let len = rng.random_range(4..=9);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                if rng.random::<f64>() < 0.5 {
                    let m = rng.random_range(0..3u32);
                    tokens.push(format!("c{class}m{m}"));
                } else {
                    tokens.push(fillers[rng.random_range(0..fillers.len())].to_string());
                }
            }
            // Guarantee at least one marker so every document is decidable.
            if !tokens.iter().any(|t| t.starts_with(&format!("c{class}"))) {
                tokens[0] = format!("c{class}m0");
            }
            out.push_str(&format!("label{class}\t{}\n", tokens.join(" ")));
        }
        out
    };
    let train = dir.join("train.txt");
    let test = dir.join("test.txt");
    std::fs::write(&train, gen(train_docs, 0)).unwrap();
    std::fs::write(&test, gen(test_docs, 1)).unwrap();
    SynthCorpus { train, test }
}

/// Directory holding the optional benchmark datasets: `$TGNN_DATA_DIR` if
/// set, else `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("TGNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("../..")
                .join("data")
        })
}

/// Resolve a benchmark dataset file or explain exactly what is missing.
pub fn data_file(name: &str) -> Result<PathBuf, String> {
    let dir = data_dir();
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(format!(
            "benchmark file `{name}` not found in {} — download the dataset \
             (see README, \"Benchmark datasets\") and place it there, or point \
             TGNN_DATA_DIR at the directory holding it",
            dir.display()
        ))
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tgnn")
}
