//! End-to-end experiment drivers: dataset preparation, repeated training
//! runs over seed lists, the window-size sweep, the ablation battery, and
//! the model-size / corpus-graph comparison.

use crate::data::{
    build_vocabulary, encode_corpus, load_dataset, load_pretrained_embeddings, split_validation,
    Corpus, EmbeddingInit, Vocabulary,
};
use crate::edges::{
    build_edge_vocabulary, compute_pmi_table, count_edge_pairs, EdgeStats, EdgeVocabulary,
    PmiTable,
};
use crate::error::{Error, Result};
use crate::model::{count_capacity, Capacity, Params, Reduction};
use crate::train::{train, TrainConfig, TrainReport};
use std::io::Write;
use std::path::PathBuf;

/// Single-factor model variants for the ablation battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Edge weights frozen to window-20 PMI values, no edge gradients.
    FixedPmi,
    /// Mean instead of max neighborhood reduction.
    MeanReduction,
    /// Ignore pretrained vectors even when supplied.
    RandomEmbeddings,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::FixedPmi,
        Ablation::MeanReduction,
        Ablation::RandomEmbeddings,
    ];
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Ablation::None),
            "fixed_pmi" | "fixed-pmi" => Ok(Ablation::FixedPmi),
            "mean_reduction" | "mean-reduction" => Ok(Ablation::MeanReduction),
            "random_embeddings" | "random-embeddings" => Ok(Ablation::RandomEmbeddings),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none, fixed_pmi, mean_reduction or random_embeddings)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::FixedPmi => "fixed_pmi",
            Ablation::MeanReduction => "mean_reduction",
            Ablation::RandomEmbeddings => "random_embeddings",
        })
    }
}

/// Everything one experiment needs: dataset paths, preprocessing knobs,
/// the seed list, the training configuration, and the variant selector.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    /// Neighborhood half-width for graphs and edge counting.
    pub p: usize,
    /// Rarity threshold below which word pairs share the public edge.
    pub k: u64,
    pub min_freq: u64,
    pub val_ratio: f64,
    /// Seed for the train/validation split, deliberately separate from the
    /// training seeds so every seed trains on the same split.
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub embeddings_path: Option<PathBuf>,
    pub ablation: Ablation,
    /// Sliding-window width for PMI statistics (fixed-edge variant and the
    /// corpus-graph comparison).
    pub pmi_window: usize,
}

impl ExperimentSpec {
    pub fn new(train_path: PathBuf, test_path: PathBuf) -> Self {
        Self {
            train_path,
            test_path,
            p: 3,
            k: 2,
            min_freq: 5,
            val_ratio: 0.1,
            split_seed: 1,
            seeds: vec![1],
            train: TrainConfig::default(),
            embeddings_path: None,
            ablation: Ablation::None,
            pmi_window: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.p < 1 {
            return Err(Error::Config("window p must be >= 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("edge threshold k must be >= 1".into()));
        }
        if self.min_freq < 1 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        if self.pmi_window < 2 {
            return Err(Error::Config("PMI window must be >= 2".into()));
        }
        self.train.validate()
    }
}

/// Preprocessed dataset, shared by every seed of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub edge_vocab: EdgeVocabulary,
    pub stats: EdgeStats,
    pub embedding_init: Option<EmbeddingInit>,
    /// Train-set PMI table; present when the spec's variant needs it.
    pub pmi: Option<PmiTable>,
    pub dropped_train: usize,
    pub dropped_test: usize,
}

/// Load, split, build vocabularies and (optionally) pretrained vectors.
/// Pretrained vectors are read once per experiment: the fill-in vectors for
/// uncovered words are seeded by `split_seed`, not the per-run seeds, so
/// multi-seed runs share them.
pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    spec.validate()?;
    let raw = load_dataset(&spec.train_path, &spec.test_path)?;
    let (train_raw, val_raw) = split_validation(raw.train, spec.val_ratio, spec.split_seed)?;
    let vocab = build_vocabulary(&train_raw, spec.min_freq)?;
    let corpus = encode_corpus(&train_raw, &val_raw, &raw.test, raw.labels, &vocab);
    let stats = count_edge_pairs(&corpus.train, spec.p)?;
    let edge_vocab = build_edge_vocabulary(&stats, spec.k)?;
    let embedding_init = match (&spec.embeddings_path, spec.ablation) {
        (Some(path), ablation) if ablation != Ablation::RandomEmbeddings => Some(
            load_pretrained_embeddings(path, &vocab, spec.train.dim, spec.split_seed)?,
        ),
        _ => None,
    };
    let pmi = if spec.ablation == Ablation::FixedPmi {
        Some(compute_pmi_table(&corpus.train, spec.pmi_window)?)
    } else {
        None
    };
    Ok(Prepared {
        corpus,
        vocab,
        edge_vocab,
        stats,
        embedding_init,
        pmi,
        dropped_train: raw.dropped_train,
        dropped_test: raw.dropped_test,
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub report: TrainReport,
    pub params: Params<f32>,
}

/// Train once with the spec's variant applied and the given seed.
pub fn run_single(prep: &Prepared, spec: &ExperimentSpec, seed: u64) -> Result<RunResult> {
    let mut cfg = spec.train.clone();
    cfg.seed = seed;
    let mut embedding_init = prep.embedding_init.as_ref();
    let mut pmi = None;
    match spec.ablation {
        Ablation::None => {}
        Ablation::FixedPmi => {
            cfg.model.edges_trainable = false;
            pmi = prep.pmi.as_ref();
        }
        Ablation::MeanReduction => cfg.model.reduction = Reduction::Mean,
        Ablation::RandomEmbeddings => embedding_init = None,
    }
    let (params, report) = train(
        &prep.corpus,
        prep.vocab.len(),
        &prep.edge_vocab,
        spec.p,
        &cfg,
        embedding_init,
        pmi,
    )
    .map_err(|e| match e {
        Error::Train { epoch, batch, msg } => Error::Train {
            epoch,
            batch,
            msg: format!("[p={} seed={seed} variant={}] {msg}", spec.p, spec.ablation),
        },
        other => other,
    })?;
    Ok(RunResult {
        seed,
        accuracy: report.test_accuracy,
        report,
        params,
    })
}

/// Mean and population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub p: usize,
    pub mean_acc: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Train over every (p, seed) combination, all other knobs fixed.
/// Preprocessing is redone per p because the edge vocabulary depends on it.
pub fn run_window_sweep(spec: &ExperimentSpec, p_values: &[usize]) -> Result<Vec<SweepRow>> {
    if p_values.is_empty() {
        return Err(Error::Config("window sweep needs at least one p value".into()));
    }
    let mut rows = Vec::with_capacity(p_values.len());
    for &p in p_values {
        let spec_p = ExperimentSpec { p, ..spec.clone() };
        let prep = prepare(&spec_p)?;
        let mut accuracies = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            accuracies.push(run_single(&prep, &spec_p, seed)?.accuracy);
        }
        let (mean_acc, std) = mean_std(&accuracies);
        rows.push(SweepRow {
            p,
            mean_acc,
            std,
            accuracies,
        });
    }
    Ok(rows)
}

pub fn write_sweep_tsv(rows: &[SweepRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "p\tmean_acc\tstd\truns")?;
    for r in rows {
        let runs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        writeln!(w, "{}\t{:.6}\t{:.6}\t{}", r.p, r.mean_acc, r.std, runs.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Ablation,
    pub mean_acc: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Run every variant over the spec's seeds. Each variant changes exactly
/// one factor relative to `Ablation::None`; preprocessing is shared.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    let mut prep = prepare(spec)?;
    if prep.pmi.is_none() {
        prep.pmi = Some(compute_pmi_table(&prep.corpus.train, spec.pmi_window)?);
    }
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let spec_v = ExperimentSpec {
            ablation: variant,
            ..spec.clone()
        };
        let mut accuracies = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            accuracies.push(run_single(&prep, &spec_v, seed)?.accuracy);
        }
        let (mean_acc, std) = mean_std(&accuracies);
        rows.push(AblationRow {
            variant,
            mean_acc,
            std,
            accuracies,
        });
    }
    Ok(rows)
}

pub fn write_ablation_tsv(rows: &[AblationRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "variant\tmean_acc\tstd\truns")?;
    for r in rows {
        let runs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        writeln!(w, "{}\t{:.6}\t{:.6}\t{}", r.variant, r.mean_acc, r.std, runs.join(","))?;
    }
    Ok(())
}

/// Model size next to the size of a whole-corpus co-occurrence graph.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub capacity: Capacity,
    /// Distinct unordered word pairs (i < j) with positive PMI under the
    /// comparison window, over train+val+test.
    pub corpus_pmi_edges: usize,
    /// Word–document pairs: Σ over documents of distinct words.
    pub corpus_word_doc_edges: usize,
    pub corpus_total_edges: usize,
    /// edge parameters / corpus graph edges.
    pub ratio: f64,
}

/// Compare this model's edge-parameter budget against a corpus-level graph
/// in the style of prior whole-corpus approaches: word–word edges are
/// distinct positive-PMI pairs under `pmi_window`, word–document edges are
/// distinct (word, document) pairs. Both sides use our preprocessed
/// vocabulary (rare words folded), and the comparison targets the ratio of
/// the two counts rather than any exact published figure.
pub fn run_memory_report(spec: &ExperimentSpec) -> Result<(Prepared, MemoryReport)> {
    let prep = prepare(spec)?;
    let capacity = count_capacity(
        prep.vocab.len(),
        spec.train.dim,
        prep.edge_vocab.named_count(),
        prep.corpus.num_classes(),
    );
    let all_docs: Vec<crate::data::Document> = prep
        .corpus
        .train
        .iter()
        .chain(prep.corpus.val.iter())
        .chain(prep.corpus.test.iter())
        .cloned()
        .collect();
    let pmi = compute_pmi_table(&all_docs, spec.pmi_window)?;
    let corpus_pmi_edges = pmi.distinct_positive_pairs();
    let corpus_word_doc_edges: usize = all_docs
        .iter()
        .map(|d| {
            let mut words = d.tokens.clone();
            words.sort_unstable();
            words.dedup();
            words.len()
        })
        .sum();
    let corpus_total_edges = corpus_pmi_edges + corpus_word_doc_edges;
    let ratio = capacity.edge_param_count as f64 / corpus_total_edges as f64;
    let report = MemoryReport {
        capacity,
        corpus_pmi_edges,
        corpus_word_doc_edges,
        corpus_total_edges,
        ratio,
    };
    Ok((prep, report))
}

pub fn write_memory_tsv(r: &MemoryReport, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "metric\tvalue")?;
    writeln!(w, "vocab_size\t{}", r.capacity.vocab_size)?;
    writeln!(w, "dim\t{}", r.capacity.dim)?;
    writeln!(w, "num_classes\t{}", r.capacity.num_classes)?;
    writeln!(w, "edge_param_count\t{}", r.capacity.edge_param_count)?;
    writeln!(w, "total_params\t{}", r.capacity.total_params)?;
    writeln!(w, "bytes\t{}", r.capacity.bytes)?;
    writeln!(w, "corpus_pmi_edges\t{}", r.corpus_pmi_edges)?;
    writeln!(w, "corpus_word_doc_edges\t{}", r.corpus_word_doc_edges)?;
    writeln!(w, "corpus_total_edges\t{}", r.corpus_total_edges)?;
    writeln!(w, "edge_ratio\t{:.6}", r.ratio)
}
