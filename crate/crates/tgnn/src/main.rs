//! Command-line surface. Every subcommand prints machine-parsable
//! `key\tvalue` lines to stdout, writes its artifacts under `--out-dir`,
//! and on failure emits one `error\t<category>\t<message>` line on stderr
//! with a nonzero exit code.

use clap::{Args, Parser, Subcommand};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use tgnn::checkpoint;
use tgnn::data::load_labeled_file;
use tgnn::error::{Error, Result};
use tgnn::experiments::{
    prepare, run_ablation, run_memory_report, run_single, run_window_sweep, Ablation,
    ExperimentSpec,
};
use tgnn::graph::build_graphs;
use tgnn::model::{ModelConfig, Reduction};
use tgnn::train::{evaluate_accuracy, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tgnn",
    version,
    about = "Train and evaluate per-document graph text classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset, build vocabularies, and dump them for inspection.
    Prepare(PrepareCmd),
    /// Train one model and write metrics plus a checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a labeled file.
    Eval(EvalCmd),
    /// Train across a list of window sizes and tabulate accuracy.
    SweepP(SweepCmd),
    /// Run the single-factor model variants and tabulate accuracy.
    Ablate(AblateCmd),
    /// Report model size against a whole-corpus co-occurrence graph.
    Memory(MemoryCmd),
}

#[derive(Args)]
struct DataArgs {
    /// Training set: one `<label>\t<text>` line per document.
    #[arg(long)]
    train_file: PathBuf,
    /// Test set in the same format; labels must appear in training.
    #[arg(long)]
    test_file: PathBuf,
    /// Neighborhood half-width (positions on each side of a token).
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Word pairs seen fewer than k times share one public edge weight.
    #[arg(long, default_value_t = 2)]
    k: u64,
    /// Words seen fewer than min_freq times fold into the unknown bucket.
    #[arg(long, default_value_t = 5)]
    min_freq: u64,
    /// Fraction of training documents held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_ratio: f64,
    /// Seed for the validation split (kept apart from training seeds).
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Node representation dimension.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Neighborhood reduction: max or mean.
    #[arg(long, default_value = "max")]
    reduction: String,
    /// Dropout keep probability on the readout vector.
    #[arg(long, default_value_t = 0.5)]
    dropout_keep: f64,
    /// Message-passing rounds per forward pass.
    #[arg(long, default_value_t = 1)]
    mpm_steps: usize,
    /// Pretrained vectors in GloVe text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Stop after this many epochs without validation improvement.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
}

#[derive(Args)]
struct PrepareCmd {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Labeled file to score, `<label>\t<text>` per line.
    #[arg(long)]
    eval_file: PathBuf,
    #[arg(long, default_value = "max")]
    reduction: String,
    #[arg(long, default_value_t = 1)]
    mpm_steps: usize,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Window sizes to sweep, comma-separated.
    #[arg(long, default_value = "1,3,19", value_delimiter = ',')]
    p_values: Vec<usize>,
    /// Training seeds, comma-separated; results are averaged.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MemoryCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Dimension used for the parameter-count estimate.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn build_spec(data: &DataArgs, model: Option<&ModelArgs>, optim: Option<&OptimArgs>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::new(data.train_file.clone(), data.test_file.clone());
    spec.p = data.p;
    spec.k = data.k;
    spec.min_freq = data.min_freq;
    spec.val_ratio = data.val_ratio;
    spec.split_seed = data.split_seed;
    let mut train = TrainConfig::default();
    if let Some(m) = model {
        train.dim = m.dim;
        train.model = ModelConfig {
            reduction: m.reduction.parse::<Reduction>()?,
            dropout_keep: m.dropout_keep,
            edges_trainable: true,
            mpm_steps: m.mpm_steps,
        };
        spec.embeddings_path = m.embeddings.clone();
    }
    if let Some(o) = optim {
        train.lr = o.lr;
        train.weight_decay = o.weight_decay;
        train.batch_size = o.batch_size;
        train.patience = o.patience;
        train.max_epochs = o.max_epochs;
    }
    spec.train = train;
    Ok(spec)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn artifact(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).map_err(|e| Error::io(&path, e))?,
    ))
}

fn cmd_prepare(cmd: PrepareCmd) -> Result<()> {
    let spec = build_spec(&cmd.data, None, None)?;
    let prep = prepare(&spec)?;
    ensure_out_dir(&cmd.out_dir)?;

    let mut vocab_out = artifact(&cmd.out_dir, "vocab.tsv")?;
    writeln!(vocab_out, "word\tid\tfreq").map_err(|e| Error::io(&cmd.out_dir, e))?;
    for (id, word) in prep.vocab.words().iter().enumerate() {
        writeln!(vocab_out, "{word}\t{id}\t{}", prep.vocab.frequency(id as u32))
            .map_err(|e| Error::io(&cmd.out_dir, e))?;
    }
    let mut edges_out = artifact(&cmd.out_dir, "edges.tsv")?;
    prep.edge_vocab
        .dump_tsv(&prep.stats, &mut edges_out)
        .map_err(|e| Error::io(&cmd.out_dir, e))?;
    let mut corpus_out = artifact(&cmd.out_dir, "corpus.tsv")?;
    prep.corpus
        .write_tsv(&mut corpus_out)
        .map_err(|e| Error::io(&cmd.out_dir, e))?;

    println!("vocab_size\t{}", prep.vocab.len());
    println!("edge_params\t{}", prep.edge_vocab.param_count());
    println!("classes\t{}", prep.corpus.num_classes());
    println!("train_docs\t{}", prep.corpus.train.len());
    println!("val_docs\t{}", prep.corpus.val.len());
    println!("test_docs\t{}", prep.corpus.test.len());
    println!("dropped_train\t{}", prep.dropped_train);
    println!("dropped_test\t{}", prep.dropped_test);
    Ok(())
}

fn cmd_train(cmd: TrainCmd) -> Result<()> {
    let spec = build_spec(&cmd.data, Some(&cmd.model), Some(&cmd.optim))?;
    let prep = prepare(&spec)?;
    let result = run_single(&prep, &spec, cmd.seed)?;
    ensure_out_dir(&cmd.out_dir)?;

    let mut metrics = artifact(&cmd.out_dir, "metrics.tsv")?;
    result
        .report
        .write_metrics_tsv(&mut metrics)
        .map_err(|e| Error::io(&cmd.out_dir, e))?;
    let model_path = cmd.out_dir.join("model.tgnn");
    checkpoint::save(
        &model_path,
        &result.params,
        &prep.vocab,
        &prep.corpus.labels,
        &prep.edge_vocab,
    )?;

    if let Some(init) = &prep.embedding_init {
        println!("embedding_coverage\t{:.6}", init.coverage);
    }
    println!("epochs_run\t{}", result.report.epochs.len());
    println!("best_epoch\t{}", result.report.best_epoch);
    println!("test_accuracy\t{:.6}", result.report.test_accuracy);
    println!("wall_secs\t{:.3}", result.report.wall_secs);
    println!("model\t{}", model_path.display());
    Ok(())
}

fn cmd_eval(cmd: EvalCmd) -> Result<()> {
    let ck = checkpoint::load(&cmd.model)?;
    let (docs, dropped) = load_labeled_file(&cmd.eval_file, &ck.labels)?;
    if docs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no usable documents",
            cmd.eval_file.display()
        )));
    }
    let encoded = ck.vocab.encode_docs(&docs);
    let graphs = build_graphs(&encoded, &ck.edge_vocab, ck.edge_vocab.window)?;
    let config = ModelConfig {
        reduction: cmd.reduction.parse::<Reduction>()?,
        dropout_keep: 1.0,
        edges_trainable: true,
        mpm_steps: cmd.mpm_steps,
    };
    let accuracy = evaluate_accuracy(&ck.params, &graphs, &config, None)?;
    println!("documents\t{}", graphs.len());
    println!("dropped\t{dropped}");
    println!("accuracy\t{accuracy:.6}");
    Ok(())
}

fn cmd_sweep(cmd: SweepCmd) -> Result<()> {
    let mut spec = build_spec(&cmd.data, Some(&cmd.model), Some(&cmd.optim))?;
    spec.seeds = cmd.seeds.clone();
    let rows = run_window_sweep(&spec, &cmd.p_values)?;
    ensure_out_dir(&cmd.out_dir)?;
    let mut out = artifact(&cmd.out_dir, "sweep.tsv")?;
    tgnn::experiments::write_sweep_tsv(&rows, &mut out).map_err(|e| Error::io(&cmd.out_dir, e))?;
    for row in &rows {
        println!("p={}\tmean_acc={:.6}\tstd={:.6}", row.p, row.mean_acc, row.std);
    }
    Ok(())
}

fn cmd_ablate(cmd: AblateCmd) -> Result<()> {
    let mut spec = build_spec(&cmd.data, Some(&cmd.model), Some(&cmd.optim))?;
    spec.seeds = cmd.seeds.clone();
    spec.ablation = Ablation::None;
    let rows = run_ablation(&spec)?;
    ensure_out_dir(&cmd.out_dir)?;
    let mut out = artifact(&cmd.out_dir, "ablation.tsv")?;
    tgnn::experiments::write_ablation_tsv(&rows, &mut out)
        .map_err(|e| Error::io(&cmd.out_dir, e))?;
    for row in &rows {
        println!(
            "variant={}\tmean_acc={:.6}\tstd={:.6}",
            row.variant, row.mean_acc, row.std
        );
    }
    Ok(())
}

fn cmd_memory(cmd: MemoryCmd) -> Result<()> {
    let mut spec = build_spec(&cmd.data, None, None)?;
    spec.train.dim = cmd.dim;
    let (_, report) = run_memory_report(&spec)?;
    ensure_out_dir(&cmd.out_dir)?;
    let mut out = artifact(&cmd.out_dir, "memory.tsv")?;
    tgnn::experiments::write_memory_tsv(&report, &mut out)
        .map_err(|e| Error::io(&cmd.out_dir, e))?;
    println!("edge_param_count\t{}", report.capacity.edge_param_count);
    println!("total_params\t{}", report.capacity.total_params);
    println!("bytes\t{}", report.capacity.bytes);
    println!("corpus_total_edges\t{}", report.corpus_total_edges);
    println!("edge_ratio\t{:.6}", report.ratio);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(cmd) => cmd_prepare(cmd),
        Command::Train(cmd) => cmd_train(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::SweepP(cmd) => cmd_sweep(cmd),
        Command::Ablate(cmd) => cmd_ablate(cmd),
        Command::Memory(cmd) => cmd_memory(cmd),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error\t{}\t{e}", e.category());
        std::process::exit(1);
    }
}
