use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use strae::corpus::{build_vocabulary, Tokenizer, Vocabulary};
use strae::desk::{cooccurrence_task, write_similarity_task, DeskCorpus};
use strae::eval::{
    eval_similarity, export_embeddings, read_embeddings, train_probe, Embedder, ModelEmbedder, ProbeConfig, ProbeTask,
    Report, ReportRow, SimilarityKind, SimilarityTask, TaskResult, TaskScore,
};
use strae::io::write_atomic;
use strae::model::{ModelKind, StructureSource};
use strae::objectives::Objective;
use strae::trainer::{gradient_check, train_from_config, Checkpoint, TrainConfig};

/// Structured autoencoders over binary sentence trees.
#[derive(Parser, Debug)]
#[command(name = "strae", version)]
struct Cli {
    /// Worker threads for parallel probe training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every parallel section on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary file from a one-sentence-per-line corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write checkpoints and a metrics log.
    Train(Box<TrainArgs>),
    /// Write greedy induced trees for every sentence of a corpus.
    Induce(InduceArgs),
    /// Spearman's rho on word or sentence similarity tasks.
    EvalSim(EvalSimArgs),
    /// Frozen-embedding probe accuracy on classification tasks.
    EvalProbe(EvalProbeArgs),
    /// Write word vectors as text (`count dim` header, then `token v1 .. vd`).
    ExportEmbeddings(ExportArgs),
    /// Finite-difference gradient check; exits 0 iff every error is below 1e-4.
    Gradcheck(GradcheckArgs),
    /// Combine report files into best-seed and mean ± std tables.
    Report(ReportArgs),
    /// Generate the synthetic grammar corpus, its trees and a similarity task.
    Desk(DeskArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary file to write.
    #[arg(long)]
    out: PathBuf,
    /// Tokens seen fewer times map to <unk>.
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    /// Keep the original casing.
    #[arg(long)]
    keep_case: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// A `key = value` config file; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics.tsv and config.conf.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training corpus, one sentence per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Bracketed trees aligned with the corpus.
    #[arg(long)]
    trees: Option<PathBuf>,
    /// Dev corpus for per-epoch loss and checkpoint selection.
    #[arg(long)]
    dev_corpus: Option<PathBuf>,
    /// Bracketed trees aligned with the dev corpus.
    #[arg(long)]
    dev_trees: Option<PathBuf>,
    /// Vocabulary file from build-vocab.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// strae, iornn or self_strae.
    #[arg(long)]
    model: Option<String>,
    /// cross_entropy, contrastive or degenerate.
    #[arg(long)]
    objective: Option<String>,
    /// tree_file, balanced, right_branching or induced.
    #[arg(long)]
    structure: Option<String>,
    /// Embedding side length; embeddings are N x N.
    #[arg(long)]
    n: Option<usize>,
    /// Adam learning rate (default depends on the objective).
    #[arg(long)]
    lr: Option<f64>,
    /// Sentences per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Passes over the training corpus.
    #[arg(long)]
    epochs: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Embedding initialization range.
    #[arg(long)]
    r: Option<f64>,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Longer sentences are truncated to this many tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Global gradient norm limit.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Also use up-up and down-down pairs as contrastive negatives.
    #[arg(long)]
    intra_view_negatives: bool,
    /// Any other config entry, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint manifest.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file (default: the one named in the checkpoint config).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SentenceStructure {
    Balanced,
    RightBranching,
    Induced,
}

#[derive(Args, Debug)]
struct InduceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Sentences to parse, one per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Bracketed tree file to write, one tree per corpus line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportOut {
    /// Add the results to this JSON report (created if missing).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Group label for the report row (default: the checkpoint's parent directory).
    #[arg(long)]
    group: Option<String>,
}

#[derive(Args, Debug)]
struct EvalSimArgs {
    /// Checkpoint manifest.
    #[arg(long, required_unless_present = "embeddings", conflicts_with = "embeddings")]
    checkpoint: Option<PathBuf>,
    /// Vocabulary file (default: the one named in the checkpoint config).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Exported embedding file, for word tasks.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Word task files (`word1<TAB>word2<TAB>score`).
    #[arg(long = "words")]
    word_tasks: Vec<PathBuf>,
    /// Sentence task files (`sent1<TAB>sent2<TAB>score`).
    #[arg(long = "sentences")]
    sentence_tasks: Vec<PathBuf>,
    /// Tree used to embed sentences (default: induced for Self-StrAE, else balanced).
    #[arg(long, value_enum)]
    structure: Option<SentenceStructure>,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args, Debug)]
struct EvalProbeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Task prefixes; `<prefix>.train`, `.dev` and `.test` must exist.
    #[arg(long = "task", required = true)]
    tasks: Vec<PathBuf>,
    /// Tree used to embed sentences (default: induced for Self-StrAE, else balanced).
    #[arg(long, value_enum)]
    structure: Option<SentenceStructure>,
    /// Probe runs with seeds 0..SEEDS.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Hidden units of the single-text probe.
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    /// Probe learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Probe epoch limit.
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Probe batch size.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[command(flatten)]
    out: ReportOut,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Embedding file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// strae, iornn or self_strae; all three when omitted.
    #[arg(long)]
    model: Option<String>,
    /// cross_entropy, contrastive or degenerate; all three when omitted.
    #[arg(long)]
    objective: Option<String>,
    /// Embedding side length.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Vocabulary size.
    #[arg(long, default_value_t = 20)]
    v: usize,
    /// Sentence length.
    #[arg(long, default_value_t = 5)]
    tokens: usize,
    /// Seed for parameters, the sentence and probe directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON report files written by eval-sim / eval-probe.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the merged rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DeskArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of sentences.
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Longest sentence kept, in tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Co-occurrence window for the similarity task.
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Words seen fewer times are left out of the similarity task.
    #[arg(long, default_value_t = 5)]
    min_count: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::BuildVocab(a) => build_vocab(a)?,
        Command::Train(a) => train(*a, cli.deterministic)?,
        Command::Induce(a) => induce(a)?,
        Command::EvalSim(a) => eval_sim(a)?,
        Command::EvalProbe(a) => eval_probe(a)?,
        Command::ExportEmbeddings(a) => export(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Report(a) => report(a)?,
        Command::Desk(a) => desk(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let tokenizer = Tokenizer {
        lowercase: !a.keep_case,
        ..Tokenizer::default()
    };
    let vocab = build_vocabulary(&a.corpus, a.min_freq, &tokenizer)?;
    vocab.save(&a.out)?;
    println!("{} tokens written to {}", vocab.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, deterministic: bool) -> Result<()> {
    let mut entries: Vec<(String, String)> = match &a.config {
        Some(path) => TrainConfig::load(path)?
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        None => Vec::new(),
    };
    let mut set = |key: &str, value: String| {
        entries.retain(|(k, _)| k != key);
        entries.push((key.to_string(), value));
    };
    let paths = [
        ("checkpoint_dir", &a.out),
        ("corpus", &a.corpus),
        ("trees", &a.trees),
        ("dev_corpus", &a.dev_corpus),
        ("dev_trees", &a.dev_trees),
        ("vocab", &a.vocab),
    ];
    for (key, value) in paths {
        if let Some(p) = value {
            set(key, p.display().to_string());
        }
    }
    let texts = [
        ("model", a.model.clone()),
        ("objective", a.objective.clone()),
        ("structure_source", a.structure.clone()),
        ("n", a.n.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("r", a.r.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("max_len", a.max_len.map(|v| v.to_string())),
        ("clip_norm", a.clip_norm.map(|v| v.to_string())),
    ];
    for (key, value) in texts {
        if let Some(v) = value {
            set(key, v);
        }
    }
    if a.intra_view_negatives {
        set("intra_view_negatives", "true".into());
    }
    if deterministic {
        set("deterministic", "true".into());
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        set(k.trim(), v.trim().to_string());
    }
    let config = TrainConfig::from_entries(entries.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    info!("training {} / {} on {}", config.model, config.objective, config.structure_source);
    let outcome = train_from_config(&config)?;
    for s in &outcome.summaries {
        match s.dev_loss {
            Some(d) => println!("epoch {}\ttrain {:.6}\tdev {:.6}", s.epoch, s.train_loss, d),
            None => println!("epoch {}\ttrain {:.6}", s.epoch, s.train_loss),
        }
    }
    println!("selected epoch {}", outcome.best.epoch);
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    vocab: Vocabulary,
}

impl Loaded {
    fn open(path: &Path, vocab: Option<&Path>) -> Result<Self> {
        let checkpoint = Checkpoint::load(path)?;
        let vocab_path = vocab
            .map(Path::to_path_buf)
            .or_else(|| checkpoint.config.vocab.clone())
            .with_context(|| format!("{} names no vocabulary; pass --vocab", path.display()))?;
        let vocab = Vocabulary::load(&vocab_path)?;
        Ok(Loaded { checkpoint, vocab })
    }

    fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            lowercase: self.checkpoint.config.lowercase,
            ..Tokenizer::default()
        }
    }

    fn embedder(&self, structure: Option<SentenceStructure>) -> Result<ModelEmbedder<'_>> {
        let source = match structure {
            Some(SentenceStructure::Balanced) => StructureSource::Balanced,
            Some(SentenceStructure::RightBranching) => StructureSource::RightBranching,
            Some(SentenceStructure::Induced) => StructureSource::Induced,
            None if self.checkpoint.config.model == ModelKind::SelfStrae => StructureSource::Induced,
            None => StructureSource::Balanced,
        };
        Ok(ModelEmbedder::new(&self.checkpoint.params, &self.vocab, self.tokenizer(), source)?)
    }
}

fn induce(a: InduceArgs) -> Result<()> {
    let loaded = Loaded::open(&a.model.checkpoint, a.model.vocab.as_deref())?;
    let tokenizer = loaded.tokenizer();
    let text = fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = tokenizer.tokenize(line);
        if !tokens.is_empty() {
            let ids = loaded.vocab.encode(&tokens)?;
            let tree = loaded
                .checkpoint
                .params
                .induce_tree(&ids)
                .with_context(|| format!("{}:{}", a.corpus.display(), i + 1))?;
            out.push_str(&tree.to_bracketed(&tokens)?);
        }
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    Ok(())
}

fn add_to_report(out: &ReportOut, checkpoint: &Path, tasks: Vec<TaskScore>) -> Result<()> {
    let mut text = String::from("checkpoint\ttask\tresult\n");
    for t in &tasks {
        let value = match (t.result, t.std) {
            (TaskResult::Rho(r), _) => format!("rho {r:.6}"),
            (TaskResult::Accuracy(acc), Some(s)) => format!("accuracy {acc:.6} ± {s:.6}"),
            (TaskResult::Accuracy(acc), None) => format!("accuracy {acc:.6}"),
        };
        text += &format!("{}\t{}\t{value}\n", checkpoint.display(), t.task);
    }
    print!("{text}");
    let Some(path) = &out.report else {
        return Ok(());
    };
    let mut report = if path.exists() {
        let existing = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Report::from_json(&existing).with_context(|| path.display().to_string())?
    } else {
        Report::default()
    };
    let name = checkpoint.display().to_string();
    let group = out.group.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .and_then(Path::file_name)
            .map_or_else(|| name.clone(), |g| g.to_string_lossy().into_owned())
    });
    match report.rows.iter_mut().find(|r| r.checkpoint == name) {
        Some(row) => {
            row.tasks.retain(|t| !tasks.iter().any(|n| n.task == t.task));
            row.tasks.extend(tasks);
        }
        None => report.rows.push(ReportRow {
            checkpoint: name,
            group,
            tasks,
        }),
    }
    write_atomic(path, report.to_json().as_bytes())?;
    Ok(())
}

fn eval_sim(a: EvalSimArgs) -> Result<()> {
    if a.word_tasks.is_empty() && a.sentence_tasks.is_empty() {
        bail!("give at least one --words or --sentences task file");
    }
    let mut tasks = Vec::new();
    for p in &a.word_tasks {
        tasks.push(SimilarityTask::load(p, SimilarityKind::Word)?);
    }
    for p in &a.sentence_tasks {
        tasks.push(SimilarityTask::load(p, SimilarityKind::Sentence)?);
    }
    let score = |embedder: &dyn Embedder| -> Result<Vec<TaskScore>> {
        tasks
            .iter()
            .map(|t| {
                let rho = eval_similarity(t, embedder).with_context(|| format!("task {}", t.name))?;
                Ok(TaskScore {
                    task: t.name.clone(),
                    result: TaskResult::Rho(rho),
                    std: None,
                })
            })
            .collect()
    };
    let (source, scores) = match (&a.checkpoint, &a.embeddings) {
        (Some(path), _) => {
            let loaded = Loaded::open(path, a.vocab.as_deref())?;
            (path, score(&loaded.embedder(a.structure)?)?)
        }
        (None, Some(path)) => {
            if !a.sentence_tasks.is_empty() {
                bail!("sentence tasks need a checkpoint; an embedding file only holds word vectors");
            }
            (path, score(&read_embeddings(path)?)?)
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    add_to_report(&a.out, source, scores)
}

fn eval_probe(a: EvalProbeArgs) -> Result<()> {
    let loaded = Loaded::open(&a.model.checkpoint, a.model.vocab.as_deref())?;
    let embedder = loaded.embedder(a.structure)?;
    let config = ProbeConfig {
        hidden: a.hidden,
        lr: a.lr,
        max_epochs: a.max_epochs,
        patience: a.patience,
        batch_size: a.batch_size,
        seeds: (0..a.seeds).collect(),
    };
    let mut scores = Vec::new();
    for prefix in &a.tasks {
        let task = ProbeTask::load(prefix)?;
        let result = train_probe(&task, &embedder, &config).with_context(|| format!("task {}", task.name))?;
        scores.push(TaskScore {
            task: task.name,
            result: TaskResult::Accuracy(result.mean),
            std: Some(result.std),
        });
    }
    add_to_report(&a.out, &a.model.checkpoint, scores)
}

fn export(a: ExportArgs) -> Result<()> {
    let loaded = Loaded::open(&a.model.checkpoint, a.model.vocab.as_deref())?;
    let text = export_embeddings(&loaded.checkpoint.params, &loaded.vocab)?;
    write_atomic(&a.out, text.as_bytes())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let models = match &a.model {
        Some(m) => vec![m.parse::<ModelKind>()?],
        None => vec![ModelKind::Strae, ModelKind::Iornn, ModelKind::SelfStrae],
    };
    let objectives = match &a.objective {
        Some(o) => vec![o.parse::<Objective>()?],
        None => vec![Objective::CrossEntropy, Objective::Contrastive, Objective::Degenerate],
    };
    let mut ok = true;
    for &model in &models {
        for &objective in &objectives {
            let report = gradient_check(model, objective, a.n, a.v, a.tokens, a.seed)?;
            let pass = report.max_rel_error < 1e-4;
            ok &= pass;
            println!(
                "{model}\t{objective}\tmax relative error {:.3e}\t{}",
                report.max_rel_error,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        reports.push(Report::from_json(&text).with_context(|| p.display().to_string())?);
    }
    let merged = Report::merge(reports);
    println!("# all runs");
    print!("{}", merged.to_text()?);
    println!("\n# best seed per group");
    print!("{}", merged.best_seed()?.to_text()?);
    println!("\n# mean ± std per group");
    print!("{}", merged.summary_text()?);
    if let Some(path) = &a.json {
        write_atomic(path, merged.to_json().as_bytes())?;
    }
    Ok(())
}

fn desk(a: DeskArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let corpus = match a.max_len {
        Some(max_len) => DeskCorpus::generate_bounded(a.count, max_len, a.seed),
        None => DeskCorpus::generate(a.count, a.seed),
    };
    let (text, trees) = corpus.write(&a.out, "desk")?;
    let task = cooccurrence_task(&corpus.sentences, a.window, a.min_count)?;
    let task_path = a.out.join("cooccurrence.tsv");
    write_similarity_task(&task, &task_path)?;
    let vocab = Vocabulary::from_sentences(&corpus.sentences, 1)?;
    let vocab_path = a.out.join("desk.vocab");
    vocab.save(&vocab_path)?;
    for p in [&text, &trees, &vocab_path, &task_path] {
        println!("{}", p.display());
    }
    Ok(())
}
