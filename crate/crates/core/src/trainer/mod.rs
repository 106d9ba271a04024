//! Configuration, initialization, optimization and the training loop.

mod adam;
mod checkpoint;
mod config;

use std::fmt;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use config::{default_lr, StructureKind, TrainConfig, DEFAULT_LR_CONTRASTIVE, DEFAULT_LR_CROSS_ENTROPY};

use crate::corpus::{check_alignment, read_tree_file, LabelMode, Tokenizer, Tree, Vocabulary};
use crate::diffcore::{check_gradients, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{autoencode, reconstruct_rows, Bound, IornnParams, ModelKind, ModelParams, StraeParams, StructureSource};
use crate::objectives::{contrastive_loss, cross_entropy_rows, degenerate_similarity_loss, BatchNodes, Objective};

/// `Ψ ~ U(−r, r)`; every other matrix `~ U(−s, s)` with `s = √(6 / 3N)`.
/// Tensors are drawn in [`ModelParams::tensors`] order.
pub fn init_params<R: Rng>(model: ModelKind, n: usize, vocab_size: usize, r: f64, rng: &mut R) -> Result<ModelParams> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("initialization range must be positive, got {r}")));
    }
    if n == 0 || vocab_size == 0 {
        return Err(Error::invalid("n and the vocabulary size must be positive"));
    }
    let s = (6.0 / (3 * n) as f64).sqrt();
    let mut uniform = |rows: usize, cols: usize, range: f64| {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-range..range)).collect())
    };
    let embedding = uniform(vocab_size, n * n, r)?;
    let compose = uniform(2 * n, n, s)?;
    match model {
        ModelKind::Strae | ModelKind::SelfStrae => {
            StraeParams::new(n, embedding, compose, uniform(n, 2 * n, s)?).map(ModelParams::Strae)
        }
        ModelKind::Iornn => IornnParams::new(
            n,
            embedding,
            compose,
            uniform(2 * n, n, s)?,
            uniform(2 * n, n, s)?,
            uniform(n, n, s)?,
        )
        .map(ModelParams::Iornn),
    }
}

/// The objective-specific settings needed to score a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub objective: Objective,
    pub tau: f64,
    pub intra_view_negatives: bool,
}

impl LossSpec {
    pub fn from_config(config: &TrainConfig) -> Self {
        LossSpec {
            objective: config.objective,
            tau: config.tau,
            intra_view_negatives: config.intra_view_negatives,
        }
    }
}

/// Autoencodes every sentence of a batch on one tape and returns the
/// configured objective.
pub fn batch_loss(tape: &mut Tape, b: &Bound, batch: &[(&[usize], StructureSource)], spec: LossSpec) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let encoded = batch
        .iter()
        .map(|(ids, source)| autoencode(tape, b, ids, source, false))
        .collect::<Result<Vec<_>>>()?;
    match spec.objective {
        Objective::CrossEntropy => {
            let downs: Vec<Var> = encoded
                .iter()
                .flat_map(|ae| ae.tree.leaves().iter().map(|&leaf| ae.downs[leaf]))
                .collect();
            let probs = reconstruct_rows(tape, b, &downs)?;
            let targets: Vec<usize> = batch.iter().flat_map(|(ids, _)| ids.iter().copied()).collect();
            let lengths: Vec<usize> = batch.iter().map(|(ids, _)| ids.len()).collect();
            cross_entropy_rows(tape, probs, &targets, &lengths)
        }
        Objective::Contrastive => {
            let nodes = BatchNodes::gather(tape, &encoded)?;
            contrastive_loss(tape, &nodes, spec.tau, spec.intra_view_negatives)
        }
        Objective::Degenerate => {
            let nodes = BatchNodes::gather(tape, &encoded)?;
            degenerate_similarity_loss(tape, &nodes)
        }
    }
}

/// Finite-difference check of one model/objective pair on a random
/// sentence of `tokens` ids drawn from a vocabulary of `vocab_size`.
pub fn gradient_check(
    model: ModelKind,
    objective: Objective,
    n: usize,
    vocab_size: usize,
    tokens: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(model, n, vocab_size, 0.5, &mut rng)?;
    let ids: Vec<usize> = (0..tokens).map(|_| rng.gen_range(0..vocab_size)).collect();
    let source = if model == ModelKind::SelfStrae {
        StructureSource::Induced
    } else {
        StructureSource::Balanced
    };
    let spec = LossSpec {
        objective,
        tau: 0.2,
        intra_view_negatives: false,
    };
    let tensors: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let b = params.bind_vars(tape, vars)?;
        batch_loss(tape, &b, &[(ids.as_slice(), source.clone())], spec)
    };
    check_gradients(f, &tensors, GradCheckConfig::default(), &mut rng)
}

/// Encoded sentences, with one tree per sentence when structure comes from
/// a tree file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub sentences: Vec<Vec<usize>>,
    pub trees: Option<Vec<Tree>>,
}

impl TrainData {
    pub fn new(sentences: Vec<Vec<usize>>) -> Self {
        TrainData { sentences, trees: None }
    }

    pub fn with_trees(sentences: Vec<Vec<usize>>, trees: Vec<Tree>) -> Result<Self> {
        if sentences.len() != trees.len() {
            return Err(Error::invalid(format!("{} trees for {} sentences", trees.len(), sentences.len())));
        }
        for (i, (s, t)) in sentences.iter().zip(&trees).enumerate() {
            if s.len() != t.leaf_count() {
                return Err(Error::invalid(format!(
                    "sentence {i}: {} tokens but its tree has {} leaves",
                    s.len(),
                    t.leaf_count()
                )));
            }
        }
        Ok(TrainData {
            sentences,
            trees: Some(trees),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn source(&self, kind: StructureKind, index: usize) -> Result<StructureSource> {
        Ok(match kind {
            StructureKind::TreeFile => {
                let trees = self
                    .trees
                    .as_ref()
                    .ok_or_else(|| Error::invalid("structure_source = tree_file but no trees were loaded"))?;
                StructureSource::Given(trees[index].clone())
            }
            StructureKind::Balanced => StructureSource::Balanced,
            StructureKind::RightBranching => StructureSource::RightBranching,
            StructureKind::Induced => StructureSource::Induced,
        })
    }
}

/// Reads, truncates and encodes a corpus (and its tree file when the
/// structure comes from one). Blank lines are skipped unless trees are read,
/// in which case they are an alignment error.
pub fn load_data(
    corpus: &Path,
    trees: Option<&Path>,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<TrainData> {
    let mut sentences = tokenizer.read_corpus(corpus)?;
    let mut truncated = 0;
    let data = match trees {
        Some(tree_path) => {
            let parsed = read_tree_file(tree_path, LabelMode::Present)?;
            check_alignment(&sentences, &parsed, tree_path)?;
            let mut out_trees = Vec::with_capacity(parsed.len());
            for (s, c) in sentences.iter_mut().zip(&parsed) {
                let c = if s.len() > max_len {
                    truncated += 1;
                    s.truncate(max_len);
                    c.truncate(max_len).expect("max_len is positive")
                } else {
                    c.clone()
                };
                out_trees.push(c.to_tree()?);
            }
            let ids = sentences.iter().map(|s| vocab.encode(s)).collect::<Result<Vec<_>>>()?;
            TrainData::with_trees(ids, out_trees)?
        }
        None => {
            let mut ids = Vec::with_capacity(sentences.len());
            for s in sentences.iter_mut().filter(|s| !s.is_empty()) {
                if s.len() > max_len {
                    truncated += 1;
                    s.truncate(max_len);
                }
                ids.push(vocab.encode(s)?);
            }
            TrainData::new(ids)
        }
    };
    if truncated > 0 {
        warn!("{}: truncated {truncated} sentences to {max_len} tokens", corpus.display());
    }
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

/// One metrics-log line. Dev losses are per epoch and carry no batch index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub epoch: usize,
    pub batch: Option<usize>,
    pub split: Split,
    pub loss: f64,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let batch = self.batch.map_or("-".to_string(), |b| b.to_string());
        let split = match self.split {
            Split::Train => "train",
            Split::Dev => "dev",
        };
        write!(f, "{}\t{batch}\t{split}\t{}", self.epoch, self.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
}

/// Owns the parameters, optimizer state and shuffling stream of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    dev_history: Vec<f64>,
    metrics: Vec<Metric>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params(config.model, config.n, vocab_size, config.r, &mut rng)?;
        let adam = AdamState::new(params.tensors().into_iter().map(|(_, t)| t));
        Ok(Trainer {
            config,
            params,
            adam,
            rng,
            epoch: 0,
            dev_history: Vec::new(),
            metrics: Vec::new(),
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(checkpoint.config.seed);
        rng.set_word_pos(checkpoint.rng_word_pos);
        Ok(Trainer {
            config: checkpoint.config,
            params: checkpoint.params,
            adam: checkpoint.adam,
            rng,
            epoch: checkpoint.epoch,
            dev_history: checkpoint.dev_history,
            metrics: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            dev_history: self.dev_history.clone(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    pub fn dev_history(&self) -> &[f64] {
        &self.dev_history
    }

    /// Next epoch's batches: a seeded shuffle of all sentence indices, cut
    /// into `batch_size` chunks with the remainder kept as a final batch.
    pub fn next_batches(&mut self, sentence_count: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..sentence_count).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn batch_items<'a>(&self, data: &'a TrainData, indices: &[usize]) -> Result<Vec<(&'a [usize], StructureSource)>> {
        indices
            .iter()
            .map(|&i| Ok((data.sentences[i].as_slice(), data.source(self.config.structure_source, i)?)))
            .collect()
    }

    /// Loss of one batch without updating anything.
    pub fn batch_loss(&self, data: &TrainData, indices: &[usize]) -> Result<f64> {
        let items = self.batch_items(data, indices)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let loss = batch_loss(&mut tape, &b, &items, LossSpec::from_config(&self.config))?;
        tape.check_finite()?;
        Ok(tape.value(loss).scalar_value())
    }

    /// Forward, backward and one Adam update. Returns the batch loss.
    pub fn train_step(&mut self, data: &TrainData, indices: &[usize]) -> Result<f64> {
        let items = self.batch_items(data, indices)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, true);
        let loss = batch_loss(&mut tape, &b, &items, LossSpec::from_config(&self.config))?;
        tape.check_finite()?;
        let value = tape.value(loss).scalar_value();
        let mut grads = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = b
            .vars()
            .into_iter()
            .zip(self.params.tensors())
            .map(|(v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        if let Some(max_norm) = self.config.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let mut params: Vec<&mut Tensor> = self.params.tensors_mut().into_iter().map(|(_, t)| t).collect();
        self.adam.step(&mut params, &grads, self.config.lr)?;
        Ok(value)
    }

    /// Mean batch loss over a data set in file order, weighted by batch size.
    pub fn evaluate(&self, data: &TrainData) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation set is empty".into()));
        }
        let indices: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for chunk in indices.chunks(self.config.batch_size) {
            total += self.batch_loss(data, chunk)? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    pub fn run_epoch(&mut self, train: &TrainData, dev: Option<&TrainData>) -> Result<EpochSummary> {
        if train.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let batches = self.next_batches(train.len());
        let mut weighted = 0.0;
        for (k, batch) in batches.iter().enumerate() {
            let loss = self.train_step(train, batch).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {})", k + 1)),
                other => other,
            })?;
            self.metrics.push(Metric {
                epoch,
                batch: Some(k + 1),
                split: Split::Train,
                loss,
            });
            weighted += loss * batch.len() as f64;
        }
        self.epoch = epoch;
        let dev_loss = dev.map(|d| self.evaluate(d)).transpose()?;
        if let Some(loss) = dev_loss {
            self.dev_history.push(loss);
            self.metrics.push(Metric {
                epoch,
                batch: None,
                split: Split::Dev,
                loss,
            });
        }
        Ok(EpochSummary {
            epoch,
            train_loss: weighted / train.len() as f64,
            dev_loss,
        })
    }
}

pub struct TrainOutcome {
    /// The epoch with the lowest dev loss, or the last epoch without a dev set.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<Metric>,
    pub summaries: Vec<EpochSummary>,
}

pub fn metrics_text(metrics: &[Metric]) -> String {
    metrics.iter().map(|m| format!("{m}\n")).collect()
}

/// Runs `config.epochs` epochs. With a checkpoint directory, every epoch is
/// saved as `epoch-NNN.manifest`, the metrics log as `metrics.tsv`, and the
/// selected epoch again as `final.manifest`.
pub fn train(config: &TrainConfig, vocab_size: usize, data: &TrainData, dev: Option<&TrainData>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), vocab_size)?;
    let dir = config.checkpoint_dir.as_deref();
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        config.save(&dir.join("config.conf"))?;
    }
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut summaries = Vec::new();
    for _ in 0..config.epochs {
        let summary = trainer.run_epoch(data, dev)?;
        info!(
            "epoch {}: train loss {:.6}{}",
            summary.epoch,
            summary.train_loss,
            summary.dev_loss.map_or(String::new(), |d| format!(", dev loss {d:.6}"))
        );
        let checkpoint = trainer.checkpoint();
        if let Some(dir) = dir {
            checkpoint.save(&dir.join(format!("epoch-{:03}.manifest", summary.epoch)))?;
            write_atomic(&dir.join("metrics.tsv"), metrics_text(trainer.metrics()).as_bytes())?;
        }
        let replace = match (summary.dev_loss, &best) {
            (Some(loss), Some((best_loss, _))) => loss < *best_loss,
            _ => true,
        };
        if replace {
            best = Some((summary.dev_loss.unwrap_or(f64::NAN), checkpoint));
        }
        summaries.push(summary);
    }
    let last = trainer.checkpoint();
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    if let Some(dir) = dir {
        best.save(&dir.join("final.manifest"))?;
        write_atomic(&dir.join("metrics.tsv"), metrics_text(trainer.metrics()).as_bytes())?;
    }
    Ok(TrainOutcome {
        best,
        last,
        metrics: trainer.metrics().to_vec(),
        summaries,
    })
}

/// Loads the vocabulary, corpus, trees and dev set named by the config and
/// trains.
pub fn train_from_config(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab_path = config.vocab.as_deref().ok_or_else(|| Error::invalid("config has no vocab path"))?;
    let corpus = config.corpus.as_deref().ok_or_else(|| Error::invalid("config has no corpus path"))?;
    let vocab = Vocabulary::load(vocab_path)?;
    let tokenizer = Tokenizer {
        lowercase: config.lowercase,
        ..Tokenizer::default()
    };
    let needs_trees = config.structure_source == StructureKind::TreeFile;
    let trees = match (needs_trees, config.trees.as_deref()) {
        (true, None) => return Err(Error::invalid("structure_source = tree_file needs a trees path")),
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    let data = load_data(corpus, trees, &vocab, &tokenizer, config.max_len)?;
    let dev = match config.dev_corpus.as_deref() {
        Some(dev_corpus) => {
            let dev_trees = match (needs_trees, config.dev_trees.as_deref()) {
                (true, None) => return Err(Error::invalid("a tree_file run with a dev corpus needs dev_trees")),
                (true, Some(t)) => Some(t),
                (false, _) => None,
            };
            Some(load_data(dev_corpus, dev_trees, &vocab, &tokenizer, config.max_len)?)
        }
        None => None,
    };
    info!(
        "training {} / {} / {} on {} sentences, V={}",
        config.model,
        config.objective,
        config.structure_source,
        data.len(),
        vocab.len()
    );
    train(config, vocab.len(), &data, dev.as_ref())
}
