//! Binary classifiers trained on frozen embeddings.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Embedder;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::read_lines;
use crate::trainer::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// One text per example; an MLP with one tanh hidden layer.
    Single,
    /// Two texts per example; a linear layer over their concatenation.
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProbeExample {
    pub text: String,
    pub text2: Option<String>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    pub kind: ProbeKind,
    pub train: Vec<ProbeExample>,
    pub dev: Vec<ProbeExample>,
    pub test: Vec<ProbeExample>,
}

impl ProbeTask {
    pub fn new(
        name: impl Into<String>,
        kind: ProbeKind,
        train: Vec<ProbeExample>,
        dev: Vec<ProbeExample>,
        test: Vec<ProbeExample>,
    ) -> Result<Self> {
        let name = name.into();
        for (split, examples) in [("train", &train), ("dev", &dev), ("test", &test)] {
            if examples.is_empty() {
                return Err(Error::Empty(format!("{name}: {split} split is empty")));
            }
            for e in examples {
                if e.label > 1 {
                    return Err(Error::invalid(format!("{name}: label {} is not binary", e.label)));
                }
                if e.text2.is_some() != (kind == ProbeKind::Pair) {
                    return Err(Error::invalid(format!("{name}: {split} example does not match the task kind")));
                }
            }
        }
        let key = |e: &ProbeExample| (e.text.clone(), e.text2.clone());
        let train_keys: HashSet<_> = train.iter().map(key).collect();
        let overlap = dev.iter().chain(&test).filter(|e| train_keys.contains(&key(e))).count();
        if overlap > 0 {
            warn!("{name}: {overlap} dev/test examples also occur in the training split");
        }
        Ok(ProbeTask {
            name,
            kind,
            train,
            dev,
            test,
        })
    }

    /// Reads `<prefix>.train`, `<prefix>.dev` and `<prefix>.test`, each with
    /// `text<TAB>label` or `text1<TAB>text2<TAB>label` lines.
    pub fn load(prefix: &Path) -> Result<Self> {
        let split_path = |suffix: &str| -> PathBuf {
            let mut p = prefix.as_os_str().to_owned();
            p.push(suffix);
            PathBuf::from(p)
        };
        let mut kind = None;
        let mut splits = Vec::new();
        for suffix in [".train", ".dev", ".test"] {
            let path = split_path(suffix);
            let mut examples = Vec::new();
            for (i, line) in read_lines(&path)?.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let (text, text2, label, k) = match fields[..] {
                    [t, l] => (t, None, l, ProbeKind::Single),
                    [t, t2, l] => (t, Some(t2.to_string()), l, ProbeKind::Pair),
                    _ => return Err(Error::format(&path, i + 1, "expected 2 or 3 tab-separated fields")),
                };
                if *kind.get_or_insert(k) != k {
                    return Err(Error::format(&path, i + 1, "mixed single-text and pair examples"));
                }
                let label = label
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(&path, i + 1, format!("bad label {label:?}")))?;
                examples.push(ProbeExample {
                    text: text.to_string(),
                    text2,
                    label,
                });
            }
            splits.push(examples);
        }
        let name = prefix.file_name().map_or("probe".into(), |s| s.to_string_lossy().into_owned());
        let test = splits.pop().unwrap_or_default();
        let dev = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Self::new(name, kind.unwrap_or(ProbeKind::Single), train, dev, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a dev-accuracy improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 512,
            lr: 1e-3,
            max_epochs: 100,
            patience: 10,
            batch_size: 32,
            seeds: (0..5).collect(),
        }
    }
}

/// Feature rows with their labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl Features {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<usize>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::invalid(format!("{} feature rows for {} labels", x.len(), y.len())));
        }
        let dim = x[0].len();
        if dim == 0 || x.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows must share a positive length"));
        }
        if y.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Features { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    fn embed(examples: &[ProbeExample], embedder: &dyn Embedder) -> Result<Self> {
        let x = examples
            .iter()
            .map(|e| {
                let mut v = embedder.sentence(&e.text)?;
                if let Some(t2) = &e.text2 {
                    v.extend(embedder.sentence(t2)?);
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Features::new(x, examples.iter().map(|e| e.label).collect())
    }

    fn rows(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.x[i].clone()).collect();
        Tensor::from_rows(&rows).expect("rows share a length")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Test accuracy per seed, as fractions.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
}

impl ProbeResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Empty("no probe runs".into()));
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(ProbeResult { accuracies, mean, std })
    }
}

struct Probe {
    kind: ProbeKind,
    tensors: Vec<Tensor>,
}

impl Probe {
    fn new(kind: ProbeKind, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut xavier = |rows: usize, cols: usize| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect()).expect("sized")
        };
        let tensors = match kind {
            ProbeKind::Single => vec![xavier(dim, hidden), Tensor::zeros(1, hidden), xavier(hidden, 2), Tensor::zeros(1, 2)],
            ProbeKind::Pair => vec![xavier(dim, 2), Tensor::zeros(1, 2)],
        };
        Probe { kind, tensors }
    }

    fn logits(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        match self.kind {
            ProbeKind::Single => {
                let h = tape.matmul(x, vars[0])?;
                let h = tape.add_row(h, vars[1])?;
                let h = tape.tanh(h);
                let o = tape.matmul(h, vars[2])?;
                tape.add_row(o, vars[3])
            }
            ProbeKind::Pair => {
                let o = tape.matmul(x, vars[0])?;
                tape.add_row(o, vars[1])
            }
        }
    }

    fn step(&mut self, adam: &mut AdamState, x: Tensor, y: &[usize], lr: f64) -> Result<()> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let x = tape.constant(x);
        let logits = self.logits(&mut tape, x, &vars)?;
        let ls = tape.log_softmax(logits);
        let picked = tape.pick(ls, y)?;
        let mean = tape.mean(picked);
        let loss = tape.scale(mean, -1.0);
        tape.check_finite()?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        let mut params: Vec<&mut Tensor> = self.tensors.iter_mut().collect();
        adam.step(&mut params, &grads, lr)
    }

    fn accuracy(&self, data: &Features) -> Result<f64> {
        let all: Vec<usize> = (0..data.x.len()).collect();
        let mut correct = 0;
        for chunk in all.chunks(1024) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
            let x = tape.constant(data.rows(chunk));
            let logits = self.logits(&mut tape, x, &vars)?;
            let out = tape.value(logits);
            for (r, &i) in chunk.iter().enumerate() {
                let predicted = usize::from(out.get(r, 1) > out.get(r, 0));
                correct += usize::from(predicted == data.y[i]);
            }
        }
        Ok(correct as f64 / data.x.len() as f64)
    }
}

/// Trains one probe with Adam on cross-entropy, keeps the parameters with
/// the best dev accuracy and returns their test accuracy.
pub fn train_probe_on_features(
    kind: ProbeKind,
    train: &Features,
    dev: &Features,
    test: &Features,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let dim = train.dim();
    if dev.dim() != dim || test.dim() != dim {
        return Err(Error::invalid("feature dimensions differ between splits"));
    }
    if config.batch_size == 0 || config.hidden == 0 {
        return Err(Error::invalid("probe batch size and hidden width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Probe::new(kind, dim, config.hidden, &mut rng);
    let mut adam = AdamState::new(&probe.tensors);
    let mut best = (probe.accuracy(dev)?, probe.tensors.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.x.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let y: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
            probe.step(&mut adam, train.rows(chunk), &y, config.lr)?;
        }
        let acc = probe.accuracy(dev)?;
        if acc > best.0 {
            best = (acc, probe.tensors.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                debug!("probe seed {seed}: early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    probe.tensors = best.1;
    probe.accuracy(test)
}

/// Embeds every split once and trains one probe per seed. Single-text tasks
/// use the MLP probe, pair tasks the linear probe.
pub fn train_probe(task: &ProbeTask, embedder: &(dyn Embedder + Sync), config: &ProbeConfig) -> Result<ProbeResult> {
    let train = Features::embed(&task.train, embedder)?;
    let dev = Features::embed(&task.dev, embedder)?;
    let test = Features::embed(&task.test, embedder)?;
    let accuracies = config
        .seeds
        .par_iter()
        .map(|&seed| train_probe_on_features(task.kind, &train, &dev, &test, config, seed))
        .collect::<Result<Vec<_>>>()?;
    ProbeResult::from_accuracies(accuracies)
}
