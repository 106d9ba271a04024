//! Intrinsic similarity evaluation, frozen-embedding probes and the
//! aggregate score.

mod embed;
mod probe;
mod report;

pub use embed::{export_embeddings, read_embeddings, Embedder, EmbeddingTable, ModelEmbedder};
pub use probe::{
    train_probe, train_probe_on_features, Features, ProbeConfig, ProbeExample, ProbeKind, ProbeResult, ProbeTask,
};
pub use report::{GroupSummary, Report, ReportRow, TaskScore};

use std::path::Path;

use crate::diffcore::cosine;
use crate::error::{Error, Result};
use crate::io::read_lines;

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: the Pearson correlation of fractional ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("{} scores vs {} scores", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("Spearman's rho needs at least two pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity scores".into()));
    }
    let (rx, ry) = (fractional_ranks(xs), fractional_ranks(ys));
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("Spearman's rho with zero rank variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Word,
    Sentence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPair {
    pub first: String,
    pub second: String,
    pub gold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTask {
    pub name: String,
    pub kind: SimilarityKind,
    pub pairs: Vec<SimilarityPair>,
}

impl SimilarityTask {
    pub fn new(name: impl Into<String>, kind: SimilarityKind, pairs: Vec<SimilarityPair>) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::Undefined("a similarity task needs at least two pairs".into()));
        }
        if let Some(p) = pairs.iter().find(|p| !p.gold.is_finite()) {
            return Err(Error::NonFinite(format!("gold score for {:?} / {:?}", p.first, p.second)));
        }
        Ok(SimilarityTask {
            name: name.into(),
            kind,
            pairs,
        })
    }

    /// Reads `first<TAB>second<TAB>score` lines. The task is named after the
    /// file stem.
    pub fn load(path: &Path, kind: SimilarityKind) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [first, second, score] = fields[..] else {
                return Err(Error::format(path, i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let gold: f64 = score
                .trim()
                .parse()
                .map_err(|_| Error::format(path, i + 1, format!("bad score {score:?}")))?;
            pairs.push(SimilarityPair {
                first: first.to_string(),
                second: second.to_string(),
                gold,
            });
        }
        let name = path.file_stem().map_or("task".into(), |s| s.to_string_lossy().into_owned());
        Self::new(name, kind, pairs).map_err(|e| Error::format(path, 0, e.to_string()))
    }
}

/// Cosine similarity of each pair's embeddings.
pub fn similarity_scores(task: &SimilarityTask, embedder: &dyn Embedder) -> Result<Vec<f64>> {
    task.pairs
        .iter()
        .map(|p| {
            let (a, b) = match task.kind {
                SimilarityKind::Word => (embedder.word(&p.first)?, embedder.word(&p.second)?),
                SimilarityKind::Sentence => (embedder.sentence(&p.first)?, embedder.sentence(&p.second)?),
            };
            Ok(cosine(&a, &b))
        })
        .collect()
}

/// Spearman's ρ between embedding cosines and gold scores.
pub fn eval_similarity(task: &SimilarityTask, embedder: &dyn Embedder) -> Result<f64> {
    let scores = similarity_scores(task, embedder)?;
    let gold: Vec<f64> = task.pairs.iter().map(|p| p.gold).collect();
    spearman_rho(&scores, &gold)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "metric", content = "value", rename_all = "snake_case")]
pub enum TaskResult {
    /// A correlation in [−1, 1]; contributes `100·ρ`.
    Rho(f64),
    /// A fraction in [0, 1]; contributes `100·acc`.
    Accuracy(f64),
}

impl TaskResult {
    pub fn scaled(&self) -> f64 {
        match *self {
            TaskResult::Rho(r) => 100.0 * r,
            TaskResult::Accuracy(a) => 100.0 * a,
        }
    }
}

/// Mean of the scaled task results.
pub fn aggregate_score(results: &[TaskResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("no task results to aggregate".into()));
    }
    Ok(results.iter().map(TaskResult::scaled).sum::<f64>() / results.len() as f64)
}
