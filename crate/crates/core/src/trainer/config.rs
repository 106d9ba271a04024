use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{read_lines, write_atomic};
use crate::model::ModelKind;
use crate::objectives::Objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureKind {
    TreeFile,
    Balanced,
    RightBranching,
    Induced,
}

impl StructureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StructureKind::TreeFile => "tree_file",
            StructureKind::Balanced => "balanced",
            StructureKind::RightBranching => "right_branching",
            StructureKind::Induced => "induced",
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree_file" | "given" => Ok(StructureKind::TreeFile),
            "balanced" => Ok(StructureKind::Balanced),
            "right_branching" | "right-branching" => Ok(StructureKind::RightBranching),
            "induced" => Ok(StructureKind::Induced),
            other => Err(Error::invalid(format!("unknown structure source {other:?}"))),
        }
    }
}

pub const DEFAULT_LR_CROSS_ENTROPY: f64 = 1e-3;
pub const DEFAULT_LR_CONTRASTIVE: f64 = 1e-4;

pub fn default_lr(objective: Objective) -> f64 {
    match objective {
        Objective::CrossEntropy => DEFAULT_LR_CROSS_ENTROPY,
        Objective::Contrastive | Objective::Degenerate => DEFAULT_LR_CONTRASTIVE,
    }
}

/// Everything that defines a training run. Stored as flat `key = value`
/// text; see [`TrainConfig::to_text`] for the key list.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub model: ModelKind,
    pub structure_source: StructureKind,
    /// Embeddings are `n × n`.
    pub n: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    /// Range of the uniform embedding initialization.
    pub r: f64,
    pub seed: u64,
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub trees: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub dev_trees: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub lowercase: bool,
    pub intra_view_negatives: bool,
    /// Global gradient-norm clipping threshold; off when `None`.
    pub clip_norm: Option<f64>,
    /// Longer sentences are truncated with a warning.
    pub max_len: usize,
}

impl TrainConfig {
    /// Defaults for the given combination, with the learning rate matched to
    /// the objective.
    pub fn new(model: ModelKind, objective: Objective, structure_source: StructureKind) -> Self {
        TrainConfig {
            objective,
            model,
            structure_source,
            n: 10,
            lr: default_lr(objective),
            batch_size: 128,
            epochs: 15,
            tau: 0.2,
            r: 0.1,
            seed: 0,
            vocab: None,
            corpus: None,
            trees: None,
            dev_corpus: None,
            dev_trees: None,
            checkpoint_dir: None,
            deterministic: true,
            lowercase: true,
            intra_view_negatives: false,
            clip_norm: None,
            max_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let self_strae = self.model == ModelKind::SelfStrae;
        if self_strae != (self.structure_source == StructureKind::Induced) {
            return Err(Error::invalid(
                "structure_source = induced is used exactly when model = self_strae",
            ));
        }
        let checks: [(bool, &str); 7] = [
            (self.n >= 1, "n must be at least 1"),
            (self.lr.is_finite() && self.lr >= 0.0, "lr must be finite and non-negative"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.tau.is_finite() && self.tau > 0.0, "tau must be positive"),
            (self.r.is_finite() && self.r > 0.0, "r must be positive"),
            (self.max_len >= 1, "max_len must be at least 1"),
            (
                self.clip_norm.is_none_or(|c| c.is_finite() && c > 0.0),
                "clip_norm must be positive",
            ),
        ];
        for (ok, message) in checks {
            if !ok {
                return Err(Error::invalid(message));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Key/value pairs in file order. Unset paths are omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("objective", self.objective.to_string()),
            ("model", self.model.to_string()),
            ("structure_source", self.structure_source.to_string()),
            ("n", self.n.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("tau", self.tau.to_string()),
            ("r", self.r.to_string()),
            ("seed", self.seed.to_string()),
        ];
        let paths = [
            ("vocab", &self.vocab),
            ("corpus", &self.corpus),
            ("trees", &self.trees),
            ("dev_corpus", &self.dev_corpus),
            ("dev_trees", &self.dev_trees),
            ("checkpoint_dir", &self.checkpoint_dir),
        ];
        for (key, path) in paths {
            if let Some(p) = path {
                out.push((key, p.display().to_string()));
            }
        }
        out.extend([
            ("deterministic", self.deterministic.to_string()),
            ("lowercase", self.lowercase.to_string()),
            ("intra_view_negatives", self.intra_view_negatives.to_string()),
            ("clip_norm", self.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("max_len", self.max_len.to_string()),
        ]);
        out
    }

    /// Builds a config from key/value pairs. Missing keys take the defaults
    /// of [`TrainConfig::new`], so an absent `lr` follows the objective.
    /// Unknown keys are rejected.
    pub fn from_entries<'a, I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in entries {
            if map.insert(k, v).is_some() {
                return Err(Error::invalid(format!("duplicate config key {k:?}")));
            }
        }
        let objective: Objective = map.remove("objective").map_or(Ok(Objective::Contrastive), str::parse)?;
        let model: ModelKind = map.remove("model").map_or(Ok(ModelKind::Strae), str::parse)?;
        let structure = match map.remove("structure_source") {
            Some(s) => s.parse()?,
            None if model == ModelKind::SelfStrae => StructureKind::Induced,
            None => StructureKind::TreeFile,
        };
        let mut c = TrainConfig::new(model, objective, structure);
        for (key, value) in map {
            let path = || Some(PathBuf::from(value));
            match key {
                "n" => c.n = parse(key, value)?,
                "lr" => c.lr = parse(key, value)?,
                "batch_size" => c.batch_size = parse(key, value)?,
                "epochs" => c.epochs = parse(key, value)?,
                "tau" => c.tau = parse(key, value)?,
                "r" => c.r = parse(key, value)?,
                "seed" => c.seed = parse(key, value)?,
                "vocab" => c.vocab = path(),
                "corpus" => c.corpus = path(),
                "trees" => c.trees = path(),
                "dev_corpus" => c.dev_corpus = path(),
                "dev_trees" => c.dev_trees = path(),
                "checkpoint_dir" => c.checkpoint_dir = path(),
                "deterministic" => c.deterministic = parse(key, value)?,
                "lowercase" => c.lowercase = parse(key, value)?,
                "intra_view_negatives" => c.intra_view_negatives = parse(key, value)?,
                "clip_norm" => {
                    c.clip_norm = match value {
                        "none" | "off" => None,
                        v => Some(parse(key, v)?),
                    }
                }
                "max_len" => c.max_len = parse(key, value)?,
                other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, i + 1, "expected `key = value`"))?;
            entries.push((k.trim(), v.trim()));
        }
        Self::from_entries(entries).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", origin.display())),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_lines(path)?.join("\n"), path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for config key {key:?}")))
}
