use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::corpus::{Tokenizer, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::io::read_lines;
use crate::model::{ModelParams, StructureSource};

/// Maps words and sentences to fixed-length vectors.
pub trait Embedder {
    fn word(&self, token: &str) -> Result<Vec<f64>>;
    fn sentence(&self, text: &str) -> Result<Vec<f64>>;
}

/// Embeddings read from trained parameters: words are rows of `Ψ`,
/// sentences are the flattened root of an upward pass.
#[derive(Clone, Debug)]
pub struct ModelEmbedder<'a> {
    params: &'a ModelParams,
    vocab: &'a Vocabulary,
    tokenizer: Tokenizer,
    source: StructureSource,
}

impl<'a> ModelEmbedder<'a> {
    /// `source` must be a generator (balanced, right-branching) or induced;
    /// a single given tree cannot structure arbitrary sentences.
    pub fn new(params: &'a ModelParams, vocab: &'a Vocabulary, tokenizer: Tokenizer, source: StructureSource) -> Result<Self> {
        if matches!(source, StructureSource::Given(_)) {
            return Err(Error::invalid("sentence embeddings need a tree generator or induction"));
        }
        if params.vocab_size() != vocab.len() {
            return Err(Error::invalid(format!(
                "parameters cover {} tokens but the vocabulary has {}",
                params.vocab_size(),
                vocab.len()
            )));
        }
        Ok(ModelEmbedder {
            params,
            vocab,
            tokenizer,
            source,
        })
    }

    /// Row `Ψ[id]`.
    pub fn word_embedding(&self, id: usize) -> Vec<f64> {
        self.params.embedding().row_slice(id).to_vec()
    }

    /// Flattened upward root embedding of an encoded sentence.
    pub fn sentence_embedding(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Empty("cannot embed an empty sentence".into()));
        }
        let (_, root) = self.params.encode_sentence(ids, &self.source)?;
        Ok(root.into_data())
    }
}

impl Embedder for ModelEmbedder<'_> {
    fn word(&self, token: &str) -> Result<Vec<f64>> {
        let token = self.tokenizer.normalize(token);
        let id = self.vocab.get(&token).unwrap_or_else(|| {
            warn!("{token:?} is not in the vocabulary, using {UNK}");
            self.vocab.unk_id()
        });
        Ok(self.word_embedding(id))
    }

    fn sentence(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = self.tokenizer.tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Empty(format!("sentence {text:?} has no tokens")));
        }
        self.sentence_embedding(&self.vocab.encode(&tokens)?)
    }
}

/// Word vectors in the plain text exchange format: a `count dim` header,
/// then `token v1 … v_dim` per line.
pub fn export_embeddings(params: &ModelParams, vocab: &Vocabulary) -> Result<String> {
    if params.vocab_size() != vocab.len() {
        return Err(Error::invalid("parameters and vocabulary disagree on size"));
    }
    let psi = params.embedding();
    let mut out = format!("{} {}\n", psi.rows(), psi.cols());
    for (id, token) in vocab.tokens().iter().enumerate() {
        out.push_str(token);
        for v in psi.row_slice(id) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub tokens: Vec<String>,
    pub vectors: HashMap<String, Vec<f64>>,
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let lines = read_lines(path)?;
    let header = lines.first().ok_or_else(|| Error::format(path, 1, "missing `count dim` header"))?;
    let parse_usize = |s: &str, line: usize| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, line, format!("bad integer {s:?}")))
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [count, dim] = fields[..] else {
        return Err(Error::format(path, 1, "header must be `count dim`"));
    };
    let (count, dim) = (parse_usize(count, 1)?, parse_usize(dim, 1)?);
    let mut table = EmbeddingTable {
        dim,
        ..EmbeddingTable::default()
    };
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default().to_string();
        let values = parts
            .map(|v| v.parse::<f64>().map_err(|_| Error::format(path, i + 1, format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(Error::format(path, i + 1, format!("{} values, expected {dim}", values.len())));
        }
        if table.vectors.insert(token.clone(), values).is_some() {
            return Err(Error::format(path, i + 1, format!("duplicate token {token:?}")));
        }
        table.tokens.push(token);
    }
    if table.tokens.len() != count {
        return Err(Error::format(path, 1, format!("header says {count} rows, found {}", table.tokens.len())));
    }
    Ok(table)
}

impl Embedder for EmbeddingTable {
    fn word(&self, token: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(token)
            .or_else(|| self.vectors.get(&token.to_lowercase()))
            .or_else(|| self.vectors.get(UNK))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("{token:?} has no vector and there is no {UNK} row")))
    }

    fn sentence(&self, _text: &str) -> Result<Vec<f64>> {
        Err(Error::invalid("an embedding table only holds word vectors"))
    }
}
