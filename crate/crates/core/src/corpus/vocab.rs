use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::io::{read_lines, write_atomic};

pub const UNK: &str = "<unk>";

/// Token inventory with dense ids. The unknown token always has id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    id_of: HashMap<String, usize>,
    min_freq: u64,
    unk_id: usize,
}

impl Vocabulary {
    /// Keeps every token whose frequency is strictly greater than
    /// `min_freq`. Ordering is by descending frequency, ties broken
    /// lexicographically. Dropped tokens are counted toward UNK.
    pub fn from_sentences<S: AsRef<[String]>>(sentences: &[S], min_freq: u64) -> Result<Self> {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut total = 0u64;
        for sentence in sentences {
            for token in sentence.as_ref() {
                *freq.entry(token.as_str()).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::Empty("corpus contains no tokens".into()));
        }

        let mut unk_count = freq.remove(UNK).unwrap_or(0);
        let mut kept: Vec<(&str, u64)> = Vec::new();
        for (token, count) in freq {
            if count > min_freq {
                kept.push((token, count));
            } else {
                unk_count += count;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens = vec![UNK.to_string()];
        let mut counts = vec![unk_count];
        for (token, count) in kept {
            tokens.push(token.to_string());
            counts.push(count);
        }
        Ok(Self::from_parts(tokens, counts, min_freq))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, min_freq: u64) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            counts,
            id_of,
            min_freq,
            unk_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn min_freq(&self) -> u64 {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    /// Looks up a token, returning `None` for out-of-vocabulary input.
    pub fn get(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(self.unk_id)
    }

    /// Maps an already-tokenized sentence to ids; unknown tokens map to UNK.
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Result<Vec<usize>> {
        if sentence.is_empty() {
            return Err(Error::Empty("cannot encode an empty sentence".into()));
        }
        Ok(sentence.iter().map(|t| self.id(t.as_ref())).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#V={} minfreq={} unk={}\n",
            self.len(),
            self.min_freq,
            self.tokens[self.unk_id]
        );
        for (id, (token, count)) in self.tokens.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{token}\t{id}\t{count}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let header = lines
            .first()
            .ok_or_else(|| Error::format(path, 1, "missing vocabulary header"))?;
        let (size, min_freq, unk) = parse_header(header)
            .ok_or_else(|| Error::format(path, 1, format!("malformed header {header:?}")))?;

        let mut tokens = Vec::with_capacity(size);
        let mut counts = Vec::with_capacity(size);
        for (lineno, line) in lines.iter().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(path, lineno + 1, format!("expected token<TAB>id<TAB>frequency, got {line:?}"));
            if fields.len() != 3 {
                return Err(bad());
            }
            let id: usize = fields[1].parse().map_err(|_| bad())?;
            let count: u64 = fields[2].parse().map_err(|_| bad())?;
            if id != tokens.len() {
                return Err(Error::format(path, lineno + 1, format!("ids must be dense, expected {}", tokens.len())));
            }
            tokens.push(fields[0].to_string());
            counts.push(count);
        }
        if tokens.len() != size {
            return Err(Error::format(path, 1, format!("header declares V={size} but {} entries found", tokens.len())));
        }
        if tokens.first().map(String::as_str) != Some(unk.as_str()) {
            return Err(Error::format(path, 2, "the unknown token must have id 0"));
        }
        Ok(Self::from_parts(tokens, counts, min_freq))
    }
}

fn parse_header(line: &str) -> Option<(usize, u64, String)> {
    let mut size = None;
    let mut min_freq = None;
    let mut unk = None;
    for field in line.strip_prefix('#')?.split_whitespace() {
        let (key, value) = field.split_once('=')?;
        match key {
            "V" => size = value.parse().ok(),
            "minfreq" => min_freq = value.parse().ok(),
            "unk" => unk = Some(value.to_string()),
            _ => return None,
        }
    }
    Some((size?, min_freq?, unk?))
}

/// Builds a vocabulary from a one-sentence-per-line corpus file.
pub fn build_vocabulary(corpus: &Path, min_freq: u64, tokenizer: &Tokenizer) -> Result<Vocabulary> {
    let sentences = tokenizer.read_corpus(corpus)?;
    Vocabulary::from_sentences(&sentences, min_freq).map_err(|e| match e {
        Error::Empty(msg) => Error::Empty(format!("{}: {msg}", corpus.display())),
        other => other,
    })
}
