//! Text ingestion: tokenization, vocabularies, bracketed trees and the
//! trivial tree generators.

mod bracket;
mod tree;
mod vocab;

use std::path::Path;

pub use bracket::{parse_bracketed_tree, parse_bracketed_tree_with, Constituent, LabelMode};
pub use tree::{balanced_tree, right_branching_tree, Node, NodeId, Span, Tree, TreeBuilder};
pub use vocab::{build_vocabulary, Vocabulary, UNK};

use crate::error::{Error, Result};
use crate::io::read_lines;

/// Whitespace tokenizer with optional lowercasing and punctuation splitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub split_punctuation: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            lowercase: true,
            split_punctuation: false,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, line: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in line.split_whitespace() {
            let word = if self.lowercase { word.to_lowercase() } else { word.to_string() };
            if !self.split_punctuation {
                out.push(word);
                continue;
            }
            let mut current = String::new();
            for c in word.chars() {
                if c.is_ascii_punctuation() {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    out.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
        out
    }

    /// Applies the same normalization to an already-split token.
    pub fn normalize(&self, token: &str) -> String {
        if self.lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        }
    }

    /// One tokenized sentence per line. Blank lines yield empty sentences so
    /// that line numbers stay aligned with a companion tree file.
    pub fn read_corpus(&self, path: &Path) -> Result<Vec<Vec<String>>> {
        Ok(read_lines(path)?.iter().map(|l| self.tokenize(l)).collect())
    }
}

/// Reads a tree file, one bracketed tree per line.
pub fn read_tree_file(path: &Path, mode: LabelMode) -> Result<Vec<Constituent>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            parse_bracketed_tree_with(line, mode).map_err(|e| Error::format(path, i + 1, e.to_string()))
        })
        .collect()
}

/// Checks that a tree file lines up with its corpus: same number of lines
/// and the same number of tokens on each line.
pub fn check_alignment(sentences: &[Vec<String>], trees: &[Constituent], tree_path: &Path) -> Result<()> {
    if sentences.len() != trees.len() {
        return Err(Error::format(
            tree_path,
            trees.len().min(sentences.len()) + 1,
            format!("{} trees for {} corpus lines", trees.len(), sentences.len()),
        ));
    }
    for (i, (s, t)) in sentences.iter().zip(trees).enumerate() {
        if s.len() != t.leaf_count() {
            return Err(Error::format(
                tree_path,
                i + 1,
                format!("tree has {} leaves but the sentence has {} tokens", t.leaf_count(), s.len()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_flags() {
        let lower = Tokenizer::default();
        assert_eq!(lower.tokenize("The  cat, sat"), vec!["the", "cat,", "sat"]);
        let split = Tokenizer {
            lowercase: false,
            split_punctuation: true,
        };
        assert_eq!(split.tokenize("The cat, (sat)."), vec!["The", "cat", ",", "(", "sat", ")", "."]);
    }

    #[test]
    fn alignment_mismatch_reports_line() {
        let sentences = vec![vec!["a".to_string(), "b".to_string()], vec!["c".to_string()]];
        let trees = vec![
            parse_bracketed_tree("(X a b)").unwrap(),
            parse_bracketed_tree("(X c d)").unwrap(),
        ];
        match check_alignment(&sentences, &trees, Path::new("t.txt")) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_constituent() -> impl Strategy<Value = Constituent> {
        let leaf = "[a-z]{1,3}".prop_map(Constituent::Leaf);
        leaf.prop_recursive(4, 24, 4, |inner| {
            prop::collection::vec(inner, 1..4).prop_map(|children| Constituent::Phrase {
                label: Some("X".into()),
                children,
            })
        })
    }

    fn arb_tree() -> impl Strategy<Value = Tree> {
        arb_constituent().prop_map(|c| c.to_tree().unwrap())
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(c in arb_constituent()) {
            let once = c.binarize();
            prop_assert!(once.is_binary());
            prop_assert_eq!(once.binarize(), once.clone());
            prop_assert_eq!(once.leaves(), c.leaves());
        }

        #[test]
        fn trees_satisfy_invariants(t in arb_tree()) {
            let n = t.leaf_count();
            prop_assert_eq!(t.node_count(), 2 * n - 1);
            prop_assert_eq!(t.internal_spans().len(), n - 1);
            prop_assert!(Tree::from_nodes(t.nodes().to_vec(), t.root()).is_ok());
        }

        #[test]
        fn bracketed_round_trip(t in arb_tree()) {
            let tokens: Vec<String> = (0..t.leaf_count()).map(|i| format!("w{i}")).collect();
            let text = t.to_bracketed(&tokens).unwrap();
            let back = parse_bracketed_tree(&text).unwrap();
            prop_assert_eq!(back.leaves(), tokens.iter().map(String::as_str).collect::<Vec<_>>());
            let back = back.to_tree().unwrap();
            prop_assert!(back.same_structure(&t));
            prop_assert_eq!(back, t);
        }

        #[test]
        fn generators_are_valid(n in 1usize..60) {
            for t in [balanced_tree(n).unwrap(), right_branching_tree(n).unwrap()] {
                prop_assert_eq!(t.node_count(), 2 * n - 1);
                prop_assert!(Tree::from_nodes(t.nodes().to_vec(), t.root()).is_ok());
            }
        }
    }
}
