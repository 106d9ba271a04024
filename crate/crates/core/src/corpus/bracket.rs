//! Reading Treebank-style bracketed constituency trees.
//!
//! Parentheses and whitespace are the only structural characters. With
//! [`LabelMode::Present`] (the Treebank convention) a bracket whose first
//! element is a bare token and which has at least one further element treats
//! that token as its label: `(NP the dog)` has two leaves. A bracket holding a
//! single bare token is a leaf, so `(a)` is a one-token sentence. With
//! [`LabelMode::Absent`] every bare token is a leaf: `(the (big dog))`.

use std::fmt;

use crate::corpus::tree::{NodeId, Tree, TreeBuilder};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelMode {
    #[default]
    Present,
    Absent,
}

/// A possibly n-ary constituency tree as read from text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Constituent {
    Leaf(String),
    Phrase {
        label: Option<String>,
        children: Vec<Constituent>,
    },
}

pub fn parse_bracketed_tree(line: &str) -> Result<Constituent> {
    parse_bracketed_tree_with(line, LabelMode::Present)
}

pub fn parse_bracketed_tree_with(line: &str, mode: LabelMode) -> Result<Constituent> {
    let tokens = lex(line)?;
    let mut pos = 0;
    let tree = match tokens.first() {
        Some((_, Lexeme::Open)) => parse_phrase(&tokens, &mut pos, mode)?,
        Some((offset, _)) => {
            return Err(Error::Bracket {
                offset: *offset,
                message: "tree must start with '('".into(),
            })
        }
        None => {
            return Err(Error::Bracket {
                offset: 0,
                message: "empty line, tree has zero leaves".into(),
            })
        }
    };
    if let Some((offset, _)) = tokens.get(pos) {
        return Err(Error::Bracket {
            offset: *offset,
            message: "trailing input after the root bracket closed".into(),
        });
    }
    Ok(tree)
}

#[derive(Debug, PartialEq)]
enum Lexeme<'a> {
    Open,
    Close,
    Word(&'a str),
}

fn lex<'a>(line: &'a str) -> Result<Vec<(usize, Lexeme<'a>)>> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<(usize, Lexeme<'a>)>| {
        if let Some(s) = start.take() {
            out.push((s, Lexeme::Word(&line[s..end])));
        }
    };
    for (i, c) in line.char_indices() {
        match c {
            '(' | ')' => {
                flush(&mut word_start, i, &mut out);
                out.push((i, if c == '(' { Lexeme::Open } else { Lexeme::Close }));
            }
            c if c.is_whitespace() => flush(&mut word_start, i, &mut out),
            c if c.is_control() => {
                return Err(Error::Bracket {
                    offset: i,
                    message: format!("malformed token: control character {c:?}"),
                })
            }
            _ => {
                if word_start.is_none() {
                    word_start = Some(i);
                }
            }
        }
    }
    flush(&mut word_start, line.len(), &mut out);
    Ok(out)
}

fn parse_phrase(tokens: &[(usize, Lexeme<'_>)], pos: &mut usize, mode: LabelMode) -> Result<Constituent> {
    let open_offset = tokens[*pos].0;
    *pos += 1;
    let mut elements: Vec<Constituent> = Vec::new();
    let mut first_is_word = false;
    loop {
        match tokens.get(*pos) {
            None => {
                return Err(Error::Bracket {
                    offset: open_offset,
                    message: "unbalanced parentheses: bracket never closed".into(),
                })
            }
            Some((_, Lexeme::Close)) => {
                *pos += 1;
                break;
            }
            Some((_, Lexeme::Open)) => elements.push(parse_phrase(tokens, pos, mode)?),
            Some((_, Lexeme::Word(w))) => {
                if elements.is_empty() {
                    first_is_word = true;
                }
                elements.push(Constituent::Leaf(w.to_string()));
                *pos += 1;
            }
        }
    }
    if elements.is_empty() {
        return Err(Error::Bracket {
            offset: open_offset,
            message: "empty bracket has zero leaves".into(),
        });
    }
    let mut label = None;
    if mode == LabelMode::Present && first_is_word && elements.len() >= 2 {
        if let Constituent::Leaf(word) = elements.remove(0) {
            label = Some(word);
        }
    }
    Ok(Constituent::Phrase {
        label,
        children: elements,
    })
}

impl Constituent {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Constituent::Leaf(w) => out.push(w),
            Constituent::Phrase { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Constituent::Leaf(_) => 1,
            Constituent::Phrase { children, .. } => children.iter().map(Constituent::leaf_count).sum(),
        }
    }

    /// Strictly binary, with unary chains collapsed and every n-ary node
    /// expanded right-branching inside its own span.
    pub fn binarize(&self) -> Constituent {
        match self {
            Constituent::Leaf(_) => self.clone(),
            Constituent::Phrase { label, children } => {
                let mut kids: Vec<Constituent> = children.iter().map(Constituent::binarize).collect();
                if kids.len() == 1 {
                    return kids.pop().unwrap();
                }
                let mut acc = kids.pop().unwrap();
                while let Some(next) = kids.pop() {
                    acc = Constituent::Phrase {
                        label: label.clone(),
                        children: vec![next, acc],
                    };
                }
                acc
            }
        }
    }

    pub fn is_binary(&self) -> bool {
        match self {
            Constituent::Leaf(_) => true,
            Constituent::Phrase { children, .. } => children.len() == 2 && children.iter().all(Constituent::is_binary),
        }
    }

    /// Keeps only the first `max_leaves` leaves; brackets left empty vanish.
    pub fn truncate(&self, max_leaves: usize) -> Option<Constituent> {
        fn go(c: &Constituent, budget: &mut usize) -> Option<Constituent> {
            if *budget == 0 {
                return None;
            }
            match c {
                Constituent::Leaf(_) => {
                    *budget -= 1;
                    Some(c.clone())
                }
                Constituent::Phrase { label, children } => {
                    let kept: Vec<_> = children.iter().filter_map(|k| go(k, budget)).collect();
                    (!kept.is_empty()).then(|| Constituent::Phrase {
                        label: label.clone(),
                        children: kept,
                    })
                }
            }
        }
        let mut budget = max_leaves;
        go(self, &mut budget)
    }

    /// Binarizes and converts to an indexed [`Tree`].
    pub fn to_tree(&self) -> Result<Tree> {
        let binary = self.binarize();
        let mut builder = TreeBuilder::new(binary.leaf_count())?;
        let mut next_leaf = 0;
        fn go(c: &Constituent, b: &mut TreeBuilder, next_leaf: &mut usize) -> Result<NodeId> {
            match c {
                Constituent::Leaf(_) => {
                    *next_leaf += 1;
                    Ok(*next_leaf - 1)
                }
                Constituent::Phrase { children, .. } => {
                    let l = go(&children[0], b, next_leaf)?;
                    let r = go(&children[1], b, next_leaf)?;
                    b.merge(l, r)
                }
            }
        }
        go(&binary, &mut builder, &mut next_leaf)?;
        builder.finish()
    }
}

impl fmt::Display for Constituent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constituent::Leaf(w) => write!(f, "{w}"),
            Constituent::Phrase { label, children } => {
                write!(f, "(")?;
                if let Some(label) = label {
                    write!(f, "{label} ")?;
                }
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}
