//! StrAE and IORNN over binary trees, plus greedy structure induction.
//!
//! Embeddings are `N × N` matrices. The embedding matrix `Ψ` (`V × N²`) is
//! used twice: rows are gathered and squared to embed leaves, and its
//! transpose scores flattened downward embeddings against the vocabulary.

mod forward;
mod induce;

use std::fmt;
use std::str::FromStr;

pub use forward::{
    autoencode, compose, decode, decompose, embed_leaf, encode, index_leaf, iornn_decode, reconstruct, reconstruct_rows,
    Autoencoded,
    Bound,
};
pub use induce::induce_structure;

use crate::corpus::{balanced_tree, right_branching_tree, Tree};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Strae,
    Iornn,
    SelfStrae,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Strae => "strae",
            ModelKind::Iornn => "iornn",
            ModelKind::SelfStrae => "self_strae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strae" => Ok(ModelKind::Strae),
            "iornn" => Ok(ModelKind::Iornn),
            "self_strae" | "self-strae" => Ok(ModelKind::SelfStrae),
            other => Err(Error::invalid(format!("unknown model {other:?}"))),
        }
    }
}

/// Where the tree for a sentence comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StructureSource {
    Given(Tree),
    Balanced,
    RightBranching,
    Induced,
}

impl StructureSource {
    /// Resolves every source except [`StructureSource::Induced`], which
    /// needs model parameters.
    pub fn fixed_tree(&self, leaf_count: usize) -> Result<Option<Tree>> {
        match self {
            StructureSource::Given(tree) => {
                if tree.leaf_count() != leaf_count {
                    return Err(Error::invalid(format!(
                        "given tree has {} leaves but the sentence has {leaf_count} tokens",
                        tree.leaf_count()
                    )));
                }
                Ok(Some(tree.clone()))
            }
            StructureSource::Balanced => balanced_tree(leaf_count).map(Some),
            StructureSource::RightBranching => right_branching_tree(leaf_count).map(Some),
            StructureSource::Induced => Ok(None),
        }
    }
}

/// `Ψ ∈ R^{V×N²}`, `Φ ∈ R^{2N×N}`, `Θ ∈ R^{N×2N}`.
#[derive(Clone, Debug, PartialEq)]
pub struct StraeParams {
    pub n: usize,
    pub embedding: Tensor,
    pub compose: Tensor,
    pub decompose: Tensor,
}

/// Shares `Ψ` and `Φ` with StrAE; decoding uses two sibling-aware
/// decomposition matrices (`2N × N` each) and a learned `N × N` global root.
#[derive(Clone, Debug, PartialEq)]
pub struct IornnParams {
    pub n: usize,
    pub embedding: Tensor,
    pub compose: Tensor,
    pub decompose_left: Tensor,
    pub decompose_right: Tensor,
    pub global_root: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Strae(StraeParams),
    Iornn(IornnParams),
}

impl StraeParams {
    pub fn new(n: usize, embedding: Tensor, compose: Tensor, decompose: Tensor) -> Result<Self> {
        check_shape("embedding", &embedding, None, n * n)?;
        check_shape("compose", &compose, Some(2 * n), n)?;
        check_shape("decompose", &decompose, Some(n), 2 * n)?;
        Ok(StraeParams {
            n,
            embedding,
            compose,
            decompose,
        })
    }
}

impl IornnParams {
    pub fn new(
        n: usize,
        embedding: Tensor,
        compose: Tensor,
        decompose_left: Tensor,
        decompose_right: Tensor,
        global_root: Tensor,
    ) -> Result<Self> {
        check_shape("embedding", &embedding, None, n * n)?;
        check_shape("compose", &compose, Some(2 * n), n)?;
        check_shape("decompose_left", &decompose_left, Some(2 * n), n)?;
        check_shape("decompose_right", &decompose_right, Some(2 * n), n)?;
        check_shape("global_root", &global_root, Some(n), n)?;
        Ok(IornnParams {
            n,
            embedding,
            compose,
            decompose_left,
            decompose_right,
            global_root,
        })
    }
}

fn check_shape(name: &str, t: &Tensor, rows: Option<usize>, cols: usize) -> Result<()> {
    if rows.is_some_and(|r| r != t.rows()) || t.cols() != cols || t.is_empty() {
        return Err(Error::Shape {
            op: "params",
            detail: format!("{name} has shape {:?}, expected {}x{cols}", t.shape(), rows.map_or("V".into(), |r| r.to_string())),
        });
    }
    Ok(())
}

impl ModelParams {
    pub fn n(&self) -> usize {
        match self {
            ModelParams::Strae(p) => p.n,
            ModelParams::Iornn(p) => p.n,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding().rows()
    }

    pub fn embedding(&self) -> &Tensor {
        match self {
            ModelParams::Strae(p) => &p.embedding,
            ModelParams::Iornn(p) => &p.embedding,
        }
    }

    /// Named tensors in a fixed order (the order used by checkpoints and Adam).
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            ModelParams::Strae(p) => vec![
                ("embedding", &p.embedding),
                ("compose", &p.compose),
                ("decompose", &p.decompose),
            ],
            ModelParams::Iornn(p) => vec![
                ("embedding", &p.embedding),
                ("compose", &p.compose),
                ("decompose_left", &p.decompose_left),
                ("decompose_right", &p.decompose_right),
                ("global_root", &p.global_root),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            ModelParams::Strae(p) => vec![
                ("embedding", &mut p.embedding),
                ("compose", &mut p.compose),
                ("decompose", &mut p.decompose),
            ],
            ModelParams::Iornn(p) => vec![
                ("embedding", &mut p.embedding),
                ("compose", &mut p.compose),
                ("decompose_left", &mut p.decompose_left),
                ("decompose_right", &mut p.decompose_right),
                ("global_root", &mut p.global_root),
            ],
        }
    }

    /// Rebuilds parameters from named tensors, as read from a checkpoint.
    pub fn from_named(n: usize, iornn: bool, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor> {
            let pos = named
                .iter()
                .position(|(k, _)| k == name)
                .ok_or_else(|| Error::invalid(format!("missing parameter tensor {name}")))?;
            Ok(named.swap_remove(pos).1)
        };
        if iornn {
            IornnParams::new(
                n,
                take("embedding")?,
                take("compose")?,
                take("decompose_left")?,
                take("decompose_right")?,
                take("global_root")?,
            )
            .map(ModelParams::Iornn)
        } else {
            StraeParams::new(n, take("embedding")?, take("compose")?, take("decompose")?).map(ModelParams::Strae)
        }
    }

    /// Records the parameters on a tape; `trainable` decides whether
    /// gradients are tracked for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::new(self, tape, trainable)
    }

    /// Wraps variables already on a tape, given in [`ModelParams::tensors`]
    /// order, after checking their shapes against these parameters.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<Bound> {
        let tensors = self.tensors();
        if vars.len() != tensors.len() {
            return Err(Error::invalid(format!("{} variables for {} tensors", vars.len(), tensors.len())));
        }
        for ((name, t), &v) in tensors.iter().zip(vars) {
            if tape.shape(v) != t.shape() {
                return Err(Error::Shape {
                    op: "bind_vars",
                    detail: format!("{name}: {:?} vs {:?}", tape.shape(v), t.shape()),
                });
            }
        }
        Ok(Bound::from_vars(self.n(), self.vocab_size(), vars))
    }

    /// Resolves the tree and runs the upward pass, returning the tree and
    /// the root embedding.
    pub fn encode_sentence(&self, ids: &[usize], source: &StructureSource) -> Result<(Tree, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (tree, ups) = match source.fixed_tree(ids.len())? {
            Some(tree) => {
                let ups = encode(&mut tape, &bound, &tree, ids)?;
                (tree, ups)
            }
            None => induce_structure(&mut tape, &bound, ids)?,
        };
        tape.check_finite()?;
        let root = tape.value(ups[tree.root()]).clone();
        Ok((tree, root))
    }

    /// Flattened upward and downward embeddings of every node, one row per
    /// node in node id order.
    pub fn node_embeddings(&self, ids: &[usize], source: &StructureSource) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = autoencode(&mut tape, &bound, ids, source, false)?;
        tape.check_finite()?;
        let rows = |vars: &[Var]| {
            let flat: Vec<Vec<f64>> = vars.iter().map(|&v| tape.value(v).data().to_vec()).collect();
            Tensor::from_rows(&flat)
        };
        Ok((rows(&out.ups)?, rows(&out.downs)?))
    }

    /// The most probable token at every position after a full
    /// encode/decode pass.
    pub fn reconstruct_argmax(&self, ids: &[usize], source: &StructureSource) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = autoencode(&mut tape, &bound, ids, source, false)?;
        let leaves: Vec<Var> = out.tree.leaves().iter().map(|&l| out.downs[l]).collect();
        let probs = reconstruct_rows(&mut tape, &bound, &leaves)?;
        tape.check_finite()?;
        let probs = tape.value(probs);
        Ok((0..probs.rows())
            .map(|r| {
                let row = probs.row_slice(r);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }

    /// Greedy induced tree for a sentence.
    pub fn induce_tree(&self, ids: &[usize]) -> Result<Tree> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        Ok(induce_structure(&mut tape, &bound, ids)?.0)
    }
}
