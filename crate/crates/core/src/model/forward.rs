use super::{induce_structure, ModelParams, StructureSource};
use crate::corpus::Tree;
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Decoder {
    Shared { decompose: Var },
    Iornn { left: Var, right: Var, root: Var },
}

/// Model parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    n: usize,
    vocab: usize,
    embedding: Var,
    compose: Var,
    decoder: Decoder,
}

impl Bound {
    pub(super) fn new(params: &ModelParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut bind = |t: &crate::diffcore::Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        match params {
            ModelParams::Strae(p) => Bound {
                n: p.n,
                vocab: p.embedding.rows(),
                embedding: bind(&p.embedding),
                compose: bind(&p.compose),
                decoder: Decoder::Shared {
                    decompose: bind(&p.decompose),
                },
            },
            ModelParams::Iornn(p) => Bound {
                n: p.n,
                vocab: p.embedding.rows(),
                embedding: bind(&p.embedding),
                compose: bind(&p.compose),
                decoder: Decoder::Iornn {
                    left: bind(&p.decompose_left),
                    right: bind(&p.decompose_right),
                    root: bind(&p.global_root),
                },
            },
        }
    }

    pub(super) fn from_vars(n: usize, vocab: usize, vars: &[Var]) -> Self {
        let decoder = match *vars {
            [_, _, decompose] => Decoder::Shared { decompose },
            [_, _, left, right, root] => Decoder::Iornn { left, right, root },
            _ => unreachable!("variable count checked by the caller"),
        };
        Bound {
            n,
            vocab,
            embedding: vars[0],
            compose: vars[1],
            decoder,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_iornn(&self) -> bool {
        matches!(self.decoder, Decoder::Iornn { .. })
    }

    /// Parameter variables in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        match self.decoder {
            Decoder::Shared { decompose } => vec![self.embedding, self.compose, decompose],
            Decoder::Iornn { left, right, root } => vec![self.embedding, self.compose, left, right, root],
        }
    }

    fn check_square(&self, tape: &Tape, v: Var, op: &'static str) -> Result<()> {
        let shape = tape.shape(v);
        if shape != [self.n, self.n] {
            return Err(Error::Shape {
                op,
                detail: format!("expected {n}x{n}, got {shape:?}", n = self.n),
            });
        }
        Ok(())
    }
}

/// `square(Ψ[id])`
pub fn embed_leaf(tape: &mut Tape, b: &Bound, id: usize) -> Result<Var> {
    if id >= b.vocab {
        return Err(Error::invalid(format!("token id {id} out of range for V={}", b.vocab)));
    }
    let row = tape.gather_row(b.embedding, id)?;
    tape.square(row)
}

/// `tanh(hcat(left, right) · Φ)`
pub fn compose(tape: &mut Tape, b: &Bound, left: Var, right: Var) -> Result<Var> {
    b.check_square(tape, left, "compose")?;
    b.check_square(tape, right, "compose")?;
    let cat = tape.hcat(left, right)?;
    let lin = tape.matmul(cat, b.compose)?;
    Ok(tape.tanh(lin))
}

/// `hsplit(tanh(parent · Θ))`
pub fn decompose(tape: &mut Tape, b: &Bound, parent: Var) -> Result<(Var, Var)> {
    let Decoder::Shared { decompose } = b.decoder else {
        return Err(Error::invalid("IORNN parameters have no shared decomposition"));
    };
    b.check_square(tape, parent, "decompose")?;
    let lin = tape.matmul(parent, decompose)?;
    let act = tape.tanh(lin);
    tape.hsplit(act)
}

/// `softmax(flatten(down) · Ψᵀ)`, a `1 × V` distribution over the vocabulary.
pub fn index_leaf(tape: &mut Tape, b: &Bound, down: Var) -> Result<Var> {
    b.check_square(tape, down, "index_leaf")?;
    let flat = tape.flatten(down)?;
    let logits = tape.matmul_bt(flat, b.embedding)?;
    Ok(tape.softmax(logits))
}

/// Upward pass. Returns `ē` for every node, indexed by node id.
pub fn encode(tape: &mut Tape, b: &Bound, tree: &Tree, ids: &[usize]) -> Result<Vec<Var>> {
    if ids.len() != tree.leaf_count() {
        return Err(Error::invalid(format!(
            "{} token ids for a tree with {} leaves",
            ids.len(),
            tree.leaf_count()
        )));
    }
    let mut ups: Vec<Option<Var>> = vec![None; tree.node_count()];
    for &id in tree.bottom_up() {
        let node = tree.node(id);
        let e = match node.children {
            None => embed_leaf(tape, b, ids[node.span.start])?,
            Some((l, r)) => {
                let (l, r) = (ups[l].expect("child before parent"), ups[r].expect("child before parent"));
                compose(tape, b, l, r)?
            }
        };
        ups[id] = Some(e);
    }
    Ok(ups.into_iter().map(|e| e.expect("every node visited")).collect())
}

/// StrAE downward pass from the shared root. Returns `ḛ` for every node;
/// the root entry is `root_up` itself.
pub fn decode(tape: &mut Tape, b: &Bound, tree: &Tree, root_up: Var) -> Result<Vec<Var>> {
    b.check_square(tape, root_up, "decode")?;
    let mut downs: Vec<Option<Var>> = vec![None; tree.node_count()];
    downs[tree.root()] = Some(root_up);
    for id in tree.top_down() {
        if let Some((l, r)) = tree.children(id) {
            let parent = downs[id].expect("parent before child");
            let (dl, dr) = decompose(tape, b, parent)?;
            downs[l] = Some(dl);
            downs[r] = Some(dr);
        }
    }
    Ok(downs.into_iter().map(|e| e.expect("every node visited")).collect())
}

/// IORNN downward pass: the root gets the global root `g`, and each child
/// reads its parent together with its sibling's upward embedding:
/// `ḛ_l = tanh(hcat(ē_r, ḛ_p) · Θ₁)`, `ḛ_r = tanh(hcat(ē_l, ḛ_p) · Θ₂)`.
pub fn iornn_decode(tape: &mut Tape, b: &Bound, tree: &Tree, ups: &[Var]) -> Result<Vec<Var>> {
    let Decoder::Iornn { left, right, root } = b.decoder else {
        return Err(Error::invalid("iornn_decode needs IORNN parameters"));
    };
    if ups.len() != tree.node_count() {
        return Err(Error::invalid(format!(
            "{} upward embeddings for {} nodes",
            ups.len(),
            tree.node_count()
        )));
    }
    let mut downs: Vec<Option<Var>> = vec![None; tree.node_count()];
    downs[tree.root()] = Some(root);
    for id in tree.top_down() {
        if let Some((l, r)) = tree.children(id) {
            let parent = downs[id].expect("parent before child");
            let cat_l = tape.hcat(ups[r], parent)?;
            let lin_l = tape.matmul(cat_l, left)?;
            downs[l] = Some(tape.tanh(lin_l));
            let cat_r = tape.hcat(ups[l], parent)?;
            let lin_r = tape.matmul(cat_r, right)?;
            downs[r] = Some(tape.tanh(lin_r));
        }
    }
    Ok(downs.into_iter().map(|e| e.expect("every node visited")).collect())
}

/// Row-stacked vocabulary distributions for many leaves at once: row `k`
/// equals [`index_leaf`] of `downs[k]`.
pub fn reconstruct_rows(tape: &mut Tape, b: &Bound, downs: &[Var]) -> Result<Var> {
    for &d in downs {
        b.check_square(tape, d, "reconstruct_rows")?;
    }
    let flat = downs.iter().map(|&d| tape.flatten(d)).collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&flat)?;
    let logits = tape.matmul_bt(stacked, b.embedding)?;
    Ok(tape.softmax(logits))
}

/// Vocabulary distributions `ŵ` for every leaf, in token order.
pub fn reconstruct(tape: &mut Tape, b: &Bound, tree: &Tree, downs: &[Var]) -> Result<Vec<Var>> {
    tree.leaves()
        .iter()
        .map(|&leaf| index_leaf(tape, b, downs[leaf]))
        .collect()
}

/// All tensors produced by one autoencoding pass, indexed by node id
/// (`recons` by token position).
#[derive(Clone, Debug)]
pub struct Autoencoded {
    pub tree: Tree,
    pub ups: Vec<Var>,
    pub downs: Vec<Var>,
    pub recons: Vec<Var>,
}

/// Resolves the structure, encodes, decodes (StrAE or IORNN according to
/// the bound parameters) and optionally reconstructs the leaves.
pub fn autoencode(
    tape: &mut Tape,
    b: &Bound,
    ids: &[usize],
    source: &StructureSource,
    with_recon: bool,
) -> Result<Autoencoded> {
    if ids.is_empty() {
        return Err(Error::Empty("cannot autoencode an empty sentence".into()));
    }
    let (tree, ups) = match source.fixed_tree(ids.len())? {
        Some(tree) => {
            let ups = encode(tape, b, &tree, ids)?;
            (tree, ups)
        }
        None => induce_structure(tape, b, ids)?,
    };
    let downs = if b.is_iornn() {
        iornn_decode(tape, b, &tree, &ups)?
    } else {
        decode(tape, b, &tree, ups[tree.root()])?
    };
    let recons = if with_recon {
        reconstruct(tape, b, &tree, &downs)?
    } else {
        Vec::new()
    };
    Ok(Autoencoded {
        tree,
        ups,
        downs,
        recons,
    })
}
