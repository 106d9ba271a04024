use super::forward::{compose, embed_leaf, Bound};
use crate::corpus::{NodeId, Tree, TreeBuilder};
use crate::diffcore::{cosine, Tape, Var};
use crate::error::{Error, Result};

/// Greedy constrained agglomerative clustering over adjacent nodes.
///
/// The frontier starts as the leaf embeddings. Each step re-scans every
/// adjacent pair, merges the pair whose flattened upward embeddings have the
/// highest cosine similarity (leftmost pair on ties) and replaces it with its
/// composition. The merge trace is the returned tree; the returned upward
/// embeddings are indexed by its node ids. Selection reads plain values, so
/// gradients only flow through the chosen compositions.
pub fn induce_structure(tape: &mut Tape, b: &Bound, ids: &[usize]) -> Result<(Tree, Vec<Var>)> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot induce a tree over zero tokens"));
    }
    let mut builder = TreeBuilder::new(ids.len())?;
    let mut ups: Vec<Var> = Vec::with_capacity(2 * ids.len() - 1);
    for &id in ids {
        ups.push(embed_leaf(tape, b, id)?);
    }
    let mut frontier: Vec<NodeId> = (0..ids.len()).collect();

    while frontier.len() > 1 {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for i in 0..frontier.len() - 1 {
            let a = tape.value(ups[frontier[i]]).data();
            let c = tape.value(ups[frontier[i + 1]]).data();
            let sim = cosine(a, c);
            if sim > best_sim {
                best_sim = sim;
                best = i;
            }
        }
        let (left, right) = (frontier[best], frontier[best + 1]);
        let node = builder.merge(left, right)?;
        debug_assert_eq!(node, ups.len());
        ups.push(compose(tape, b, ups[left], ups[right])?);
        frontier.splice(best..best + 2, [node]);
    }
    Ok((builder.finish()?, ups))
}
