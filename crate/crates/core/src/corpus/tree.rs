use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Half-open range of token positions covered by a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub span: Span,
    pub children: Option<(NodeId, NodeId)>,
    pub parent: Option<NodeId>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// A validated binary tree over `leaf_count` tokens.
///
/// Trees built through [`TreeBuilder`] use a canonical numbering: leaf `i`
/// has node id `i` and internal nodes follow in creation order, so ids
/// ascend bottom-up. [`Tree::from_nodes`] accepts any dense numbering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tree {
    nodes: Vec<Node>,
    root: NodeId,
    leaf_count: usize,
    leaves: Vec<NodeId>,
    postorder: Vec<NodeId>,
}

impl Tree {
    /// Validates an arbitrary node table against the tree invariants.
    pub fn from_nodes(nodes: Vec<Node>, root: NodeId) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidTree(msg));
        let total = nodes.len();
        if total == 0 {
            return bad("tree has no nodes".into());
        }
        if root >= total {
            return bad(format!("root {root} out of range"));
        }
        if nodes[root].parent.is_some() {
            return bad("root has a parent".into());
        }
        let leaf_count = nodes.iter().filter(|n| n.is_leaf()).count();
        if total != 2 * leaf_count - 1 {
            return bad(format!("{total} nodes for {leaf_count} leaves, expected {}", 2 * leaf_count - 1));
        }

        // Iterative post-order walk from the root; every node must be reached once.
        let mut seen = vec![false; total];
        let mut postorder = Vec::with_capacity(total);
        let mut leaves = Vec::with_capacity(leaf_count);
        let mut stack = vec![(root, false)];
        while let Some((id, expanded)) = stack.pop() {
            let node = &nodes[id];
            match (node.children, expanded) {
                (Some((l, r)), false) => {
                    if seen[id] {
                        return bad(format!("node {id} reached twice"));
                    }
                    seen[id] = true;
                    for child in [l, r] {
                        if child >= total {
                            return bad(format!("child {child} of node {id} out of range"));
                        }
                        if nodes[child].parent != Some(id) {
                            return bad(format!("node {child} does not point back to parent {id}"));
                        }
                    }
                    stack.push((id, true));
                    stack.push((r, false));
                    stack.push((l, false));
                }
                (Some(_), true) => postorder.push(id),
                (None, _) => {
                    if seen[id] {
                        return bad(format!("node {id} reached twice"));
                    }
                    seen[id] = true;
                    let position = leaves.len();
                    if node.span != Span::new(position, position + 1) {
                        return bad(format!("leaf {id} has span {:?}, expected [{position}, {})", node.span, position + 1));
                    }
                    leaves.push(id);
                    postorder.push(id);
                }
            }
        }
        if postorder.len() != total {
            return bad("tree contains unreachable nodes".into());
        }
        for &id in &postorder {
            if let Some((l, r)) = nodes[id].children {
                let (ls, rs) = (nodes[l].span, nodes[r].span);
                if ls.end != rs.start || nodes[id].span != Span::new(ls.start, rs.end) {
                    return bad(format!("span of node {id} is not the adjacent union of its children"));
                }
            }
        }
        Ok(Tree {
            nodes,
            root,
            leaf_count,
            leaves,
            postorder,
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        self.nodes[id].children
    }

    /// Leaf node ids in token order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Children-before-parents ordering of all node ids.
    pub fn bottom_up(&self) -> &[NodeId] {
        &self.postorder
    }

    /// Parents-before-children ordering of all node ids.
    pub fn top_down(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.postorder.iter().rev().copied()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for id in self.top_down() {
            if let Some((l, r)) = self.nodes[id].children {
                depth[l] = depth[id] + 1;
                depth[r] = depth[id] + 1;
                max = max.max(depth[id] + 1);
            }
        }
        max
    }

    /// Spans of all internal nodes, bottom-up.
    pub fn internal_spans(&self) -> Vec<Span> {
        self.postorder
            .iter()
            .filter(|&&id| !self.nodes[id].is_leaf())
            .map(|&id| self.nodes[id].span)
            .collect()
    }

    /// Two trees are structurally identical when they bracket the same spans.
    pub fn same_structure(&self, other: &Tree) -> bool {
        self.leaf_count == other.leaf_count && {
            let mut a = self.internal_spans();
            let mut b = other.internal_spans();
            a.sort_by_key(|s| (s.start, s.end));
            b.sort_by_key(|s| (s.start, s.end));
            a == b
        }
    }

    /// Bracketed rendering with a constant `N` label on internal nodes, e.g.
    /// `(N a (N b c))`. A one-token tree renders as `(a)`.
    pub fn to_bracketed<S: AsRef<str>>(&self, tokens: &[S]) -> Result<String> {
        if tokens.len() != self.leaf_count {
            return Err(Error::invalid(format!(
                "{} tokens for a tree with {} leaves",
                tokens.len(),
                self.leaf_count
            )));
        }
        if self.leaf_count == 1 {
            return Ok(format!("({})", tokens[0].as_ref()));
        }
        let mut out = String::new();
        self.write_node(self.root, tokens, &mut out);
        Ok(out)
    }

    fn write_node<S: AsRef<str>>(&self, id: NodeId, tokens: &[S], out: &mut String) {
        match self.nodes[id].children {
            None => out.push_str(tokens[self.nodes[id].span.start].as_ref()),
            Some((l, r)) => {
                out.push_str("(N ");
                self.write_node(l, tokens, out);
                out.push(' ');
                self.write_node(r, tokens, out);
                out.push(')');
            }
        }
    }

    /// Compact shape-only rendering using 1-based leaf positions, e.g. `(1 (2 3))`.
    pub fn shape_string(&self) -> String {
        let mut out = String::new();
        self.write_shape(self.root, &mut out);
        out
    }

    fn write_shape(&self, id: NodeId, out: &mut String) {
        match self.nodes[id].children {
            None => {
                let _ = write!(out, "{}", self.nodes[id].span.start + 1);
            }
            Some((l, r)) => {
                out.push('(');
                self.write_shape(l, out);
                out.push(' ');
                self.write_shape(r, out);
                out.push(')');
            }
        }
    }
}

/// Incremental construction with canonical node ids.
#[derive(Debug)]
pub struct TreeBuilder {
    nodes: Vec<Node>,
    leaf_count: usize,
}

impl TreeBuilder {
    pub fn new(leaf_count: usize) -> Result<Self> {
        if leaf_count == 0 {
            return Err(Error::invalid("a tree needs at least one leaf"));
        }
        let nodes = (0..leaf_count)
            .map(|i| Node {
                span: Span::new(i, i + 1),
                children: None,
                parent: None,
            })
            .collect();
        Ok(TreeBuilder { nodes, leaf_count })
    }

    pub fn span(&self, id: NodeId) -> Span {
        self.nodes[id].span
    }

    /// Joins two adjacent roots under a new parent and returns its id.
    pub fn merge(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let n = self.nodes.len();
        if left >= n || right >= n {
            return Err(Error::InvalidTree(format!("merge of unknown nodes {left}, {right}")));
        }
        if self.nodes[left].parent.is_some() || self.nodes[right].parent.is_some() {
            return Err(Error::InvalidTree("merge of a node that already has a parent".into()));
        }
        let (ls, rs) = (self.nodes[left].span, self.nodes[right].span);
        if ls.end != rs.start {
            return Err(Error::InvalidTree(format!("merge of non-adjacent spans {ls:?} and {rs:?}")));
        }
        self.nodes[left].parent = Some(n);
        self.nodes[right].parent = Some(n);
        self.nodes.push(Node {
            span: Span::new(ls.start, rs.end),
            children: Some((left, right)),
            parent: None,
        });
        Ok(n)
    }

    pub fn finish(self) -> Result<Tree> {
        let root = self.nodes.len() - 1;
        if self.nodes.len() != 2 * self.leaf_count - 1 {
            return Err(Error::InvalidTree(format!(
                "{} merges performed, expected {}",
                self.nodes.len() - self.leaf_count,
                self.leaf_count - 1
            )));
        }
        Tree::from_nodes(self.nodes, root)
    }
}

/// Recursive midpoint split; the left child takes the first ⌈T/2⌉ leaves.
pub fn balanced_tree(leaf_count: usize) -> Result<Tree> {
    fn build(b: &mut TreeBuilder, start: usize, end: usize) -> Result<NodeId> {
        if end - start == 1 {
            return Ok(start);
        }
        let mid = start + (end - start).div_ceil(2);
        let l = build(b, start, mid)?;
        let r = build(b, mid, end)?;
        b.merge(l, r)
    }
    let mut b = TreeBuilder::new(leaf_count)?;
    build(&mut b, 0, leaf_count)?;
    b.finish()
}

/// Every internal node joins one leaf with the subtree over all later leaves.
pub fn right_branching_tree(leaf_count: usize) -> Result<Tree> {
    let mut b = TreeBuilder::new(leaf_count)?;
    let mut acc = leaf_count - 1;
    for i in (0..leaf_count - 1).rev() {
        acc = b.merge(i, acc)?;
    }
    b.finish()
}
