//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strae::diffcore::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn tanh(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.tanh()).collect()).collect()
}

pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

pub fn flatten(a: &Mat) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

pub fn square(v: &[f64], n: usize) -> Mat {
    (0..n).map(|r| v[r * n..(r + 1) * n].to_vec()).collect()
}

pub fn leaf(psi: &Tensor, id: usize, n: usize) -> Mat {
    square(psi.row_slice(id), n)
}

pub fn compose(l: &Mat, r: &Mat, phi: &Tensor) -> Mat {
    tanh(&matmul(&hcat(l, r), &to_mat(phi)))
}

pub fn decompose(p: &Mat, theta: &Tensor) -> (Mat, Mat) {
    let full = tanh(&matmul(p, &to_mat(theta)));
    let n = p.len();
    let left = full.iter().map(|r| r[..n].to_vec()).collect();
    let right = full.iter().map(|r| r[n..].to_vec()).collect();
    (left, right)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn index_leaf(down: &Mat, psi: &Tensor) -> Vec<f64> {
    let f = flatten(down);
    let scores: Vec<f64> = (0..psi.rows())
        .map(|w| psi.row_slice(w).iter().zip(&f).map(|(a, b)| a * b).sum())
        .collect();
    softmax(&scores)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-8)
}

/// A binary tree written as nested spans, independent of the library's
/// node-id scheme.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Leaf(usize),
    Node(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn render(&self) -> String {
        match self {
            Shape::Leaf(i) => (i + 1).to_string(),
            Shape::Node(l, r) => format!("({} {})", l.render(), r.render()),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        match self {
            Shape::Leaf(i) => vec![*i],
            Shape::Node(l, r) => {
                let mut v = l.leaves();
                v.extend(r.leaves());
                v
            }
        }
    }
}

pub fn right_branching(range: std::ops::Range<usize>) -> Shape {
    if range.len() == 1 {
        Shape::Leaf(range.start)
    } else {
        Shape::Node(
            Box::new(Shape::Leaf(range.start)),
            Box::new(right_branching(range.start + 1..range.end)),
        )
    }
}

pub fn encode(shape: &Shape, ids: &[usize], psi: &Tensor, phi: &Tensor, n: usize) -> Mat {
    match shape {
        Shape::Leaf(i) => leaf(psi, ids[*i], n),
        Shape::Node(l, r) => compose(&encode(l, ids, psi, phi, n), &encode(r, ids, psi, phi, n), phi),
    }
}

/// StrAE downward embeddings of the leaves, in token order.
pub fn decode_leaves(shape: &Shape, down: Mat, theta: &Tensor, out: &mut Vec<Mat>) {
    match shape {
        Shape::Leaf(_) => out.push(down),
        Shape::Node(l, r) => {
            let (dl, dr) = decompose(&down, theta);
            decode_leaves(l, dl, theta, out);
            decode_leaves(r, dr, theta, out);
        }
    }
}

pub struct IornnOracle<'a> {
    pub ids: &'a [usize],
    pub psi: &'a Tensor,
    pub phi: &'a Tensor,
    pub left: &'a Tensor,
    pub right: &'a Tensor,
    pub n: usize,
}

impl IornnOracle<'_> {
    pub fn leaves(&self, shape: &Shape, down: Mat, out: &mut Vec<Mat>) {
        match shape {
            Shape::Leaf(_) => out.push(down),
            Shape::Node(l, r) => {
                let el = encode(l, self.ids, self.psi, self.phi, self.n);
                let er = encode(r, self.ids, self.psi, self.phi, self.n);
                let dl = tanh(&matmul(&hcat(&er, &down), &to_mat(self.left)));
                let dr = tanh(&matmul(&hcat(&el, &down), &to_mat(self.right)));
                self.leaves(l, dl, out);
                self.leaves(r, dr, out);
            }
        }
    }
}

/// Greedy adjacent merging, re-scanning every pair at every step with the
/// leftmost pair winning ties.
pub fn brute_force_induce(ids: &[usize], psi: &Tensor, phi: &Tensor, n: usize) -> Shape {
    let mut frontier: Vec<(Shape, Mat)> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (Shape::Leaf(i), leaf(psi, id, n)))
        .collect();
    while frontier.len() > 1 {
        let sims: Vec<f64> = frontier
            .windows(2)
            .map(|w| cosine(&flatten(&w[0].1), &flatten(&w[1].1)))
            .collect();
        let best_sim = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best = sims.iter().position(|&s| s == best_sim).unwrap();
        let (rs, re) = frontier.remove(best + 1);
        let (ls, le) = frontier.remove(best);
        let e = compose(&le, &re, phi);
        frontier.insert(best, (Shape::Node(Box::new(ls), Box::new(rs)), e));
    }
    frontier.pop().unwrap().0
}

/// Two-view contrastive loss evaluated with explicit loops over rows and
/// columns of the cosine matrix.
pub fn contrastive(ups: &Mat, downs: &Mat, tau: f64) -> f64 {
    let m = ups.len();
    let a: Mat = ups
        .iter()
        .map(|u| downs.iter().map(|d| cosine(u, d) / tau).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..m {
        total += log_softmax(&a[i])[i];
    }
    for j in 0..m {
        let col: Vec<f64> = (0..m).map(|i| a[i][j]).collect();
        total += log_softmax(&col)[j];
    }
    -total / (2.0 * m as f64)
}

pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}
