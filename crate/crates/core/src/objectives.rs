//! Training losses over autoencoded batches.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::{cosine_similarity_matrix, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Autoencoded;

/// Floor applied inside the logarithm of the reconstruction loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Logit used to exclude a node from its own intra-view negatives.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    CrossEntropy,
    Contrastive,
    Degenerate,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::CrossEntropy => "cross_entropy",
            Objective::Contrastive => "contrastive",
            Objective::Degenerate => "degenerate",
        }
    }

    pub fn needs_reconstruction(&self) -> bool {
        matches!(self, Objective::CrossEntropy)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(Objective::CrossEntropy),
            "contrastive" => Ok(Objective::Contrastive),
            "degenerate" => Ok(Objective::Degenerate),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

/// Row-aligned upward and downward node embeddings of a whole batch:
/// row `i` of `ups` and row `i` of `downs` belong to the same tree node.
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    pub ups: Var,
    pub downs: Var,
    pub m: usize,
}

impl BatchNodes {
    /// Flattens every node of every sentence, sentence by sentence in node
    /// id order, giving `M = Σ (2T_j − 1)` rows.
    pub fn gather(tape: &mut Tape, sentences: &[Autoencoded]) -> Result<Self> {
        let mut ups = Vec::new();
        let mut downs = Vec::new();
        for s in sentences {
            for (&u, &d) in s.ups.iter().zip(&s.downs) {
                ups.push(tape.flatten(u)?);
                downs.push(tape.flatten(d)?);
            }
        }
        if ups.is_empty() {
            return Err(Error::Empty("batch has no nodes".into()));
        }
        let m = ups.len();
        Ok(BatchNodes {
            ups: tape.stack_rows(&ups)?,
            downs: tape.stack_rows(&downs)?,
            m,
        })
    }

    pub fn from_vars(tape: &Tape, ups: Var, downs: Var) -> Result<Self> {
        if tape.shape(ups) != tape.shape(downs) {
            return Err(Error::Shape {
                op: "batch_nodes",
                detail: format!("{:?} vs {:?}", tape.shape(ups), tape.shape(downs)),
            });
        }
        Ok(BatchNodes {
            ups,
            downs,
            m: tape.shape(ups)[0],
        })
    }
}

/// `−(1/T) Σ_i ln ŵ_i[target_i]` for one sentence.
pub fn sentence_cross_entropy(tape: &mut Tape, targets: &[usize], recons: &[Var]) -> Result<Var> {
    if targets.len() != recons.len() {
        return Err(Error::invalid(format!(
            "{} targets for {} reconstructions",
            targets.len(),
            recons.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Empty("no leaves to reconstruct".into()));
    }
    let stacked = tape.stack_rows(recons)?;
    let logs = tape.log(stacked, LOG_FLOOR);
    let picked = tape.pick(logs, targets)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean over sentences of the per-sentence reconstruction loss.
pub fn cross_entropy_loss(tape: &mut Tape, targets: &[&[usize]], recons: &[&[Var]]) -> Result<Var> {
    if targets.len() != recons.len() || targets.is_empty() {
        return Err(Error::invalid(format!(
            "{} target sequences for {} reconstruction sequences",
            targets.len(),
            recons.len()
        )));
    }
    let per_sentence = targets
        .iter()
        .zip(recons)
        .map(|(t, r)| sentence_cross_entropy(tape, t, r))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&per_sentence)?;
    Ok(tape.mean(stacked))
}

/// The batch reconstruction loss computed from row-stacked distributions
/// (see [`crate::model::reconstruct_rows`]): rows are the leaves of all
/// sentences back to back, `lengths` gives the leaf count of each sentence.
/// Equal to [`cross_entropy_loss`] over the same leaves.
pub fn cross_entropy_rows(tape: &mut Tape, probs: Var, targets: &[usize], lengths: &[usize]) -> Result<Var> {
    let rows = tape.shape(probs)[0];
    if targets.len() != rows || lengths.iter().sum::<usize>() != rows {
        return Err(Error::invalid(format!(
            "{} targets and {} leaves for {rows} distribution rows",
            targets.len(),
            lengths.iter().sum::<usize>()
        )));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Empty("every sentence needs at least one leaf".into()));
    }
    let logs = tape.log(probs, LOG_FLOOR);
    let picked = tape.pick(logs, targets)?;
    let scale = -1.0 / lengths.len() as f64;
    let weights: Vec<f64> = lengths
        .iter()
        .flat_map(|&t| std::iter::repeat_n(scale / t as f64, t))
        .collect();
    let weights = tape.constant(Tensor::row(weights));
    tape.matmul(weights, picked)
}

/// Structural contrastive loss over the batch similarity matrix `A`
/// (cosine between upward rows and downward rows):
/// `−(1/2M) [Σ_i ln σ_τ(A_i•)_i + Σ_j ln σ_τ(A_•j)_j]`.
///
/// With `intra_view` each row softmax also competes against the other
/// upward embeddings, and each column softmax against the other downward
/// embeddings.
pub fn contrastive_loss(tape: &mut Tape, batch: &BatchNodes, temperature: f64, intra_view: bool) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let inv_tau = 1.0 / temperature;
    let sim = tape.cosine_matrix(batch.ups, batch.downs)?;
    let rows = tape.scale(sim, inv_tau);
    if !intra_view {
        return tape.symmetric_diag_nll(rows);
    }
    let cols = tape.transpose(rows);
    let uu = tape.cosine_matrix(batch.ups, batch.ups)?;
    let uu = tape.scale(uu, inv_tau);
    let uu = tape.fill_diag(uu, MASKED_LOGIT)?;
    let dd = tape.cosine_matrix(batch.downs, batch.downs)?;
    let dd = tape.scale(dd, inv_tau);
    let dd = tape.fill_diag(dd, MASKED_LOGIT)?;
    let (rows, cols) = (tape.hcat(rows, uu)?, tape.hcat(cols, dd)?);

    let m = batch.m;
    let mut positive_sum = |logits: Var| -> Result<Var> {
        let ls = tape.log_softmax(logits);
        let square = tape.cols(ls, 0, m)?;
        let d = tape.diag(square)?;
        Ok(tape.sum(d))
    };
    let row_term = positive_sum(rows)?;
    let col_term = positive_sum(cols)?;
    let total = tape.add(row_term, col_term)?;
    Ok(tape.scale(total, -1.0 / (2.0 * m as f64)))
}

/// `−(1/M) Σ_i cos(ups_i, downs_i)`. Minimizing it collapses all embeddings
/// toward one direction.
pub fn degenerate_similarity_loss(tape: &mut Tape, batch: &BatchNodes) -> Result<Var> {
    let c = tape.row_cosine(batch.ups, batch.downs)?;
    let mean = tape.mean(c);
    Ok(tape.scale(mean, -1.0))
}

/// Mean diagonal minus mean off-diagonal entry of the cosine matrix between
/// corresponding upward and downward embeddings.
pub fn alignment_gap(ups: &Tensor, downs: &Tensor) -> Result<f64> {
    let a = cosine_similarity_matrix(ups, downs)?;
    let m = a.rows();
    if m < 2 {
        return Err(Error::invalid("alignment gap needs at least two nodes"));
    }
    let diag: f64 = (0..m).map(|i| a.get(i, i)).sum();
    let total: f64 = a.data().iter().sum();
    Ok(diag / m as f64 - (total - diag) / (m * (m - 1)) as f64)
}

/// Mean cosine over all distinct pairs of rows.
pub fn mean_pairwise_cosine(rows: &Tensor) -> Result<f64> {
    let a = cosine_similarity_matrix(rows, rows)?;
    let m = a.rows();
    if m < 2 {
        return Err(Error::invalid("pairwise cosine needs at least two rows"));
    }
    let diag: f64 = (0..m).map(|i| a.get(i, i)).sum();
    let total: f64 = a.data().iter().sum();
    Ok((total - diag) / (m * (m - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_contrastive(u: &Tensor, d: &Tensor, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let (uv, dv) = (tape.constant(u.clone()), tape.constant(d.clone()));
        let batch = BatchNodes::from_vars(&tape, uv, dv).unwrap();
        let loss = contrastive_loss(&mut tape, &batch, tau, false).unwrap();
        tape.value(loss).scalar_value()
    }

    fn probs(tape: &mut Tape, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter().map(|r| tape.constant(Tensor::row(r.clone()))).collect()
    }

    #[test]
    fn ce_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let recons = probs(&mut tape, &[vec![0.05; 20], vec![0.05; 20]]);
        let loss = sentence_cross_entropy(&mut tape, &[3, 7], &recons).unwrap();
        let v = tape.value(loss).scalar_value();
        assert!((v - 20f64.ln()).abs() < 1e-12);
        assert!((v - 2.9957).abs() < 1e-4);
    }

    #[test]
    fn ce_one_hot_is_zero() {
        let mut tape = Tape::new();
        let recons = probs(&mut tape, &[vec![0.0, 1.0, 0.0]]);
        let loss = sentence_cross_entropy(&mut tape, &[1], &recons).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn ce_hand_evaluation() {
        let mut tape = Tape::new();
        let recons = probs(&mut tape, &[vec![0.5, 0.5], vec![0.25, 0.75]]);
        let loss = sentence_cross_entropy(&mut tape, &[0, 0], &recons).unwrap();
        let v = tape.value(loss).scalar_value();
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn ce_floor_and_errors() {
        let mut tape = Tape::new();
        let recons = probs(&mut tape, &[vec![0.0, 1.0]]);
        let loss = sentence_cross_entropy(&mut tape, &[0], &recons).unwrap();
        assert!((tape.value(loss).scalar_value() - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(sentence_cross_entropy(&mut tape, &[0, 1], &recons).is_err());
    }

    #[test]
    fn ce_batch_is_mean_of_sentence_means() {
        let mut tape = Tape::new();
        let a = probs(&mut tape, &[vec![0.5, 0.5]]);
        let b = probs(&mut tape, &[vec![0.25, 0.75], vec![0.25, 0.75], vec![1.0, 0.0]]);
        let loss = cross_entropy_loss(&mut tape, &[&[0], &[0, 0, 0]], &[&a, &b]).unwrap();
        let expected = (2f64.ln() + (2.0 * 4f64.ln()) / 3.0) / 2.0;
        assert!((tape.value(loss).scalar_value() - expected).abs() < 1e-15);
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let u = Tensor::row(vec![0.3, -0.2]);
        let d = Tensor::row(vec![-1.0, 4.0]);
        assert!(eval_contrastive(&u, &d, 0.2).abs() < 1e-15);
    }

    #[test]
    fn contrastive_identity_closed_form() {
        let eye = Tensor::identity(2);
        let v = eval_contrastive(&eye, &eye, 0.2);
        let e5 = 5f64.exp();
        // A has diagonal 1/(1+1e-8) rather than exactly 1 because of the norm guard.
        assert!((v - -(e5 / (e5 + 1.0)).ln()).abs() < 1e-9, "{v}");
        assert!((v - 0.0067153).abs() < 1e-6);
    }

    #[test]
    fn contrastive_rejects_bad_temperature() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::identity(2));
        let batch = BatchNodes::from_vars(&tape, u, u).unwrap();
        assert!(contrastive_loss(&mut tape, &batch, 0.0, false).is_err());
    }

    #[test]
    fn degenerate_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let batch = BatchNodes::from_vars(&tape, x, x).unwrap();
        let loss = degenerate_similarity_loss(&mut tape, &batch).unwrap();
        assert!((tape.value(loss).scalar_value() + 1.0).abs() < 1e-8);

        let u = tape.constant(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let d = tape.constant(Tensor::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap());
        let batch = BatchNodes::from_vars(&tape, u, d).unwrap();
        let loss = degenerate_similarity_loss(&mut tape, &batch).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn intra_view_reduces_to_cross_view_when_views_are_orthogonal_to_all() {
        // With a single node there are no intra-view negatives.
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let d = tape.constant(Tensor::row(vec![2.0, 1.0]));
        let batch = BatchNodes::from_vars(&tape, u, d).unwrap();
        let loss = contrastive_loss(&mut tape, &batch, 0.2, true).unwrap();
        assert!(tape.value(loss).scalar_value().abs() < 1e-12);
    }

    fn matrix(m: usize, k: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, m * k).prop_map(move |v| Tensor::new(m, k, v).unwrap())
    }

    proptest! {
        #[test]
        fn contrastive_permutation_invariant((u, d, perm) in (2usize..7).prop_flat_map(|m| (matrix(m, 3), matrix(m, 3), Just((0..m).collect::<Vec<_>>()).prop_shuffle()))) {
            let base = eval_contrastive(&u, &d, 0.2);
            let pu = Tensor::from_rows(&perm.iter().map(|&i| u.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let pd = Tensor::from_rows(&perm.iter().map(|&i| d.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
            prop_assert!((base - eval_contrastive(&pu, &pd, 0.2)).abs() < 1e-10);
        }

        #[test]
        fn contrastive_row_scale_invariant(u in matrix(4, 3), d in matrix(4, 3), row in 0usize..4, c in 0.1f64..10.0) {
            let base = eval_contrastive(&u, &d, 0.2);
            let mut su = u.clone();
            su.row_slice_mut(row).iter_mut().for_each(|x| *x *= c);
            let mut sd = d.clone();
            sd.row_slice_mut((row + 1) % 4).iter_mut().for_each(|x| *x *= c);
            // ε in the norm product makes scale invariance approximate.
            prop_assert!((base - eval_contrastive(&su, &sd, 0.2)).abs() < 1e-6);
        }
    }
}
