//! Differentiable substrate: dense `f64` tensors, a define-by-run tape, and
//! a finite-difference gradient checker.

mod tape;
mod tensor;

use rand::seq::index::sample;
use rand::Rng;

pub use tape::{Gradients, Tape, Var, COSINE_EPS};
pub use tensor::{dot, norm, Tensor};

use crate::error::{Error, Result};

/// `exp(x_k/τ) / Σ_m exp(x_m/τ)`, with max subtraction.
pub fn tempered_softmax(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let scaled: Vec<f64> = x.iter().map(|v| v / temperature).collect();
    let lse = tape::log_sum_exp(&scaled);
    Ok(scaled.iter().map(|v| (v - lse).exp()).collect())
}

/// Pairwise cosine similarity between the rows of `u` and the rows of `d`.
pub fn cosine_similarity_matrix(u: &Tensor, d: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (u, d) = (tape.constant(u.clone()), tape.constant(d.clone()));
    let a = tape.cosine_matrix(u, d)?;
    Ok(tape.value(a).clone())
}

/// Cosine similarity of two vectors, with the same ε guard as the tape kernels.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + COSINE_EPS)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor index and flat coordinate of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`. The relative error of one coordinate is
/// `|g_tape − g_fd| / max(|g_tape|, |g_fd|, 1e-8)`.
pub fn check_gradients<F, R>(f: F, params: &[Tensor], config: GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).scalar_value();
        if !v.is_finite() {
            return Err(Error::NonFinite("function under gradient check".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (t, (param, var)) in params.iter().zip(&vars).enumerate() {
        let coords: Vec<usize> = match config.max_coords {
            Some(k) if k < param.len() => {
                let mut c = sample(rng, param.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..param.len()).collect(),
        };
        for k in coords {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[k]);
            let original = param.data()[k];
            perturbed[t].data_mut()[k] = original + config.step;
            let plus = eval(&perturbed)?;
            perturbed[t].data_mut()[k] = original - config.step;
            let minus = eval(&perturbed)?;
            perturbed[t].data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (t, k);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_check<F>(f: F, params: &[Tensor]) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        check_gradients(f, params, GradCheckConfig::default(), &mut rng)
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn tempered_softmax_values() {
        assert_eq!(tempered_softmax(&[0.0, 0.0], 0.7).unwrap(), vec![0.5, 0.5]);
        let e = std::f64::consts::E;
        let p = tempered_softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        let p = tempered_softmax(&[1.0, 0.0], 0.2).unwrap();
        let e5 = 5f64.exp();
        assert!((p[0] - e5 / (e5 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.993307).abs() < 1e-6 && (p[1] - 0.006693).abs() < 1e-6);
        assert!(tempered_softmax(&[1.0], 0.0).is_err());
        assert!(tempered_softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cosine_matrix_basic_cases() {
        let eye = Tensor::identity(3);
        let a = cosine_similarity_matrix(&eye, &eye).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((a.get(i, j) - expected).abs() < 1e-7);
            }
        }
        let d = Tensor::new(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let mut u = d.clone();
        u.data_mut().iter_mut().for_each(|x| *x *= 4.0);
        let a = cosine_similarity_matrix(&u, &d).unwrap();
        assert!((a.get(0, 0) - 1.0).abs() < 1e-8 && (a.get(1, 1) - 1.0).abs() < 1e-8);

        let zero = Tensor::zeros(2, 2);
        let a = cosine_similarity_matrix(&zero, &d).unwrap();
        assert!(a.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random(&mut rng, 3, 4);
        let d = random(&mut rng, 3, 4);
        let a = cosine_similarity_matrix(&u, &d).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (mut s, mut nu, mut nd) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    s += u.get(i, k) * d.get(j, k);
                    nu += u.get(i, k) * u.get(i, k);
                    nd += d.get(j, k) * d.get(j, k);
                }
                let expected = s / (nu.sqrt() * nd.sqrt() + 1e-8);
                assert!((a.get(i, j) - expected).abs() < 1e-12);
                assert!(a.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn sum_tanh_against_analytic_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let t = tape.tanh(v);
        let s = tape.sum(t);
        let grads = tape.backward(s).unwrap();
        for (g, xv) in grads.get(v).unwrap().data().iter().zip(x.data()) {
            let analytic = 1.0 - xv.tanh().powi(2);
            assert!((g - analytic).abs() < 1e-14);
        }
        let err = rel_check(
            |tape, p| {
                let t = tape.tanh(p[0]);
                Ok(tape.sum(t))
            },
            &[x],
        );
        assert!(err < 1e-6, "{err}");
    }

    // Each primitive is wrapped so that the function is scalar and every
    // output coordinate gets a distinct weight.
    fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let cols = tape.shape(v)[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, cols, 1));
        let col = tape.matmul(v, w)?;
        Ok(tape.sum(col))
    }

    #[test]
    fn primitives_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 3, 4);
        let sq = random(&mut rng, 4, 4);
        let pos = Tensor::new(2, 3, (0..6).map(|i| 0.2 + 0.1 * i as f64).collect()).unwrap();

        type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);
        let cases: Vec<Case> = vec![
            ("matmul", Box::new(|t, p| { let y = t.matmul(p[0], p[1])?; weighted_sum(t, y, 1) }), vec![a.clone(), b.clone()]),
            ("matmul_bt", Box::new(|t, p| { let y = t.matmul_bt(p[0], p[1])?; weighted_sum(t, y, 2) }), vec![a.clone(), c.clone()]),
            ("tanh", Box::new(|t, p| { let y = t.tanh(p[0]); weighted_sum(t, y, 3) }), vec![a.clone()]),
            ("hcat", Box::new(|t, p| { let y = t.hcat(p[0], p[1])?; weighted_sum(t, y, 4) }), vec![a.clone(), c.clone()]),
            ("hsplit", Box::new(|t, p| { let (l, r) = t.hsplit(p[0])?; let y = t.hcat(r, l)?; weighted_sum(t, y, 5) }), vec![a.clone()]),
            ("square", Box::new(|t, p| { let f = t.flatten(p[0])?; let s = t.square(f)?; let y = t.matmul(s, s)?; weighted_sum(t, y, 6) }), vec![sq.clone()]),
            ("gather_row", Box::new(|t, p| { let y = t.gather_row(p[0], 2)?; weighted_sum(t, y, 7) }), vec![a.clone()]),
            ("stack_rows", Box::new(|t, p| { let y = t.stack_rows(&[p[0], p[1], p[0]])?; weighted_sum(t, y, 8) }), vec![a.clone(), c.clone()]),
            ("add_row", Box::new(|t, p| { let r = t.gather_row(p[1], 0)?; let y = t.add_row(p[0], r)?; weighted_sum(t, y, 9) }), vec![a.clone(), c.clone()]),
            ("transpose", Box::new(|t, p| { let y = t.transpose(p[0]); weighted_sum(t, y, 10) }), vec![a.clone()]),
            ("softmax", Box::new(|t, p| { let y = t.softmax(p[0]); weighted_sum(t, y, 11) }), vec![a.clone()]),
            ("log_softmax", Box::new(|t, p| { let y = t.log_softmax(p[0]); weighted_sum(t, y, 12) }), vec![a.clone()]),
            ("log", Box::new(|t, p| { let y = t.log(p[0], 1e-12); weighted_sum(t, y, 13) }), vec![pos.clone()]),
            ("diag", Box::new(|t, p| { let y = t.diag(p[0])?; weighted_sum(t, y, 14) }), vec![sq.clone()]),
            ("pick", Box::new(|t, p| { let y = t.pick(p[0], &[3, 0, 1])?; weighted_sum(t, y, 15) }), vec![a.clone()]),
            ("fill_diag", Box::new(|t, p| { let y = t.fill_diag(p[0], -2.0)?; weighted_sum(t, y, 16) }), vec![sq.clone()]),
            ("mean", Box::new(|t, p| { let y = t.tanh(p[0]); let m = t.mean(y); Ok(t.scale(m, 3.0)) }), vec![a.clone()]),
            ("cosine_matrix", Box::new(|t, p| { let y = t.cosine_matrix(p[0], p[1])?; weighted_sum(t, y, 17) }), vec![a.clone(), c.clone()]),
            ("symmetric_diag_nll", Box::new(|t, p| { let y = t.symmetric_diag_nll(p[0])?; Ok(t.scale(y, 2.0)) }), vec![sq.clone()]),
            ("row_cosine", Box::new(|t, p| { let y = t.row_cosine(p[0], p[1])?; let y = t.transpose(y); weighted_sum(t, y, 18) }), vec![a.clone(), c.clone()]),
        ];
        for (name, f, params) in cases {
            let err = rel_check(f, &params);
            assert!(err < 1e-6, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn symmetric_diag_nll_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 5, 5);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let fused = tape.symmetric_diag_nll(v).unwrap();
        fn diag_sum(tape: &mut Tape, logits: Var) -> Var {
            let ls = tape.log_softmax(logits);
            let d = tape.diag(ls).unwrap();
            tape.sum(d)
        }
        let rows = diag_sum(&mut tape, v);
        let vt = tape.transpose(v);
        let cols = diag_sum(&mut tape, vt);
        let total = tape.add(rows, cols).unwrap();
        let composed = tape.scale(total, -0.1);
        assert!((tape.value(fused).scalar_value() - tape.value(composed).scalar_value()).abs() < 1e-14);
        let gf = tape.backward(fused).unwrap();
        let gc = tape.backward(composed).unwrap();
        for (a, b) in gf.get(v).unwrap().data().iter().zip(gc.get(v).unwrap().data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let rect = tape.constant(Tensor::zeros(2, 3));
        assert!(tape.symmetric_diag_nll(rect).is_err());
    }

    #[test]
    fn backward_is_linear_in_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 4, 3);
        let d = random(&mut rng, 4, 3);
        let build = |which: u8| {
            let mut tape = Tape::new();
            let (u, v) = (tape.param(a.clone()), tape.param(d.clone()));
            let cm = tape.cosine_matrix(u, v).unwrap();
            let l1 = {
                let s = tape.log_softmax(cm);
                let dg = tape.diag(s).unwrap();
                tape.sum(dg)
            };
            let l2 = {
                let t = tape.tanh(u);
                tape.mean(t)
            };
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let g = tape.backward(loss).unwrap();
            (g.get(u).cloned().unwrap_or(Tensor::zeros(4, 3)), g.get(v).cloned().unwrap_or(Tensor::zeros(4, 3)))
        };
        let (u1, v1) = build(0);
        let (u2, v2) = build(1);
        let (us, vs) = build(2);
        for k in 0..12 {
            assert!((u1.data()[k] + u2.data()[k] - us.data()[k]).abs() < 1e-10);
            assert!((v1.data()[k] + v2.data()[k] - vs.data()[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![0.0, 1.0]));
        tape.check_finite().unwrap();
        let y = tape.log(x, 0.0);
        let _ = tape.sum(y);
        assert!(matches!(tape.check_finite(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unreachable_params_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::scalar(3.0));
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(unused).is_none());
    }

    proptest! {
        #[test]
        fn hsplit_inverts_hcat(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let mut tape = Tape::new();
            let ta = tape.constant(Tensor::new(2, 3, a).unwrap());
            let tb = tape.constant(Tensor::new(2, 3, b).unwrap());
            let cat = tape.hcat(ta, tb).unwrap();
            let (l, r) = tape.hsplit(cat).unwrap();
            prop_assert_eq!(tape.value(l), tape.value(ta));
            prop_assert_eq!(tape.value(r), tape.value(tb));

            let flat = tape.flatten(ta).unwrap();
            let sq = tape.reshape(flat, 2, 3).unwrap();
            prop_assert_eq!(tape.value(sq), tape.value(ta));
        }

        #[test]
        fn softmax_shift_and_permutation(x in prop::collection::vec(-10.0f64..10.0, 2..8), c in -50.0f64..50.0, tau in 0.1f64..2.0) {
            let p = tempered_softmax(&x, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = tempered_softmax(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let mut rev = x.clone();
            rev.reverse();
            let r = tempered_softmax(&rev, tau).unwrap();
            for (a, b) in p.iter().zip(r.iter().rev()) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
