//! Dense matrices and the reverse-mode tape used by every model component.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs; bias adds,
//! elementwise products and activations are 1 FLOP per element.

mod matrix;
mod params;
mod tape;

pub use matrix::Matrix;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{argmax, log_softmax, log_sum_exp, sigmoid, softmax, Elementwise, Tape, Var};

use rand::Rng;

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    /// Central differences of `f` w.r.t. every entry of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Matrix],
        which: usize,
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> Vec<f64> {
        let eval = |ins: &[Matrix]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
            let out = f(&mut t, &vars);
            t.value(out).item()
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += H;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= H;
                (eval(&plus) - eval(&minus)) / (2.0 * H)
            })
            .collect()
    }

    fn analytic_grads(inputs: &[Matrix], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<Vec<f64>> {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
        let out = f(&mut t, &vars);
        t.backward(out).unwrap();
        vars.iter()
            .map(|&v| t.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.value(v).len()]))
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt();
        diff / scale.max(1e-12)
    }

    fn check(inputs: &[Matrix], f: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let analytic = analytic_grads(inputs, f);
        for (i, a) in analytic.iter().enumerate() {
            let n = numeric_grad(inputs, i, f);
            let e = rel_err(a, &n);
            assert!(e < tol, "input {i}: rel err {e}");
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(4, 3, &mut rng), random(3, 5, &mut rng)];
        check(
            &inputs,
            &|t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                t.sum(p).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random(5, 5, &mut rng), random(5, 5, &mut rng)];
        for kind in [
            Elementwise::Add,
            Elementwise::Mul,
            Elementwise::Sigmoid,
            Elementwise::Tanh,
            Elementwise::Relu,
        ] {
            // squared to make the sum's gradient input dependent
            check(
                &inputs,
                &|t, v| {
                    let y = t.elementwise(kind, v[0], Some(v[1])).unwrap();
                    let sq = t.mul(y, y).unwrap();
                    t.sum(sq).unwrap()
                },
                1e-5,
            );
        }
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [random(3, 4, &mut rng), random(3, 4, &mut rng)];
        check(
            &inputs,
            &|t, v| {
                let s = t.softmax(v[0]).unwrap();
                let w = t.mul(s, v[1]).unwrap();
                t.sum(w).unwrap()
            },
            1e-5,
        );
        check(
            &inputs,
            &|t, v| {
                let s = t.log_softmax(v[0]).unwrap();
                let w = t.mul(s, v[1]).unwrap();
                t.sum(w).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [random(2, 3, &mut rng), random(2, 4, &mut rng), random(1, 7, &mut rng)];
        check(
            &inputs,
            &|t, v| {
                let c = t.concat_cols(&[v[0], v[1]]).unwrap();
                let c = t.add(c, v[2]).unwrap();
                let s = t.slice_cols(c, 2, 4).unwrap();
                let tr = t.transpose(s).unwrap();
                let r = t.concat_rows(&[tr, tr]).unwrap();
                let sc = t.scale(r, 0.7).unwrap();
                let sq = t.mul(r, r).unwrap();
                let d = t.sub(sq, sc).unwrap();
                let th = t.tanh(d).unwrap();
                t.mean(th).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn masked_matmul_gradient_and_masking() {
        use crate::compression::Mask;
        use std::sync::Arc;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(2, 4, &mut rng), random(4, 3, &mut rng)];
        let mask = Arc::new(Mask::from_fn(4, 3, |i| i % 3 != 1));
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.masked_matmul(v[0], v[1], mask.clone()).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum(sq).unwrap()
        };
        check(&inputs, &f, 1e-5);
        let g = analytic_grads(&inputs, &f);
        for (i, gw) in g[1].iter().enumerate() {
            if !mask.is_kept(i) {
                assert_eq!(*gw, 0.0);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_stable() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(2, 3, vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]).unwrap());
        let s = t.softmax(x).unwrap();
        let v = t.value(s);
        for j in 0..3 {
            assert!((v.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.get(1, 0), 1.0);
        assert_eq!(v.get(1, 1), 0.0);
        for r in 0..2 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let x = t.row(vec![0.0]);
        let s = t.sigmoid(x).unwrap();
        let h = t.tanh(x).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        assert_eq!(t.value(h).item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.row(vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(crate::Error::NonScalarRoot { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        let c = t.leaf(Matrix::zeros(3, 2));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        let a = t.row(vec![1e308]);
        assert!(matches!(t.scale(a, 10.0), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let x = t.row(vec![3.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn matmul_reports_flops() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(4, 3));
        let b = t.leaf(Matrix::zeros(3, 5));
        t.matmul(a, b).unwrap();
        assert_eq!(t.flops(), 2 * 4 * 3 * 5);
    }

    #[test]
    fn params_receive_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::row_vector(vec![2.0, -1.0]));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.value(id).grad.as_deref().unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let a = t.leaf(random(3, 3, &mut rng));
            let b = t.leaf(random(3, 3, &mut rng));
            let p = t.matmul(a, b).unwrap();
            let s = t.softmax(p).unwrap();
            t.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
