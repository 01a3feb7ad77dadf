#![allow(dead_code)]

use amnet::tensor::Matrix;
use amnet::transducer::BLANK;
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    z.iter().map(|v| v - m - s.ln()).collect()
}

/// Sums the probability of every monotone alignment explicitly. An
/// alignment is a string of `T` blanks and `U` labels whose last symbol is
/// a blank.
pub fn brute_force_log_likelihood(enc: &Matrix, dec: &Matrix, labels: &[usize]) -> f64 {
    let t_len = enc.rows();
    let u_len = labels.len();
    let v = enc.cols();
    let joint = |t: usize, u: usize| -> Vec<f64> {
        let z: Vec<f64> = (0..v).map(|k| enc.get(t, k) + dec.get(u, k)).collect();
        log_softmax_row(&z)
    };
    let n = t_len + u_len;
    let mut total = 0.0;
    // bit i set = position i emits a label
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != u_len || bits & (1 << (n - 1)) != 0 {
            continue;
        }
        let (mut t, mut u, mut lp) = (0, 0, 0.0);
        for i in 0..n {
            let row = joint(t, u);
            if bits & (1 << i) != 0 {
                lp += row[labels[u]];
                u += 1;
            } else {
                lp += row[BLANK];
                t += 1;
            }
        }
        total += lp.exp();
    }
    total.ln()
}

/// Every label sequence over tokens `1..vocab` of length at most `max_len`.
pub fn all_label_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in 1..vocab {
                let mut q: Vec<usize> = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Direct transcription of the backlog recursion.
pub fn naive_latency(q: &[f64], mu: f64, budget: f64) -> f64 {
    let mut ell = 0.0f64;
    for &qt in q {
        ell = (ell + qt - budget).max(0.0);
    }
    ell / mu
}

/// Frobenius tail `sqrt(Σ_{i ≥ r} σ_i²)` from nalgebra's SVD.
pub fn nalgebra_tail_norm(w: &Matrix, rank: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[rank..].iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
