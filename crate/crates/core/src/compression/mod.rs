//! Branch compression: gradual magnitude pruning with binary masks and
//! truncated low-rank factorisation, plus the FLOP cost of each form.

mod mask;
mod svd;

pub use mask::{Mask, MaskedMatrix};
pub use svd::{svd, Svd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Cubic sparsity ramp for one branch.
///
/// The ratio climbs from 0 at step 0 to `final_sparsity` at step
/// `steps * frequency` and stays there afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTracker {
    pub final_sparsity: f64,
    /// Number of pruning events.
    pub steps: usize,
    /// Training steps between pruning events.
    pub frequency: usize,
}

impl SparsityTracker {
    pub fn new(final_sparsity: f64, steps: usize, frequency: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&final_sparsity) {
            return Err(Error::InvalidArgument(format!(
                "final sparsity {final_sparsity} outside [0, 1)"
            )));
        }
        if frequency == 0 {
            return Err(Error::InvalidArgument("pruning frequency must be positive".into()));
        }
        Ok(Self { final_sparsity, steps, frequency })
    }

    pub fn end_step(&self) -> usize {
        self.steps * self.frequency
    }

    pub fn ratio(&self, step: usize) -> f64 {
        sparsity_schedule(self, step)
    }

    /// Whether masks are recomputed at `step`.
    pub fn is_pruning_step(&self, step: usize) -> bool {
        step % self.frequency == 0 && step <= self.end_step()
    }
}

/// `s_f - s_f * (1 - m / (nu * dm))^3`, clamped to `s_f` past the last
/// pruning step.
pub fn sparsity_schedule(tracker: &SparsityTracker, step: usize) -> f64 {
    let end = tracker.end_step();
    if end == 0 || step >= end {
        return tracker.final_sparsity;
    }
    let remaining = 1.0 - step as f64 / end as f64;
    tracker.final_sparsity - tracker.final_sparsity * remaining.powi(3)
}

/// Recomputes `mm.mask` so that exactly `floor(s * len)` of the smallest
/// stored magnitudes are masked.
pub fn apply_magnitude_pruning(mm: &mut MaskedMatrix, s: f64) {
    mm.mask = Mask::from_magnitudes(&mm.weights, s);
}

/// A weight `W ≈ P1 · P2ᵀ` with `P1: w×r`, `P2: v×r`. Branches may use
/// only the leading columns of both factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub p1: Matrix,
    pub p2: Matrix,
}

impl FactorPair {
    pub fn new(p1: Matrix, p2: Matrix) -> Result<Self> {
        if p1.cols() != p2.cols() {
            return Err(crate::error::shape_err(
                "FactorPair::new",
                format!("P1 has rank {} but P2 has rank {}", p1.cols(), p2.cols()),
            ));
        }
        if p1.cols() > p1.rows().min(p2.rows()) {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds min({}, {})",
                p1.cols(),
                p1.rows(),
                p2.rows()
            )));
        }
        Ok(Self { p1, p2 })
    }

    pub fn rank(&self) -> usize {
        self.p1.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.p1.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.p2.rows()
    }

    /// `P1[:, :r] · P2[:, :r]ᵀ`.
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let p1 = self.p1.slice_cols(0, rank);
        let p2t = self.p2.slice_cols(0, rank).transpose();
        p1.matmul(&p2t).expect("factor shapes agree")
    }

    pub fn flops(&self, rank: usize) -> u64 {
        factored_flops(self.out_dim(), self.in_dim(), rank)
    }
}

/// Best rank-`r` approximation of `w` (Frobenius norm): `P1 = U_r Σ_r`,
/// `P2 = V_r`.
pub fn svd_factorize(w: &Matrix, rank: usize) -> Result<FactorPair> {
    let max_rank = w.rows().min(w.cols());
    if rank == 0 || rank > max_rank {
        return Err(Error::InvalidArgument(format!("rank {rank} not in 1..={max_rank}")));
    }
    let d = svd(w);
    let p1 = Matrix::from_fn(w.rows(), rank, |i, j| d.u.get(i, j) * d.sigma[j]);
    let p2 = d.v.slice_cols(0, rank);
    FactorPair::new(p1, p2)
}

/// Evaluates `P1_r · (P2_rᵀ · x)` for a column vector `x` of length `v`.
pub fn truncated_linear(fp: &FactorPair, rank: usize, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != fp.in_dim() || rank == 0 || rank > fp.rank() {
        return Err(crate::error::shape_err(
            "truncated_linear",
            format!("x of len {} against {}x{} rank {rank}", x.len(), fp.in_dim(), fp.rank()),
        ));
    }
    let mut z = vec![0.0; rank];
    for (i, xi) in x.iter().enumerate() {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj += fp.p2.get(i, j) * xi;
        }
    }
    let mut y = vec![0.0; fp.out_dim()];
    for (i, yi) in y.iter_mut().enumerate() {
        for (j, zj) in z.iter().enumerate() {
            *yi += fp.p1.get(i, j) * zj;
        }
    }
    Ok(y)
}

pub fn dense_flops(w: usize, v: usize) -> u64 {
    2 * (w * v) as u64
}

pub fn factored_flops(w: usize, v: usize, rank: usize) -> u64 {
    2 * (rank * (w + v)) as u64
}

/// Rank at which a factorised `w×v` product costs the same as the dense one.
pub fn break_even_rank(w: usize, v: usize) -> f64 {
    (w * v) as f64 / (w + v) as f64
}

/// Largest rank whose factorised cost is at most `(1 - target_ratio)` of the
/// dense cost.
pub fn rank_for_compression(w: usize, v: usize, target_ratio: f64) -> Result<usize> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "compression target {target_ratio} outside (0, 1)"
        )));
    }
    let budget = (1.0 - target_ratio) * dense_flops(w, v) as f64;
    let fits = |r: usize| factored_flops(w, v, r) as f64 <= budget;
    let mut r = ((1.0 - target_ratio) * break_even_rank(w, v)).floor() as usize;
    while fits(r + 1) {
        r += 1;
    }
    while r > 0 && !fits(r) {
        r -= 1;
    }
    let r = r.min(w.min(v));
    if r == 0 {
        return Err(Error::InvalidArgument(format!(
            "no rank >= 1 reaches {:.0}% compression of a {w}x{v} matrix",
            target_ratio * 100.0
        )));
    }
    Ok(r)
}
