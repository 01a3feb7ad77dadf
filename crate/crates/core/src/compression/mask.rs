use crate::tensor::Matrix;

/// Binary keep/drop pattern with the shape of the weight it gates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    kept: usize,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, keep: vec![true; rows * cols], kept: rows * cols }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize) -> bool) -> Self {
        Self::from_vec(rows, cols, (0..rows * cols).map(f).collect())
    }

    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Self {
        assert_eq!(keep.len(), rows * cols);
        let kept = keep.iter().filter(|k| **k).count();
        Self { rows, cols, keep, kept }
    }

    /// Masks the `floor(s * n)` entries of `weights` with the smallest
    /// magnitude. Ties go to the lower flat index first.
    pub fn from_magnitudes(weights: &Matrix, s: f64) -> Self {
        let n = weights.len();
        let zeros = ((s * n as f64).floor() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let d = weights.data();
        order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()).then(a.cmp(&b)));
        let mut keep = vec![true; n];
        for &i in &order[..zeros] {
            keep[i] = false;
        }
        Self { rows: weights.rows(), cols: weights.cols(), keep, kept: n - zeros }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    #[inline]
    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    /// Fraction of masked entries.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            (self.len() - self.kept) as f64 / self.len() as f64
        }
    }

    pub fn to_vec(&self) -> Vec<bool> {
        self.keep.clone()
    }

    /// LSB-first packed bits, `ceil(len / 8)` bytes.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(rows: usize, cols: usize, bytes: &[u8]) -> Option<Self> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        Some(Self::from_vec(rows, cols, (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()))
    }

    /// `w ⊙ mask`.
    pub fn apply(&self, w: &Matrix) -> Matrix {
        let data = w.data().iter().zip(&self.keep).map(|(v, k)| if *k { *v } else { 0.0 }).collect();
        Matrix::new(w.rows(), w.cols(), data).expect("mask shape")
    }
}

/// Weights kept alongside their mask; masked entries stay in storage so a
/// later pruning pass can revive them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedMatrix {
    pub weights: Matrix,
    pub mask: Mask,
}

impl MaskedMatrix {
    pub fn dense(weights: Matrix) -> Self {
        let mask = Mask::ones(weights.rows(), weights.cols());
        Self { weights, mask }
    }

    pub fn effective(&self) -> Matrix {
        self.mask.apply(&self.weights)
    }

    /// `x · (weights ⊙ mask)`.
    pub fn masked_matmul(&self, x: &Matrix) -> crate::Result<Matrix> {
        x.matmul(&self.effective())
    }

    /// Multiply-accumulate cost for a single input row: `2 (1 - s) w v`.
    pub fn flops(&self) -> u64 {
        2 * self.mask.kept() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn packed_round_trip() {
        let m = Mask::from_fn(3, 5, |i| i % 3 == 0 || i == 14);
        let back = Mask::from_packed(3, 5, &m.to_packed()).unwrap();
        assert_eq!(back, m);
        assert!(Mask::from_packed(3, 5, &[0]).is_none());
    }

    #[test]
    fn exact_sparsity_after_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_fn(13, 7, |_, _| rng.gen_range(-1.0..1.0));
        for s in [0.0, 0.15, 0.33, 0.5, 0.8, 0.99] {
            let m = Mask::from_magnitudes(&w, s);
            let zeros = (s * 91.0).floor() as usize;
            assert_eq!(m.len() - m.kept(), zeros);
            assert_eq!(m.sparsity(), zeros as f64 / 91.0);
        }
    }

    #[test]
    fn pruning_is_idempotent() {
        let w = Matrix::row_vector(vec![0.3, -0.3, 0.2, 0.9, -0.1, 0.3]);
        let a = Mask::from_magnitudes(&w, 0.5);
        let b = Mask::from_magnitudes(&w, 0.5);
        assert_eq!(a, b);
        // ties at |0.3| resolved by index
        assert_eq!(a.to_vec(), vec![false, true, false, true, false, true]);
    }

    #[test]
    fn masked_weights_can_revive() {
        let mut mm = MaskedMatrix::dense(Matrix::row_vector(vec![0.1, 0.5, 0.9, 0.2]));
        super::super::apply_magnitude_pruning(&mut mm, 0.5);
        assert_eq!(mm.mask.to_vec(), vec![false, true, true, false]);
        // storage is untouched and a masked weight grows past a kept one
        assert_eq!(mm.weights.data()[0], 0.1);
        mm.weights.data_mut()[3] = 0.7;
        super::super::apply_magnitude_pruning(&mut mm, 0.5);
        assert_eq!(mm.mask.to_vec(), vec![false, false, true, true]);
    }

    #[test]
    fn full_and_zero_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let x = Matrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let full = MaskedMatrix::dense(w.clone());
        assert_eq!(full.masked_matmul(&x).unwrap(), x.matmul(&w).unwrap());
        let none = MaskedMatrix { weights: w, mask: Mask::from_fn(4, 3, |_| false) };
        assert!(none.masked_matmul(&x).unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(none.flops(), 0);
    }
}
