mod common;

use amnet::compression::{
    apply_magnitude_pruning, break_even_rank, dense_flops, factored_flops, rank_for_compression, sparsity_schedule,
    svd, svd_factorize, truncated_linear, Mask, MaskedMatrix, SparsityTracker,
};
use amnet::tensor::Matrix;
use common::{frobenius_diff, nalgebra_tail_norm, random_matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn schedule_endpoints_and_midpoint() {
    for (sf, steps, freq) in [(0.35, 10, 20), (0.8, 7, 3), (0.5, 1, 1)] {
        let tr = SparsityTracker::new(sf, steps, freq).unwrap();
        assert_eq!(sparsity_schedule(&tr, 0), 0.0);
        assert!((sparsity_schedule(&tr, steps * freq) - sf).abs() < 1e-12);
        assert_eq!(sparsity_schedule(&tr, steps * freq + 50), sf);
        if (steps * freq) % 2 == 0 {
            assert!((sparsity_schedule(&tr, steps * freq / 2) - 0.875 * sf).abs() < 1e-12);
        }
    }
}

#[test]
fn schedule_never_decreases() {
    let tr = SparsityTracker::new(0.6, 12, 5).unwrap();
    let mut prev = 0.0;
    for m in 0..100 {
        let s = sparsity_schedule(&tr, m);
        assert!(s >= prev);
        prev = s;
    }
}

proptest! {
    #[test]
    fn pruning_hits_the_exact_sparsity(rows in 1usize..12, cols in 1usize..12, s in 0.0..0.99f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, rows, cols, 1.0);
        let n = rows * cols;
        let mut mm = MaskedMatrix::dense(w.clone());
        apply_magnitude_pruning(&mut mm, s);
        let zeros = (s * n as f64).floor() as usize;
        prop_assert_eq!(mm.mask.kept(), n - zeros);
        prop_assert_eq!(mm.flops(), 2 * (n - zeros) as u64);
        // every pruned weight is no larger than every kept one
        let d = w.data();
        let max_pruned = (0..n).filter(|&i| !mm.mask.is_kept(i)).map(|i| d[i].abs()).fold(0.0, f64::max);
        let min_kept = (0..n).filter(|&i| mm.mask.is_kept(i)).map(|i| d[i].abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(max_pruned <= min_kept);
        // masked weights stay stored
        prop_assert_eq!(&mm.weights, &w);
    }

    #[test]
    fn packed_masks_round_trip(rows in 1usize..20, cols in 1usize..20, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: Vec<bool> = (0..rows * cols).map(|_| rng.gen()).collect();
        let m = Mask::from_vec(rows, cols, keep);
        prop_assert_eq!(Mask::from_packed(rows, cols, &m.to_packed()).unwrap(), m);
    }
}

#[test]
fn truncation_error_equals_singular_value_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (rows, cols) in [(8, 5), (5, 8), (12, 12), (20, 7), (1, 6)] {
        let w = random_matrix(&mut rng, rows, cols, 1.0);
        for rank in 1..=rows.min(cols) {
            let fp = svd_factorize(&w, rank).unwrap();
            let err = frobenius_diff(&w, &fp.reconstruct(rank));
            let oracle = nalgebra_tail_norm(&w, rank);
            assert!((err - oracle).abs() < 1e-8, "{rows}x{cols} r={rank}: {err} vs {oracle}");
        }
    }
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w = random_matrix(&mut rng, 9, 6, 2.0);
    let ours = svd(&w).sigma;
    let m = nalgebra::DMatrix::from_row_slice(9, 6, w.data());
    let mut theirs: Vec<f64> = m.singular_values().iter().cloned().collect();
    theirs.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn factored_product_matches_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let w = random_matrix(&mut rng, 6, 4, 1.0);
    let fp = svd_factorize(&w, 3).unwrap();
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = truncated_linear(&fp, 2, &x).unwrap();
    let wr = fp.reconstruct(2);
    let expect = wr.matmul(&Matrix::new(4, 1, x).unwrap()).unwrap();
    for (a, b) in y.iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn break_even_rank_is_exact() {
    for (w, v) in [(6, 3), (1024, 1024), (12, 4), (10, 15), (7, 5)] {
        let r = break_even_rank(w, v);
        assert_eq!(r, (w * v) as f64 / (w + v) as f64);
        if r.fract() == 0.0 {
            assert_eq!(factored_flops(w, v, r as usize), dense_flops(w, v));
        }
        let below = r.ceil() as usize - 1;
        assert!(factored_flops(w, v, below) < dense_flops(w, v));
        assert!(factored_flops(w, v, r.floor() as usize + 1) > dense_flops(w, v));
    }
    assert_eq!(break_even_rank(1024, 1024), 512.0);
}

#[test]
fn compression_rank_respects_target() {
    for (w, v, target) in [(48, 120, 0.35), (48, 120, 0.6), (1024, 2048, 0.5), (16, 16, 0.8)] {
        let r = rank_for_compression(w, v, target).unwrap();
        let budget = (1.0 - target) * dense_flops(w, v) as f64;
        assert!(factored_flops(w, v, r) as f64 <= budget);
        assert!(r == w.min(v) || factored_flops(w, v, r + 1) as f64 > budget);
    }
    assert!(rank_for_compression(2, 2, 0.99).is_err());
}
