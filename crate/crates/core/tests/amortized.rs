mod common;

use amnet::amortized::{
    amrnn_step_runtime, amrnn_step_train, gumbel_noise, gumbel_softmax, AmRnnLayer, ArbitratorConfig, GumbelSampler,
    SamplerMode,
};
use amnet::cells::StackedLstm;
use amnet::compression::Mask;
use amnet::tensor::{softmax, ParamStore, Tape};
use amnet::transducer::{CompressionMethod, EncodeMode, ModelConfig, TransducerModel};
use common::random_matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARB: ArbitratorConfig = ArbitratorConfig { layers: 2, units: 3, use_prev_state: true, use_prev_decision: true };

fn layers(seed: u64) -> Vec<(ParamStore, AmRnnLayer)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = ParamStore::new();
    let dense = StackedLstm::new(&mut src, "d", 4, 6, 2, &mut rng);

    let mut s1 = ParamStore::new();
    let l1 = AmRnnLayer::new(&mut s1, "a", 4, 6, 2, 3, ARB, false, &mut rng).unwrap();

    let mut s2 = ParamStore::new();
    let l2 = AmRnnLayer::sparse_from_dense(&mut s2, "a", &src, &dense, 2, ARB, &mut rng).unwrap();
    let ids: Vec<_> = s2.iter().filter(|(_, p)| p.mask.is_some()).map(|(id, _)| id).collect();
    for id in ids {
        let m = Mask::from_magnitudes(s2.value(id), 0.5);
        s2.set_mask(id, m);
    }

    let mut s3 = ParamStore::new();
    let l3 = AmRnnLayer::factorized_from_dense(&mut s3, "a", &src, &dense, &[0.3, 0.7], ARB, &mut rng).unwrap();
    vec![(s1, l1), (s2, l2), (s3, l3)]
}

#[test]
fn one_hot_training_step_equals_runtime_step_bit_exactly() {
    for (store, mut layer) in layers(51) {
        for lag in [false, true] {
            layer.decision_lag = lag;
            let mut tape = Tape::new();
            let bound = layer.bind(&mut tape, &store, 123).unwrap();
            let mut sampler = GumbelSampler::new(1.0, SamplerMode::OneHot, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(52);
            let mut st = bound.initial_state(&mut tape);
            let mut sr = bound.initial_state(&mut tape);
            let mut used = vec![false; layer.num_branches()];
            for frame in 0..100 {
                let x = tape.row((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
                // alternate arbitrator-chosen and externally forced frames
                let forced = (frame % 3 == 0).then(|| rng.gen_range(0..layer.num_branches()));
                let a = amrnn_step_train(&mut tape, &bound, &mut sampler, x, &st, forced).unwrap();
                let r = amrnn_step_runtime(&mut tape, &bound, x, &sr, forced).unwrap();
                assert_eq!(tape.value(a.logits).data(), r.logits.as_slice());
                for (sa, sb) in a.state.layers.iter().zip(&r.state.layers) {
                    assert_eq!(tape.value(sa.h).data(), tape.value(sb.h).data());
                    assert_eq!(tape.value(sa.c).data(), tape.value(sb.c).data());
                }
                assert_eq!(tape.value(a.q).item(), r.q);
                used[r.branch] = true;
                st = a.state;
                sr = r.state;
            }
            assert!(used.iter().all(|u| *u), "every branch should run at least once");
        }
    }
}

#[test]
fn model_train_and_runtime_encodings_agree() {
    let cfg = ModelConfig {
        feature_dim: 4,
        vocab_size: 5,
        encoder_hidden: 6,
        encoder_layers: 2,
        decoder_embed: 3,
        decoder_hidden: 4,
        decoder_layers: 1,
    };
    let dense = TransducerModel::dense(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let frames = random_matrix(&mut rng, 100, 4, 2.0);
    for method in [CompressionMethod::Sparse, CompressionMethod::Factorized] {
        let model = TransducerModel::seed_from_dense(&dense, method, &[0.35, 0.6], ARB, 2).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let mut sampler = GumbelSampler::new(0.5, SamplerMode::OneHot, 0).unwrap();
        let train = bound.encode(&mut tape, &frames, EncodeMode::Train { sampler: &mut sampler, forced: None }).unwrap();
        let run = bound.encode(&mut tape, &frames, EncodeMode::Runtime { forced: None }).unwrap();
        assert_eq!(tape.value(train.enc).data(), tape.value(run.enc).data());
        let qt: Vec<f64> = train.q.iter().map(|q| tape.value(*q).item()).collect();
        let qr: Vec<f64> = run.q.iter().map(|q| tape.value(*q).item()).collect();
        assert_eq!(qt, qr);
        assert_eq!(train.decisions.branches, run.decisions.branches);
    }
}

proptest! {
    #[test]
    fn relaxed_decisions_lie_on_the_simplex(
        logits in prop::collection::vec(-20.0..20.0f64, 2..6),
        tau in 0.01..10.0f64,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = gumbel_noise(&mut rng, logits.len());
        let d = gumbel_softmax(&logits, tau, &noise).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn hard_samples_follow_the_arbitrator_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let n = 40_000;
    let mut first = 0;
    for _ in 0..n {
        let noise = gumbel_noise(&mut rng, 2);
        let d = gumbel_softmax(&[0.0, 0.0], 0.1, &noise).unwrap();
        if d[0] > d[1] {
            first += 1;
        }
    }
    let f = first as f64 / n as f64;
    assert!((f - 0.5).abs() <= 0.01, "frequency {f}");

    let logits = [0.4, -0.3, 1.1];
    let p = softmax(&logits);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let noise = gumbel_noise(&mut rng, 3);
        let d = gumbel_softmax(&logits, 0.1, &noise).unwrap();
        counts[amnet::tensor::argmax(&d)] += 1;
    }
    for k in 0..3 {
        let f = counts[k] as f64 / n as f64;
        assert!((f - p[k]).abs() <= 0.01, "branch {k}: {f} vs {}", p[k]);
    }
}
