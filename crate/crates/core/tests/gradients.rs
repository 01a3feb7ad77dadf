mod common;

use amnet::amortized::{combine_states, gumbel_noise, gumbel_softmax_sample};
use amnet::cells::{stacked_forward, LstmState, StackedLstm};
use amnet::latency::{amortized_latency_loss, amr_loss_var, backlog_sequence, DeviceProfile};
use amnet::tensor::{Matrix, ParamId, ParamStore, Tape};
use amnet::transducer::{transducer_loss_var, transducer_nll, ModelConfig, TransducerModel};
use common::{numeric_gradient, random_matrix, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn flat(store: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
    ids.iter().flat_map(|id| store.value(*id).data().to_vec()).collect()
}

fn unflatten(store: &mut ParamStore, ids: &[ParamId], x: &[f64]) {
    let mut off = 0;
    for id in ids {
        let d = store.get_mut(*id).value.data_mut();
        let n = d.len();
        d.copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn param_grads(store: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
    ids.iter()
        .flat_map(|id| {
            let v = &store.get(*id).value;
            v.grad.clone().unwrap_or_else(|| vec![0.0; v.len()])
        })
        .collect()
}

fn lstm_loss(store: &ParamStore, stack: &StackedLstm, xs: &[Matrix], readout: &Matrix, grads: bool) -> (f64, Tape) {
    let mut tape = Tape::new();
    let bound = stack.bind(&mut tape, store).unwrap();
    let inputs: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let init = stack.zero_states(&mut tape);
    let hs = stacked_forward(&mut tape, &bound, &inputs, init).unwrap();
    let w = tape.constant(readout.clone());
    let mut total = None;
    for h in hs {
        let y = tape.matmul(h, w).unwrap();
        let y = tape.tanh(y).unwrap();
        total = Some(match total {
            None => y,
            Some(t) => tape.add(t, y).unwrap(),
        });
    }
    let loss = total.unwrap();
    if grads {
        tape.backward(loss).unwrap();
    }
    (tape.value(loss).item(), tape)
}

#[test]
fn lstm_unroll_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let stack = StackedLstm::new(&mut store, "s", 3, 4, 2, &mut rng);
    let xs: Vec<Matrix> = (0..5).map(|_| random_matrix(&mut rng, 1, 3, 1.0)).collect();
    let readout = random_matrix(&mut rng, 4, 1, 1.0);
    let ids = stack.param_ids();

    let (_, tape) = lstm_loss(&store, &stack, &xs, &readout, true);
    store.zero_grad();
    tape.accumulate_param_grads(&mut store);
    let analytic = param_grads(&store, &ids);

    let x0 = flat(&store, &ids);
    let mut probe = store.clone();
    let numeric = numeric_gradient(&x0, EPS, |x| {
        unflatten(&mut probe, &ids, x);
        lstm_loss(&probe, &stack, &xs, &readout, false).0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

/// logits = x·W, d = GumbelSoftmax(logits; fixed noise), states mixed by d,
/// loss = Σ tanh(mixed h · r).
fn gumbel_chain(w: &[f64], x: &Matrix, noise: &[f64], tau: f64, grads: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let wv = tape.leaf(Matrix::new(x.cols(), 3, w.to_vec()).unwrap());
    let xv = tape.constant(x.clone());
    let logits = tape.matmul(xv, wv).unwrap();
    let d = gumbel_softmax_sample(&mut tape, logits, tau, noise).unwrap();
    let branches: Vec<Vec<LstmState>> = (0..3)
        .map(|b| {
            let h = tape.row(vec![b as f64 - 1.0, 0.5 * b as f64]);
            let c = tape.row(vec![0.3, -0.2 * b as f64]);
            vec![LstmState { h, c }]
        })
        .collect();
    let mixed = combine_states(&mut tape, d, &branches).unwrap();
    let r = tape.constant(Matrix::new(2, 1, vec![0.7, -1.3]).unwrap());
    let y = tape.matmul(mixed[0].h, r).unwrap();
    let y2 = tape.matmul(mixed[0].c, r).unwrap();
    let y = tape.add(y, y2).unwrap();
    let loss = tape.tanh(y).unwrap();
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    (value, tape.grad(wv).unwrap().to_vec())
}

#[test]
fn gumbel_softmax_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for tau in [0.5, 1.0, 2.0] {
        let x = random_matrix(&mut rng, 1, 4, 1.0);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise = gumbel_noise(&mut rng, 3);
        let (_, analytic) = gumbel_chain(&w, &x, &noise, tau, true);
        let numeric = numeric_gradient(&w, EPS, |p| gumbel_chain(p, &x, &noise, tau, false).0);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "tau {tau}: relative error {err}");
    }
}

#[test]
fn transducer_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (t_len, labels) in [(1, vec![]), (3, vec![1, 2]), (5, vec![2, 3, 1, 1])] {
        let v = 4;
        let enc = random_matrix(&mut rng, t_len, v, 1.5);
        let dec = random_matrix(&mut rng, labels.len() + 1, v, 1.5);
        let mut tape = Tape::new();
        let ev = tape.leaf(enc.clone());
        let dv = tape.leaf(dec.clone());
        let loss = transducer_loss_var(&mut tape, ev, dv, &labels).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = tape.grad(ev).unwrap().to_vec();
        analytic.extend_from_slice(tape.grad(dv).unwrap());

        let mut x0 = enc.data().to_vec();
        x0.extend_from_slice(dec.data());
        let n_enc = enc.len();
        let numeric = numeric_gradient(&x0, EPS, |x| {
            let e = Matrix::new(t_len, v, x[..n_enc].to_vec()).unwrap();
            let d = Matrix::new(labels.len() + 1, v, x[n_enc..].to_vec()).unwrap();
            transducer_nll(&e, &d, &labels).unwrap()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "T={t_len}: relative error {err}");
    }
}

#[test]
fn end_to_end_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        feature_dim: 3,
        vocab_size: 4,
        encoder_hidden: 4,
        encoder_layers: 1,
        decoder_embed: 2,
        decoder_hidden: 3,
        decoder_layers: 1,
    };
    let model = TransducerModel::dense(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let frames = random_matrix(&mut rng, 4, 3, 1.0);
    let labels = vec![3, 1];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let (nll, _) = bound
        .utterance_loss(&mut tape, &frames, &labels, amnet::transducer::EncodeMode::Runtime { forced: None })
        .unwrap();
    tape.backward(nll).unwrap();
    let mut store = model.params.clone();
    store.zero_grad();
    tape.accumulate_param_grads(&mut store);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let analytic = param_grads(&store, &ids);
    let x0 = flat(&store, &ids);
    let mut probe = model.clone();
    let numeric = numeric_gradient(&x0, EPS, |x| {
        unflatten(&mut probe.params, &ids, x);
        probe.transducer_loss(&frames, &labels).unwrap()
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn amr_subgradient_matches_finite_differences_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let profile = DeviceProfile::new(1000.0, 100.0).unwrap();
    let budget = profile.budget();
    let h = 1e-4;
    let mut checked = 0;
    while checked < 200 {
        let t_len = rng.gen_range(1..30);
        let q: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..2.5 * budget)).collect();
        let trace = backlog_sequence(&q, &profile).unwrap();
        let clear = (0..t_len).all(|t| (trace.ell[t] + q[t] - budget).abs() > 100.0 * h);
        if !clear {
            continue;
        }
        let mut tape = Tape::new();
        let vars: Vec<_> = q.iter().map(|&v| tape.leaf(Matrix::scalar(v))).collect();
        let loss = amr_loss_var(&mut tape, &vars, &profile).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars.iter().map(|v| tape.grad(*v).unwrap()[0]).collect();
        let numeric = numeric_gradient(&q, h, |x| amortized_latency_loss(x, &profile).unwrap());
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err} for {q:?}");
        checked += 1;
    }
}
