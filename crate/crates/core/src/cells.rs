//! LSTM cells and stacks.
//!
//! Weights use the row-vector convention `z = [x, h] · W + b`, so every gate
//! matrix is `(input_dim + hidden_dim) × hidden_dim`. A gate matrix may carry
//! a pruning mask (on its [`Param`](crate::tensor::Param)) or be stored as a
//! truncated factor pair shared with other branches.

use std::sync::Arc;

use rand::Rng;

use crate::compression::{dense_flops, factored_flops, Mask};
use crate::error::{shape_err, Result};
use crate::tensor::{uniform_init, Matrix, ParamId, ParamStore, Tape, Var};

pub const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

#[derive(Clone, Debug, PartialEq)]
pub enum GateWeight {
    /// Full matrix, masked if the parameter carries a mask.
    Dense(ParamId),
    /// `W ≈ P2[:, :rank] · P1[:, :rank]ᵀ` with `P2: (in+hid)×R`, `P1: hid×R`.
    Factored { p1: ParamId, p2: ParamId, rank: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub gates: [GateWeight; 4],
    pub biases: [ParamId; 4],
}

/// `h`/`c` pair living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, dim: usize) -> Self {
        let h = tape.row(vec![0.0; dim]);
        let c = tape.row(vec![0.0; dim]);
        Self { h, c }
    }
}

enum BoundGate {
    Dense(Var),
    Masked(Var, Arc<Mask>),
    Factored { p2: Var, p1t: Var },
}

/// A cell whose parameters have been placed on a tape.
pub struct BoundCell {
    hidden_dim: usize,
    input_dim: usize,
    gates: Vec<BoundGate>,
    biases: Vec<Var>,
}

impl LstmCell {
    /// Fresh dense cell: uniform weights, zero biases except the forget
    /// gate at 1.0.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input_dim + hidden_dim;
        let gates = GATES.map(|g| {
            GateWeight::Dense(store.add(
                format!("{prefix}.w_{g}"),
                uniform_init(fan_in, hidden_dim, fan_in, rng),
            ))
        });
        let biases = GATES.map(|g| {
            let init = if g == "forget" { 1.0 } else { 0.0 };
            store.add(format!("{prefix}.b_{g}"), Matrix::filled(1, hidden_dim, init))
        });
        Self { input_dim, hidden_dim, gates, biases }
    }

    pub fn gate_flops(&self, store: &ParamStore, gate: &GateWeight) -> u64 {
        let w = self.input_dim + self.hidden_dim;
        match gate {
            GateWeight::Dense(id) => match &store.get(*id).mask {
                Some(m) => 2 * m.kept() as u64,
                None => dense_flops(w, self.hidden_dim),
            },
            GateWeight::Factored { rank, .. } => factored_flops(w, self.hidden_dim, *rank),
        }
    }

    /// FLOPs of one `lstm_step`: gate products, bias adds and activations,
    /// then `c = f⊙c + i⊙g` (3 per unit), `tanh(c)` and `o⊙tanh(c)`.
    pub fn flops(&self, store: &ParamStore) -> u64 {
        let h = self.hidden_dim as u64;
        let gates: u64 = self.gates.iter().map(|g| self.gate_flops(store, g)).sum();
        gates + 4 * 2 * h + 5 * h
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundCell> {
        let mut gates = Vec::with_capacity(4);
        for g in &self.gates {
            gates.push(match g {
                GateWeight::Dense(id) => {
                    let w = tape.param(store, *id);
                    match &store.get(*id).mask {
                        Some(m) => BoundGate::Masked(w, m.clone()),
                        None => BoundGate::Dense(w),
                    }
                }
                GateWeight::Factored { p1, p2, rank } => {
                    let p1 = tape.param(store, *p1);
                    let p2 = tape.param(store, *p2);
                    let p2 = tape.slice_cols(p2, 0, *rank)?;
                    let p1 = tape.slice_cols(p1, 0, *rank)?;
                    let p1t = tape.transpose(p1)?;
                    BoundGate::Factored { p2, p1t }
                }
            });
        }
        let biases = self.biases.iter().map(|b| tape.param(store, *b)).collect();
        Ok(BoundCell { hidden_dim: self.hidden_dim, input_dim: self.input_dim, gates, biases })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for g in &self.gates {
            match g {
                GateWeight::Dense(id) => ids.push(*id),
                GateWeight::Factored { p1, p2, .. } => ids.extend([*p1, *p2]),
            }
        }
        ids.extend(self.biases);
        ids
    }
}

impl BoundCell {
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn gate(&self, tape: &mut Tape, k: usize, xh: Var) -> Result<Var> {
        let z = match &self.gates[k] {
            BoundGate::Dense(w) => tape.matmul(xh, *w)?,
            BoundGate::Masked(w, m) => tape.masked_matmul(xh, *w, m.clone())?,
            BoundGate::Factored { p2, p1t } => {
                let low = tape.matmul(xh, *p2)?;
                tape.matmul(low, *p1t)?
            }
        };
        tape.add(z, self.biases[k])
    }
}

/// One LSTM time step.
pub fn lstm_step(tape: &mut Tape, cell: &BoundCell, x: Var, prev: LstmState) -> Result<LstmState> {
    let xd = tape.value(x).cols();
    if xd != cell.input_dim || tape.value(prev.h).cols() != cell.hidden_dim {
        return Err(shape_err(
            "lstm_step",
            format!("input {xd} vs {}, hidden {}", cell.input_dim, cell.hidden_dim),
        ));
    }
    let xh = tape.concat_cols(&[x, prev.h])?;
    let i = cell.gate(tape, 0, xh)?;
    let i = tape.sigmoid(i)?;
    let f = cell.gate(tape, 1, xh)?;
    let f = tape.sigmoid(f)?;
    let g = cell.gate(tape, 2, xh)?;
    let g = tape.tanh(g)?;
    let o = cell.gate(tape, 3, xh)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, prev.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedLstm {
    pub layers: Vec<LstmCell>,
}

pub struct BoundStack {
    pub layers: Vec<BoundCell>,
}

impl StackedLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_dim } else { hidden_dim };
                LstmCell::new(store, &format!("{prefix}.l{l}"), d, hidden_dim, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map(|l| l.hidden_dim).unwrap_or(0)
    }

    pub fn flops(&self, store: &ParamStore) -> u64 {
        self.layers.iter().map(|l| l.flops(store)).sum()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundStack> {
        let layers = self.layers.iter().map(|l| l.bind(tape, store)).collect::<Result<_>>()?;
        Ok(BoundStack { layers })
    }

    pub fn zero_states(&self, tape: &mut Tape) -> Vec<LstmState> {
        self.layers.iter().map(|l| LstmState::zeros(tape, l.hidden_dim)).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

impl BoundStack {
    /// Advances every layer by one frame; returns the new per-layer states.
    pub fn step(&self, tape: &mut Tape, x: Var, states: &[LstmState]) -> Result<Vec<LstmState>> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (cell, prev) in self.layers.iter().zip(states) {
            let s = lstm_step(tape, cell, input, *prev)?;
            input = s.h;
            out.push(s);
        }
        Ok(out)
    }
}

/// Runs the stack over a sequence and returns the top-layer `h` per frame.
pub fn stacked_forward(
    tape: &mut Tape,
    stack: &BoundStack,
    xs: &[Var],
    init: Vec<LstmState>,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(crate::Error::InvalidArgument("empty input sequence".into()));
    }
    let mut states = init;
    let mut outs = Vec::with_capacity(xs.len());
    for &x in xs {
        states = stack.step(tape, x, &states)?;
        outs.push(states.last().expect("non-empty stack").h);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fill(store: &mut ParamStore, cell: &LstmCell, w: f64, b: f64) {
        for id in cell.param_ids() {
            let p = store.get_mut(id);
            let v = if p.name.contains(".b_") { b } else { w };
            p.value.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    #[test]
    fn zero_weights_give_zero_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng);
        fill(&mut store, &cell, 0.0, 0.0);
        let mut t = Tape::new();
        let b = cell.bind(&mut t, &store).unwrap();
        let x = t.row(vec![0.3, -2.0, 5.0]);
        let s0 = LstmState::zeros(&mut t, 4);
        let s = lstm_step(&mut t, &b, x, s0).unwrap();
        assert!(t.value(s.h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_unit_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 1, 1, &mut rng);
        fill(&mut store, &cell, 0.5, 0.0);
        let mut t = Tape::new();
        let b = cell.bind(&mut t, &store).unwrap();
        let x = t.row(vec![1.0]);
        let s0 = LstmState::zeros(&mut t, 1);
        let s = lstm_step(&mut t, &b, x, s0).unwrap();
        let c = sigmoid(0.5) * 0.5f64.tanh();
        let h = sigmoid(0.5) * c.tanh();
        assert!((t.value(s.c).item() - c).abs() < 1e-15);
        assert!((t.value(s.h).item() - h).abs() < 1e-15);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng);
        assert!(store.value(cell.biases[1]).data().iter().all(|v| *v == 1.0));
        assert!(store.value(cell.biases[0]).data().iter().all(|v| *v == 0.0));
        let bound = 1.0 / 5f64.sqrt();
        for g in &cell.gates {
            let GateWeight::Dense(id) = g else { panic!() };
            assert_eq!(store.value(*id).shape(), (5, 3));
            assert!(store.value(*id).data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn analytic_flops_match_tape_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 5, 7, &mut rng);
        let mut t = Tape::new();
        let b = cell.bind(&mut t, &store).unwrap();
        let x = t.row(vec![0.1; 5]);
        let s0 = LstmState::zeros(&mut t, 7);
        t.reset_flops();
        lstm_step(&mut t, &b, x, s0).unwrap();
        assert_eq!(t.flops(), cell.flops(&store));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 5, 7, &mut rng);
        let mut t = Tape::new();
        let b = cell.bind(&mut t, &store).unwrap();
        let x = t.row(vec![0.1; 4]);
        let s0 = LstmState::zeros(&mut t, 7);
        assert!(lstm_step(&mut t, &b, x, s0).is_err());
    }

    #[test]
    fn stacked_forward_threads_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let stack = StackedLstm::new(&mut store, "s", 3, 4, 2, &mut rng);
        let mut t = Tape::new();
        let b = stack.bind(&mut t, &store).unwrap();
        let xs: Vec<Var> = (0..5).map(|i| t.row(vec![i as f64 * 0.1; 3])).collect();
        let init = stack.zero_states(&mut t);
        let out = stacked_forward(&mut t, &b, &xs, init).unwrap();
        assert_eq!(out.len(), 5);
        assert_ne!(t.value(out[3]).data(), t.value(out[4]).data());
        let init = stack.zero_states(&mut t);
        assert!(stacked_forward(&mut t, &b, &[], init).is_err());
    }
}
