//! The amortized recurrent layer: parallel LSTM branches of different cost,
//! a small recurrent arbitrator that picks a branch per frame, a
//! Gumbel-Softmax sampler, and the state combiner.
//!
//! Training runs every branch and mixes their states with the soft decision
//! `d_t`; at run time exactly one branch executes. Each step also emits the
//! frame's compute cost `q_t` in FLOPs: the decision-weighted branch cost
//! plus the arbitrator's own cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{BoundStack, GateWeight, LstmCell, LstmState, StackedLstm, GATES};
use crate::compression::{rank_for_compression, svd_factorize, Mask};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{argmax, log_softmax, softmax, uniform_init, Matrix, ParamId, ParamStore, Tape, Var};

/// Upper bound on the arbitrator's share of encoder parameters and FLOPs.
pub const ARBITRATOR_BUDGET: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbitratorConfig {
    pub layers: usize,
    pub units: usize,
    /// Feed the previous combined top-layer `h` into the arbitrator.
    pub use_prev_state: bool,
    /// Feed the previous decision vector into the arbitrator.
    pub use_prev_decision: bool,
}

impl Default for ArbitratorConfig {
    fn default() -> Self {
        Self { layers: 2, units: 128, use_prev_state: false, use_prev_decision: true }
    }
}

impl ArbitratorConfig {
    pub fn input_dim(&self, feature_dim: usize, state_dim: usize, branches: usize) -> usize {
        feature_dim
            + if self.use_prev_state { state_dim } else { 0 }
            + if self.use_prev_decision { branches } else { 0 }
    }

    /// Parameter count without instantiating anything.
    pub fn param_count(&self, feature_dim: usize, state_dim: usize, branches: usize) -> usize {
        let mut d = self.input_dim(feature_dim, state_dim, branches);
        let mut n = 0;
        for _ in 0..self.layers {
            n += lstm_param_count(d, self.units);
            d = self.units;
        }
        n + self.units * branches + branches
    }

    pub fn flops(&self, feature_dim: usize, state_dim: usize, branches: usize) -> u64 {
        let mut d = self.input_dim(feature_dim, state_dim, branches);
        let mut f = 0;
        for _ in 0..self.layers {
            f += lstm_dense_flops(d, self.units);
            d = self.units;
        }
        f + 2 * (self.units * branches) as u64 + branches as u64
    }
}

pub fn lstm_param_count(input_dim: usize, hidden_dim: usize) -> usize {
    4 * (input_dim + hidden_dim) * hidden_dim + 4 * hidden_dim
}

pub fn lstm_dense_flops(input_dim: usize, hidden_dim: usize) -> u64 {
    let h = hidden_dim as u64;
    4 * 2 * ((input_dim + hidden_dim) as u64) * h + 8 * h + 5 * h
}

/// Small recurrent network producing per-frame branch logits `k_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arbitrator {
    pub config: ArbitratorConfig,
    pub stack: StackedLstm,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub feature_dim: usize,
    pub state_dim: usize,
    pub branches: usize,
}

pub struct BoundArbitrator {
    stack: BoundStack,
    proj_w: Var,
    proj_b: Var,
    use_prev_state: bool,
    use_prev_decision: bool,
}

impl Arbitrator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: ArbitratorConfig,
        feature_dim: usize,
        state_dim: usize,
        branches: usize,
        rng: &mut R,
    ) -> Self {
        let input = config.input_dim(feature_dim, state_dim, branches);
        let stack =
            StackedLstm::new(store, &format!("{prefix}.lstm"), input, config.units, config.layers, rng);
        let proj_w = store.add(
            format!("{prefix}.proj_w"),
            uniform_init(config.units, branches, config.units, rng),
        );
        let proj_b = store.add(format!("{prefix}.proj_b"), Matrix::zeros(1, branches));
        Self { config, stack, proj_w, proj_b, feature_dim, state_dim, branches }
    }

    pub fn flops(&self, store: &ParamStore) -> u64 {
        self.stack.flops(store) + 2 * (self.config.units * self.branches) as u64 + self.branches as u64
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stack.param_ids();
        ids.extend([self.proj_w, self.proj_b]);
        ids
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundArbitrator> {
        Ok(BoundArbitrator {
            stack: self.stack.bind(tape, store)?,
            proj_w: tape.param(store, self.proj_w),
            proj_b: tape.param(store, self.proj_b),
            use_prev_state: self.config.use_prev_state,
            use_prev_decision: self.config.use_prev_decision,
        })
    }
}

/// Computes branch logits for one frame and advances the arbitrator state.
pub fn arbitrate(
    tape: &mut Tape,
    arb: &BoundArbitrator,
    x: Var,
    h_prev: Option<Var>,
    d_prev: Option<Var>,
    states: &[LstmState],
) -> Result<(Var, Vec<LstmState>)> {
    let mut parts = vec![x];
    if arb.use_prev_state {
        parts.push(h_prev.ok_or_else(|| shape_err("arbitrate", "previous state required"))?);
    }
    if arb.use_prev_decision {
        parts.push(d_prev.ok_or_else(|| shape_err("arbitrate", "previous decision required"))?);
    }
    let input = if parts.len() == 1 { x } else { tape.concat_cols(&parts)? };
    let states = arb.stack.step(tape, input, states)?;
    let top = states.last().expect("arbitrator has layers").h;
    let z = tape.matmul(top, arb.proj_w)?;
    let logits = tape.add(z, arb.proj_b)?;
    Ok((logits, states))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Gumbel-Softmax relaxation, used while training the arbitrator.
    Soft,
    /// Hard argmax of the arbitrator's distribution, used at run time.
    OneHot,
    /// Decisions supplied by the caller (curriculum sampling).
    Forced,
}

#[derive(Clone, Debug)]
pub struct GumbelSampler {
    pub tau: f64,
    pub mode: SamplerMode,
    rng: ChaCha8Rng,
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `d_n = exp((log π_n + g_n)/τ) / Σ_j exp((log π_j + g_j)/τ)` with
/// `π = softmax(k)`.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if logits.len() != noise.len() {
        return Err(shape_err("gumbel_softmax", "noise length differs from logits"));
    }
    let z: Vec<f64> =
        log_softmax(logits).iter().zip(noise).map(|(lp, g)| (lp + g) / tau).collect();
    Ok(softmax(&z))
}

/// Tape version of [`gumbel_softmax`]; differentiable w.r.t. `logits`.
pub fn gumbel_softmax_sample(tape: &mut Tape, logits: Var, tau: f64, noise: &[f64]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let lp = tape.log_softmax(logits)?;
    let g = tape.row(noise.to_vec());
    let z = tape.add(lp, g)?;
    let z = tape.scale(z, 1.0 / tau)?;
    tape.softmax(z)
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

impl GumbelSampler {
    pub fn new(tau: f64, mode: SamplerMode, seed: u64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        Ok(Self { tau, mode, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Turns logits into the decision vector `d_t` for the current mode.
    pub fn sample(&mut self, tape: &mut Tape, logits: Var, forced: Option<usize>) -> Result<Var> {
        let n = tape.value(logits).cols();
        match (self.mode, forced) {
            (_, Some(k)) => {
                if k >= n {
                    return Err(Error::InvalidArgument(format!("branch {k} of {n}")));
                }
                Ok(tape.row(one_hot(n, k)))
            }
            (SamplerMode::Forced, None) => {
                Err(Error::InvalidArgument("forced sampler needs a decision".into()))
            }
            (SamplerMode::OneHot, None) => {
                let k = argmax(tape.value(logits).data());
                Ok(tape.row(one_hot(n, k)))
            }
            (SamplerMode::Soft, None) => {
                let g = gumbel_noise(&mut self.rng, n);
                gumbel_softmax_sample(tape, logits, self.tau, &g)
            }
        }
    }
}

/// `{h, c} = Σ_n d(n) {h_n, c_n}`, layer by layer.
pub fn combine_states(
    tape: &mut Tape,
    d: Var,
    branch_states: &[Vec<LstmState>],
) -> Result<Vec<LstmState>> {
    let n = tape.value(d).cols();
    if branch_states.len() != n {
        return Err(shape_err("combine_states", format!("{} branches, d of {n}", branch_states.len())));
    }
    let layers = branch_states[0].len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let hs: Vec<Var> = branch_states.iter().map(|b| b[l].h).collect();
        let cs: Vec<Var> = branch_states.iter().map(|b| b[l].c).collect();
        let hs = tape.concat_rows(&hs)?;
        let cs = tape.concat_rows(&cs)?;
        let h = tape.matmul(d, hs)?;
        let c = tape.matmul(d, cs)?;
        out.push(LstmState { h, c });
    }
    Ok(out)
}

/// `Σ_n d(n) cost_n + arbitrator_cost`.
pub fn frame_cost(branch_costs: &[f64], arbitrator_cost: f64, d: &[f64]) -> f64 {
    let mut q = 0.0;
    for (dn, c) in d.iter().zip(branch_costs) {
        q += dn * c;
    }
    q + arbitrator_cost
}

/// How the training-time cost `q_t` depends on the soft decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostRelaxation {
    /// `q_t` uses the soft `d_t` (expected cost).
    #[default]
    Expected,
    /// `q_t` uses the argmax one-hot forward, soft gradient backward.
    StraightThrough,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmRnnLayer {
    pub branches: Vec<StackedLstm>,
    pub arbitrator: Arbitrator,
    /// Gate frame `t` with `d_{t-1}` instead of `d_t`.
    pub decision_lag: bool,
    pub cost_relaxation: CostRelaxation,
}

/// Recurrent state carried between frames.
#[derive(Clone, Debug)]
pub struct AmState {
    pub layers: Vec<LstmState>,
    pub arbitrator: Vec<LstmState>,
    pub d_prev: Var,
    /// Whether `d_prev` is a real decision rather than the initial zeros.
    pub has_prev: bool,
}

pub struct BoundAmRnn {
    branches: Vec<BoundStack>,
    arbitrator: BoundArbitrator,
    branch_costs: Vec<f64>,
    arbitrator_cost: f64,
    cost_column: Matrix,
    hidden_dim: usize,
    num_layers: usize,
    arb_units: Vec<usize>,
    decision_lag: bool,
    cost_relaxation: CostRelaxation,
}

pub struct TrainStep {
    pub state: AmState,
    pub d: Var,
    pub q: Var,
    pub logits: Var,
}

pub struct RuntimeStep {
    pub state: AmState,
    pub branch: usize,
    pub q: f64,
    pub logits: Vec<f64>,
}

impl AmRnnLayer {
    /// Independent dense branches (each with all-ones masks when `masked`).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        num_branches: usize,
        arbitrator: ArbitratorConfig,
        masked: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_branches < 2 {
            return Err(Error::InvalidArgument("an amortized layer needs at least 2 branches".into()));
        }
        let branches: Vec<StackedLstm> = (0..num_branches)
            .map(|b| {
                StackedLstm::new(store, &format!("{prefix}.b{b}"), input_dim, hidden_dim, num_layers, rng)
            })
            .collect();
        if masked {
            for stack in &branches {
                attach_full_masks(store, stack);
            }
        }
        let arbitrator = Arbitrator::new(
            store,
            &format!("{prefix}.arb"),
            arbitrator,
            input_dim,
            hidden_dim,
            num_branches,
            rng,
        );
        Ok(Self { branches, arbitrator, decision_lag: false, cost_relaxation: CostRelaxation::Expected })
    }

    /// Branches that copy the weights of `dense` (living in `src`) and start
    /// with all-ones masks.
    pub fn sparse_from_dense<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        src: &ParamStore,
        dense: &StackedLstm,
        num_branches: usize,
        arbitrator: ArbitratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::new(
            store,
            prefix,
            dense.input_dim(),
            dense.hidden_dim(),
            dense.layers.len(),
            num_branches,
            arbitrator,
            true,
            rng,
        )?;
        for stack in &mut layer.branches {
            for (dst, from) in stack.layers.iter().zip(&dense.layers) {
                for (a, b) in dst.param_ids().into_iter().zip(from.param_ids()) {
                    store.get_mut(a).value = src.value(b).clone();
                }
            }
        }
        attach_all(store, &layer.branches);
        Ok(layer)
    }

    /// Branches sharing one factor pair per gate matrix, sized for
    /// `ranks[branch][layer]` and zero-initialised (the arbitrator is
    /// freshly initialised).
    pub fn factorized_shell<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        ranks: &[Vec<usize>],
        arbitrator: ArbitratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if ranks.len() < 2 {
            return Err(Error::InvalidArgument("an amortized layer needs at least 2 branches".into()));
        }
        let num_layers = ranks[0].len();
        if num_layers == 0 || ranks.iter().any(|r| r.len() != num_layers) {
            return Err(Error::InvalidArgument("every branch needs one rank per layer".into()));
        }
        let mut branches: Vec<StackedLstm> =
            (0..ranks.len()).map(|_| StackedLstm { layers: Vec::new() }).collect();
        for l in 0..num_layers {
            let in_dim = if l == 0 { input_dim } else { hidden_dim };
            let max_rank = ranks.iter().map(|r| r[l]).max().expect("non-empty");
            if ranks.iter().any(|r| r[l] == 0) || max_rank > hidden_dim.min(in_dim + hidden_dim) {
                return Err(Error::InvalidArgument(format!("layer {l} ranks out of range")));
            }
            let shared: Vec<(ParamId, ParamId)> = GATES
                .iter()
                .map(|gname| {
                    let p1 = store.add(format!("{prefix}.l{l}.p1_{gname}"), Matrix::zeros(hidden_dim, max_rank));
                    let p2 = store
                        .add(format!("{prefix}.l{l}.p2_{gname}"), Matrix::zeros(in_dim + hidden_dim, max_rank));
                    (p1, p2)
                })
                .collect();
            for (b, stack) in branches.iter_mut().enumerate() {
                let gates = [0, 1, 2, 3].map(|g| GateWeight::Factored {
                    p1: shared[g].0,
                    p2: shared[g].1,
                    rank: ranks[b][l],
                });
                let biases = [0, 1, 2, 3].map(|g| {
                    store.add(format!("{prefix}.b{b}.l{l}.b_{}", GATES[g]), Matrix::zeros(1, hidden_dim))
                });
                stack.layers.push(LstmCell { input_dim: in_dim, hidden_dim, gates, biases });
            }
        }
        let arbitrator = Arbitrator::new(
            store,
            &format!("{prefix}.arb"),
            arbitrator,
            input_dim,
            hidden_dim,
            ranks.len(),
            rng,
        );
        Ok(Self { branches, arbitrator, decision_lag: false, cost_relaxation: CostRelaxation::Expected })
    }

    /// Branches sharing one truncated-SVD factorisation of every gate
    /// matrix of `dense`; branch `n` keeps the leading columns needed for
    /// `compressions[n]` FLOP reduction. Biases are copied per branch.
    pub fn factorized_from_dense<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        src: &ParamStore,
        dense: &StackedLstm,
        compressions: &[f64],
        arbitrator: ArbitratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ranks = factor_ranks(dense, compressions)?;
        let layer = Self::factorized_shell(
            store,
            prefix,
            dense.input_dim(),
            dense.hidden_dim(),
            &ranks,
            arbitrator,
            rng,
        )?;
        for (l, cell) in dense.layers.iter().enumerate() {
            for g in 0..4 {
                let GateWeight::Dense(id) = cell.gates[g] else {
                    return Err(Error::InvalidArgument("source stack must be dense".into()));
                };
                let GateWeight::Factored { p1, p2, .. } = layer.branches[0].layers[l].gates[g] else {
                    unreachable!("shell gates are factored")
                };
                let rank = store.value(p1).cols();
                // the stored matrix maps rows to rows; factor its transpose
                let fp = svd_factorize(&src.value(id).transpose(), rank)?;
                store.get_mut(p1).value = fp.p1;
                store.get_mut(p2).value = fp.p2;
            }
            for stack in &layer.branches {
                for g in 0..4 {
                    store.get_mut(stack.layers[l].biases[g]).value = src.value(cell.biases[g]).clone();
                }
            }
        }
        Ok(layer)
    }

    /// Effective rank per branch and layer.
    pub fn ranks(&self) -> Option<Vec<Vec<usize>>> {
        self.branches
            .iter()
            .map(|s| {
                s.layers
                    .iter()
                    .map(|c| match c.gates[0] {
                        GateWeight::Factored { rank, .. } => Some(rank),
                        GateWeight::Dense(_) => None,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.branches[0].hidden_dim()
    }

    pub fn branch_costs(&self, store: &ParamStore) -> Vec<u64> {
        self.branches.iter().map(|b| b.flops(store)).collect()
    }

    pub fn arbitrator_cost(&self, store: &ParamStore) -> u64 {
        self.arbitrator.flops(store)
    }

    /// Distinct parameters owned by the branches (shared factors counted
    /// once).
    pub fn branch_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.branches.iter().flat_map(|b| b.param_ids()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// `shared_cost` is added to every branch (e.g. an output projection
    /// that always runs after the combiner).
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, shared_cost: u64) -> Result<BoundAmRnn> {
        let branch_costs: Vec<f64> =
            self.branch_costs(store).into_iter().map(|c| (c + shared_cost) as f64).collect();
        let cost_column = Matrix::new(branch_costs.len(), 1, branch_costs.clone())?;
        Ok(BoundAmRnn {
            branches: self.branches.iter().map(|b| b.bind(tape, store)).collect::<Result<_>>()?,
            arbitrator: self.arbitrator.bind(tape, store)?,
            branch_costs,
            arbitrator_cost: self.arbitrator_cost(store) as f64,
            cost_column,
            hidden_dim: self.hidden_dim(),
            num_layers: self.branches[0].layers.len(),
            arb_units: self.arbitrator.stack.layers.iter().map(|l| l.hidden_dim).collect(),
            decision_lag: self.decision_lag,
            cost_relaxation: self.cost_relaxation,
        })
    }
}

/// `ranks[branch][layer]` reaching each branch's FLOP-reduction target on
/// every gate matrix of `dense`.
pub fn factor_ranks(dense: &StackedLstm, compressions: &[f64]) -> Result<Vec<Vec<usize>>> {
    compressions
        .iter()
        .map(|&c| {
            dense
                .layers
                .iter()
                .map(|cell| rank_for_compression(cell.hidden_dim, cell.input_dim + cell.hidden_dim, c))
                .collect()
        })
        .collect()
}

fn attach_full_masks(store: &mut ParamStore, stack: &StackedLstm) {
    for cell in &stack.layers {
        for g in &cell.gates {
            if let GateWeight::Dense(id) = g {
                let (r, c) = store.value(*id).shape();
                store.set_mask(*id, Mask::ones(r, c));
            }
        }
    }
}

fn attach_all(store: &mut ParamStore, stacks: &[StackedLstm]) {
    for s in stacks {
        attach_full_masks(store, s);
    }
}

impl BoundAmRnn {
    pub fn branch_costs(&self) -> &[f64] {
        &self.branch_costs
    }

    pub fn arbitrator_cost(&self) -> f64 {
        self.arbitrator_cost
    }

    pub fn num_branches(&self) -> usize {
        self.branch_costs.len()
    }

    pub fn decision_lag(&self) -> bool {
        self.decision_lag
    }

    pub fn initial_state(&self, tape: &mut Tape) -> AmState {
        let layers = (0..self.num_layers).map(|_| LstmState::zeros(tape, self.hidden_dim)).collect();
        let arbitrator = self.arb_units.iter().map(|&u| LstmState::zeros(tape, u)).collect();
        let d_prev = tape.row(vec![0.0; self.num_branches()]);
        AmState { layers, arbitrator, d_prev, has_prev: false }
    }

    fn arbitrate(&self, tape: &mut Tape, x: Var, prev: &AmState) -> Result<(Var, Vec<LstmState>)> {
        let h_prev = prev.layers.last().map(|s| s.h);
        arbitrate(tape, &self.arbitrator, x, h_prev, Some(prev.d_prev), &prev.arbitrator)
    }

    fn q_var(&self, tape: &mut Tape, gate: Var) -> Result<Var> {
        let gate = match self.cost_relaxation {
            CostRelaxation::Expected => gate,
            CostRelaxation::StraightThrough => tape.straight_through_one_hot(gate)?,
        };
        let costs = tape.constant(self.cost_column.clone());
        let q = tape.matmul(gate, costs)?;
        let arb = tape.row(vec![self.arbitrator_cost]);
        tape.add(q, arb)
    }
}

/// Training step: every branch runs, states are mixed by `d_t`, and `q_t`
/// is the decision-weighted cost.
pub fn amrnn_step_train(
    tape: &mut Tape,
    layer: &BoundAmRnn,
    sampler: &mut GumbelSampler,
    x: Var,
    prev: &AmState,
    forced: Option<usize>,
) -> Result<TrainStep> {
    let (logits, arb_states) = layer.arbitrate(tape, x, prev)?;
    let d = sampler.sample(tape, logits, forced)?;
    let gate = if layer.decision_lag && prev.has_prev { prev.d_prev } else { d };
    let mut outs = Vec::with_capacity(layer.branches.len());
    for b in &layer.branches {
        outs.push(b.step(tape, x, &prev.layers)?);
    }
    let layers = combine_states(tape, gate, &outs)?;
    let q = layer.q_var(tape, gate)?;
    Ok(TrainStep {
        state: AmState { layers, arbitrator: arb_states, d_prev: d, has_prev: true },
        d,
        q,
        logits,
    })
}

/// Run-time step: the arbitrator's argmax (or `forced`) picks one branch and
/// only that branch executes.
pub fn amrnn_step_runtime(
    tape: &mut Tape,
    layer: &BoundAmRnn,
    x: Var,
    prev: &AmState,
    forced: Option<usize>,
) -> Result<RuntimeStep> {
    let (logits, arb_states) = layer.arbitrate(tape, x, prev)?;
    let logit_values = tape.value(logits).data().to_vec();
    let n = layer.num_branches();
    let chosen = match forced {
        Some(k) if k >= n => return Err(Error::InvalidArgument(format!("branch {k} of {n}"))),
        Some(k) => k,
        None => argmax(&logit_values),
    };
    let gate = if layer.decision_lag && prev.has_prev {
        argmax(tape.value(prev.d_prev).data())
    } else {
        chosen
    };
    let layers = layer.branches[gate].step(tape, x, &prev.layers)?;
    let q = layer.branch_costs[gate] + layer.arbitrator_cost;
    let d_prev = tape.row(one_hot(n, chosen));
    Ok(RuntimeStep {
        state: AmState { layers, arbitrator: arb_states, d_prev, has_prev: true },
        branch: gate,
        q,
        logits: logit_values,
    })
}

/// Per-frame arbitration record for one utterance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionSequence {
    /// Decision vectors (soft in training, one-hot at run time).
    pub decisions: Vec<Vec<f64>>,
    /// Branch index governing each frame.
    pub branches: Vec<usize>,
    /// Realised per-frame cost in FLOPs.
    pub costs: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

impl DecisionSequence {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn push(&mut self, decision: Vec<f64>, branch: usize, cost: f64, logits: Vec<f64>) {
        self.decisions.push(decision);
        self.branches.push(branch);
        self.costs.push(cost);
        self.logits.push(logits);
    }

    /// Fraction of frames routed to each branch.
    pub fn branch_counts(&self, num_branches: usize) -> Vec<usize> {
        let mut counts = vec![0; num_branches];
        for &b in &self.branches {
            counts[b] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(seed: u64, lag: bool) -> (ParamStore, AmRnnLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = ArbitratorConfig { layers: 1, units: 3, use_prev_state: true, use_prev_decision: true };
        let mut l = AmRnnLayer::new(&mut store, "enc", 4, 5, 2, 2, cfg, false, &mut rng).unwrap();
        l.decision_lag = lag;
        (store, l)
    }

    #[test]
    fn gumbel_softmax_is_on_simplex() {
        let d = gumbel_softmax(&[0.3, -1.0, 2.0], 0.7, &[0.1, 1.5, -0.4]).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn low_temperature_is_hard() {
        let k = [0.3, 0.1, 0.2];
        let g = [0.0, 0.5, 0.05];
        let d = gumbel_softmax(&k, 1e-6, &g).unwrap();
        let lp = log_softmax(&k);
        let target = argmax(&[lp[0] + g[0], lp[1] + g[1], lp[2] + g[2]]);
        assert_eq!(d, one_hot(3, target));
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        assert!(gumbel_softmax(&[0.0, 0.0], 0.0, &[0.0, 0.0]).is_err());
        assert!(GumbelSampler::new(-1.0, SamplerMode::Soft, 0).is_err());
    }

    #[test]
    fn combine_midpoint_and_one_hot() {
        let mut t = Tape::new();
        let s1 = LstmState { h: t.row(vec![2.0]), c: t.row(vec![-1.0]) };
        let s2 = LstmState { h: t.row(vec![4.0]), c: t.row(vec![1.0]) };
        let d = t.row(vec![0.5, 0.5]);
        let out = combine_states(&mut t, d, &[vec![s1], vec![s2]]).unwrap();
        assert_eq!(t.value(out[0].h).item(), 3.0);
        assert_eq!(t.value(out[0].c).item(), 0.0);
        let d = t.row(vec![0.0, 1.0]);
        let out = combine_states(&mut t, d, &[vec![s1], vec![s2]]).unwrap();
        assert_eq!(t.value(out[0].h).item(), 4.0);
        let d = t.row(vec![1.0, 0.0, 0.0]);
        assert!(combine_states(&mut t, d, &[vec![s1], vec![s2]]).is_err());
    }

    #[test]
    fn zero_arbitrator_gives_uniform_logits() {
        let (mut store, l) = layer(1, false);
        for id in l.arbitrator.param_ids() {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let b = l.bind(&mut t, &store, 0).unwrap();
        let s = b.initial_state(&mut t);
        let x = t.row(vec![1.0, -2.0, 3.0, 0.5]);
        let step = amrnn_step_runtime(&mut t, &b, x, &s, None).unwrap();
        assert_eq!(step.logits, vec![0.0, 0.0]);
    }

    #[test]
    fn train_and_runtime_agree_on_one_hot() {
        for lag in [false, true] {
            let (store, l) = layer(2, lag);
            let mut t = Tape::new();
            let b = l.bind(&mut t, &store, 17).unwrap();
            let mut sampler = GumbelSampler::new(1.0, SamplerMode::Forced, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut st = b.initial_state(&mut t);
            let mut sr = b.initial_state(&mut t);
            for _ in 0..20 {
                let k = rng.gen_range(0..2);
                let x = t.row((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let a = amrnn_step_train(&mut t, &b, &mut sampler, x, &st, Some(k)).unwrap();
                let r = amrnn_step_runtime(&mut t, &b, x, &sr, Some(k)).unwrap();
                for (sa, sb) in a.state.layers.iter().zip(&r.state.layers) {
                    assert_eq!(t.value(sa.h).data(), t.value(sb.h).data());
                    assert_eq!(t.value(sa.c).data(), t.value(sb.c).data());
                }
                assert_eq!(t.value(a.q).item(), r.q);
                st = a.state;
                sr = r.state;
            }
        }
    }

    #[test]
    fn frame_cost_weights_branches() {
        assert_eq!(frame_cost(&[100.0, 20.0], 5.0, &[0.25, 0.75]), 45.0);
        assert_eq!(frame_cost(&[100.0, 20.0], 5.0, &[0.0, 1.0]), 25.0);
    }

    #[test]
    fn arbitrator_analytic_counts_match_instance() {
        let (store, l) = layer(4, false);
        let cfg = l.arbitrator.config;
        let ids = l.arbitrator.param_ids();
        let n: usize = ids.iter().map(|id| store.value(*id).len()).sum();
        assert_eq!(n, cfg.param_count(4, 5, 2));
        assert_eq!(l.arbitrator_cost(&store), cfg.flops(4, 5, 2));
    }

    #[test]
    fn factorized_branches_share_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut src = ParamStore::new();
        let dense = StackedLstm::new(&mut src, "d", 6, 8, 2, &mut rng);
        let mut store = ParamStore::new();
        let cfg = ArbitratorConfig { layers: 1, units: 2, use_prev_state: false, use_prev_decision: true };
        let l = AmRnnLayer::factorized_from_dense(&mut store, "enc", &src, &dense, &[0.35, 0.6], cfg, &mut rng)
            .unwrap();
        let costs = l.branch_costs(&store);
        assert!(costs[0] > costs[1]);
        let GateWeight::Factored { p1: a, rank: ra, .. } = l.branches[0].layers[0].gates[0] else { panic!() };
        let GateWeight::Factored { p1: b, rank: rb, .. } = l.branches[1].layers[0].gates[0] else { panic!() };
        assert_eq!(a, b);
        assert!(ra > rb);
    }
}
