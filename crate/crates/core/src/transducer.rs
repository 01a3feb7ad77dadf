//! A small recurrent transducer: an encoder over feature frames (dense or
//! amortized), a prediction network over previous labels, and a
//! parameter-free additive joint followed by a log-softmax over the
//! vocabulary. Index 0 is blank.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amortized::{
    amrnn_step_runtime, amrnn_step_train, one_hot, AmRnnLayer, AmState, ArbitratorConfig, BoundAmRnn,
    CostRelaxation, DecisionSequence, GumbelSampler,
};
use crate::cells::{BoundStack, LstmState, StackedLstm};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{argmax, log_softmax, uniform_init, Matrix, ParamId, ParamStore, Tape, Var};

pub const BLANK: usize = 0;
/// Labels a greedy decoder may emit on one frame before moving on.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Output symbols including blank.
    pub vocab_size: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_embed: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_layers", self.encoder_layers),
            ("decoder_embed", self.decoder_embed),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_layers", self.decoder_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !(2..=64).contains(&self.vocab_size) {
            return Err(Error::Config(format!("model.vocab_size {} outside 2..=64", self.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMethod {
    Sparse,
    Factorized,
}

/// Enough structure to rebuild a model before loading its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub config: ModelConfig,
    pub encoder: EncoderDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderDescriptor {
    Dense,
    Sparse {
        branches: usize,
        arbitrator: ArbitratorConfig,
        decision_lag: bool,
        cost_relaxation: CostRelaxation,
    },
    Factorized {
        ranks: Vec<Vec<usize>>,
        arbitrator: ArbitratorConfig,
        decision_lag: bool,
        cost_relaxation: CostRelaxation,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Dense(StackedLstm),
    Amortized { layer: AmRnnLayer, method: CompressionMethod },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{prefix}_w"), uniform_init(input, output, input, rng));
        let b = store.add(format!("{prefix}_b"), Matrix::zeros(1, output));
        Self { w, b }
    }

    pub fn flops(&self, store: &ParamStore) -> u64 {
        let (i, o) = store.value(self.w).shape();
        2 * (i * o) as u64 + o as u64
    }
}

#[derive(Clone, Debug)]
pub struct TransducerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub encoder_out: Linear,
    pub embedding: ParamId,
    pub decoder: StackedLstm,
    pub decoder_out: Linear,
}

/// Encoder compute per frame, in FLOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCosts {
    /// Per branch (one entry for a dense encoder), output projection
    /// included.
    pub branches: Vec<u64>,
    pub arbitrator: u64,
}

pub struct BoundModel {
    encoder: BoundEncoder,
    encoder_out: (Var, Var),
    embedding: Var,
    decoder: BoundStack,
    decoder_layers: Vec<usize>,
    decoder_out: (Var, Var),
    vocab: usize,
}

enum BoundEncoder {
    Dense { stack: BoundStack, hidden: Vec<usize>, cost: f64 },
    Amortized(BoundAmRnn),
}

/// How the encoder routes frames.
pub enum EncodeMode<'a> {
    /// Every branch runs; decisions come from the sampler (or `forced`).
    Train { sampler: &'a mut GumbelSampler, forced: Option<&'a [usize]> },
    /// One branch per frame, the arbitrator's argmax unless `forced`.
    Runtime { forced: Option<&'a [usize]> },
}

pub struct Encoded {
    /// `T × V` encoder logits.
    pub enc: Var,
    /// Per-frame cost as 1×1 tape values.
    pub q: Vec<Var>,
    /// Arbitrator logits per frame (empty for a dense encoder).
    pub logits: Vec<Var>,
    pub decisions: DecisionSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub labels: Vec<usize>,
    pub log_prob: f64,
    pub decisions: DecisionSequence,
}

impl TransducerModel {
    fn skeleton(config: ModelConfig, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> (Linear, ParamId, StackedLstm, Linear) {
        let encoder_out = Linear::new(params, "enc.out", config.encoder_hidden, config.vocab_size, rng);
        let embedding = params.add(
            "dec.embedding",
            uniform_init(config.vocab_size, config.decoder_embed, 1, rng),
        );
        let decoder = StackedLstm::new(
            params,
            "dec.lstm",
            config.decoder_embed,
            config.decoder_hidden,
            config.decoder_layers,
            rng,
        );
        let decoder_out = Linear::new(params, "dec.out", config.decoder_hidden, config.vocab_size, rng);
        (encoder_out, embedding, decoder, decoder_out)
    }

    /// Dense baseline with a plain stacked-LSTM encoder.
    pub fn dense(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stack = StackedLstm::new(
            &mut params,
            "enc.lstm",
            config.feature_dim,
            config.encoder_hidden,
            config.encoder_layers,
            &mut rng,
        );
        let (encoder_out, embedding, decoder, decoder_out) = Self::skeleton(config.clone(), &mut rng, &mut params);
        Ok(Self { config, params, encoder: Encoder::Dense(stack), encoder_out, embedding, decoder, decoder_out })
    }

    /// Amortized model trained from scratch: independent dense branches
    /// carrying all-ones pruning masks.
    pub fn sparse_from_scratch(
        config: ModelConfig,
        branches: usize,
        arbitrator: ArbitratorConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layer = AmRnnLayer::new(
            &mut params,
            "enc",
            config.feature_dim,
            config.encoder_hidden,
            config.encoder_layers,
            branches,
            arbitrator,
            true,
            &mut rng,
        )?;
        let (encoder_out, embedding, decoder, decoder_out) = Self::skeleton(config.clone(), &mut rng, &mut params);
        Ok(Self {
            config,
            params,
            encoder: Encoder::Amortized { layer, method: CompressionMethod::Sparse },
            encoder_out,
            embedding,
            decoder,
            decoder_out,
        })
    }

    /// Builds an amortized model whose branches are compressed copies of a
    /// dense model's encoder. The decoder and both output projections are
    /// copied; the arbitrator is fresh. For the factorized method `targets`
    /// are per-branch FLOP-reduction ratios; the sparse method starts every
    /// branch with all-ones masks.
    pub fn seed_from_dense(
        dense: &TransducerModel,
        method: CompressionMethod,
        targets: &[f64],
        arbitrator: ArbitratorConfig,
        seed: u64,
    ) -> Result<Self> {
        let Encoder::Dense(stack) = &dense.encoder else {
            return Err(Error::InvalidArgument("seeding needs a dense encoder".into()));
        };
        if targets.len() < 2 {
            return Err(Error::InvalidArgument("an amortized layer needs at least 2 branches".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layer = match method {
            CompressionMethod::Sparse => AmRnnLayer::sparse_from_dense(
                &mut params,
                "enc",
                &dense.params,
                stack,
                targets.len(),
                arbitrator,
                &mut rng,
            )?,
            CompressionMethod::Factorized => AmRnnLayer::factorized_from_dense(
                &mut params,
                "enc",
                &dense.params,
                stack,
                targets,
                arbitrator,
                &mut rng,
            )?,
        };
        let (encoder_out, embedding, decoder, decoder_out) =
            Self::skeleton(dense.config.clone(), &mut rng, &mut params);
        let mut model = Self {
            config: dense.config.clone(),
            params,
            encoder: Encoder::Amortized { layer, method },
            encoder_out,
            embedding,
            decoder,
            decoder_out,
        };
        for (id, p) in dense.params.iter() {
            if p.name.starts_with("dec.") || p.name.starts_with("enc.out") {
                let dst = model.params.id(&p.name).expect("shared skeleton");
                model.params.get_mut(dst).value = dense.params.value(id).clone();
            }
        }
        Ok(model)
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        let encoder = match &self.encoder {
            Encoder::Dense(_) => EncoderDescriptor::Dense,
            Encoder::Amortized { layer, method: CompressionMethod::Sparse } => EncoderDescriptor::Sparse {
                branches: layer.num_branches(),
                arbitrator: layer.arbitrator.config,
                decision_lag: layer.decision_lag,
                cost_relaxation: layer.cost_relaxation,
            },
            Encoder::Amortized { layer, method: CompressionMethod::Factorized } => {
                EncoderDescriptor::Factorized {
                    ranks: layer.ranks().expect("factorized layer"),
                    arbitrator: layer.arbitrator.config,
                    decision_lag: layer.decision_lag,
                    cost_relaxation: layer.cost_relaxation,
                }
            }
        };
        ModelDescriptor { config: self.config.clone(), encoder }
    }

    /// Rebuilds the structure described by `desc` with placeholder weights.
    pub fn from_descriptor(desc: &ModelDescriptor) -> Result<Self> {
        let config = desc.config.clone();
        match &desc.encoder {
            EncoderDescriptor::Dense => Self::dense(config, 0),
            EncoderDescriptor::Sparse { branches, arbitrator, decision_lag, cost_relaxation } => {
                let mut m = Self::sparse_from_scratch(config, *branches, *arbitrator, 0)?;
                m.set_decision_lag(*decision_lag);
                m.set_cost_relaxation(*cost_relaxation);
                Ok(m)
            }
            EncoderDescriptor::Factorized { ranks, arbitrator, decision_lag, cost_relaxation } => {
                config.validate()?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut params = ParamStore::new();
                let mut layer = AmRnnLayer::factorized_shell(
                    &mut params,
                    "enc",
                    config.feature_dim,
                    config.encoder_hidden,
                    ranks,
                    *arbitrator,
                    &mut rng,
                )?;
                layer.decision_lag = *decision_lag;
                layer.cost_relaxation = *cost_relaxation;
                let (encoder_out, embedding, decoder, decoder_out) =
                    Self::skeleton(config.clone(), &mut rng, &mut params);
                Ok(Self {
                    config,
                    params,
                    encoder: Encoder::Amortized { layer, method: CompressionMethod::Factorized },
                    encoder_out,
                    embedding,
                    decoder,
                    decoder_out,
                })
            }
        }
    }

    pub fn amortized(&self) -> Option<&AmRnnLayer> {
        match &self.encoder {
            Encoder::Amortized { layer, .. } => Some(layer),
            Encoder::Dense(_) => None,
        }
    }

    pub fn amortized_mut(&mut self) -> Option<&mut AmRnnLayer> {
        match &mut self.encoder {
            Encoder::Amortized { layer, .. } => Some(layer),
            Encoder::Dense(_) => None,
        }
    }

    pub fn set_decision_lag(&mut self, lag: bool) {
        if let Some(l) = self.amortized_mut() {
            l.decision_lag = lag;
        }
    }

    pub fn set_cost_relaxation(&mut self, mode: CostRelaxation) {
        if let Some(l) = self.amortized_mut() {
            l.cost_relaxation = mode;
        }
    }

    pub fn num_branches(&self) -> usize {
        self.amortized().map_or(1, |l| l.num_branches())
    }

    pub fn encoder_costs(&self) -> EncoderCosts {
        let proj = self.encoder_out.flops(&self.params);
        match &self.encoder {
            Encoder::Dense(stack) => {
                EncoderCosts { branches: vec![stack.flops(&self.params) + proj], arbitrator: 0 }
            }
            Encoder::Amortized { layer, .. } => EncoderCosts {
                branches: layer.branch_costs(&self.params).into_iter().map(|c| c + proj).collect(),
                arbitrator: layer.arbitrator_cost(&self.params),
            },
        }
    }

    /// Trainable scalars in the encoder (output projection and arbitrator
    /// included).
    pub fn encoder_param_count(&self) -> usize {
        self.params.count_scalars("enc.")
    }

    pub fn arbitrator_param_count(&self) -> usize {
        self.params.count_scalars("enc.arb.")
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let proj = self.encoder_out.flops(&self.params);
        let encoder = match &self.encoder {
            Encoder::Dense(stack) => BoundEncoder::Dense {
                stack: stack.bind(tape, &self.params)?,
                hidden: stack.layers.iter().map(|l| l.hidden_dim).collect(),
                cost: (stack.flops(&self.params) + proj) as f64,
            },
            Encoder::Amortized { layer, .. } => BoundEncoder::Amortized(layer.bind(tape, &self.params, proj)?),
        };
        Ok(BoundModel {
            encoder,
            encoder_out: (tape.param(&self.params, self.encoder_out.w), tape.param(&self.params, self.encoder_out.b)),
            embedding: tape.param(&self.params, self.embedding),
            decoder: self.decoder.bind(tape, &self.params)?,
            decoder_layers: self.decoder.layers.iter().map(|l| l.hidden_dim).collect(),
            decoder_out: (tape.param(&self.params, self.decoder_out.w), tape.param(&self.params, self.decoder_out.b)),
            vocab: self.config.vocab_size,
        })
    }

    /// Encoder logits (`T × V`) and the run-time decision record.
    pub fn encode_values(&self, frames: &Matrix, forced: Option<&[usize]>) -> Result<(Matrix, DecisionSequence)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = bound.encode(&mut tape, frames, EncodeMode::Runtime { forced })?;
        Ok((tape.value(out.enc).clone(), out.decisions))
    }

    /// Prediction-network logits after consuming blank and `labels`;
    /// `(U+1) × V`.
    pub fn decoder_values(&self, labels: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let dec = bound.predict(&mut tape, labels)?;
        Ok(tape.value(dec).clone())
    }

    /// `log P(labels | frames)` with run-time routing.
    pub fn log_likelihood(&self, frames: &Matrix, labels: &[usize]) -> Result<f64> {
        let (enc, _) = self.encode_values(frames, None)?;
        let dec = self.decoder_values(labels)?;
        Ok(TransducerLattice::new(&enc, &dec, labels)?.log_likelihood())
    }

    /// Negative log-likelihood with run-time routing.
    pub fn transducer_loss(&self, frames: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(-self.log_likelihood(frames, labels)?)
    }

    pub fn greedy_decode(&self, frames: &Matrix) -> Result<Decoded> {
        self.greedy_decode_routed(frames, None)
    }

    /// Greedy decoding with the encoder's branch choices overridden by
    /// `forced` (one index per frame).
    pub fn greedy_decode_routed(&self, frames: &Matrix, forced: Option<&[usize]>) -> Result<Decoded> {
        let (enc, decisions) = self.encode_values(frames, forced)?;
        let mut session = PredictionSession::new(self)?;
        let labels = session.greedy(&enc)?;
        let log_prob = session.score(&enc, &labels)?;
        Ok(Decoded { labels, log_prob, decisions })
    }

    /// Per-frame output entropy along the greedy path (largest over the
    /// decoder states visited on each frame).
    pub fn greedy_frame_entropies(&self, frames: &Matrix) -> Result<Vec<f64>> {
        let (enc, _) = self.encode_values(frames, None)?;
        let mut session = PredictionSession::new(self)?;
        let mut out = Vec::with_capacity(enc.rows());
        session.greedy_traced(&enc, Some(&mut out))?;
        Ok(out)
    }

    pub fn beam_search(&self, frames: &Matrix, width: usize) -> Result<Decoded> {
        if width == 0 {
            return Err(Error::InvalidArgument("beam width must be positive".into()));
        }
        let (enc, decisions) = self.encode_values(frames, None)?;
        let mut session = PredictionSession::new(self)?;
        let (labels, log_prob) = session.beam(&enc, width)?;
        Ok(Decoded { labels, log_prob, decisions })
    }
}

impl BoundModel {
    fn encoder_logits(&self, tape: &mut Tape, hs: &[Var]) -> Result<Var> {
        let h = tape.concat_rows(hs)?;
        let z = tape.matmul(h, self.encoder_out.0)?;
        tape.add(z, self.encoder_out.1)
    }

    pub fn encode(&self, tape: &mut Tape, frames: &Matrix, mode: EncodeMode) -> Result<Encoded> {
        let t_len = frames.rows();
        if t_len == 0 {
            return Err(Error::InvalidArgument("utterance has no frames".into()));
        }
        let mut decisions = DecisionSequence::default();
        let mut q = Vec::with_capacity(t_len);
        let mut hs = Vec::with_capacity(t_len);
        let mut logits = Vec::new();
        match &self.encoder {
            BoundEncoder::Dense { stack, hidden, cost } => {
                if let EncodeMode::Runtime { forced: Some(_) } | EncodeMode::Train { forced: Some(_), .. } = mode {
                    return Err(Error::InvalidArgument("a dense encoder has no branches to force".into()));
                }
                let mut states: Vec<LstmState> = hidden.iter().map(|&h| LstmState::zeros(tape, h)).collect();
                for t in 0..t_len {
                    let x = tape.row(frames.row(t).to_vec());
                    states = stack.step(tape, x, &states)?;
                    hs.push(states.last().expect("layers").h);
                    q.push(tape.row(vec![*cost]));
                    decisions.push(vec![1.0], 0, *cost, Vec::new());
                }
            }
            BoundEncoder::Amortized(layer) => {
                let n = layer.num_branches();
                let mut state: AmState = layer.initial_state(tape);
                let (mut sampler, forced) = match mode {
                    EncodeMode::Train { sampler, forced } => (Some(sampler), forced),
                    EncodeMode::Runtime { forced } => (None, forced),
                };
                if let Some(f) = forced {
                    if f.len() != t_len {
                        return Err(shape_err("encode", format!("{} forced decisions for {t_len} frames", f.len())));
                    }
                }
                for t in 0..t_len {
                    let x = tape.row(frames.row(t).to_vec());
                    let force = forced.map(|f| f[t]);
                    match sampler.as_deref_mut() {
                        Some(s) => {
                            let step = amrnn_step_train(tape, layer, s, x, &state, force)?;
                            let gate = if layer_lagged(layer) && state.has_prev { state.d_prev } else { step.d };
                            let gate_values = tape.value(gate).data().to_vec();
                            let qv = tape.value(step.q).item();
                            decisions.push(
                                tape.value(step.d).data().to_vec(),
                                argmax(&gate_values),
                                qv,
                                tape.value(step.logits).data().to_vec(),
                            );
                            q.push(step.q);
                            logits.push(step.logits);
                            state = step.state;
                        }
                        None => {
                            let step = amrnn_step_runtime(tape, layer, x, &state, force)?;
                            decisions.push(one_hot(n, step.branch), step.branch, step.q, step.logits.clone());
                            q.push(tape.row(vec![step.q]));
                            logits.push(tape.row(step.logits.clone()));
                            state = step.state;
                        }
                    }
                    hs.push(state.layers.last().expect("layers").h);
                }
            }
        }
        let enc = self.encoder_logits(tape, &hs)?;
        Ok(Encoded { enc, q, logits, decisions })
    }

    fn decoder_zero(&self, tape: &mut Tape) -> Vec<LstmState> {
        self.decoder_layers.iter().map(|&h| LstmState::zeros(tape, h)).collect()
    }

    /// One prediction step consuming `label` (blank acts as start symbol).
    fn decoder_step(&self, tape: &mut Tape, states: &[LstmState], label: usize) -> Result<(Vec<LstmState>, Var)> {
        if label >= self.vocab {
            return Err(Error::InvalidArgument(format!("label {label} outside vocabulary of {}", self.vocab)));
        }
        let sel = tape.row(one_hot(self.vocab, label));
        let emb = tape.matmul(sel, self.embedding)?;
        let states = self.decoder.step(tape, emb, states)?;
        let z = tape.matmul(states.last().expect("layers").h, self.decoder_out.0)?;
        let out = tape.add(z, self.decoder_out.1)?;
        Ok((states, out))
    }

    /// Prediction-network logits for every prefix of `labels`, `(U+1) × V`.
    pub fn predict(&self, tape: &mut Tape, labels: &[usize]) -> Result<Var> {
        let mut states = self.decoder_zero(tape);
        let mut outs = Vec::with_capacity(labels.len() + 1);
        for &y in std::iter::once(&BLANK).chain(labels) {
            let (s, o) = self.decoder_step(tape, &states, y)?;
            states = s;
            outs.push(o);
        }
        tape.concat_rows(&outs)
    }

    /// Transducer NLL of `labels` plus the encoder's per-frame costs.
    pub fn utterance_loss(
        &self,
        tape: &mut Tape,
        frames: &Matrix,
        labels: &[usize],
        mode: EncodeMode,
    ) -> Result<(Var, Encoded)> {
        let encoded = self.encode(tape, frames, mode)?;
        let dec = self.predict(tape, labels)?;
        let nll = transducer_loss_var(tape, encoded.enc, dec, labels)?;
        Ok((nll, encoded))
    }
}

fn layer_lagged(layer: &BoundAmRnn) -> bool {
    layer.decision_lag()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-probabilities over the `T × (U+1)` alignment grid with forward and
/// backward variables.
#[derive(Clone, Debug)]
pub struct TransducerLattice {
    frames: usize,
    labels: Vec<usize>,
    vocab: usize,
    log_probs: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl TransducerLattice {
    pub fn new(enc: &Matrix, dec: &Matrix, labels: &[usize]) -> Result<Self> {
        let (t_len, v) = enc.shape();
        let u_len = labels.len();
        if t_len == 0 {
            return Err(Error::InvalidArgument("utterance has no frames".into()));
        }
        if dec.shape() != (u_len + 1, v) {
            return Err(shape_err(
                "transducer_loss",
                format!("decoder logits {:?} for {u_len} labels over {v} symbols", dec.shape()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y == BLANK || y >= v) {
            return Err(Error::InvalidArgument(format!("label {bad} not in 1..{v}")));
        }
        let cols = u_len + 1;
        let mut log_probs = Vec::with_capacity(t_len * cols * v);
        let mut z = vec![0.0; v];
        for t in 0..t_len {
            for u in 0..cols {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = enc.get(t, k) + dec.get(u, k);
                }
                log_probs.extend(log_softmax(&z));
            }
        }
        let mut lat = Self {
            frames: t_len,
            labels: labels.to_vec(),
            vocab: v,
            log_probs,
            alpha: vec![f64::NEG_INFINITY; t_len * cols],
            beta: vec![f64::NEG_INFINITY; t_len * cols],
        };
        lat.run_forward();
        lat.run_backward();
        Ok(lat)
    }

    fn cols(&self) -> usize {
        self.labels.len() + 1
    }

    /// `log P(k | t, u)`.
    pub fn log_prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * self.cols() + u) * self.vocab + k]
    }

    fn blank(&self, t: usize, u: usize) -> f64 {
        self.log_prob(t, u, BLANK)
    }

    fn emit(&self, t: usize, u: usize) -> f64 {
        self.log_prob(t, u, self.labels[u])
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.cols() + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.cols() + u]
    }

    fn run_forward(&mut self) {
        let cols = self.cols();
        for t in 0..self.frames {
            for u in 0..cols {
                let a = if t == 0 && u == 0 {
                    0.0
                } else {
                    let from_blank =
                        if t > 0 { self.alpha(t - 1, u) + self.blank(t - 1, u) } else { f64::NEG_INFINITY };
                    let from_label =
                        if u > 0 { self.alpha(t, u - 1) + self.emit(t, u - 1) } else { f64::NEG_INFINITY };
                    lse2(from_blank, from_label)
                };
                self.alpha[t * cols + u] = a;
            }
        }
    }

    fn run_backward(&mut self) {
        let cols = self.cols();
        let last_t = self.frames - 1;
        let last_u = cols - 1;
        for t in (0..self.frames).rev() {
            for u in (0..cols).rev() {
                let b = if t == last_t && u == last_u {
                    self.blank(t, u)
                } else {
                    let via_blank =
                        if t < last_t { self.blank(t, u) + self.beta(t + 1, u) } else { f64::NEG_INFINITY };
                    let via_label =
                        if u < last_u { self.emit(t, u) + self.beta(t, u + 1) } else { f64::NEG_INFINITY };
                    lse2(via_blank, via_label)
                };
                self.beta[t * cols + u] = b;
            }
        }
    }

    /// `α(T-1, U) + log P(blank | T-1, U)`.
    pub fn log_likelihood(&self) -> f64 {
        let (t, u) = (self.frames - 1, self.cols() - 1);
        self.alpha(t, u) + self.blank(t, u)
    }

    pub fn nll(&self) -> f64 {
        -self.log_likelihood()
    }

    /// Gradients of the NLL with respect to the encoder (`T × V`) and
    /// prediction (`(U+1) × V`) logits.
    pub fn logit_gradients(&self) -> (Matrix, Matrix) {
        let cols = self.cols();
        let v = self.vocab;
        let log_p = self.log_likelihood();
        let mut d_enc = Matrix::zeros(self.frames, v);
        let mut d_dec = Matrix::zeros(cols, v);
        let mut g = vec![0.0; v];
        for t in 0..self.frames {
            for u in 0..cols {
                g.iter_mut().for_each(|x| *x = 0.0);
                let a = self.alpha(t, u);
                let next_blank = if t + 1 < self.frames {
                    self.beta(t + 1, u)
                } else if u + 1 == cols {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                g[BLANK] = -(a + self.blank(t, u) + next_blank - log_p).exp();
                if u + 1 < cols {
                    g[self.labels[u]] = -(a + self.emit(t, u) + self.beta(t, u + 1) - log_p).exp();
                }
                // through log-softmax: dz_k = g_k - p_k Σ g
                let total: f64 = g.iter().sum();
                let base = (t * cols + u) * v;
                for k in 0..v {
                    let dz = g[k] - self.log_probs[base + k].exp() * total;
                    let e = d_enc.get(t, k);
                    d_enc.set(t, k, e + dz);
                    let d = d_dec.get(u, k);
                    d_dec.set(u, k, d + dz);
                }
            }
        }
        (d_enc, d_dec)
    }
}

/// NLL of `labels` given `enc` (`T × V`) and `dec` (`(U+1) × V`) logits.
pub fn transducer_nll(enc: &Matrix, dec: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(TransducerLattice::new(enc, dec, labels)?.nll())
}

/// Transducer NLL as a tape node with exact forward-backward gradients.
pub fn transducer_loss_var(tape: &mut Tape, enc: Var, dec: Var, labels: &[usize]) -> Result<Var> {
    let lat = TransducerLattice::new(tape.value(enc), tape.value(dec), labels)?;
    let (de, dd) = lat.logit_gradients();
    tape.custom_scalar(vec![enc, dec], lat.nll(), vec![de.data().to_vec(), dd.data().to_vec()], "transducer_loss")
}

/// Incremental prediction-network evaluation with prefix caching.
struct PredictionSession {
    tape: Tape,
    bound: BoundModel,
    cache: HashMap<Vec<usize>, (Vec<LstmState>, Vec<f64>)>,
}

impl PredictionSession {
    fn new(model: &TransducerModel) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let zero = bound.decoder_zero(&mut tape);
        let (states, out) = bound.decoder_step(&mut tape, &zero, BLANK)?;
        let out = tape.value(out).data().to_vec();
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), (states, out));
        Ok(Self { tape, bound, cache })
    }

    fn output(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some((_, out)) = self.cache.get(prefix) {
            return Ok(out.clone());
        }
        let (last, head) = prefix.split_last().expect("empty prefix is cached");
        self.output(head)?;
        let states = self.cache[head].0.clone();
        let (states, out) = self.bound.decoder_step(&mut self.tape, &states, *last)?;
        let out = self.tape.value(out).data().to_vec();
        self.cache.insert(prefix.to_vec(), (states, out.clone()));
        Ok(out)
    }

    fn frame_log_probs(&mut self, enc: &Matrix, t: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let dec = self.output(prefix)?;
        let z: Vec<f64> = enc.row(t).iter().zip(&dec).map(|(a, b)| a + b).collect();
        Ok(log_softmax(&z))
    }

    fn greedy(&mut self, enc: &Matrix) -> Result<Vec<usize>> {
        self.greedy_traced(enc, None)
    }

    /// Greedy decoding; optionally records, per frame, the largest output
    /// entropy over the decoder states visited on that frame.
    fn greedy_traced(&mut self, enc: &Matrix, mut entropies: Option<&mut Vec<f64>>) -> Result<Vec<usize>> {
        let mut labels = Vec::new();
        for t in 0..enc.rows() {
            let mut peak = 0.0f64;
            for _ in 0..MAX_SYMBOLS_PER_FRAME {
                let lp = self.frame_log_probs(enc, t, &labels)?;
                peak = peak.max(entropy(&lp));
                let k = argmax(&lp);
                if k == BLANK {
                    break;
                }
                labels.push(k);
            }
            if let Some(e) = entropies.as_deref_mut() {
                e.push(peak);
            }
        }
        Ok(labels)
    }

    fn score(&mut self, enc: &Matrix, labels: &[usize]) -> Result<f64> {
        let mut rows = Vec::with_capacity(labels.len() + 1);
        for u in 0..=labels.len() {
            rows.extend(self.output(&labels[..u])?);
        }
        let dec = Matrix::new(labels.len() + 1, enc.cols(), rows)?;
        Ok(TransducerLattice::new(enc, &dec, labels)?.log_likelihood())
    }

    /// Time-synchronous beam search. Within a frame, hypotheses either end
    /// the frame with blank or extend with a label; the `width` best of both
    /// kinds survive each expansion round, and identical label sequences are
    /// merged by log-sum-exp. Surviving hypotheses and the greedy result are
    /// rescored by exact likelihood.
    fn beam(&mut self, enc: &Matrix, width: usize) -> Result<(Vec<usize>, f64)> {
        let vocab = enc.cols();
        let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for t in 0..enc.rows() {
            let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
            let mut frontier = beam;
            for round in 0..=MAX_SYMBOLS_PER_FRAME {
                if frontier.is_empty() {
                    break;
                }
                if round == MAX_SYMBOLS_PER_FRAME {
                    for (y, s) in frontier.drain(..) {
                        merge(&mut done, y, s);
                    }
                    break;
                }
                let mut grown: Vec<(Vec<usize>, f64)> = Vec::new();
                for (y, s) in &frontier {
                    let lp = self.frame_log_probs(enc, t, y)?;
                    merge(&mut done, y.clone(), s + lp[BLANK]);
                    for (k, lpk) in lp.iter().enumerate().skip(1) {
                        let mut ext = y.clone();
                        ext.push(k);
                        merge(&mut grown, ext, s + lpk);
                    }
                }
                let mut pool: Vec<(bool, Vec<usize>, f64)> = done
                    .drain(..)
                    .map(|(y, s)| (false, y, s))
                    .chain(grown.into_iter().map(|(y, s)| (true, y, s)))
                    .collect();
                pool.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
                pool.truncate(width);
                frontier = Vec::new();
                for (extending, y, s) in pool {
                    if extending {
                        frontier.push((y, s));
                    } else {
                        done.push((y, s));
                    }
                }
            }
            done.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            done.truncate(width);
            beam = done;
            debug_assert!(vocab > 1);
        }
        let mut candidates: Vec<Vec<usize>> = beam.into_iter().map(|(y, _)| y).collect();
        candidates.push(self.greedy(enc)?);
        let mut best: Option<(Vec<usize>, f64)> = None;
        for y in candidates {
            let s = self.score(enc, &y)?;
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((y, s));
            }
        }
        Ok(best.expect("at least the greedy hypothesis"))
    }
}

/// Shannon entropy in nats of a distribution given by log-probabilities.
pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| if *lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * lp }).sum::<f64>()
}

fn merge(list: &mut Vec<(Vec<usize>, f64)>, y: Vec<usize>, s: f64) {
    if let Some(entry) = list.iter_mut().find(|(z, _)| *z == y) {
        entry.1 = lse2(entry.1, s);
    } else {
        list.push((y, s));
    }
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance over total reference length.
pub fn token_error_rate(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("references contain no tokens".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r)).sum();
    Ok(edits as f64 / total as f64)
}
