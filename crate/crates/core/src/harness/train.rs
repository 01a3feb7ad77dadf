use std::fs;
use std::io::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amortized::{GumbelSampler, SamplerMode};
use crate::cells::GateWeight;
use crate::compression::{Mask, SparsityTracker};
use crate::error::{Error, Result};
use crate::latency::{amr_loss_var, amortized_latency_loss, avg_cost_loss, avg_cost_var, DeviceProfile};
use crate::optim::{Adam, WarmHoldDecay};
use crate::tensor::{ParamId, Tape, Var};
use crate::transducer::{BoundModel, CompressionMethod, EncodeMode, TransducerModel};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::data::{generate_synthetic, read_dataset, Dataset, Utterance};
use super::eval::{entropy_pretrain_targets, evaluate, export_traces, MetricsReport};

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub compute: f64,
    pub tau: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    /// Current mask sparsity per branch (sparse method only).
    pub sparsity: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub baseline: TransducerModel,
    pub baseline_report: MetricsReport,
    /// After the average-cost phase.
    pub avg_model: TransducerModel,
    pub avg_report: MetricsReport,
    /// After latency fine-tuning.
    pub amr_model: TransducerModel,
    pub amr_report: MetricsReport,
    pub lambda_avg: f64,
    pub lambda_amr: f64,
    /// Fraction of training frames labelled slow for arbitrator
    /// pre-training.
    pub pretrain_slow_fraction: f64,
    pub log: Vec<StepRecord>,
}

/// Training and development sets after frame stacking.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub dev: Dataset,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let vocab = cfg.model_config().vocab_size;
    let raw = |dir: &Option<std::path::PathBuf>, count: usize, seed: u64| -> Result<Dataset> {
        match dir {
            Some(p) => read_dataset(p, vocab),
            None => generate_synthetic(&d.task, count, seed),
        }
    };
    let train = raw(&d.train_dir, d.train_utterances, d.seed)?.stacked(&d.stacking)?;
    let dev = raw(&d.dev_dir, d.dev_utterances, d.dev_seed())?.stacked(&d.stacking)?;
    let dim = cfg.model_config().feature_dim;
    for set in [&train, &dev] {
        if let Some(u) = set.utterances.iter().find(|u| u.frames.cols() != dim || u.frames.rows() == 0) {
            return Err(Error::Config(format!(
                "utterance {} has {}x{} stacked features; the model expects dimension {dim} and at least one frame",
                u.id,
                u.frames.rows(),
                u.frames.cols()
            )));
        }
    }
    Ok(Datasets { train, dev })
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

struct Optimizer {
    adam: Adam,
    schedule: WarmHoldDecay,
    params: Vec<ParamId>,
    step: usize,
}

impl Optimizer {
    fn apply(&mut self, model: &mut TransducerModel) -> (f64, f64) {
        let lr = self.schedule.lr(self.step);
        let norm = self.adam.step(&mut model.params, &self.params, lr);
        self.step += 1;
        (lr, norm)
    }
}

struct BatchStats {
    loss: f64,
    nll: f64,
    compute: f64,
}

/// Accumulates gradients of `loss_fn` over one sampled batch.
fn run_batch(
    model: &mut TransducerModel,
    data: &Dataset,
    batch: usize,
    rng: &mut ChaCha8Rng,
    loss_fn: &mut dyn FnMut(&mut Tape, &BoundModel, usize, &Utterance, &mut ChaCha8Rng) -> Result<(Var, f64, f64)>,
) -> Result<BatchStats> {
    let mut stats = BatchStats { loss: 0.0, nll: 0.0, compute: 0.0 };
    for _ in 0..batch {
        let idx = rng.gen_range(0..data.len());
        let utt = &data.utterances[idx];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let (loss, nll, compute) = loss_fn(&mut tape, &bound, idx, utt, rng)?;
        let scaled = tape.scale(loss, 1.0 / batch as f64)?;
        tape.backward(scaled)?;
        tape.accumulate_param_grads(&mut model.params);
        stats.loss += tape.value(loss).item() / batch as f64;
        stats.nll += nll / batch as f64;
        stats.compute += compute / batch as f64;
    }
    Ok(stats)
}

fn all_params(model: &TransducerModel) -> Vec<ParamId> {
    model.params.iter().map(|(id, _)| id).collect()
}

fn arbitrator_params(model: &TransducerModel) -> Vec<ParamId> {
    model.amortized().map(|l| l.arbitrator.param_ids()).unwrap_or_default()
}

/// Gate matrices of one branch that can carry masks.
fn branch_gate_params(model: &TransducerModel, branch: usize) -> Vec<ParamId> {
    let Some(layer) = model.amortized() else { return Vec::new() };
    layer.branches[branch]
        .layers
        .iter()
        .flat_map(|c| c.gates.iter())
        .filter_map(|g| match g {
            GateWeight::Dense(id) => Some(*id),
            GateWeight::Factored { .. } => None,
        })
        .collect()
}

fn branch_sparsity(model: &TransducerModel) -> Vec<f64> {
    (0..model.num_branches())
        .map(|b| {
            let ids = branch_gate_params(model, b);
            let (mut zeros, mut total) = (0usize, 0usize);
            for id in ids {
                let p = model.params.get(id);
                total += p.value.len();
                zeros += p.mask.as_ref().map_or(0, |m| m.len() - m.kept());
            }
            if total == 0 {
                0.0
            } else {
                zeros as f64 / total as f64
            }
        })
        .collect()
}

/// Recomputes every gate mask of `branch` at sparsity `s`.
pub fn prune_branch(model: &mut TransducerModel, branch: usize, s: f64) {
    for id in branch_gate_params(model, branch) {
        let mask = Mask::from_magnitudes(model.params.value(id), s);
        model.params.set_mask(id, mask);
    }
}

fn cross_entropy(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&k, &y) in logits.iter().zip(targets) {
        let n = tape.value(k).cols();
        let lp = tape.log_softmax(k)?;
        let pick = tape.row(crate::amortized::one_hot(n, y));
        let term = tape.mul(lp, pick)?;
        let term = tape.sum(term)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no frames".into()))?;
    tape.scale(total, -1.0 / logits.len() as f64)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Datasets,
    profile: DeviceProfile,
    log: Vec<StepRecord>,
    rng: ChaCha8Rng,
}

impl Run<'_> {
    fn record(&mut self, phase: &str, step: usize, s: &BatchStats, tau: Option<f64>, lr: f64, norm: f64, sparsity: Vec<f64>) {
        self.log.push(StepRecord {
            phase: phase.to_owned(),
            step,
            loss: s.loss,
            nll: s.nll,
            compute: s.compute,
            tau,
            lr,
            grad_norm: norm,
            sparsity,
        });
    }

    fn train_baseline(&mut self) -> Result<TransducerModel> {
        let cfg = self.cfg;
        let mut model = TransducerModel::dense(cfg.model_config(), cfg.run.seed)?;
        let o = &cfg.optimizer;
        let steps = cfg.schedule.baseline_steps;
        let mut opt = Optimizer {
            adam: Adam::new(o.adam),
            schedule: WarmHoldDecay::over(o.lr, steps, o.warmup_frac, o.hold_frac, o.final_ratio)?,
            params: all_params(&model),
            step: 0,
        };
        let mut loss_fn = |tape: &mut Tape, bound: &BoundModel, _: usize, u: &Utterance, _: &mut ChaCha8Rng| {
            let (nll, _) = bound.utterance_loss(tape, &u.frames, &u.labels, EncodeMode::Runtime { forced: None })?;
            let v = tape.value(nll).item();
            Ok((nll, v, 0.0))
        };
        for step in 0..steps {
            let s = run_batch(&mut model, &self.data.train, cfg.schedule.batch_size, &mut self.rng, &mut loss_fn)?;
            let (lr, norm) = opt.apply(&mut model);
            self.record("baseline", step, &s, None, lr, norm, Vec::new());
        }
        Ok(model)
    }

    fn seed_amortized(&self, baseline: &TransducerModel) -> Result<TransducerModel> {
        let cfg = self.cfg;
        let a = &cfg.amortized;
        let mut model = match a.method {
            CompressionMethod::Sparse if !a.sparse_from_dense => {
                TransducerModel::sparse_from_scratch(cfg.model_config(), 2, a.arbitrator, cfg.run.seed ^ 0xA5A5)?
            }
            method => TransducerModel::seed_from_dense(baseline, method, &cfg.targets(), a.arbitrator, cfg.run.seed ^ 0xA5A5)?,
        };
        model.set_decision_lag(a.decision_lag);
        model.set_cost_relaxation(a.cost_relaxation);
        Ok(model)
    }

    fn amortized_optimizer(&self, model: &TransducerModel) -> Result<Optimizer> {
        let cfg = self.cfg;
        let o = &cfg.optimizer;
        let from_scratch = cfg.amortized.method == CompressionMethod::Sparse && !cfg.amortized.sparse_from_dense;
        let peak = if from_scratch { o.lr } else { o.lr * o.finetune_scale };
        let total = cfg.branch_steps() + cfg.schedule.avg_steps + cfg.schedule.amr_steps;
        Ok(Optimizer {
            adam: Adam::new(o.adam),
            schedule: WarmHoldDecay::over(peak, total, o.warmup_frac, o.hold_frac, o.final_ratio)?,
            params: all_params(model),
            step: 0,
        })
    }

    /// Random 50/50 branch sampling while pruning masks ramp up.
    fn train_branches(&mut self, model: &mut TransducerModel, opt: &mut Optimizer) -> Result<()> {
        let cfg = self.cfg;
        let sparse = model
            .amortized()
            .is_some_and(|_| cfg.amortized.method == CompressionMethod::Sparse);
        let trackers = cfg
            .targets()
            .iter()
            .map(|&s| SparsityTracker::new(s, cfg.pruning.steps, cfg.pruning.frequency))
            .collect::<Result<Vec<_>>>()?;
        let mut sampler = GumbelSampler::new(cfg.sampler.tau_start, SamplerMode::Forced, 0)?;
        let n = model.num_branches();
        for step in 0..cfg.branch_steps() {
            if sparse {
                for (b, t) in trackers.iter().enumerate() {
                    if t.is_pruning_step(step) {
                        prune_branch(model, b, t.ratio(step));
                    }
                }
            }
            let mut loss_fn = |tape: &mut Tape, bound: &BoundModel, _: usize, u: &Utterance, rng: &mut ChaCha8Rng| {
                let forced: Vec<usize> = (0..u.frames.rows()).map(|_| rng.gen_range(0..n)).collect();
                let mode = EncodeMode::Train { sampler: &mut sampler, forced: Some(&forced) };
                let (nll, _) = bound.utterance_loss(tape, &u.frames, &u.labels, mode)?;
                let v = tape.value(nll).item();
                Ok((nll, v, 0.0))
            };
            let s = run_batch(model, &self.data.train, cfg.schedule.batch_size, &mut self.rng, &mut loss_fn)?;
            let (lr, norm) = opt.apply(model);
            let sp = branch_sparsity(model);
            self.record("branches", step, &s, None, lr, norm, sp);
        }
        if sparse {
            // land exactly on the final sparsity
            for (b, t) in trackers.iter().enumerate() {
                prune_branch(model, b, t.ratio(t.end_step()));
            }
        }
        Ok(())
    }

    /// Teaches the arbitrator to route high-entropy frames to the slow
    /// branch. Returns the slow-label fraction.
    fn pretrain_arbitrator(&mut self, model: &mut TransducerModel, baseline: &TransducerModel) -> Result<f64> {
        let cfg = self.cfg;
        let targets = entropy_pretrain_targets(baseline, &self.data.train, cfg.entropy.threshold)?;
        let frames: usize = targets.iter().map(Vec::len).sum();
        let slow = targets.iter().flatten().filter(|&&t| t == 0).count();
        let mut opt = Optimizer {
            adam: Adam::new(cfg.optimizer.adam),
            schedule: WarmHoldDecay::new(cfg.optimizer.lr, 0, cfg.schedule.pretrain_steps, 0, 1.0)?,
            params: arbitrator_params(model),
            step: 0,
        };
        let mut sampler = GumbelSampler::new(cfg.sampler.tau_start, SamplerMode::Forced, 0)?;
        for step in 0..cfg.schedule.pretrain_steps {
            let mut loss_fn = |tape: &mut Tape, bound: &BoundModel, idx: usize, u: &Utterance, _: &mut ChaCha8Rng| {
                let forced = &targets[idx];
                let mode = EncodeMode::Train { sampler: &mut sampler, forced: Some(forced) };
                let enc = bound.encode(tape, &u.frames, mode)?;
                let ce = cross_entropy(tape, &enc.logits, forced)?;
                let v = tape.value(ce).item();
                Ok((ce, v, 0.0))
            };
            let s = run_batch(model, &self.data.train, cfg.schedule.batch_size, &mut self.rng, &mut loss_fn)?;
            let (lr, norm) = opt.apply(model);
            self.record("pretrain", step, &s, None, lr, norm, Vec::new());
        }
        Ok(slow as f64 / frames.max(1) as f64)
    }

    /// Mean NLL, average cost and latency under soft sampling over a probe
    /// batch, used to derive loss weights.
    fn probe(&mut self, model: &TransducerModel, tau: f64) -> Result<(f64, f64, f64, f64)> {
        let n = self.data.train.len().min(32);
        let mut sampler = GumbelSampler::new(tau, SamplerMode::Soft, self.cfg.run.seed ^ 0x5EED)?;
        let (mut nll, mut avg, mut amr, mut frames) = (0.0, 0.0, 0.0, 0.0);
        for u in &self.data.train.utterances[..n] {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let mode = EncodeMode::Train { sampler: &mut sampler, forced: None };
            let (loss, enc) = bound.utterance_loss(&mut tape, &u.frames, &u.labels, mode)?;
            nll += tape.value(loss).item();
            let q: Vec<f64> = enc.q.iter().map(|&v| tape.value(v).item()).collect();
            avg += avg_cost_loss(&q)?;
            amr += amortized_latency_loss(&q, &self.profile)?;
            frames += q.len() as f64;
        }
        let k = n as f64;
        Ok((nll / k, avg / k, amr / k, frames / k))
    }

    fn train_compute(
        &mut self,
        model: &mut TransducerModel,
        opt: &mut Optimizer,
        phase: &str,
        steps: usize,
        lambda: f64,
        tau: &dyn Fn(usize) -> f64,
    ) -> Result<()> {
        let cfg = self.cfg;
        let profile = self.profile;
        let latency = phase == "amr";
        let mut sampler = GumbelSampler::new(tau(0), SamplerMode::Soft, cfg.run.seed ^ 0x6A6B ^ steps as u64)?;
        for step in 0..steps {
            let t = tau(step);
            sampler.set_tau(t)?;
            let mut loss_fn = |tape: &mut Tape, bound: &BoundModel, _: usize, u: &Utterance, _: &mut ChaCha8Rng| {
                let mode = EncodeMode::Train { sampler: &mut sampler, forced: None };
                let (nll, enc) = bound.utterance_loss(tape, &u.frames, &u.labels, mode)?;
                let compute = if latency { amr_loss_var(tape, &enc.q, &profile)? } else { avg_cost_var(tape, &enc.q)? };
                let total = crate::latency::combined_loss_var(tape, nll, compute, lambda)?;
                let (n, c) = (tape.value(nll).item(), tape.value(compute).item());
                Ok((total, n, c))
            };
            let s = run_batch(model, &self.data.train, cfg.schedule.batch_size, &mut self.rng, &mut loss_fn)?;
            let (lr, norm) = opt.apply(model);
            self.record(phase, step, &s, Some(t), lr, norm, branch_sparsity(model));
        }
        Ok(())
    }
}

/// Runs the full curriculum: dense baseline, branch training with random
/// routing (and pruning), arbitrator pre-training, average-cost training
/// with an annealed Gumbel-Softmax, then latency fine-tuning.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &ExperimentConfig, data: &Datasets) -> Result<TrainOutcome> {
    let profile = cfg.device_profile()?;
    let mut run = Run { cfg, data, profile, log: Vec::new(), rng: stream(cfg.run.seed, 0x7EA1) };

    let baseline = run.train_baseline()?;
    let mut model = run.seed_amortized(&baseline)?;
    let mut opt = run.amortized_optimizer(&model)?;
    run.train_branches(&mut model, &mut opt)?;
    let pretrain_slow_fraction = run.pretrain_arbitrator(&mut model, &baseline)?;

    let s = &cfg.sampler;
    let avg_steps = cfg.schedule.avg_steps;
    let lambda_avg = match cfg.loss.lambda_avg {
        Some(l) => l,
        None => {
            let (nll, avg, _, _) = run.probe(&model, s.tau_start)?;
            cfg.loss.balance * nll / avg
        }
    };
    let anneal = |step: usize| {
        if avg_steps <= 1 {
            s.tau_end
        } else {
            s.tau_start + (s.tau_end - s.tau_start) * step as f64 / (avg_steps - 1) as f64
        }
    };
    run.train_compute(&mut model, &mut opt, "avg", avg_steps, lambda_avg, &anneal)?;
    let avg_model = model.clone();

    let lambda_amr = match cfg.loss.lambda_amr {
        Some(l) => l,
        None => {
            let (nll, _, amr, frames) = run.probe(&model, s.tau_end)?;
            if amr > 0.0 {
                cfg.loss.balance * nll / amr
            } else {
                // match the per-frame pull of the average-cost phase
                lambda_avg * profile.mu / frames
            }
        }
    };
    let end = s.tau_end;
    run.train_compute(&mut model, &mut opt, "amr", cfg.schedule.amr_steps, lambda_amr, &|_| end)?;

    let width = cfg.eval.beam_width;
    let (baseline_report, base_traces) = evaluate(&baseline, &data.dev, &profile, width, "baseline", None)?;
    let reference = Some(baseline_report.baseline());
    let (avg_report, avg_traces) = evaluate(&avg_model, &data.dev, &profile, width, "avg", reference)?;
    let (amr_report, amr_traces) = evaluate(&model, &data.dev, &profile, width, "amr", reference)?;

    let outcome = TrainOutcome {
        baseline,
        baseline_report,
        avg_model,
        avg_report,
        amr_model: model,
        amr_report,
        lambda_avg,
        lambda_amr,
        pretrain_slow_fraction,
        log: run.log,
    };
    if let Some(dir) = &cfg.run.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        save_checkpoint(&dir.join("baseline.ckpt"), &outcome.baseline)?;
        save_checkpoint(&dir.join("avg.ckpt"), &outcome.avg_model)?;
        save_checkpoint(&dir.join("amr.ckpt"), &outcome.amr_model)?;
        let mut metrics = fs::File::create(dir.join("metrics.jsonl"))?;
        for r in [&outcome.baseline_report, &outcome.avg_report, &outcome.amr_report] {
            writeln!(metrics, "{}", r.to_json_line())?;
        }
        let mut log = fs::File::create(dir.join("train_log.jsonl"))?;
        for rec in &outcome.log {
            writeln!(log, "{}", serde_json::to_string(rec).expect("record serialises"))?;
        }
        export_traces(&dir.join("traces_baseline.csv"), &base_traces)?;
        export_traces(&dir.join("traces_avg.csv"), &avg_traces)?;
        export_traces(&dir.join("traces_amr.csv"), &amr_traces)?;
    }
    Ok(outcome)
}
