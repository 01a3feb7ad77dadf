use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amortized::{ArbitratorConfig, CostRelaxation, ARBITRATOR_BUDGET};
use crate::compression::rank_for_compression;
use crate::error::{Error, Result};
use crate::latency::DeviceProfile;
use crate::optim::AdamConfig;
use crate::transducer::{CompressionMethod, ModelConfig};

use super::data::{FrameStacking, SyntheticTask};

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub model: ModelDims,
    pub amortized: AmortizedConfig,
    pub pruning: PruningConfig,
    pub sampler: SamplerConfig,
    pub device: DeviceConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub entropy: EntropyConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoints, metrics and traces go here when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: SyntheticTask,
    pub stacking: FrameStacking,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub seed: u64,
    /// Feature-file directories replacing the synthetic sets.
    pub train_dir: Option<PathBuf>,
    pub dev_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_embed: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmortizedConfig {
    pub method: CompressionMethod,
    /// FLOP-reduction targets (factorized) or final sparsities (sparse),
    /// slow branch first.
    pub slow_target: f64,
    pub fast_target: f64,
    /// Sparse branches start from the dense baseline instead of fresh
    /// weights.
    pub sparse_from_dense: bool,
    pub arbitrator: ArbitratorConfig,
    pub decision_lag: bool,
    pub cost_relaxation: CostRelaxation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    /// Training steps between mask updates.
    pub frequency: usize,
    /// Number of mask updates; the branch-training phase lasts
    /// `frequency * steps` steps.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub tau_start: f64,
    pub tau_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    /// FLOPs per second.
    pub mu: f64,
    /// Seconds per encoder frame.
    pub frame_period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Fixed weight of the average-cost loss; derived from `balance` when
    /// unset.
    pub lambda_avg: Option<f64>,
    /// Fixed weight of the latency loss; derived from `balance` when unset.
    pub lambda_amr: Option<f64>,
    /// Target ratio of weighted compute loss to transducer loss when a
    /// weight is derived.
    pub balance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub baseline_steps: usize,
    pub pretrain_steps: usize,
    pub avg_steps: usize,
    pub amr_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Fine-tuning phases run at `lr * finetune_scale`.
    pub finetune_scale: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub final_ratio: f64,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    /// Frames whose baseline output entropy (nats) exceeds this are
    /// labelled for the slow branch.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 1, out_dir: None }
    }
}

impl DataConfig {
    /// Generator seed of the development split.
    pub fn dev_seed(&self) -> u64 {
        self.seed.wrapping_add(1_000_003)
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask::default(),
            stacking: FrameStacking::default(),
            train_utterances: 240,
            dev_utterances: 60,
            seed: 7,
            train_dir: None,
            dev_dir: None,
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { encoder_hidden: 48, encoder_layers: 2, decoder_embed: 8, decoder_hidden: 16, decoder_layers: 1 }
    }
}

impl Default for AmortizedConfig {
    fn default() -> Self {
        Self {
            method: CompressionMethod::Factorized,
            slow_target: 0.35,
            fast_target: 0.60,
            sparse_from_dense: false,
            arbitrator: ArbitratorConfig { layers: 1, units: 2, use_prev_state: false, use_prev_decision: true },
            decision_lag: false,
            cost_relaxation: CostRelaxation::Expected,
        }
    }
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self { frequency: 20, steps: 10 }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { tau_start: 1.0, tau_end: 0.5 }
    }
}

impl Default for DeviceConfig {
    /// Scaled down from 650 MFLOP/s so a frame budget sits between the
    /// default toy branches.
    fn default() -> Self {
        Self { mu: 1.2e6, frame_period: 0.03 }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_avg: None, lambda_amr: None, balance: 0.1 }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { batch_size: 8, baseline_steps: 2500, pretrain_steps: 60, avg_steps: 200, amr_steps: 80 }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            finetune_scale: 0.3,
            warmup_frac: 0.05,
            hold_frac: 0.45,
            final_ratio: 0.05,
            adam: AdamConfig::default(),
        }
    }
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { threshold: 0.03 }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beam_width: 4 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            data: DataConfig::default(),
            model: ModelDims::default(),
            amortized: AmortizedConfig::default(),
            pruning: PruningConfig::default(),
            sampler: SamplerConfig::default(),
            device: DeviceConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            entropy: EntropyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.data.task.feature_dim * self.data.stacking.stack,
            vocab_size: self.data.task.num_tokens + 1,
            encoder_hidden: self.model.encoder_hidden,
            encoder_layers: self.model.encoder_layers,
            decoder_embed: self.model.decoder_embed,
            decoder_hidden: self.model.decoder_hidden,
            decoder_layers: self.model.decoder_layers,
        }
    }

    pub fn device_profile(&self) -> Result<DeviceProfile> {
        DeviceProfile::from_frame_period(self.device.mu, self.device.frame_period)
            .map_err(|e| Error::Config(format!("device: {e}")))
    }

    pub fn targets(&self) -> [f64; 2] {
        [self.amortized.slow_target, self.amortized.fast_target]
    }

    /// Steps of the branch-training (pruning) phase.
    pub fn branch_steps(&self) -> usize {
        self.pruning.frequency * self.pruning.steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.data.task.validate()?;
        self.data.stacking.validate()?;
        let model = self.model_config();
        model.validate()?;
        if self.data.train_utterances == 0 && self.data.train_dir.is_none() {
            return fail("data.train_utterances must be positive".into());
        }
        if self.data.dev_utterances == 0 && self.data.dev_dir.is_none() {
            return fail("data.dev_utterances must be positive".into());
        }
        let a = &self.amortized;
        let [slow, fast] = self.targets();
        match a.method {
            CompressionMethod::Factorized => {
                if !(slow > 0.0 && fast < 1.0) {
                    return fail(format!("factorized targets {slow}/{fast} must lie in (0, 1)"));
                }
                for (l, v) in [(0, model.feature_dim), (1, model.encoder_hidden)] {
                    if l >= model.encoder_layers {
                        break;
                    }
                    for t in [slow, fast] {
                        rank_for_compression(model.encoder_hidden, v + model.encoder_hidden, t)
                            .map_err(|e| Error::Config(format!("amortized: {e}")))?;
                    }
                }
            }
            CompressionMethod::Sparse => {
                if !(slow >= 0.0 && fast < 1.0) {
                    return fail(format!("sparsity targets {slow}/{fast} must lie in [0, 1)"));
                }
            }
        }
        if fast <= slow {
            return fail(format!(
                "fast branch target {fast} must compress more than slow branch target {slow}; \
                 otherwise the fast branch would not be cheaper"
            ));
        }
        if a.arbitrator.layers == 0 || a.arbitrator.units == 0 {
            return fail("amortized.arbitrator needs at least one layer and unit".into());
        }
        if self.pruning.frequency == 0 || self.pruning.steps == 0 {
            return fail("pruning.frequency and pruning.steps must be positive".into());
        }
        let s = &self.sampler;
        if !(s.tau_start > 0.0 && s.tau_end > 0.0) {
            return fail(format!("sampler temperatures {}/{} must be positive", s.tau_start, s.tau_end));
        }
        self.device_profile()?;
        let l = &self.loss;
        for (name, v) in [("lambda_avg", l.lambda_avg), ("lambda_amr", l.lambda_amr)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return fail(format!("loss.{name} {v} must be finite and non-negative"));
                }
            }
        }
        if !(l.balance > 0.0) {
            return fail(format!("loss.balance {} must be positive", l.balance));
        }
        if self.schedule.batch_size == 0 || self.schedule.baseline_steps == 0 {
            return fail("schedule.batch_size and schedule.baseline_steps must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.finetune_scale > 0.0) {
            return fail("optimizer.lr and optimizer.finetune_scale must be positive".into());
        }
        if !(o.warmup_frac >= 0.0 && o.hold_frac >= 0.0 && o.warmup_frac + o.hold_frac <= 1.0) {
            return fail("optimizer warm-up and hold fractions must be non-negative and sum to at most 1".into());
        }
        if !(o.final_ratio > 0.0 && o.final_ratio <= 1.0) {
            return fail(format!("optimizer.final_ratio {} outside (0, 1]", o.final_ratio));
        }
        if !(self.entropy.threshold >= 0.0) {
            return fail("entropy.threshold must be non-negative".into());
        }
        if self.eval.beam_width == 0 {
            return fail("eval.beam_width must be positive".into());
        }
        Ok(())
    }

    /// Arbitrator share of encoder parameters and of slow-branch FLOPs,
    /// computed from dimensions alone.
    pub fn arbitrator_overhead(&self) -> (f64, f64) {
        arbitrator_overhead(&self.model_config(), &self.amortized.arbitrator, self.amortized.method, self.targets())
    }
}

/// `(arbitrator params / encoder params, arbitrator FLOPs / slow FLOPs)`
/// for a two-branch encoder built from `model`.
pub fn arbitrator_overhead(
    model: &ModelConfig,
    arbitrator: &ArbitratorConfig,
    method: CompressionMethod,
    targets: [f64; 2],
) -> (f64, f64) {
    use crate::amortized::{lstm_dense_flops, lstm_param_count};
    let h = model.encoder_hidden;
    let proj_params = h * model.vocab_size + model.vocab_size;
    let proj_flops = 2 * (h * model.vocab_size) as u64 + model.vocab_size as u64;
    let mut branch_params = 0usize;
    let mut slow_flops = proj_flops;
    for l in 0..model.encoder_layers {
        let input = if l == 0 { model.feature_dim } else { h };
        let v = input + h;
        match method {
            CompressionMethod::Sparse => {
                let keep = 1.0 - targets[0];
                branch_params += 2 * lstm_param_count(input, h);
                let gate_flops = 4.0 * 2.0 * (v * h) as f64 * keep;
                slow_flops += gate_flops.round() as u64 + lstm_dense_flops(input, h) - 8 * (v * h) as u64;
            }
            CompressionMethod::Factorized => {
                let r_slow = rank_for_compression(h, v, targets[0]).unwrap_or(1);
                let r_fast = rank_for_compression(h, v, targets[1]).unwrap_or(1);
                let r = r_slow.max(r_fast);
                branch_params += 4 * r * (h + v) + 2 * 4 * h;
                slow_flops += 4 * 2 * (r_slow * (h + v)) as u64 + 13 * h as u64;
            }
        }
    }
    let arb_params = arbitrator.param_count(model.feature_dim, h, 2);
    let arb_flops = arbitrator.flops(model.feature_dim, h, 2);
    let encoder = branch_params + proj_params + arb_params;
    (arb_params as f64 / encoder as f64, arb_flops as f64 / slow_flops as f64)
}

/// Whether both overhead ratios respect the arbitrator budget.
pub fn within_arbitrator_budget(overhead: (f64, f64)) -> bool {
    overhead.0 <= ARBITRATOR_BUDGET && overhead.1 <= ARBITRATOR_BUDGET
}
