use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{simulate_runtime_latency, DeviceProfile};
use crate::transducer::{token_error_rate, TransducerModel};

use super::data::Dataset;

/// Reference numbers a report is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub flops_per_frame: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub utterances: usize,
    pub frames: usize,
    pub token_error_rate: f64,
    pub flops_per_frame: f64,
    /// Fractional reduction against the baseline, when one is given.
    pub flops_reduction: Option<f64>,
    pub latency_ms: f64,
    pub latency_reduction: Option<f64>,
    /// Fraction of frames per branch, slow first.
    pub branch_ratios: Vec<f64>,
    pub encoder_params: usize,
    pub arbitrator_params: usize,
    pub total_params: usize,
}

impl MetricsReport {
    pub fn baseline(&self) -> Baseline {
        Baseline { flops_per_frame: self.flops_per_frame, latency_ms: self.latency_ms }
    }

    /// Fraction of frames on the last (cheapest) branch.
    pub fn fast_ratio(&self) -> f64 {
        if self.branch_ratios.len() < 2 {
            0.0
        } else {
            *self.branch_ratios.last().expect("non-empty")
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// Per-frame record of one decoded utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceTrace {
    pub id: String,
    pub branches: Vec<usize>,
    pub costs: Vec<f64>,
    pub backlog: Vec<f64>,
    pub hypothesis: Vec<usize>,
    pub reference: Vec<usize>,
    pub latency_s: f64,
}

/// Decodes `data` with run-time routing and summarises accuracy, compute
/// and simulated latency.
pub fn evaluate(
    model: &TransducerModel,
    data: &Dataset,
    profile: &DeviceProfile,
    beam_width: usize,
    label: &str,
    baseline: Option<Baseline>,
) -> Result<(MetricsReport, Vec<UtteranceTrace>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let n_branches = model.num_branches();
    let mut counts = vec![0usize; n_branches];
    let mut hyps = Vec::with_capacity(data.len());
    let mut refs = Vec::with_capacity(data.len());
    let mut traces = Vec::with_capacity(data.len());
    let (mut flops, mut frames, mut latency) = (0.0, 0usize, 0.0);
    for u in &data.utterances {
        let decoded = if beam_width <= 1 {
            model.greedy_decode(&u.frames)?
        } else {
            model.beam_search(&u.frames, beam_width)?
        };
        let sim = simulate_runtime_latency(&decoded.decisions, profile)?;
        for &b in &decoded.decisions.branches {
            counts[b] += 1;
        }
        flops += decoded.decisions.costs.iter().sum::<f64>();
        frames += decoded.decisions.len();
        latency += sim.seconds;
        hyps.push(decoded.labels.clone());
        refs.push(u.labels.clone());
        traces.push(UtteranceTrace {
            id: u.id.clone(),
            branches: decoded.decisions.branches.clone(),
            costs: decoded.decisions.costs.clone(),
            backlog: sim.trace.per_frame().to_vec(),
            hypothesis: decoded.labels,
            reference: u.labels.clone(),
            latency_s: sim.seconds,
        });
    }
    let flops_per_frame = flops / frames as f64;
    let latency_ms = 1000.0 * latency / data.len() as f64;
    let reduction = |base: f64, now: f64| if base > 0.0 { 1.0 - now / base } else { 0.0 };
    let report = MetricsReport {
        label: label.to_owned(),
        utterances: data.len(),
        frames,
        token_error_rate: token_error_rate(&hyps, &refs)?,
        flops_per_frame,
        flops_reduction: baseline.map(|b| reduction(b.flops_per_frame, flops_per_frame)),
        latency_ms,
        latency_reduction: baseline.map(|b| reduction(b.latency_ms, latency_ms)),
        branch_ratios: counts.iter().map(|&c| c as f64 / frames as f64).collect(),
        encoder_params: model.encoder_param_count(),
        arbitrator_params: model.arbitrator_param_count(),
        total_params: model.params.iter().map(|(_, p)| p.value.len()).sum(),
    };
    Ok((report, traces))
}

/// CSV with header `utterance,t,decision,q,ell`.
pub fn traces_to_csv(traces: &[UtteranceTrace]) -> String {
    let mut s = String::from("utterance,t,decision,q,ell\n");
    for tr in traces {
        for (t, ((b, q), l)) in tr.branches.iter().zip(&tr.costs).zip(&tr.backlog).enumerate() {
            writeln!(s, "{},{},{},{},{}", tr.id, t + 1, b, q, l).expect("string write");
        }
    }
    s
}

pub fn export_traces(path: &Path, traces: &[UtteranceTrace]) -> Result<()> {
    std::fs::write(path, traces_to_csv(traces))?;
    Ok(())
}

/// Per-utterance cost sequences from a trace CSV, in file order.
pub fn read_trace_costs(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, reason: &str| Error::Data { path: path.to_path_buf(), reason: format!("line {line}: {reason}") };
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(i + 1, "expected 5 fields"));
        }
        let q: f64 = fields[3].parse().map_err(|_| bad(i + 1, "cost is not a number"))?;
        match out.last_mut() {
            Some((id, costs)) if id == fields[0] => costs.push(q),
            _ => out.push((fields[0].to_owned(), vec![q])),
        }
    }
    Ok(out)
}

/// Per-frame arbitrator targets: slow (0) where the baseline's greedy-path
/// output entropy exceeds `threshold` nats, fast (1) otherwise.
pub fn entropy_pretrain_targets(
    baseline: &TransducerModel,
    data: &Dataset,
    threshold: f64,
) -> Result<Vec<Vec<usize>>> {
    data.utterances
        .iter()
        .map(|u| {
            Ok(baseline
                .greedy_frame_entropies(&u.frames)?
                .into_iter()
                .map(|h| usize::from(h <= threshold))
                .collect())
        })
        .collect()
}
