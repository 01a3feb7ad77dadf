//! Compute-cost penalties and the streaming latency model.
//!
//! A device processes `mu` FLOPs per second while frames arrive at `rho`
//! per second, so each frame brings a budget of `mu / rho` FLOPs. Work
//! beyond the budget queues up as a backlog; the backlog left after the
//! last frame, divided by `mu`, is the user-perceived delay.

use serde::{Deserialize, Serialize};

use crate::amortized::DecisionSequence;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// FLOPs per second.
    pub mu: f64,
    /// Frames per second.
    pub rho: f64,
}

impl Default for DeviceProfile {
    /// 650 MFLOP/s with 30 ms frames.
    fn default() -> Self {
        Self { mu: 650e6, rho: 1.0 / 0.03 }
    }
}

impl DeviceProfile {
    pub fn new(mu: f64, rho: f64) -> Result<Self> {
        let p = Self { mu, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn from_frame_period(mu: f64, seconds_per_frame: f64) -> Result<Self> {
        Self::new(mu, 1.0 / seconds_per_frame)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite() && self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "device profile needs positive finite mu and rho, got mu={} rho={}",
                self.mu, self.rho
            )));
        }
        Ok(())
    }

    /// FLOPs available per frame.
    pub fn budget(&self) -> f64 {
        self.mu / self.rho
    }
}

/// Backlog after every frame; `ell[0]` is the empty initial backlog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacklogTrace {
    pub ell: Vec<f64>,
    pub mu: f64,
}

impl BacklogTrace {
    /// `ℓ_1..ℓ_T`.
    pub fn per_frame(&self) -> &[f64] {
        &self.ell[1..]
    }

    pub fn terminal(&self) -> f64 {
        *self.ell.last().expect("trace holds the initial backlog")
    }

    /// Terminal delay in seconds.
    pub fn latency(&self) -> f64 {
        self.terminal() / self.mu
    }

    /// Largest backlog seen, in seconds; diagnostic only.
    pub fn peak_latency(&self) -> f64 {
        self.ell.iter().cloned().fold(0.0, f64::max) / self.mu
    }
}

/// `(1/T) Σ q_t`.
pub fn avg_cost_loss(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::InvalidArgument("cost sequence is empty".into()));
    }
    Ok(q.iter().sum::<f64>() / q.len() as f64)
}

#[inline]
fn next_backlog(prev: f64, q: f64, budget: f64) -> f64 {
    (prev + q - budget).max(0.0)
}

/// `ℓ_t = max(ℓ_{t-1} + q_t - μ/ρ, 0)` with `ℓ_0 = 0`.
pub fn backlog_sequence(q: &[f64], profile: &DeviceProfile) -> Result<BacklogTrace> {
    check_costs(q)?;
    let b = profile.budget();
    let mut ell = Vec::with_capacity(q.len() + 1);
    ell.push(0.0);
    let mut l = 0.0;
    for &qt in q {
        l = next_backlog(l, qt, b);
        ell.push(l);
    }
    Ok(BacklogTrace { ell, mu: profile.mu })
}

fn check_costs(q: &[f64]) -> Result<()> {
    if let Some(bad) = q.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("frame cost {bad} must be finite and non-negative")));
    }
    Ok(())
}

/// `ℓ_T / μ` in seconds, in constant space.
pub fn amortized_latency_loss(q: &[f64], profile: &DeviceProfile) -> Result<f64> {
    check_costs(q)?;
    let b = profile.budget();
    let l = q.iter().fold(0.0, |l, &qt| next_backlog(l, qt, b));
    Ok(l / profile.mu)
}

/// `∂(ℓ_T/μ)/∂q_t`: `1/μ` while the backlog stays strictly positive from
/// frame `t` through the end, 0 otherwise (including exact kinks).
pub fn amr_subgradient(q: &[f64], profile: &DeviceProfile) -> Result<Vec<f64>> {
    let trace = backlog_sequence(q, profile)?;
    let b = profile.budget();
    let inv = 1.0 / profile.mu;
    let mut grad = vec![0.0; q.len()];
    let mut alive = true;
    for t in (0..q.len()).rev() {
        alive = alive && trace.ell[t] + q[t] - b > 0.0;
        if !alive {
            break;
        }
        grad[t] = inv;
    }
    Ok(grad)
}

/// Mean cost on the tape; each `q` is a 1×1 variable.
pub fn avg_cost_var(tape: &mut Tape, q: &[Var]) -> Result<Var> {
    let values = scalar_values(tape, q)?;
    let value = avg_cost_loss(&values)?;
    let g = 1.0 / q.len() as f64;
    tape.custom_scalar(q.to_vec(), value, vec![vec![g]; q.len()], "avg_cost")
}

/// Amortized latency on the tape with the backward-scan subgradient.
pub fn amr_loss_var(tape: &mut Tape, q: &[Var], profile: &DeviceProfile) -> Result<Var> {
    let values = scalar_values(tape, q)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("cost sequence is empty".into()));
    }
    let value = amortized_latency_loss(&values, profile)?;
    let grad = amr_subgradient(&values, profile)?;
    tape.custom_scalar(q.to_vec(), value, grad.into_iter().map(|g| vec![g]).collect(), "amr_loss")
}

fn scalar_values(tape: &Tape, q: &[Var]) -> Result<Vec<f64>> {
    q.iter()
        .map(|&v| {
            let m = tape.value(v);
            if m.shape() != (1, 1) {
                return Err(crate::error::shape_err("cost", format!("expected 1x1, got {:?}", m.shape())));
            }
            Ok(m.item())
        })
        .collect()
}

/// `nll + λ · compute`.
pub fn combined_training_loss(nll: f64, compute: f64, lambda: f64) -> f64 {
    nll + lambda * compute
}

pub fn combined_loss_var(tape: &mut Tape, nll: Var, compute: Var, lambda: f64) -> Result<Var> {
    let c = tape.scale(compute, lambda)?;
    tape.add(nll, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedLatency {
    pub seconds: f64,
    pub trace: BacklogTrace,
}

/// Replays realised hard costs through the backlog model.
pub fn simulate_runtime_latency(
    decisions: &DecisionSequence,
    profile: &DeviceProfile,
) -> Result<SimulatedLatency> {
    let trace = backlog_sequence(&decisions.costs, profile)?;
    Ok(SimulatedLatency { seconds: trace.latency(), trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budget10(mu: f64) -> DeviceProfile {
        DeviceProfile::new(mu, mu / 10.0).unwrap()
    }

    #[test]
    fn average_cost() {
        assert_eq!(avg_cost_loss(&[10.0, 10.0, 10.0]).unwrap(), 10.0);
        assert_eq!(avg_cost_loss(&[15.0, 5.0, 15.0, 5.0]).unwrap(), 10.0);
        assert!(avg_cost_loss(&[]).is_err());
    }

    #[test]
    fn backlog_hand_cases() {
        let p = budget10(1.0);
        assert_eq!(backlog_sequence(&[5.0, 5.0, 5.0], &p).unwrap().per_frame(), &[0.0, 0.0, 0.0]);
        assert_eq!(backlog_sequence(&[15.0, 5.0, 15.0], &p).unwrap().per_frame(), &[5.0, 0.0, 5.0]);
        assert_eq!(backlog_sequence(&[15.0, 15.0, 15.0], &p).unwrap().per_frame(), &[5.0, 10.0, 15.0]);
        assert_eq!(amortized_latency_loss(&[15.0, 15.0, 15.0], &p).unwrap(), 15.0);
        assert_eq!(amortized_latency_loss(&[5.0, 9.0], &p).unwrap(), 0.0);
    }

    #[test]
    fn subgradient_hand_cases() {
        let p = budget10(2.0);
        assert_eq!(amr_subgradient(&[15.0, 15.0, 15.0], &p).unwrap(), vec![0.5; 3]);
        assert_eq!(amr_subgradient(&[15.0, 5.0, 15.0], &p).unwrap(), vec![0.0, 0.0, 0.5]);
        assert_eq!(amr_subgradient(&[1.0, 2.0], &p).unwrap(), vec![0.0, 0.0]);
        // exact kink takes the zero branch
        assert_eq!(amr_subgradient(&[10.0, 15.0], &p).unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn default_profile() {
        let p = DeviceProfile::default();
        assert!((p.budget() - 19.5e6).abs() < 1e-6);
        assert!(DeviceProfile::new(0.0, 1.0).is_err());
        assert!(DeviceProfile::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn negative_costs_rejected() {
        assert!(backlog_sequence(&[1.0, -1.0], &budget10(1.0)).is_err());
    }

    #[test]
    fn tape_losses_carry_gradients() {
        let p = budget10(1.0);
        let mut t = Tape::new();
        let q: Vec<Var> = [15.0, 5.0, 15.0].iter().map(|v| t.leaf(crate::tensor::Matrix::scalar(*v))).collect();
        let amr = amr_loss_var(&mut t, &q, &p).unwrap();
        let avg = avg_cost_var(&mut t, &q).unwrap();
        assert_eq!(t.value(amr).item(), 5.0);
        assert!((t.value(avg).item() - 35.0 / 3.0).abs() < 1e-12);
        t.backward(amr).unwrap();
        let g: Vec<f64> = q.iter().map(|v| t.grad(*v).unwrap()[0]).collect();
        assert_eq!(g, vec![0.0, 0.0, 1.0]);
    }
}
