//! Pseudo-time step-size management: the two-point estimator, the
//! cosine-decay shrink factor, and the EMA state update with stop-gradient
//! semantics (step sizes enter every loss as plain constants).

use serde::{Deserialize, Serialize};

/// Cosine shrink schedule driven by the logarithmic reduction of the
/// interior residual loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkSchedule {
    pub s_start: f64,
    pub s_end: f64,
    pub gamma_min: f64,
}

impl Default for ShrinkSchedule {
    fn default() -> Self {
        ShrinkSchedule {
            s_start: 2.0,
            s_end: 6.0,
            gamma_min: 0.1,
        }
    }
}

/// `gamma = gamma_min + (1 - gamma_min) (1 + cos(pi p)) / 2` with
/// `p = clamp((log10((L0+eps)/(Lk+eps)) - s_start) / (s_end - s_start), 0, 1)`.
pub fn shrink_factor(l0: f64, lk: f64, sched: &ShrinkSchedule, eps: f64) -> f64 {
    debug_assert!(sched.s_end > sched.s_start);
    debug_assert!(sched.gamma_min > 0.0 && sched.gamma_min <= 1.0);
    let reduction = ((l0 + eps) / (lk + eps)).log10();
    let p = ((reduction - sched.s_start) / (sched.s_end - sched.s_start)).clamp(0.0, 1.0);
    gamma_of_p(p, sched.gamma_min)
}

pub fn gamma_of_p(p: f64, gamma_min: f64) -> f64 {
    gamma_min + (1.0 - gamma_min) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
}

/// Two-point estimate `gamma ||du||_2 / (||dr||_2 + eps)`: a finite-difference
/// surrogate for the inverse local Jacobian magnitude along the current
/// update direction.
pub fn estimate_tau_hat(du: &[f64], dr: &[f64], gamma: f64, eps: f64) -> f64 {
    assert_eq!(du.len(), dr.len(), "field sample vectors must align");
    let nu = norm(du);
    let nr = norm(dr);
    gamma * nu / (nr + eps)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub const TAU_MIN: f64 = 1e-6;
pub const TAU_MAX: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PtsMode {
    Fixed,
    Adaptive,
}

/// Outcome of one update attempt (nonfinite estimates are skipped).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauUpdate {
    NotDue,
    Applied,
    SkippedNonFinite,
}

/// Adaptive pseudo-time state: per-residual step sizes plus the estimator
/// parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PtsState {
    pub tau: Vec<f64>,
    /// EMA blending factor in (0, 1]; 1 replaces tau by the estimate.
    pub beta: f64,
    /// Update frequency in iterations.
    pub freq: usize,
    /// Small constant guarding the estimator denominator and log arguments.
    pub eps: f64,
    pub shrink: ShrinkSchedule,
    /// Initial interior loss per residual; anchor for the shrink factor.
    pub anchor: Vec<f64>,
    pub mode: PtsMode,
}

impl PtsState {
    pub fn fixed(tau: f64, residuals: usize) -> Self {
        PtsState {
            tau: vec![tau; residuals],
            beta: 0.9,
            freq: 1000,
            eps: 1e-12,
            shrink: ShrinkSchedule::default(),
            anchor: vec![0.0; residuals],
            mode: PtsMode::Fixed,
        }
    }

    pub fn adaptive(residuals: usize, freq: usize, beta: f64, shrink: ShrinkSchedule) -> Self {
        PtsState {
            tau: vec![1.0; residuals],
            beta,
            freq,
            eps: 1e-12,
            shrink,
            anchor: vec![0.0; residuals],
            mode: PtsMode::Adaptive,
        }
    }

    pub fn set_anchor(&mut self, raw_interior: &[f64]) {
        self.anchor = raw_interior.to_vec();
    }

    /// Whether iteration `k` is a step-size update step.
    pub fn due(&self, k: usize) -> bool {
        self.mode == PtsMode::Adaptive && k % self.freq == 0
    }

    /// Per-residual shrink factors from the anchored loss reduction.
    pub fn gammas(&self, current_interior: &[f64]) -> Vec<f64> {
        self.anchor
            .iter()
            .zip(current_interior)
            .map(|(&l0, &lk)| shrink_factor(l0, lk, &self.shrink, self.eps))
            .collect()
    }

    /// EMA blend on update steps, identity otherwise; the result is clamped
    /// and treated as a constant by all gradient computations.
    pub fn update_tau(&mut self, k: usize, tau_hat: &[f64]) -> TauUpdate {
        if !self.due(k) {
            return TauUpdate::NotDue;
        }
        if tau_hat.iter().any(|t| !t.is_finite()) {
            return TauUpdate::SkippedNonFinite;
        }
        for (tau, &hat) in self.tau.iter_mut().zip(tau_hat) {
            *tau = ((1.0 - self.beta) * *tau + self.beta * hat).clamp(TAU_MIN, TAU_MAX);
        }
        TauUpdate::Applied
    }
}
