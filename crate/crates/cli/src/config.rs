//! Run configuration document: a flat TOML file mirroring the trainer
//! config. Unknown keys are rejected; every default matches the benchmark
//! protocol and is printed into the run manifest.

use serde::{Deserialize, Serialize};

use ptpinn_core::losses::CausalConfig;
use ptpinn_core::optim::{AdamParams, LrSchedule};
use ptpinn_core::pts::ShrinkSchedule;
use ptpinn_core::trainer::{Method, OptKind, SamplingMode, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: String,
    /// "pirate" or "mlp".
    pub arch: String,
    pub width: usize,
    pub blocks: usize,
    /// "baseline", "fixed-pts" (requires `tau`), or "adaptive-pts".
    pub method: String,
    pub tau: Option<f64>,
    /// "resample" or "frozen".
    pub sampling: String,
    pub iters: usize,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_initial: usize,
    /// "soap" or "adam".
    pub optimizer: String,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub precondition_frequency: u64,
    pub causal: bool,
    pub causal_tolerance: f64,
    pub causal_chunks: usize,
    pub grad_norm_every: usize,
    pub weight_ema_new: f64,
    pub pts_update_every: usize,
    pub pts_beta: f64,
    pub shrink_start: f64,
    pub shrink_end: f64,
    pub gamma_min: f64,
    pub loss_ma_window: usize,
    pub error_every: usize,
    pub checkpoint_every: usize,
    pub eval_nt: usize,
    pub eval_nx: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: "advection".into(),
            arch: "pirate".into(),
            width: 64,
            blocks: 2,
            method: "adaptive-pts".into(),
            tau: None,
            sampling: "resample".into(),
            iters: 20_000,
            n_interior: 1024,
            n_boundary: 256,
            n_initial: 256,
            optimizer: "soap".into(),
            learning_rate: 1e-3,
            warmup_steps: 2000,
            decay_rate: 0.9,
            decay_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            precondition_frequency: 2,
            causal: true,
            causal_tolerance: 1.0,
            causal_chunks: 16,
            grad_norm_every: 1000,
            weight_ema_new: 0.1,
            pts_update_every: 1000,
            pts_beta: 0.9,
            shrink_start: 2.0,
            shrink_end: 6.0,
            gamma_min: 0.1,
            loss_ma_window: 100,
            error_every: 1000,
            checkpoint_every: 5000,
            eval_nt: 101,
            eval_nx: 256,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_train_config(&self) -> anyhow::Result<TrainConfig> {
        let method = match self.method.as_str() {
            "baseline" => {
                if self.tau.is_some() {
                    anyhow::bail!("--tau is only valid with --method fixed-pts");
                }
                Method::Baseline
            }
            "fixed-pts" => {
                let tau = self
                    .tau
                    .ok_or_else(|| anyhow::anyhow!("--method fixed-pts requires --tau"))?;
                Method::FixedPts(tau)
            }
            "adaptive-pts" => {
                if self.tau.is_some() {
                    anyhow::bail!("--tau is only valid with --method fixed-pts");
                }
                Method::AdaptivePts
            }
            other => anyhow::bail!("unknown method: {other}"),
        };
        let arch = match self.arch.as_str() {
            "pirate" => ptpinn_core::Arch::Pirate,
            "mlp" => ptpinn_core::Arch::Mlp,
            other => anyhow::bail!("unknown architecture: {other}"),
        };
        let sampling = match self.sampling.as_str() {
            "resample" => SamplingMode::Resample,
            "frozen" => SamplingMode::Frozen,
            other => anyhow::bail!("unknown sampling mode: {other}"),
        };
        let optimizer = match self.optimizer.as_str() {
            "soap" => OptKind::Soap,
            "adam" => OptKind::Adam,
            other => anyhow::bail!("unknown optimizer: {other}"),
        };
        Ok(TrainConfig {
            problem: self.problem.clone(),
            arch,
            width: self.width,
            blocks: self.blocks,
            method,
            sampling,
            iters: self.iters,
            n_interior: self.n_interior,
            n_boundary: self.n_boundary,
            n_initial: self.n_initial,
            optimizer,
            lr: LrSchedule {
                peak: self.learning_rate,
                warmup: self.warmup_steps,
                decay_rate: self.decay_rate,
                decay_every: self.decay_steps,
            },
            adam: AdamParams {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
            },
            precondition_frequency: self.precondition_frequency,
            causal: self.causal.then_some(CausalConfig {
                tolerance: self.causal_tolerance,
                chunks: self.causal_chunks,
            }),
            grad_norm_every: self.grad_norm_every,
            weight_ema_new: self.weight_ema_new,
            pts_freq: self.pts_update_every,
            pts_beta: self.pts_beta,
            shrink: ShrinkSchedule {
                s_start: self.shrink_start,
                s_end: self.shrink_end,
                gamma_min: self.gamma_min,
            },
            loss_ma_window: self.loss_ma_window,
            error_every: self.error_every,
            checkpoint_every: self.checkpoint_every,
            eval_resolution: (self.eval_nt, self.eval_nx),
            seed: self.seed,
        })
    }
}
