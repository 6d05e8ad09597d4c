//! The training loop: sampling, pseudo-time step update, loss-weight update,
//! gradient step, logging, checkpointing, and reference evaluation.
//!
//! Per-iteration ordering follows the training protocol: the pseudo-time
//! step sizes are updated first, then the global loss weights, then the
//! gradient step. The previous iterate's parameters are retained every step
//! for the relaxed loss, and everything is deterministic for a given seed
//! (counter-based sampling, fixed-order reductions).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    self, CausalConfig, EvalOutput, GlobalWeights, GradRequest, LossError, ResidualMode,
};
use crate::models::{Arch, Model, ModelError};
use crate::optim::{AdamParams, AdamState, LrSchedule, OptimError, Optimizer, SoapState};
use crate::params::ParamVector;
use crate::problems::{
    reference_solve, relative_l2, ProblemError, ProblemSpec, ReferenceSolution, SampleCounts,
};
use crate::pts::{estimate_tau_hat, PtsState, ShrinkSchedule, TauUpdate};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "tau")]
pub enum Method {
    Baseline,
    FixedPts(f64),
    AdaptivePts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Resample,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptKind {
    Adam,
    Soap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: String,
    pub arch: Arch,
    pub width: usize,
    pub blocks: usize,
    pub method: Method,
    pub sampling: SamplingMode,
    pub iters: usize,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_initial: usize,
    pub optimizer: OptKind,
    pub lr: LrSchedule,
    pub adam: AdamParams,
    pub precondition_frequency: u64,
    /// None disables causal weighting; ignored for steady problems.
    pub causal: Option<CausalConfig>,
    pub grad_norm_every: usize,
    pub weight_ema_new: f64,
    pub pts_freq: usize,
    pub pts_beta: f64,
    pub shrink: ShrinkSchedule,
    /// Moving-average window for the interior loss entering the shrink factor.
    pub loss_ma_window: usize,
    pub error_every: usize,
    pub checkpoint_every: usize,
    pub eval_resolution: (usize, usize),
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults; benchmark-protocol values stay selectable.
    pub fn desk(problem: &str, method: Method, sampling: SamplingMode, seed: u64) -> Self {
        let causal = ProblemSpec::by_name(problem)
            .ok()
            .filter(|s| s.supports_causal())
            .map(|_| CausalConfig::default());
        TrainConfig {
            problem: problem.into(),
            arch: Arch::Pirate,
            width: 64,
            blocks: 2,
            method,
            sampling,
            iters: 20_000,
            n_interior: 1024,
            n_boundary: 256,
            n_initial: 256,
            optimizer: OptKind::Soap,
            lr: LrSchedule::default(),
            adam: AdamParams::default(),
            precondition_frequency: 2,
            causal,
            grad_norm_every: 1000,
            weight_ema_new: 0.1,
            pts_freq: 1000,
            pts_beta: 0.9,
            shrink: ShrinkSchedule::default(),
            loss_ma_window: 100,
            error_every: 1000,
            checkpoint_every: 5000,
            eval_resolution: (101, 256),
            seed,
        }
    }

    pub fn counts(&self) -> SampleCounts {
        SampleCounts {
            interior: self.n_interior,
            boundary: self.n_boundary,
            initial: self.n_initial,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if let Method::FixedPts(tau) = self.method {
            if !(tau > 0.0) {
                return Err(TrainError::BadConfig(format!(
                    "fixed pseudo-time step must be positive, got {tau}"
                )));
            }
        }
        if self.iters == 0 || self.n_interior == 0 {
            return Err(TrainError::BadConfig(
                "iterations and interior batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub terms: Vec<f64>,
    pub total: f64,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub lr: f64,
}

/// Per-iteration log plus sparse error/timing tracks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub term_names: Vec<String>,
    pub tau_names: Vec<String>,
    pub records: Vec<IterRecord>,
    /// `(iteration, relative L2 error)`, sampled every `error_every`.
    pub errors: Vec<(usize, f64)>,
    /// `(iteration, seconds per 100 iterations)`; excluded from metrics
    /// files so runs stay bitwise comparable.
    pub timings: Vec<(usize, f64)>,
    pub notes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("nonfinite loss at iteration {iter} (tau {taus:?}, lambda {lambdas:?}, lr {lr:.3e})")]
    NonFiniteLoss {
        iter: usize,
        taus: Vec<f64>,
        lambdas: Vec<f64>,
        lr: f64,
    },
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint decode: {0}")]
    CheckpointDecode(#[from] serde_json::Error),
}

pub struct TrainOutcome {
    pub config: TrainConfig,
    pub history: TrainHistory,
    pub params: ParamVector,
    pub prev_params: ParamVector,
    pub model: Model,
    pub spec: ProblemSpec,
}

/// Everything needed for a bit-exact resume (sampling streams are
/// counter-based, so no RNG state beyond the seed is required).
#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iter: usize,
    pub params: ParamVector,
    pub prev_params: ParamVector,
    pub optimizer: Optimizer,
    pub pts: Option<PtsState>,
    pub weights: GlobalWeights,
    pub loss_ma: Vec<Vec<f64>>,
    pub history: TrainHistory,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

struct TrainState {
    spec: ProblemSpec,
    model: Model,
    params: ParamVector,
    prev_params: ParamVector,
    optimizer: Optimizer,
    pts: Option<PtsState>,
    weights: GlobalWeights,
    loss_ma: Vec<VecDeque<f64>>,
    history: TrainHistory,
    reference: Option<Option<ReferenceSolution>>, // None = not yet built
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, None, None)
}

/// Run (or resume) training, writing checkpoints into `out_dir` when given.
pub fn train_with(
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let spec = ProblemSpec::by_name(&cfg.problem)?;
    let model = Model::new(
        {
            let mut mc = spec.model_config(cfg.arch, cfg.width, cfg.blocks);
            mc.arch = cfg.arch;
            mc
        },
        cfg.seed,
    )?;

    let n_terms = term_count(&spec);
    let causal = cfg.causal.filter(|_| spec.supports_causal());

    let (mut state, start_iter) = match resume {
        Some(ck) => {
            if ck.config != *cfg {
                return Err(TrainError::BadConfig(
                    "checkpoint was produced by a different configuration".into(),
                ));
            }
            let start = ck.iter + 1;
            (
                TrainState {
                    spec: spec.clone(),
                    model,
                    params: ck.params,
                    prev_params: ck.prev_params,
                    optimizer: ck.optimizer,
                    pts: ck.pts,
                    weights: ck.weights,
                    loss_ma: ck
                        .loss_ma
                        .into_iter()
                        .map(|v| VecDeque::from(v))
                        .collect(),
                    history: ck.history,
                    reference: None,
                },
                start,
            )
        }
        None => {
            let params = model.init_params(cfg.seed);
            let mut weights = GlobalWeights::ones(n_terms, cfg.grad_norm_every);
            weights.ema_new = cfg.weight_ema_new;
            let optimizer = match cfg.optimizer {
                OptKind::Adam => Optimizer::Adam(AdamState::new(params.len(), cfg.adam)),
                OptKind::Soap => Optimizer::Soap(SoapState::new(
                    &params,
                    cfg.adam,
                    cfg.precondition_frequency,
                )),
            };
            let mut st = TrainState {
                spec: spec.clone(),
                model,
                prev_params: params.clone(),
                params,
                optimizer,
                pts: match cfg.method {
                    Method::Baseline => None,
                    Method::FixedPts(tau) => Some(PtsState::fixed(tau, spec.residuals)),
                    Method::AdaptivePts => Some(PtsState::adaptive(
                        spec.residuals,
                        cfg.pts_freq,
                        cfg.pts_beta,
                        cfg.shrink,
                    )),
                },
                weights,
                loss_ma: vec![VecDeque::new(); spec.residuals],
                history: TrainHistory::default(),
                reference: None,
            };
            warmup_step(cfg, &mut st)?;
            (st, 1)
        }
    };

    let frozen = cfg.sampling == SamplingMode::Frozen;
    let mut last_tick = std::time::Instant::now();

    for k in start_iter..=cfg.iters {
        let batch = state.spec.sample(&cfg.counts(), cfg.seed, k as u64, frozen);

        // 1. Pseudo-time step update (adaptive mode, every pts_freq iters).
        if state.pts.as_ref().is_some_and(|p| p.due(k)) {
            let (u_now, r_now) =
                losses::residual_batch(&state.spec, &state.model, &state.params, &batch.interior.view());
            let (u_prev, r_prev) = losses::residual_batch(
                &state.spec,
                &state.model,
                &state.prev_params,
                &batch.interior.view(),
            );
            let pairing = state.spec.residual_pairing();
            let pts = state.pts.as_mut().unwrap();
            // Smoothed interior loss per residual for the shrink factor.
            let smoothed: Vec<f64> = state
                .loss_ma
                .iter()
                .map(|q| {
                    if q.is_empty() {
                        f64::INFINITY
                    } else {
                        q.iter().sum::<f64>() / q.len() as f64
                    }
                })
                .collect();
            let gammas = pts.gammas(&smoothed);
            let mut tau_hat = Vec::with_capacity(state.spec.residuals);
            for c in 0..state.spec.residuals {
                let du: Vec<f64> = (0..batch.interior.nrows())
                    .map(|i| u_now[(i, pairing[c])] - u_prev[(i, pairing[c])])
                    .collect();
                let dr: Vec<f64> = (0..batch.interior.nrows())
                    .map(|i| r_now[(i, c)] - r_prev[(i, c)])
                    .collect();
                tau_hat.push(estimate_tau_hat(&du, &dr, gammas[c], pts.eps));
            }
            if pts.update_tau(k, &tau_hat) == TauUpdate::SkippedNonFinite {
                state
                    .history
                    .notes
                    .push(format!("iter {k}: nonfinite tau estimate skipped"));
            }
        }

        // 2. Loss, gradients, and (on schedule) the grad-norm weight update.
        let weight_step = k % state.weights.period == 0;
        let want = if weight_step {
            GradRequest::TotalWithTermNorms
        } else {
            GradRequest::Total
        };
        let taus: Vec<f64> = state.pts.as_ref().map(|p| p.tau.clone()).unwrap_or_default();
        let mode = match &state.pts {
            Some(p) => ResidualMode::Relaxed {
                prev: &state.prev_params,
                tau: &p.tau,
            },
            None => ResidualMode::Plain,
        };
        let mut out = losses::evaluate_loss(
            &state.spec,
            &state.model,
            &state.params,
            mode,
            &batch,
            &state.weights.lambdas,
            causal.as_ref(),
            want,
        )?;
        let lr = cfg.lr.lr_at(k);
        if !out.breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iter: k,
                taus,
                lambdas: state.weights.lambdas.clone(),
                lr,
            });
        }

        let grad = if weight_step {
            let norms = out.term_grad_norms().expect("term grads requested");
            state.weights.update(&norms);
            // Reassemble the total gradient with the freshly updated weights.
            let term_grads = out.term_grads.as_ref().unwrap();
            let mut g = state.params.zeros_like();
            for (tg, &lambda) in term_grads.iter().zip(&state.weights.lambdas) {
                g.add_scaled(tg, lambda);
            }
            g
        } else {
            out.grad.take().expect("total gradient requested")
        };

        // 3. Gradient step; keep the previous iterate for the relaxed loss.
        state.prev_params = state.params.clone();
        state.optimizer.step(&mut state.params, &grad, lr)?;

        // Bookkeeping.
        for (q, &v) in state.loss_ma.iter_mut().zip(&out.raw_interior) {
            if q.len() == cfg.loss_ma_window {
                q.pop_front();
            }
            q.push_back(v);
        }
        record_iteration(&mut state, &out, k, &taus, lr);

        if k % 100 == 0 {
            let dt = last_tick.elapsed().as_secs_f64();
            state.history.timings.push((k, dt));
            last_tick = std::time::Instant::now();
        }
        if cfg.error_every > 0 && k % cfg.error_every == 0 {
            if let Some(err) = periodic_error(cfg, &mut state)? {
                state.history.errors.push((k, err));
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (k % cfg.checkpoint_every == 0 || k == cfg.iters) {
                let ck = snapshot(cfg, &state, k);
                ck.save(&dir.join(format!("checkpoint_{k:06}.json")))?;
            }
        }
    }

    Ok(TrainOutcome {
        config: cfg.clone(),
        history: state.history,
        params: state.params,
        prev_params: state.prev_params,
        model: state.model,
        spec,
    })
}

fn term_count(spec: &ProblemSpec) -> usize {
    let mut n = spec.residuals + spec.bc_components().len();
    if spec.time_dependent {
        n += 1;
    }
    n
}

/// One plain-empirical-loss step producing theta^1 from theta^0 so the first
/// tau estimate sees a nonzero parameter increment.
fn warmup_step(cfg: &TrainConfig, state: &mut TrainState) -> Result<(), TrainError> {
    let batch = state
        .spec
        .sample(&cfg.counts(), cfg.seed, 0, cfg.sampling == SamplingMode::Frozen);
    let out = losses::evaluate_loss(
        &state.spec,
        &state.model,
        &state.params,
        ResidualMode::Plain,
        &batch,
        &state.weights.lambdas,
        cfg.causal.filter(|_| state.spec.supports_causal()).as_ref(),
        GradRequest::Total,
    )?;
    // Anchor the shrink factor at the initial interior loss on the first batch.
    if let Some(pts) = state.pts.as_mut() {
        pts.set_anchor(&out.raw_interior);
    }
    state.prev_params = state.params.clone();
    let lr = cfg.lr.lr_at(1);
    state
        .optimizer
        .step(&mut state.params, &out.grad.expect("gradient requested"), lr)?;
    Ok(())
}

fn record_iteration(state: &mut TrainState, out: &EvalOutput, k: usize, taus: &[f64], lr: f64) {
    if state.history.term_names.is_empty() {
        state.history.term_names = out.breakdown.terms.iter().map(|t| t.name.clone()).collect();
        state.history.tau_names = match taus.len() {
            0 => vec![],
            1 => vec!["tau".to_string()],
            _ => state
                .spec
                .residual_names()
                .iter()
                .map(|n| format!("tau_{n}"))
                .collect(),
        };
    }
    state.history.records.push(IterRecord {
        iter: k,
        terms: out.breakdown.terms.iter().map(|t| t.value).collect(),
        total: out.breakdown.total,
        lambdas: state.weights.lambdas.clone(),
        taus: taus.to_vec(),
        lr,
    });
}

fn periodic_error(cfg: &TrainConfig, state: &mut TrainState) -> Result<Option<f64>, TrainError> {
    if state.reference.is_none() {
        let built = match reference_solve(&state.spec, cfg.eval_resolution) {
            Ok(r) => Some(r),
            Err(ProblemError::UnsupportedReference(_)) => {
                state
                    .history
                    .notes
                    .push("reference unavailable; error evaluation skipped".into());
                None
            }
            Err(e) => return Err(e.into()),
        };
        state.reference = Some(built);
    }
    match state.reference.as_ref().unwrap() {
        Some(reference) => Ok(Some(evaluate(
            &state.spec,
            &state.model,
            &state.params,
            reference,
        )?)),
        None => Ok(None),
    }
}

fn snapshot(cfg: &TrainConfig, state: &TrainState, iter: usize) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        iter,
        params: state.params.clone(),
        prev_params: state.prev_params.clone(),
        optimizer: state.optimizer.clone(),
        pts: state.pts.clone(),
        weights: state.weights.clone(),
        loss_ma: state
            .loss_ma
            .iter()
            .map(|q| q.iter().copied().collect())
            .collect(),
        history: state.history.clone(),
    }
}

/// Relative L2 error of the network's first output over the reference grid.
pub fn evaluate(
    spec: &ProblemSpec,
    model: &Model,
    params: &ParamVector,
    reference: &ReferenceSolution,
) -> Result<f64, ProblemError> {
    let nodes = reference.nodes();
    let mut pred = Vec::with_capacity(nodes.len());
    let chunk = 4096;
    let mut coords = ndarray::Array2::zeros((chunk, spec.arity()));
    let mut i = 0;
    while i < nodes.len() {
        let n = chunk.min(nodes.len() - i);
        for (r, node) in nodes[i..i + n].iter().enumerate() {
            for a in 0..spec.arity() {
                coords[(r, a)] = node[a];
            }
        }
        let view = coords.slice(ndarray::s![..n, ..]);
        let out = model.forward_batch::<1>(params, &view, None);
        for r in 0..n {
            pred.push(out.outputs.get(r, 0).value());
        }
        i += n;
    }
    let reference_flat: Vec<f64> = reference.values.iter().copied().collect();
    relative_l2(&pred, &reference_flat)
}
