//! Parameter optimizers (Adam, SOAP) and the learning-rate schedule.
//!
//! SOAP performs the Adam update in the eigenbasis of Shampoo-style
//! covariance accumulators, refreshed periodically; matrix-shaped parameter
//! segments get the full rotated update, vectors and scalars fall back to
//! plain Adam. Both optimizers share the elementwise moment update so the
//! identity-basis reduction is exact.

pub mod jacobi;

pub use jacobi::{jacobi_eigen, JacobiError};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamVector;

/// Linear warmup to the peak rate, then continuous exponential decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub decay_rate: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            peak: 1e-3,
            warmup: 2000,
            decay_rate: 0.9,
            decay_every: 2000,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, k: usize) -> f64 {
        if k < self.warmup {
            self.peak * k as f64 / self.warmup as f64
        } else {
            let exponent = (k - self.warmup) as f64 / self.decay_every as f64;
            self.peak * self.decay_rate.powf(exponent)
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient contains nonfinite entries; step rejected")]
    NonFiniteGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Shared elementwise moment update; returns the preconditioned step
/// direction. Used verbatim by Adam and by SOAP in rotated coordinates.
#[inline]
fn moment_update(
    m: &mut f64,
    v: &mut f64,
    g: f64,
    cfg: &AdamParams,
    bias1: f64,
    bias2: f64,
) -> f64 {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / bias1;
    let v_hat = *v / bias2;
    m_hat / (v_hat.sqrt() + cfg.eps)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize, cfg: AdamParams) -> Self {
        AdamState {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamVector,
        grad: &ParamVector,
        lr: f64,
    ) -> Result<(), OptimError> {
        if !grad.all_finite() {
            return Err(OptimError::NonFiniteGradient);
        }
        self.step += 1;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for i in 0..params.values.len() {
            let dir = moment_update(
                &mut self.m[i],
                &mut self.v[i],
                grad.values[i],
                &self.cfg,
                bias1,
                bias2,
            );
            params.values[i] -= lr * dir;
        }
        Ok(())
    }
}

/// Per matrix-segment SOAP state.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SoapSegment {
    seg: usize,
    l_cov: Array2<f64>,
    r_cov: Array2<f64>,
    q_l: Option<Array2<f64>>,
    q_r: Option<Array2<f64>>,
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoapState {
    pub cfg: AdamParams,
    /// Eigenbases are refreshed (and covariances accumulated) every this
    /// many steps.
    pub precondition_frequency: u64,
    /// EMA factor on the covariance accumulators.
    pub cov_ema: f64,
    segments: Vec<SoapSegment>,
    /// Moments for non-matrix entries (Adam fallback), indexed like values.
    vec_m: Vec<f64>,
    vec_v: Vec<f64>,
    step: u64,
    /// Count of eigensolver failures survived by keeping the old basis.
    pub eigen_failures: u64,
}

impl SoapState {
    pub fn new(params: &ParamVector, cfg: AdamParams, precondition_frequency: u64) -> Self {
        let segments = params
            .layout
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_matrix())
            .map(|(i, s)| SoapSegment {
                seg: i,
                l_cov: Array2::zeros((s.rows, s.rows)),
                r_cov: Array2::zeros((s.cols, s.cols)),
                q_l: None,
                q_r: None,
                m: Array2::zeros((s.rows, s.cols)),
                v: Array2::zeros((s.rows, s.cols)),
            })
            .collect();
        SoapState {
            cfg,
            precondition_frequency,
            cov_ema: 0.95,
            segments,
            vec_m: vec![0.0; params.values.len()],
            vec_v: vec![0.0; params.values.len()],
            step: 0,
        eigen_failures: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamVector,
        grad: &ParamVector,
        lr: f64,
    ) -> Result<(), OptimError> {
        if !grad.all_finite() {
            return Err(OptimError::NonFiniteGradient);
        }
        self.step += 1;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let refresh = self.step % self.precondition_frequency == 0;
        let layout = params.layout.clone();

        // Matrix segments: rotated Adam.
        for st in &mut self.segments {
            let seg = &layout.segments[st.seg];
            let g = grad.seg_matrix(seg).to_owned();

            if refresh {
                // Accumulate covariances with the current gradient, then
                // recompute the eigenbases.
                let ggt = g.dot(&g.t());
                let gtg = g.t().dot(&g);
                st.l_cov = &st.l_cov * self.cov_ema + &(ggt * (1.0 - self.cov_ema));
                st.r_cov = &st.r_cov * self.cov_ema + &(gtg * (1.0 - self.cov_ema));
                // A covariance this small carries no directional information
                // and would only stall the eigensolver in denormal range;
                // keep the current basis until real signal arrives.
                let fro = st.l_cov.iter().map(|v| v * v).sum::<f64>().sqrt();
                if fro >= 1e-100 {
                    // Warm start: in the previous eigenbasis the covariance
                    // is near-diagonal, so Jacobi needs only a sweep or two.
                    // The composed basis is still exactly an eigenbasis of
                    // the covariance.
                    let eig = |cov: &Array2<f64>, old: &Option<Array2<f64>>| match old {
                        Some(q) => {
                            let rotated = q.t().dot(cov).dot(q);
                            let (_, v) = jacobi_eigen(&rotated, 20, 1e-10)?;
                            Ok::<Array2<f64>, JacobiError>(q.dot(&v))
                        }
                        None => Ok(jacobi_eigen(cov, 20, 1e-10)?.1),
                    };
                    let new_l = eig(&st.l_cov, &st.q_l);
                    let new_r = eig(&st.r_cov, &st.q_r);
                    match (new_l, new_r) {
                        (Ok(ql), Ok(qr)) => {
                            // Carry the first moment into the new basis
                            // through the original coordinates; the second
                            // moment is kept entrywise (standard practice).
                            let m_orig = match (&st.q_l, &st.q_r) {
                                (Some(ol), Some(or)) => ol.dot(&st.m).dot(&or.t()),
                                _ => st.m.clone(),
                            };
                            st.m = ql.t().dot(&m_orig).dot(&qr);
                            st.q_l = Some(ql);
                            st.q_r = Some(qr);
                        }
                        _ => {
                            self.eigen_failures += 1;
                        }
                    }
                }
            }

            let g_rot = match (&st.q_l, &st.q_r) {
                (Some(ql), Some(qr)) => ql.t().dot(&g).dot(qr),
                _ => g,
            };
            let mut dir = Array2::zeros(g_rot.raw_dim());
            for i in 0..g_rot.nrows() {
                for j in 0..g_rot.ncols() {
                    dir[(i, j)] = moment_update(
                        &mut st.m[(i, j)],
                        &mut st.v[(i, j)],
                        g_rot[(i, j)],
                        &self.cfg,
                        bias1,
                        bias2,
                    );
                }
            }
            let update = match (&st.q_l, &st.q_r) {
                (Some(ql), Some(qr)) => ql.dot(&dir).dot(&qr.t()),
                _ => dir,
            };
            let mut target = params.seg_matrix_mut(seg);
            target.scaled_add(-lr, &update);
        }

        // Vector/scalar segments: plain Adam on the flat values.
        for seg in layout.segments.iter().filter(|s| !s.is_matrix()) {
            for i in seg.offset..seg.offset + seg.len() {
                let dir = moment_update(
                    &mut self.vec_m[i],
                    &mut self.vec_v[i],
                    grad.values[i],
                    &self.cfg,
                    bias1,
                    bias2,
                );
                params.values[i] -= lr * dir;
            }
        }
        Ok(())
    }

    /// Orthonormality defect `max |Q^T Q - I|` over all current bases.
    pub fn basis_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for st in &self.segments {
            for q in [&st.q_l, &st.q_r].into_iter().flatten() {
                let qtq = q.t().dot(q);
                for i in 0..qtq.nrows() {
                    for j in 0..qtq.ncols() {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        worst = worst.max((qtq[(i, j)] - expect).abs());
                    }
                }
            }
        }
        worst
    }

    #[cfg(test)]
    fn inject_bases(&mut self, seg: usize, q_l: Array2<f64>, q_r: Array2<f64>) {
        let st = self
            .segments
            .iter_mut()
            .find(|s| s.seg == seg)
            .expect("matrix segment");
        st.q_l = Some(q_l);
        st.q_r = Some(q_r);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam(AdamState),
    Soap(SoapState),
}

impl Optimizer {
    pub fn step(
        &mut self,
        params: &mut ParamVector,
        grad: &ParamVector,
        lr: f64,
    ) -> Result<(), OptimError> {
        match self {
            Optimizer::Adam(s) => s.step(params, grad, lr),
            Optimizer::Soap(s) => s.step(params, grad, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Layout;
    use approx::assert_relative_eq;

    fn flat_params(n: usize, fill: f64) -> ParamVector {
        ParamVector::from_values(Layout::of_single("p", n), vec![fill; n])
    }

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.0);
        assert_relative_eq!(s.lr_at(2000), 1e-3);
        assert_relative_eq!(s.lr_at(4000), 9e-4, max_relative = 1e-12);
        assert_relative_eq!(s.lr_at(3000), 1e-3 * 0.9f64.powf(0.5), max_relative = 1e-12);
        assert_relative_eq!(s.lr_at(1000), 5e-4);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = flat_params(4, 1.5);
        let g = p.zeros_like();
        let mut adam = AdamState::new(4, AdamParams::default());
        adam.step(&mut p, &g, 0.1).unwrap();
        assert!(p.values.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = flat_params(1, 0.0);
        let mut g = p.zeros_like();
        g.values[0] = 1.0;
        let mut adam = AdamState::new(1, AdamParams::default());
        adam.step(&mut p, &g, 0.1).unwrap();
        // Bias-corrected ratio is ~1 on the first step.
        assert_relative_eq!(p.values[0], -0.1, max_relative = 1e-7);
    }

    #[test]
    fn adam_rejects_nonfinite_gradients() {
        let mut p = flat_params(2, 0.5);
        let mut g = p.zeros_like();
        g.values[1] = f64::NAN;
        let mut adam = AdamState::new(2, AdamParams::default());
        assert!(matches!(
            adam.step(&mut p, &g, 0.1),
            Err(OptimError::NonFiniteGradient)
        ));
        assert_eq!(p.values, vec![0.5, 0.5]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn adam_three_steps_match_reference_reimplementation() {
        // Quadratic loss 0.5 * sum(x^2): gradient is x.
        let cfg = AdamParams::default();
        let mut p = ParamVector::from_values(Layout::of_single("p", 2), vec![1.0, -2.0]);
        let mut adam = AdamState::new(2, cfg);
        let lr = 0.05;
        for _ in 0..3 {
            let mut g = p.zeros_like();
            g.values.copy_from_slice(&p.values);
            adam.step(&mut p, &g, lr).unwrap();
        }

        // Independent straight-line reimplementation.
        let mut x = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            let g = x;
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert_relative_eq!(p.values[i], x[i], max_relative = 1e-12);
        }
    }

    fn matrix_layout() -> std::sync::Arc<Layout> {
        Layout::build([
            ("w".to_string(), 4, 4),
            ("b".to_string(), 4, 1),
        ])
    }

    #[test]
    fn soap_with_identity_bases_equals_adam() {
        let layout = matrix_layout();
        let values: Vec<f64> = (0..layout.total).map(|i| 0.1 * i as f64).collect();
        let mut p_adam = ParamVector::from_values(layout.clone(), values.clone());
        let mut p_soap = ParamVector::from_values(layout.clone(), values);
        let mut g = p_adam.zeros_like();
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = ((i * 7 % 11) as f64 - 5.0) * 0.3;
        }
        let mut adam = AdamState::new(layout.total, AdamParams::default());
        // Large frequency: no refresh happens, bases stay identity.
        let mut soap = SoapState::new(&p_soap, AdamParams::default(), 1_000_000);
        for k in 1..=3 {
            let lr = 0.01 * k as f64;
            adam.step(&mut p_adam, &g, lr).unwrap();
            soap.step(&mut p_soap, &g, lr).unwrap();
        }
        for (a, s) in p_adam.values.iter().zip(&p_soap.values) {
            assert!((a - s).abs() <= 1e-12, "{a} vs {s}");
        }
    }

    #[test]
    fn soap_zero_gradient_is_identity() {
        let layout = matrix_layout();
        let mut p = ParamVector::from_values(layout.clone(), vec![0.7; layout.total]);
        let g = p.zeros_like();
        let mut soap = SoapState::new(&p, AdamParams::default(), 2);
        for _ in 0..4 {
            soap.step(&mut p, &g, 0.1).unwrap();
        }
        assert!(p.values.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn soap_bases_stay_orthonormal() {
        let layout = matrix_layout();
        let mut p = ParamVector::from_values(layout.clone(), vec![0.3; layout.total]);
        let mut soap = SoapState::new(&p, AdamParams::default(), 2);
        let mut rng = crate::rng::seeded_rng(8, 0);
        use rand::Rng;
        for _ in 0..10 {
            let mut g = p.zeros_like();
            for v in g.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            soap.step(&mut p, &g, 1e-3).unwrap();
        }
        assert_eq!(soap.eigen_failures, 0);
        assert!(soap.basis_defect() < 1e-8, "defect {}", soap.basis_defect());
    }

    #[test]
    fn soap_rotation_consistency_against_composition_oracle() {
        // With injected orthonormal bases, one SOAP step must equal the
        // composition: rotate gradient, Adam in rotated coords, rotate back.
        let layout = matrix_layout();
        let values: Vec<f64> = (0..layout.total).map(|i| (i as f64).sin()).collect();
        let mut p = ParamVector::from_values(layout.clone(), values.clone());
        let mut g = p.zeros_like();
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).cos();
        }
        // Givens rotations as test bases.
        let rot = |angle: f64| {
            let mut q: Array2<f64> = Array2::eye(4);
            q[(0, 0)] = angle.cos();
            q[(0, 2)] = -angle.sin();
            q[(2, 0)] = angle.sin();
            q[(2, 2)] = angle.cos();
            q
        };
        let (ql, qr) = (rot(0.4), rot(-1.1));
        let mut soap = SoapState::new(&p, AdamParams::default(), 1_000_000);
        soap.inject_bases(0, ql.clone(), qr.clone());
        soap.step(&mut p, &g, 0.01).unwrap();

        // Oracle: rotated Adam step composed by hand.
        let seg = layout.segments[0].clone();
        let g_mat = g.seg_matrix(&seg).to_owned();
        let g_rot = ql.t().dot(&g_mat).dot(&qr);
        let cfg = AdamParams::default();
        let mut dir = Array2::zeros((4, 4));
        let (mut m, mut v) = (Array2::<f64>::zeros((4, 4)), Array2::<f64>::zeros((4, 4)));
        for i in 0..4 {
            for j in 0..4 {
                dir[(i, j)] = moment_update(
                    &mut m[(i, j)],
                    &mut v[(i, j)],
                    g_rot[(i, j)],
                    &cfg,
                    1.0 - 0.9,
                    1.0 - 0.999,
                );
            }
        }
        let update = ql.dot(&dir).dot(&qr.t());
        for i in 0..4 {
            for j in 0..4 {
                let expect = values[i * 4 + j] - 0.01 * update[(i, j)];
                assert_relative_eq!(p.values[i * 4 + j], expect, epsilon = 1e-14);
            }
        }
    }
}
