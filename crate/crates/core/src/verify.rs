//! Numerical verification of the spurious-solution analysis: smooth cutoff
//! construction, spurious fields and their one-step explicit pseudo-time
//! images, quadrature estimates of expected residual losses, and power-law
//! fits of the loss-versus-layer-width scaling.
//!
//! All fields here are closed forms (no networks): the spurious solution is
//! `u_dagger = alpha_h(t) u_star(t, x)` built from a C-infinity cutoff that
//! is exactly one before the transition layer and exactly zero after it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Jet;

/// Smooth cutoff: one for `t <= t0`, zero for `t >= t0 + h`, with vanishing
/// first derivative at both ends of the transition layer `[t0, t0+h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub t0: f64,
    pub h: f64,
}

impl CutoffSpec {
    pub fn layer(&self) -> (f64, f64) {
        (self.t0, self.t0 + self.h)
    }
}

/// Bump kernel `exp(-1/s)` for `s > 0`, identically zero otherwise,
/// evaluated as a jet (all derivatives vanish at the junction).
fn bump<const N: usize>(s: Jet<N>) -> Jet<N> {
    if s.value() <= 0.0 {
        Jet::zero()
    } else {
        (-s.recip()).exp()
    }
}

/// The unit transition profile `eta(s) = phi(1-s) / (phi(s) + phi(1-s))`:
/// one for `s <= 0`, zero for `s >= 1`.
fn eta_jet<const N: usize>(s: Jet<N>) -> Jet<N> {
    if s.value() <= 0.0 {
        Jet::constant(1.0)
    } else if s.value() >= 1.0 {
        Jet::zero()
    } else {
        let a = bump(Jet::constant(1.0) - s);
        let b = bump(s);
        a / (a + b)
    }
}

/// `alpha_h` and its derivatives: `alpha^(k)(t) = h^-k eta^(k)((t-t0)/h)`.
///
/// Exact constants outside the open transition layer; inside, the value and
/// the first `order` derivatives come from one jet evaluation of `eta`.
pub fn cutoff_eval(spec: &CutoffSpec, t: f64, order: usize) -> f64 {
    assert!(order <= 2, "cutoff derivatives implemented up to order 2");
    let s = (t - spec.t0) / spec.h;
    if s <= 0.0 {
        return if order == 0 { 1.0 } else { 0.0 };
    }
    if s >= 1.0 {
        return 0.0;
    }
    let eta = eta_jet(Jet::<3>::variable(s));
    eta.derivative(order) / spec.h.powi(order as i32)
}

/// `eta(s)` and derivatives on the unit interval (used for the
/// h-independence check of `h * int |alpha'|^2`).
pub fn eta_eval(s: f64, order: usize) -> f64 {
    assert!(order <= 2);
    if s <= 0.0 {
        return if order == 0 { 1.0 } else { 0.0 };
    }
    if s >= 1.0 {
        return 0.0;
    }
    eta_jet(Jet::<3>::variable(s)).derivative(order)
}

/// Host problems with closed-form true solutions for the spurious fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum VerifyProblem {
    /// `u_t = cos t` on `[0, 2 pi]`, zero initial condition:
    /// `u_star(t) = sin t` (inhomogeneous right-hand side).
    OdeCos,
    /// Homogeneous advection `u_t + c u_x = 0` on `[0, T] x [0, 2 pi]` with
    /// `u_star = sin(x - c t)`.
    Advection { c: f64, t_final: f64 },
}

impl VerifyProblem {
    pub fn advection_harness() -> Self {
        VerifyProblem::Advection {
            c: 1.0,
            t_final: 2.0,
        }
    }

    pub fn t_final(&self) -> f64 {
        match self {
            VerifyProblem::OdeCos => std::f64::consts::TAU,
            VerifyProblem::Advection { t_final, .. } => *t_final,
        }
    }

    /// Measure of the spatial domain (1 for the ODE).
    pub fn space_measure(&self) -> f64 {
        match self {
            VerifyProblem::OdeCos => 1.0,
            VerifyProblem::Advection { .. } => std::f64::consts::TAU,
        }
    }

    pub fn u_star(&self, t: f64, x: f64) -> f64 {
        match self {
            VerifyProblem::OdeCos => t.sin(),
            VerifyProblem::Advection { c, .. } => (x - c * t).sin(),
        }
    }
}

/// Which field the residual is evaluated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// `u_dagger = alpha_h u_star`.
    Spurious,
    /// `u_dagger_plus = u_dagger - tau R[u_dagger]`: one explicit
    /// pseudo-time update, the analysis proxy.
    SteppedSpurious,
}

/// Residual of the chosen spurious field at `(t, x)` (x ignored for the ODE),
/// assembled from closed forms.
pub fn spurious_residual(
    problem: VerifyProblem,
    cutoff: &CutoffSpec,
    tau: f64,
    point: (f64, f64),
    which: FieldKind,
) -> f64 {
    let (t, x) = point;
    let a0 = cutoff_eval(cutoff, t, 0);
    let a1 = cutoff_eval(cutoff, t, 1);
    match problem {
        VerifyProblem::OdeCos => {
            // R[v] = v_t - cos t, u_dagger = alpha sin t.
            let (sin_t, cos_t) = t.sin_cos();
            match which {
                FieldKind::Spurious => a1 * sin_t + (a0 - 1.0) * cos_t,
                FieldKind::SteppedSpurious => {
                    // R[u+] = u' - tau u'' - tau sin t - cos t with
                    // u' = a1 sin + a0 cos, u'' = a2 sin + 2 a1 cos - a0 sin.
                    let a2 = cutoff_eval(cutoff, t, 2);
                    let u1 = a1 * sin_t + a0 * cos_t;
                    let u2 = a2 * sin_t + 2.0 * a1 * cos_t - a0 * sin_t;
                    u1 - tau * u2 - tau * sin_t - cos_t
                }
            }
        }
        VerifyProblem::Advection { .. } => {
            // Linear spatial operator and exact u_star:
            // R[u_dagger] = alpha' u_star, R[u_dagger_plus] = (alpha' - tau alpha'') u_star.
            let us = problem.u_star(t, x);
            match which {
                FieldKind::Spurious => a1 * us,
                FieldKind::SteppedSpurious => {
                    let a2 = cutoff_eval(cutoff, t, 2);
                    (a1 - tau * a2) * us
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("quadrature failed to converge: last estimates {last:.6e}, {prev:.6e}")]
    NoConvergence { prev: f64, last: f64 },
    #[error("scaling fit needs positive inputs")]
    NonPositive,
    #[error("scaling fit needs at least {0} points")]
    TooFewPoints(usize),
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative by recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre over `[lo, hi]` with mandatory panel breaks;
/// panels are refined by doubling until the relative change drops below
/// `rel_tol`.
pub fn adaptive_panel_quadrature(
    lo: f64,
    hi: f64,
    breaks: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    f: &dyn Fn(f64) -> f64,
) -> Result<f64, VerifyError> {
    let (gl_x, gl_w) = gauss_legendre(20);
    let mut edges: Vec<f64> = vec![lo, hi];
    edges.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();

    let integrate = |edges: &[f64]| -> f64 {
        let mut total = 0.0;
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let mut panel = 0.0;
            for (x, wt) in gl_x.iter().zip(&gl_w) {
                panel += wt * f(mid + half * x);
            }
            total += half * panel;
        }
        total
    };

    let mut prev = integrate(&edges);
    let mut last = prev;
    for _ in 0..12 {
        // Halve every panel.
        let mut refined = Vec::with_capacity(edges.len() * 2);
        for w in edges.windows(2) {
            refined.push(w[0]);
            refined.push(0.5 * (w[0] + w[1]));
        }
        refined.push(*edges.last().unwrap());
        edges = refined;
        let next = integrate(&edges);
        if (next - prev).abs() < rel_tol * next.abs() + abs_tol {
            return Ok(next);
        }
        last = next;
        prev = next;
    }
    Err(VerifyError::NoConvergence { prev, last })
}

/// Expected residual loss `E L = (1/(T |Omega|)) int int |R[v]|^2 dx dt`
/// by tensor-product quadrature, with panels concentrated at the layer.
pub fn expected_residual_loss(
    problem: VerifyProblem,
    cutoff: &CutoffSpec,
    tau: f64,
    which: FieldKind,
) -> Result<f64, VerifyError> {
    let t_final = problem.t_final();
    let (l0, l1) = cutoff.layer();
    match problem {
        VerifyProblem::OdeCos => {
            let integral = adaptive_panel_quadrature(0.0, t_final, &[l0, l1], 1e-6, 0.0, &|t| {
                spurious_residual(problem, cutoff, tau, (t, 0.0), which).powi(2)
            })?;
            Ok(integral / t_final)
        }
        VerifyProblem::Advection { .. } => {
            // Inner spatial integral by fixed-order Gauss-Legendre (the
            // integrand is smooth and periodic in x).
            let (gl_x, gl_w) = gauss_legendre(32);
            let omega = problem.space_measure();
            let spatial = move |t: f64| -> f64 {
                let half = 0.5 * omega;
                let mut s = 0.0;
                for (x, w) in gl_x.iter().zip(&gl_w) {
                    let xx = half + half * x;
                    s += w * spurious_residual(problem, cutoff, tau, (t, xx), which).powi(2);
                }
                half * s
            };
            let integral =
                adaptive_panel_quadrature(0.0, t_final, &[l0, l1], 1e-6, 0.0, &spatial)?;
            Ok(integral / (t_final * omega))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub rms_residual: f64,
}

/// Least-squares slope of `log10(loss)` against `log10(h)`.
pub fn scaling_fit(h_values: &[f64], losses: &[f64]) -> Result<ScalingFit, VerifyError> {
    if h_values.len() != losses.len() || h_values.len() < 2 {
        return Err(VerifyError::TooFewPoints(2));
    }
    if h_values.iter().chain(losses).any(|&v| v <= 0.0) {
        return Err(VerifyError::NonPositive);
    }
    let xs: Vec<f64> = h_values.iter().map(|h| h.log10()).collect();
    let ys: Vec<f64> = losses.iter().map(|l| l.log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ScalingFit {
        slope,
        intercept,
        rms_residual: rms,
    })
}

/// One row of the layer-width sweep report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub h: f64,
    pub loss_spurious: f64,
    pub loss_stepped: f64,
}

/// Expected-loss sweep over layer widths at fixed tau, plus both fitted
/// slopes. This is the substance of the scaling check: the spurious field's
/// loss grows like h^-1 and its one-step image like tau^2 h^-3.
pub fn theorem_scaling_sweep(
    problem: VerifyProblem,
    t0: f64,
    h_values: &[f64],
    tau: f64,
) -> Result<(Vec<SweepRow>, ScalingFit, ScalingFit), VerifyError> {
    let mut rows = Vec::with_capacity(h_values.len());
    for &h in h_values {
        let cutoff = CutoffSpec { t0, h };
        let loss_spurious =
            expected_residual_loss(problem, &cutoff, tau, FieldKind::Spurious)?;
        let loss_stepped =
            expected_residual_loss(problem, &cutoff, tau, FieldKind::SteppedSpurious)?;
        rows.push(SweepRow {
            h,
            loss_spurious,
            loss_stepped,
        });
    }
    let fit_spurious = scaling_fit(
        h_values,
        &rows.iter().map(|r| r.loss_spurious).collect::<Vec<_>>(),
    )?;
    let fit_stepped = scaling_fit(
        h_values,
        &rows.iter().map(|r| r.loss_stepped).collect::<Vec<_>>(),
    )?;
    Ok((rows, fit_spurious, fit_stepped))
}

/// Witness data for the fixed-collocation pathology: an empirical loss that
/// is exactly zero while the field is far from the true solution.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpuriousWitness {
    pub empirical_interior_loss: f64,
    pub relative_l2_error: f64,
}

/// Evaluate the Theorem-1 witness on advection: a frozen collocation set
/// whose time coordinates all avoid the transition layer sees an exactly
/// zero empirical residual for `u_dagger`, even though `u_dagger` is wrong
/// after the layer.
pub fn theorem1_witness(
    problem: VerifyProblem,
    cutoff: &CutoffSpec,
    n_points: usize,
    seed: u64,
) -> SpuriousWitness {
    use rand::Rng;
    let mut rng = crate::rng::seeded_rng(seed, 0x71);
    let t_final = problem.t_final();
    let omega = problem.space_measure();
    let (l0, l1) = cutoff.layer();

    // Frozen interior set avoiding the layer.
    let mut loss = 0.0;
    let mut drawn = 0;
    while drawn < n_points {
        let t = rng.gen_range(0.0..t_final);
        if t > l0 && t < l1 {
            continue;
        }
        let x = rng.gen_range(0.0..omega);
        let r = spurious_residual(problem, cutoff, 0.0, (t, x), FieldKind::Spurious);
        loss += r * r;
        drawn += 1;
    }
    loss /= n_points as f64;

    // Relative L2 distance between u_dagger and u_star on a dense grid.
    let (nt, nx) = (400, 128);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..nt {
        let t = t_final * (i as f64 + 0.5) / nt as f64;
        let a = cutoff_eval(cutoff, t, 0);
        for j in 0..nx {
            let x = omega * j as f64 / nx as f64;
            let us = problem.u_star(t, x);
            num += (a - 1.0).powi(2) * us * us;
            den += us * us;
        }
    }
    SpuriousWitness {
        empirical_interior_loss: loss,
        relative_l2_error: (num / den).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const CUT: CutoffSpec = CutoffSpec { t0: 1.0, h: 0.4 };

    #[test]
    fn cutoff_boundary_values() {
        assert_eq!(cutoff_eval(&CUT, 1.0, 0), 1.0);
        assert_eq!(cutoff_eval(&CUT, 1.4, 0), 0.0);
        assert_eq!(cutoff_eval(&CUT, 0.2, 1), 0.0);
        assert_eq!(cutoff_eval(&CUT, 2.0, 1), 0.0);
        // Midpoint symmetry: eta(1/2) = 1/2.
        assert_relative_eq!(eta_eval(0.5, 0), 0.5, epsilon = 1e-14);
        // Monotone between the plateaus, bounded in [0, 1].
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = eta_eval(i as f64 / 100.0, 0);
            assert!((0.0..=1.0).contains(&v));
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn cutoff_derivatives_match_finite_differences() {
        for t in [1.05, 1.13, 1.2, 1.31, 1.39] {
            let f = |t: f64| cutoff_eval(&CUT, t, 0);
            let h = 1e-6;
            let d1 = (f(t + h) - f(t - h)) / (2.0 * h);
            assert_relative_eq!(cutoff_eval(&CUT, t, 1), d1, max_relative = 1e-7, epsilon = 1e-9);
            // Wider step for the second difference: at h = 1e-6 the FD
            // oracle is pure roundoff (4 eps / h^2).
            let h = 1e-4;
            let d2 = (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
            assert_relative_eq!(cutoff_eval(&CUT, t, 2), d2, max_relative = 1e-4, epsilon = 1e-4);
        }
    }

    #[test]
    fn layer_energy_is_h_inverse_scaled() {
        // h * int |alpha_h'|^2 dt equals int_0^1 |eta'|^2 ds for every h.
        let unit = adaptive_panel_quadrature(0.0, 1.0, &[], 1e-9, 0.0, &|s| {
            eta_eval(s, 1).powi(2)
        })
        .unwrap();
        for h in [0.4, 0.1, 0.05] {
            let cutoff = CutoffSpec { t0: 1.0, h };
            let (l0, l1) = cutoff.layer();
            let energy = adaptive_panel_quadrature(l0, l1, &[], 1e-9, 0.0, &|t| {
                cutoff_eval(&cutoff, t, 1).powi(2)
            })
            .unwrap();
            assert_relative_eq!(h * energy, unit, max_relative = 1e-6);
        }
    }

    #[test]
    fn ode_residuals_outside_the_layer() {
        // Before the layer both fields are residual-free; after it,
        // u_dagger = 0 has residual -cos t (inhomogeneous equation).
        let r = spurious_residual(VerifyProblem::OdeCos, &CUT, 1.0, (0.5, 0.0), FieldKind::Spurious);
        assert_relative_eq!(r, 0.0, epsilon = 1e-14);
        let rp = spurious_residual(
            VerifyProblem::OdeCos,
            &CUT,
            1.0,
            (0.5, 0.0),
            FieldKind::SteppedSpurious,
        );
        assert_relative_eq!(rp, 0.0, epsilon = 1e-14);
        let t = 3.0;
        let r = spurious_residual(VerifyProblem::OdeCos, &CUT, 1.0, (t, 0.0), FieldKind::Spurious);
        assert_relative_eq!(r, -t.cos(), epsilon = 1e-14);
        // Homogeneous advection: zero on both sides of the layer.
        let adv = VerifyProblem::advection_harness();
        let cut = CutoffSpec { t0: 1.0, h: 0.3 };
        for t in [0.3, 1.9] {
            let r = spurious_residual(adv, &cut, 1.0, (t, 2.0), FieldKind::Spurious);
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn stepped_field_amplifies_the_layer_residual() {
        // tau = 1, h = 0.4: dense max over the layer grows by >= 10x.
        let mut max_r = 0.0f64;
        let mut max_rp = 0.0f64;
        for i in 0..=4000 {
            let t = 1.0 + 0.4 * i as f64 / 4000.0;
            max_r = max_r.max(
                spurious_residual(VerifyProblem::OdeCos, &CUT, 1.0, (t, 0.0), FieldKind::Spurious)
                    .abs(),
            );
            max_rp = max_rp.max(
                spurious_residual(
                    VerifyProblem::OdeCos,
                    &CUT,
                    1.0,
                    (t, 0.0),
                    FieldKind::SteppedSpurious,
                )
                .abs(),
            );
        }
        assert!(max_rp / max_r >= 10.0, "amplification {}", max_rp / max_r);
    }

    #[test]
    fn quadrature_handles_exact_power_laws() {
        let fit = scaling_fit(&[0.4, 0.2, 0.1, 0.05], &[7.0 / 0.4, 7.0 / 0.2, 7.0 / 0.1, 7.0 / 0.05])
            .unwrap();
        assert_relative_eq!(fit.slope, -1.0, epsilon = 1e-8);
        assert_relative_eq!(fit.rms_residual, 0.0, epsilon = 1e-10);
        assert!(scaling_fit(&[0.1, -0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cross_term_vanishes_by_quadrature() {
        for h in [0.4, 0.1] {
            let cutoff = CutoffSpec { t0: 1.0, h };
            let (l0, l1) = cutoff.layer();
            let cross = adaptive_panel_quadrature(l0, l1, &[], 1e-9, 1e-12, &|t| {
                cutoff_eval(&cutoff, t, 1) * cutoff_eval(&cutoff, t, 2)
            })
            .unwrap();
            assert!(cross.abs() < 1e-8, "cross term {cross} at h={h}");
        }
    }

    #[test]
    fn pythagorean_split_for_homogeneous_advection() {
        // E L(u+) = E L(u) + tau^2 * (alpha'' energy term): the cross term
        // cancels exactly because G(t) is constant for the sine profile.
        let problem = VerifyProblem::advection_harness();
        let cutoff = CutoffSpec { t0: 1.0, h: 0.2 };
        let tau = 0.7;
        let l_u = expected_residual_loss(problem, &cutoff, tau, FieldKind::Spurious).unwrap();
        let l_up =
            expected_residual_loss(problem, &cutoff, tau, FieldKind::SteppedSpurious).unwrap();
        // tau^2 term evaluated directly.
        let (l0, l1) = cutoff.layer();
        let alpha2 = adaptive_panel_quadrature(l0, l1, &[], 1e-9, 0.0, &|t| {
            cutoff_eval(&cutoff, t, 2).powi(2)
        })
        .unwrap();
        // G(t) = pi for the sine profile; normalization 1/(T |Omega|).
        let second = tau * tau * alpha2 * std::f64::consts::PI
            / (problem.t_final() * problem.space_measure());
        assert_relative_eq!(l_up, l_u + second, max_relative = 1e-4);
    }

    #[test]
    fn witness_has_zero_loss_but_large_error() {
        let problem = VerifyProblem::advection_harness();
        let w = theorem1_witness(problem, &CUT, 2000, 3);
        assert_eq!(w.empirical_interior_loss, 0.0);
        assert!(w.relative_l2_error > 0.3, "error {}", w.relative_l2_error);
    }

    #[test]
    fn scaling_slopes_match_the_theory() {
        let problem = VerifyProblem::advection_harness();
        let hs = [0.4, 0.2, 0.1, 0.05, 0.025];
        let (_, fit_u, fit_up) = theorem_scaling_sweep(problem, 1.0, &hs, 1.0).unwrap();
        assert!(
            (-1.15..=-0.85).contains(&fit_u.slope),
            "spurious slope {}",
            fit_u.slope
        );
        assert!(
            (-3.2..=-2.8).contains(&fit_up.slope),
            "stepped slope {}",
            fit_up.slope
        );
    }
}
