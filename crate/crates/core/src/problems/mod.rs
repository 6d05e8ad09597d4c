//! Benchmark PDE definitions: residual operators, domains, initial and
//! boundary data, collocation sampling, reference solutions, error metric.
//!
//! Time-dependent problems use coordinate axes `(t, x)`; the steady cavity
//! uses `(x, y)`. Residual expressions are written once, generically over the
//! scalar type, and evaluated with plain floats, jets, or tape variables.

pub mod reference;

pub use reference::{reference_solve, Provenance, ReferenceSolution};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Jet, JetField, Scalar};
use crate::models::{Model, ModelConfig};
use crate::params::ParamVector;
use crate::rng::{counter_rng, tag};

pub const MAX_AXES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BcKind {
    /// Boundary conditions imposed exactly via the periodic embedding.
    PeriodicExact,
    /// Boundary conditions enforced by a penalty term on sampled wall points.
    DirichletLoss,
}

/// A benchmark PDE with its physical constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Problem {
    Advection {
        c: f64,
    },
    /// Desk-scale extra (not a paper benchmark): viscous Burgers.
    ViscousBurgers {
        nu: f64,
    },
    InviscidBurgers,
    AllenCahn {
        eps: f64,
        /// Reaction coefficient (the problem statement's alpha; renamed to
        /// avoid clashing with the cutoff symbol).
        a_reaction: f64,
    },
    KortewegDeVries {
        eta: f64,
        mu: f64,
    },
    KuramotoSivashinsky {
        alpha: f64,
        beta: f64,
        gamma: f64,
    },
    LidDrivenCavity {
        re: f64,
        c0: f64,
        u_lid: f64,
    },
}

/// Derivative slots a residual expression may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Deriv {
    Val,
    Dt,
    Dx,
    Dxx,
    Dxxx,
    Dxxxx,
    Dy,
    Dyy,
}

impl Deriv {
    /// Map to `(axis, order)` given the problem's axis convention.
    fn axis_order(self, time_dependent: bool) -> (usize, usize) {
        use Deriv::*;
        match (self, time_dependent) {
            (Val, _) => (0, 0),
            (Dt, true) => (0, 1),
            (Dx, true) => (1, 1),
            (Dxx, true) => (1, 2),
            (Dxxx, true) => (1, 3),
            (Dxxxx, true) => (1, 4),
            (Dx, false) => (0, 1),
            (Dxx, false) => (0, 2),
            (Dy, false) => (1, 1),
            (Dyy, false) => (1, 2),
            _ => panic!("derivative {self:?} undefined for this problem class"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem name: {0}")]
    UnknownName(String),
    #[error("reference solution unsupported for {0}")]
    UnsupportedReference(String),
    #[error("relative L2 undefined: reference norm is zero")]
    ZeroReference,
    #[error("sample counts must be positive where used")]
    BadCounts,
}

/// A benchmark instance: the PDE plus domain, boundary treatment, and sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub problem: Problem,
    pub time_dependent: bool,
    /// Bounds per coordinate axis; axis 0 is time when `time_dependent`.
    pub bounds: Vec<(f64, f64)>,
    pub outputs: usize,
    pub residuals: usize,
    pub bc: BcKind,
    /// False for desk-scale extras that are not paper benchmarks.
    pub paper_benchmark: bool,
}

impl ProblemSpec {
    pub fn by_name(name: &str) -> Result<Self, ProblemError> {
        let spec = match name {
            "advection" => ProblemSpec {
                name: name.into(),
                problem: Problem::Advection { c: 50.0 },
                time_dependent: true,
                bounds: vec![(0.0, 2.0), (0.0, std::f64::consts::TAU)],
                outputs: 1,
                residuals: 1,
                bc: BcKind::PeriodicExact,
                paper_benchmark: true,
            },
            "burgers" => ProblemSpec {
                name: name.into(),
                problem: Problem::ViscousBurgers {
                    nu: 0.01 / std::f64::consts::PI,
                },
                time_dependent: true,
                bounds: vec![(0.0, 1.0), (-1.0, 1.0)],
                outputs: 1,
                residuals: 1,
                bc: BcKind::PeriodicExact,
                paper_benchmark: false,
            },
            "inviscid-burgers" => ProblemSpec {
                name: name.into(),
                problem: Problem::InviscidBurgers,
                time_dependent: true,
                bounds: vec![(0.0, 1.5), (-1.0, 1.0)],
                outputs: 1,
                residuals: 1,
                bc: BcKind::PeriodicExact,
                paper_benchmark: true,
            },
            "allen-cahn" => ProblemSpec {
                name: name.into(),
                problem: Problem::AllenCahn {
                    eps: 1e-4,
                    a_reaction: 5.0,
                },
                time_dependent: true,
                bounds: vec![(0.0, 1.0), (-1.0, 1.0)],
                outputs: 1,
                residuals: 1,
                bc: BcKind::PeriodicExact,
                paper_benchmark: true,
            },
            "kdv" => ProblemSpec {
                name: name.into(),
                problem: Problem::KortewegDeVries {
                    eta: 1.0,
                    mu: 0.022,
                },
                time_dependent: true,
                bounds: vec![(0.0, 1.0), (-1.0, 1.0)],
                outputs: 1,
                residuals: 1,
                bc: BcKind::PeriodicExact,
                paper_benchmark: true,
            },
            "ks" => ProblemSpec {
                name: name.into(),
                problem: Problem::KuramotoSivashinsky {
                    alpha: 100.0 / 16.0,
                    beta: 100.0 / 16.0f64.powi(2),
                    gamma: 100.0 / 16.0f64.powi(4),
                },
                time_dependent: true,
                bounds: vec![(0.0, 0.35), (0.0, std::f64::consts::TAU)],
                outputs: 1,
                residuals: 1,
                bc: BcKind::PeriodicExact,
                paper_benchmark: true,
            },
            "ldc" => ProblemSpec {
                name: name.into(),
                problem: Problem::LidDrivenCavity {
                    re: 5000.0,
                    c0: 50.0,
                    u_lid: 1.0,
                },
                time_dependent: false,
                bounds: vec![(0.0, 1.0), (0.0, 1.0)],
                outputs: 3,
                residuals: 3,
                bc: BcKind::DirichletLoss,
                paper_benchmark: true,
            },
            other => return Err(ProblemError::UnknownName(other.into())),
        };
        Ok(spec)
    }

    pub fn names() -> &'static [&'static str] {
        &[
            "advection",
            "burgers",
            "inviscid-burgers",
            "allen-cahn",
            "kdv",
            "ks",
            "ldc",
        ]
    }

    pub fn arity(&self) -> usize {
        self.bounds.len()
    }

    pub fn final_time(&self) -> Option<f64> {
        self.time_dependent.then(|| self.bounds[0].1)
    }

    /// Highest pure derivative order needed per axis.
    pub fn derivative_orders(&self) -> Vec<usize> {
        match self.problem {
            Problem::Advection { .. } | Problem::InviscidBurgers => vec![1, 1],
            Problem::ViscousBurgers { .. } | Problem::AllenCahn { .. } => vec![1, 2],
            Problem::KortewegDeVries { .. } => vec![1, 3],
            Problem::KuramotoSivashinsky { .. } => vec![1, 4],
            Problem::LidDrivenCavity { .. } => vec![2, 2],
        }
    }

    /// Residual names in metric/metrics-column order.
    pub fn residual_names(&self) -> Vec<&'static str> {
        match self.problem {
            Problem::LidDrivenCavity { .. } => vec!["ru", "rv", "rc"],
            _ => vec!["int"],
        }
    }

    /// Output component paired with each residual for pseudo-time relaxation
    /// (velocity components with the momentum residuals, pressure with
    /// continuity).
    pub fn residual_pairing(&self) -> Vec<usize> {
        match self.problem {
            Problem::LidDrivenCavity { .. } => vec![0, 1, 2],
            _ => vec![0],
        }
    }

    /// The residual expressions, generic over the scalar type. `d(comp, slot)`
    /// supplies the network value or derivative for one output component.
    pub fn residual_components<S: Scalar>(&self, d: impl Fn(usize, Deriv) -> S) -> Vec<S> {
        use Deriv::*;
        match self.problem {
            Problem::Advection { c } => vec![d(0, Dt) + d(0, Dx).scale(c)],
            Problem::ViscousBurgers { nu } => {
                vec![d(0, Dt) + d(0, Val) * d(0, Dx) - d(0, Dxx).scale(nu)]
            }
            Problem::InviscidBurgers => vec![d(0, Dt) + d(0, Val) * d(0, Dx)],
            Problem::AllenCahn { eps, a_reaction } => {
                let u = d(0, Val);
                vec![d(0, Dt) - d(0, Dxx).scale(eps) + (u * u * u - u).scale(a_reaction)]
            }
            Problem::KortewegDeVries { eta, mu } => {
                vec![d(0, Dt) + (d(0, Val) * d(0, Dx)).scale(eta) + d(0, Dxxx).scale(mu * mu)]
            }
            Problem::KuramotoSivashinsky { alpha, beta, gamma } => {
                vec![
                    d(0, Dt)
                        + (d(0, Val) * d(0, Dx)).scale(alpha)
                        + d(0, Dxx).scale(beta)
                        + d(0, Dxxxx).scale(gamma),
                ]
            }
            Problem::LidDrivenCavity { re, .. } => {
                let inv_re = 1.0 / re;
                let u = d(0, Val);
                let v = d(1, Val);
                vec![
                    u * d(0, Dx) + v * d(0, Dy) + d(2, Dx)
                        - (d(0, Dxx) + d(0, Dyy)).scale(inv_re),
                    u * d(1, Dx) + v * d(1, Dy) + d(2, Dy)
                        - (d(1, Dxx) + d(1, Dyy)).scale(inv_re),
                    d(0, Dx) + d(1, Dy),
                ]
            }
        }
    }

    /// All derivatives of a jet field needed by this problem's residuals.
    pub fn deriv_table(&self, field: &impl JetField, point: &[f64]) -> DerivTable {
        assert_eq!(point.len(), self.arity());
        let orders = self.derivative_orders();
        let mut table = DerivTable::new(self.outputs);
        for (axis, &order) in orders.iter().enumerate() {
            fill_axis_dispatch(field, point, axis, order, &mut table);
        }
        table
    }

    /// Residual values of an arbitrary jet field at one point.
    pub fn residual_field(&self, field: &impl JetField, point: &[f64]) -> Vec<f64> {
        let table = self.deriv_table(field, point);
        self.residual_components(|comp, slot| {
            let (axis, order) = slot.axis_order(self.time_dependent);
            table.get(comp, axis, order)
        })
    }

    /// Residual values of the network at one point.
    pub fn residual(&self, model: &Model, params: &ParamVector, point: &[f64]) -> Vec<f64> {
        self.residual_field(&ModelField { model, params }, point)
    }

    /// Uniform i.i.d. collocation draws, reproducible from `(seed, step)`.
    /// Frozen mode replays the step-0 batch forever.
    pub fn sample(&self, counts: &SampleCounts, seed: u64, step: u64, frozen: bool) -> Batch {
        let effective = if frozen { 0 } else { step };
        let mut rng = counter_rng(seed, tag::SAMPLING, effective);
        let arity = self.arity();

        let mut interior = Array2::zeros((counts.interior, arity));
        for mut row in interior.rows_mut() {
            for (axis, v) in row.iter_mut().enumerate() {
                let (lo, hi) = self.bounds[axis];
                *v = rng.gen_range(lo..hi);
            }
        }

        let n_bc = if self.bc == BcKind::DirichletLoss {
            counts.boundary
        } else {
            0
        };
        let mut boundary = Array2::zeros((n_bc, arity));
        for mut row in boundary.rows_mut() {
            // Pick one of four walls, then a position along it.
            let wall = rng.gen_range(0..4u8);
            let (xlo, xhi) = self.bounds[0];
            let (ylo, yhi) = self.bounds[1];
            let s = rng.gen_range(0.0..1.0);
            let (x, y) = match wall {
                0 => (xlo + s * (xhi - xlo), yhi), // lid
                1 => (xlo + s * (xhi - xlo), ylo),
                2 => (xlo, ylo + s * (yhi - ylo)),
                _ => (xhi, ylo + s * (yhi - ylo)),
            };
            row[0] = x;
            row[1] = y;
        }

        let n_ic = if self.time_dependent { counts.initial } else { 0 };
        let mut initial = Array2::zeros((n_ic, arity));
        for mut row in initial.rows_mut() {
            row[0] = 0.0;
            for axis in 1..arity {
                let (lo, hi) = self.bounds[axis];
                row[axis] = rng.gen_range(lo..hi);
            }
        }

        Batch {
            interior,
            boundary,
            initial,
        }
    }

    /// Initial condition per output component at spatial position `x`.
    pub fn ic_values(&self, x: &[f64]) -> Vec<f64> {
        use std::f64::consts::PI;
        match self.problem {
            Problem::Advection { .. } => vec![x[0].sin()],
            Problem::ViscousBurgers { .. } | Problem::InviscidBurgers => vec![-(PI * x[0]).sin()],
            Problem::AllenCahn { .. } => vec![x[0] * x[0] * (PI * x[0]).cos()],
            Problem::KortewegDeVries { .. } => vec![(PI * x[0]).cos()],
            Problem::KuramotoSivashinsky { .. } => vec![x[0].cos() * (1.0 + x[0].sin())],
            Problem::LidDrivenCavity { .. } => vec![],
        }
    }

    /// Output components constrained on Dirichlet walls.
    pub fn bc_components(&self) -> Vec<usize> {
        match self.problem {
            Problem::LidDrivenCavity { .. } => vec![0, 1],
            _ => vec![],
        }
    }

    /// Prescribed boundary values at a wall point (smoothed lid profile on
    /// the top wall, no-slip elsewhere).
    pub fn bc_values(&self, point: &[f64]) -> Vec<f64> {
        match self.problem {
            Problem::LidDrivenCavity { c0, u_lid, .. } => {
                let (_, yhi) = self.bounds[1];
                if point[1] >= yhi {
                    let x = point[0];
                    let u = u_lid * (1.0 - (c0 * (x - 0.5)).cosh() / (0.5 * c0).cosh());
                    vec![u, 0.0]
                } else {
                    vec![0.0, 0.0]
                }
            }
            _ => vec![],
        }
    }

    /// Coordinate embedding kinds for the network input, matching the
    /// problem's boundary treatment (periodic axes get exact embeddings,
    /// time is affinely rescaled to [0,1]).
    pub fn coord_kinds(&self) -> Vec<crate::models::CoordKind> {
        use crate::models::CoordKind;
        let mut kinds = Vec::with_capacity(self.arity());
        for (axis, &(lo, hi)) in self.bounds.iter().enumerate() {
            if self.time_dependent && axis == 0 {
                let scale = 1.0 / (hi - lo);
                kinds.push(CoordKind::Affine {
                    scale,
                    shift: -lo * scale,
                });
            } else if self.bc == BcKind::PeriodicExact {
                kinds.push(CoordKind::Periodic { period: hi - lo });
            } else {
                kinds.push(CoordKind::Affine {
                    scale: 1.0,
                    shift: 0.0,
                });
            }
        }
        kinds
    }

    /// Model configuration for this problem at the given size; activation and
    /// Fourier scale follow the benchmark protocol table.
    pub fn model_config(&self, arch: crate::models::Arch, width: usize, blocks: usize) -> ModelConfig {
        let rff_scale = match self.problem {
            Problem::LidDrivenCavity { .. } => 10.0,
            _ => 2.0,
        };
        ModelConfig {
            arch,
            width,
            blocks,
            activation: crate::models::Activation::Tanh,
            rff_scale,
            out_dim: self.outputs,
            coords: self.coord_kinds(),
        }
    }

    /// Whether causal weighting applies (time-dependent problems only).
    pub fn supports_causal(&self) -> bool {
        self.time_dependent
    }
}

/// Derivatives of every output component along each axis, orders 0..=4.
pub struct DerivTable {
    data: Vec<[[f64; 5]; MAX_AXES]>,
}

impl DerivTable {
    fn new(outputs: usize) -> Self {
        DerivTable {
            data: vec![[[0.0; 5]; MAX_AXES]; outputs],
        }
    }

    pub fn get(&self, comp: usize, axis: usize, order: usize) -> f64 {
        self.data[comp][axis][order]
    }
}

fn fill_axis_dispatch(
    field: &impl JetField,
    point: &[f64],
    axis: usize,
    order: usize,
    table: &mut DerivTable,
) {
    match order {
        0 => fill_axis::<1>(field, point, axis, table),
        1 => fill_axis::<2>(field, point, axis, table),
        2 => fill_axis::<3>(field, point, axis, table),
        3 => fill_axis::<4>(field, point, axis, table),
        4 => fill_axis::<5>(field, point, axis, table),
        _ => panic!("derivative order above 4 is unsupported"),
    }
}

fn fill_axis<const N: usize>(
    field: &impl JetField,
    point: &[f64],
    axis: usize,
    table: &mut DerivTable,
) {
    let coords: Vec<Jet<N>> = point
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if i == axis {
                Jet::variable(x)
            } else {
                Jet::constant(x)
            }
        })
        .collect();
    let out = field.eval::<N>(&coords);
    for (comp, jet) in out.iter().enumerate() {
        for k in 0..N {
            table.data[comp][axis][k] = jet.derivative(k);
        }
    }
}

/// Network-as-field adapter for residual evaluation.
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub params: &'a ParamVector,
}

impl JetField for ModelField<'_> {
    fn eval<const N: usize>(&self, coords: &[Jet<N>]) -> Vec<Jet<N>> {
        self.model.forward(self.params, coords)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SampleCounts {
    pub interior: usize,
    pub boundary: usize,
    pub initial: usize,
}

/// Collocation sets for one training step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub interior: Array2<f64>,
    pub boundary: Array2<f64>,
    pub initial: Array2<f64>,
}

/// `||pred - reference||_2 / ||reference||_2` over flattened grid nodes.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> Result<f64, ProblemError> {
    assert_eq!(pred.len(), reference.len(), "grid size mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        num += (p - r) * (p - r);
        den += r * r;
    }
    if den == 0.0 {
        return Err(ProblemError::ZeroReference);
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::JetFn;
    use approx::assert_relative_eq;

    /// Closed-form advection solution sin(x - ct).
    struct ExactAdvection {
        c: f64,
    }
    impl JetFn for ExactAdvection {
        fn eval<const N: usize>(&self, coords: &[Jet<N>]) -> Jet<N> {
            (coords[1] - coords[0].scale(self.c)).sin()
        }
    }

    struct ConstOne;
    impl JetFn for ConstOne {
        fn eval<const N: usize>(&self, coords: &[Jet<N>]) -> Jet<N> {
            Jet::constant(1.0) + (coords[0] - coords[0]) // keep arity honest
        }
    }

    #[test]
    fn exact_advection_solution_annihilates_residual() {
        let spec = ProblemSpec::by_name("advection").unwrap();
        let field = ExactAdvection { c: 50.0 };
        let mut rng = crate::rng::seeded_rng(3, 0);
        for _ in 0..1000 {
            let t = rng.gen_range(0.0..2.0);
            let x = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = spec.residual_field(&field, &[t, x]);
            assert!(r[0].abs() < 1e-10, "residual {} at ({t}, {x})", r[0]);
        }
    }

    #[test]
    fn allen_cahn_constant_one_is_residual_free() {
        let spec = ProblemSpec::by_name("allen-cahn").unwrap();
        let r = spec.residual_field(&ConstOne, &[0.3, 0.2]);
        assert_relative_eq!(r[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn frozen_sampling_repeats_step_zero() {
        let spec = ProblemSpec::by_name("advection").unwrap();
        let counts = SampleCounts {
            interior: 16,
            boundary: 8,
            initial: 8,
        };
        let b0 = spec.sample(&counts, 7, 0, true);
        let b999 = spec.sample(&counts, 7, 999, true);
        assert_eq!(b0.interior, b999.interior);
        assert_eq!(b0.initial, b999.initial);

        let r0 = spec.sample(&counts, 7, 0, false);
        let r1 = spec.sample(&counts, 7, 1, false);
        assert_ne!(r0.interior, r1.interior);
    }

    #[test]
    fn interior_draws_have_the_right_mean() {
        let spec = ProblemSpec::by_name("advection").unwrap();
        let counts = SampleCounts {
            interior: 100_000,
            boundary: 0,
            initial: 0,
        };
        let b = spec.sample(&counts, 11, 4, false);
        let mean_t = b.interior.column(0).mean().unwrap();
        assert!((mean_t - 1.0).abs() < 0.01, "mean {mean_t}");
    }

    #[test]
    fn cavity_boundary_targets() {
        let spec = ProblemSpec::by_name("ldc").unwrap();
        // Centre of the lid: u close to 1 (cosh term is ~ 1/cosh(25)).
        let lid = spec.bc_values(&[0.5, 1.0]);
        assert_relative_eq!(lid[0], 1.0, epsilon = 1e-10);
        assert_eq!(lid[1], 0.0);
        // Lid corners: exactly zero by the smoothed profile.
        let corner = spec.bc_values(&[0.0, 1.0]);
        assert_relative_eq!(corner[0], 0.0, epsilon = 1e-12);
        // Side wall: no-slip.
        assert_eq!(spec.bc_values(&[0.0, 0.4]), vec![0.0, 0.0]);
    }

    #[test]
    fn relative_l2_basics() {
        let r = vec![1.0, -2.0, 2.0];
        assert_eq!(relative_l2(&r, &r).unwrap(), 0.0);
        let zero = vec![0.0; 3];
        assert_relative_eq!(relative_l2(&zero, &r).unwrap(), 1.0);
        let double: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(relative_l2(&double, &r).unwrap(), 1.0);
        assert!(relative_l2(&r, &zero).is_err());
    }

    #[test]
    fn unknown_problem_is_an_error() {
        assert!(matches!(
            ProblemSpec::by_name("gray-scott"),
            Err(ProblemError::UnknownName(_))
        ));
    }

    #[test]
    fn residuals_match_finite_difference_oracle_on_a_network() {
        // Independent residual check: derivatives by central differences on
        // the plain forward, residual assembled from the same formulas.
        use crate::models::Arch;
        for name in ["advection", "burgers", "allen-cahn", "kdv", "ks", "ldc"] {
            let spec = ProblemSpec::by_name(name).unwrap();
            let model = Model::new(spec.model_config(Arch::Pirate, 8, 2), 21).unwrap();
            let mut params = model.init_params(4);
            for seg in &model.layout.segments.clone() {
                if seg.name.ends_with("alpha") {
                    params.seg_slice_mut(seg)[0] = 0.5;
                } else if seg.name.starts_with("readout") {
                    for (i, v) in params.seg_slice_mut(seg).iter_mut().enumerate() {
                        *v = 0.3 - 0.05 * i as f64;
                    }
                }
            }
            let mut rng = crate::rng::seeded_rng(900 + spec.arity() as u64, 2);
            for _ in 0..20 {
                let point: Vec<f64> = spec
                    .bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        let margin = 0.05 * (hi - lo);
                        rng.gen_range(lo + margin..hi - margin)
                    })
                    .collect();
                let got = spec.residual(&model, &params, &point);
                let expect = fd_residual(&spec, &model, &params, &point);
                for (g, e) in got.iter().zip(&expect) {
                    let denom = e.abs().max(1e-3);
                    assert!(
                        (g - e).abs() / denom < 1e-4,
                        "{name}: residual {g} vs fd {e} at {point:?}"
                    );
                }
            }
        }
    }

    /// Finite-difference residual oracle (independent of the jet machinery).
    fn fd_residual(
        spec: &ProblemSpec,
        model: &Model,
        params: &ParamVector,
        point: &[f64],
    ) -> Vec<f64> {
        let eval = |pt: &[f64], comp: usize| model.forward(params, pt)[comp];
        let orders = spec.derivative_orders();
        let mut table = vec![[[0.0f64; 5]; MAX_AXES]; spec.outputs];
        for comp in 0..spec.outputs {
            for (axis, &order) in orders.iter().enumerate() {
                let f = |delta: f64| {
                    let mut p = point.to_vec();
                    p[axis] += delta;
                    eval(&p, comp)
                };
                // Fourth-order stencils keep the oracle's truncation error
                // well under the comparison tolerance.
                let h = 1e-3;
                table[comp][axis][0] = f(0.0);
                if order >= 1 {
                    table[comp][axis][1] =
                        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
                }
                if order >= 2 {
                    table[comp][axis][2] = (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0)
                        + 16.0 * f(-h)
                        - f(-2.0 * h))
                        / (12.0 * h * h);
                }
                if order >= 3 {
                    table[comp][axis][3] = (f(-3.0 * h) / 8.0 - f(-2.0 * h)
                        + 13.0 * f(-h) / 8.0
                        - 13.0 * f(h) / 8.0
                        + f(2.0 * h)
                        - f(3.0 * h) / 8.0)
                        / (h * h * h);
                }
                if order >= 4 {
                    table[comp][axis][4] = (-f(3.0 * h) / 6.0 + 2.0 * f(2.0 * h)
                        - 13.0 * f(h) / 2.0
                        + 28.0 * f(0.0) / 3.0
                        - 13.0 * f(-h) / 2.0
                        + 2.0 * f(-2.0 * h)
                        - f(-3.0 * h) / 6.0)
                        / h.powi(4);
                }
            }
        }
        spec.residual_components(|comp, slot| {
            let (axis, order) = slot.axis_order(spec.time_dependent);
            table[comp][axis][order]
        })
    }
}
