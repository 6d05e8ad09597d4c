//! Built-in reference solutions for the 1D benchmarks.
//!
//! Advection has the analytic transport solution. The remaining periodic
//! problems are solved by the method of lines with spectral differentiation,
//! an integrating factor for the stiff linear part, and classical RK4 in
//! time with a CFL-safe step. Inviscid Burgers uses a Godunov finite-volume
//! scheme so the shock is captured with a monotone flux. A fourth-order
//! finite-difference variant is kept for grid-refinement order checks.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Problem, ProblemError, ProblemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    MethodOfLines,
}

/// Tensor-product reference samples: `values[(i, j)]` at `(axes[0][i], axes[1][j])`.
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub axes: Vec<Vec<f64>>,
    pub values: Array2<f64>,
    pub provenance: Provenance,
}

impl ReferenceSolution {
    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    /// Grid nodes in row-major order matching `values`.
    pub fn nodes(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.node_count());
        for &t in &self.axes[0] {
            for &x in &self.axes[1] {
                out.push([t, x]);
            }
        }
        out
    }

    /// Columnar text: header with axis names plus `value`, one row per node,
    /// full double precision.
    pub fn write_columnar(
        &self,
        w: &mut impl std::io::Write,
        axis_names: &[&str],
    ) -> std::io::Result<()> {
        writeln!(w, "{},value", axis_names.join(","))?;
        for (node, v) in self.nodes().iter().zip(self.values.iter()) {
            writeln!(w, "{},{},{}", node[0], node[1], v)?;
        }
        Ok(())
    }
}

/// Reference solve on an `nt x nx` grid. The cavity has no built-in
/// reference; accuracy against a reference is out of scope there.
pub fn reference_solve(
    spec: &ProblemSpec,
    resolution: (usize, usize),
) -> Result<ReferenceSolution, ProblemError> {
    let (nt, nx) = resolution;
    if !spec.time_dependent {
        return Err(ProblemError::UnsupportedReference(spec.name.clone()));
    }
    let t_grid = linspace_inclusive(spec.bounds[0].0, spec.bounds[0].1, nt);
    let (xlo, xhi) = spec.bounds[1];
    let x_grid = periodic_grid(xlo, xhi, nx);

    let values = match spec.problem {
        Problem::Advection { c } => {
            let mut v = Array2::zeros((nt, nx));
            for (i, &t) in t_grid.iter().enumerate() {
                for (j, &x) in x_grid.iter().enumerate() {
                    v[(i, j)] = (x - c * t).sin();
                }
            }
            return Ok(ReferenceSolution {
                axes: vec![t_grid, x_grid],
                values: v,
                provenance: Provenance::Analytic,
            });
        }
        Problem::InviscidBurgers => godunov_burgers(spec, nt, nx),
        Problem::ViscousBurgers { .. }
        | Problem::AllenCahn { .. }
        | Problem::KortewegDeVries { .. }
        | Problem::KuramotoSivashinsky { .. } => spectral_mol(spec, nt, nx),
        Problem::LidDrivenCavity { .. } => {
            return Err(ProblemError::UnsupportedReference(spec.name.clone()))
        }
    };

    Ok(ReferenceSolution {
        axes: vec![t_grid, x_grid],
        values,
        provenance: Provenance::MethodOfLines,
    })
}

pub fn linspace_inclusive(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Uniform periodic grid on `[lo, hi)` (the right endpoint is the image of
/// the left one).
pub fn periodic_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let dx = (hi - lo) / n as f64;
    (0..n).map(|j| lo + j as f64 * dx).collect()
}

/// Spectral wavenumbers for a periodic domain of length `len`.
fn wavenumbers(n: usize, len: f64) -> Vec<f64> {
    let base = std::f64::consts::TAU / len;
    (0..n)
        .map(|j| {
            let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            base * m
        })
        .collect()
}

struct Spectral {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    n: usize,
}

impl Spectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectral {
            fft: planner.plan_fft_forward(n),
            ifft: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn to_hat(&self, u: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        buf
    }

    fn to_phys(&self, hat: &[Complex<f64>]) -> Vec<f64> {
        let mut buf = hat.to_vec();
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Method of lines with spectral space derivatives and Lawson RK4 (exact
/// integrating factor for the linear symbol, classical RK4 on the rest).
fn spectral_mol(spec: &ProblemSpec, nt: usize, nx: usize) -> Array2<f64> {
    let (xlo, xhi) = spec.bounds[1];
    let len = xhi - xlo;
    let t_final = spec.bounds[0].1;
    let x_grid = periodic_grid(xlo, xhi, nx);
    let k = wavenumbers(nx, len);
    let sp = Spectral::new(nx);

    // Linear symbol and advective speed bound for the CFL step.
    let (sym, advective_bound): (Vec<Complex<f64>>, f64) = match spec.problem {
        Problem::ViscousBurgers { nu } => (
            k.iter().map(|&k| Complex::new(-nu * k * k, 0.0)).collect(),
            1.5,
        ),
        Problem::AllenCahn { eps, a_reaction } => (
            k.iter()
                .map(|&k| Complex::new(-eps * k * k + a_reaction, 0.0))
                .collect(),
            0.0,
        ),
        Problem::KortewegDeVries { mu, eta } => (
            k.iter()
                .map(|&k| Complex::new(0.0, mu * mu * k * k * k))
                .collect(),
            4.0 * eta,
        ),
        Problem::KuramotoSivashinsky { beta, gamma, alpha } => (
            k.iter()
                .map(|&k| Complex::new(beta * k * k - gamma * k.powi(4), 0.0))
                .collect(),
            4.0 * alpha,
        ),
        _ => unreachable!("spectral path used only for periodic MOL problems"),
    };

    // Nonlinear term in physical space.
    let nonlinear = |u: &[f64], ux: &[f64]| -> Vec<f64> {
        match spec.problem {
            Problem::ViscousBurgers { .. } => u.iter().zip(ux).map(|(&u, &ux)| -u * ux).collect(),
            Problem::AllenCahn { a_reaction, .. } => {
                u.iter().map(|&u| -a_reaction * u * u * u).collect()
            }
            Problem::KortewegDeVries { eta, .. } => {
                u.iter().zip(ux).map(|(&u, &ux)| -eta * u * ux).collect()
            }
            Problem::KuramotoSivashinsky { alpha, .. } => {
                u.iter().zip(ux).map(|(&u, &ux)| -alpha * u * ux).collect()
            }
            _ => unreachable!(),
        }
    };

    // 2/3-rule dealiasing mask for the nonlinear term.
    let dealias: Vec<f64> = (0..nx)
        .map(|j| {
            let m = if j <= nx / 2 { j } else { nx - j };
            if 3 * m <= 2 * (nx / 2) {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let n_hat = |u_hat: &[Complex<f64>]| -> Vec<Complex<f64>> {
        let u = sp.to_phys(u_hat);
        let ux_hat: Vec<Complex<f64>> = u_hat
            .iter()
            .zip(&k)
            .map(|(&uh, &k)| uh * Complex::new(0.0, k))
            .collect();
        let ux = sp.to_phys(&ux_hat);
        let mut out = sp.to_hat(&nonlinear(&u, &ux));
        for (o, &d) in out.iter_mut().zip(&dealias) {
            *o *= d;
        }
        out
    };

    // Step size: advective CFL with a floor on step count for accuracy.
    let dx = len / nx as f64;
    let dt_cfl = if advective_bound > 0.0 {
        0.35 * dx / advective_bound
    } else {
        f64::INFINITY
    };
    let dt0 = dt_cfl.min(t_final / 2000.0);
    let slices = nt - 1;
    let steps_per_slice = ((t_final / slices as f64) / dt0).ceil() as usize;
    let dt = t_final / (slices * steps_per_slice) as f64;

    let e_full: Vec<Complex<f64>> = sym.iter().map(|s| (s * dt).exp()).collect();
    let e_half: Vec<Complex<f64>> = sym.iter().map(|s| (s * (0.5 * dt)).exp()).collect();

    let u0: Vec<f64> = x_grid.iter().map(|&x| spec.ic_values(&[x])[0]).collect();
    let mut u_hat = sp.to_hat(&u0);
    let mut values = Array2::zeros((nt, nx));
    for (j, &v) in u0.iter().enumerate() {
        values[(0, j)] = v;
    }

    let ew = |a: &[Complex<f64>], b: &[Complex<f64>]| -> Vec<Complex<f64>> {
        a.iter().zip(b).map(|(&x, &y)| x * y).collect()
    };
    let axpy = |a: &[Complex<f64>], s: f64, b: &[Complex<f64>]| -> Vec<Complex<f64>> {
        a.iter().zip(b).map(|(&x, &y)| x + s * y).collect()
    };

    for slice in 1..nt {
        for _ in 0..steps_per_slice {
            let k1 = n_hat(&u_hat);
            let k2 = n_hat(&ew(&e_half, &axpy(&u_hat, 0.5 * dt, &k1)));
            let k3 = n_hat(&axpy(&ew(&e_half, &u_hat), 0.5 * dt, &k2));
            let k4 = n_hat(&axpy(&ew(&e_full, &u_hat), dt, &ew(&e_half, &k3)));
            let mut next = ew(&e_full, &u_hat);
            let ek1 = ew(&e_full, &k1);
            let e2k2 = ew(&e_half, &k2);
            let e2k3 = ew(&e_half, &k3);
            for i in 0..nx {
                next[i] += dt / 6.0 * (ek1[i] + 2.0 * (e2k2[i] + e2k3[i]) + k4[i]);
            }
            u_hat = next;
        }
        let u = sp.to_phys(&u_hat);
        for (j, &v) in u.iter().enumerate() {
            values[(slice, j)] = v;
        }
    }
    values
}

/// Godunov finite-volume solver for the inviscid Burgers equation with a
/// monotone exact-Riemann flux; captures the shock.
fn godunov_burgers(spec: &ProblemSpec, nt: usize, nx: usize) -> Array2<f64> {
    let (xlo, xhi) = spec.bounds[1];
    let t_final = spec.bounds[0].1;
    let dx = (xhi - xlo) / nx as f64;
    let x_grid = periodic_grid(xlo, xhi, nx);

    let flux = |u: f64| 0.5 * u * u;
    let godunov = |ul: f64, ur: f64| -> f64 {
        if ul > ur {
            // Shock with speed (ul + ur) / 2.
            if ul + ur > 0.0 {
                flux(ul)
            } else {
                flux(ur)
            }
        } else if ul > 0.0 {
            flux(ul)
        } else if ur < 0.0 {
            flux(ur)
        } else {
            0.0
        }
    };

    let mut u: Vec<f64> = x_grid.iter().map(|&x| spec.ic_values(&[x])[0]).collect();
    let mut values = Array2::zeros((nt, nx));
    for (j, &v) in u.iter().enumerate() {
        values[(0, j)] = v;
    }

    let slice_times: Vec<f64> = (1..nt)
        .map(|i| t_final * i as f64 / (nt - 1) as f64)
        .collect();
    let mut t = 0.0;
    let cfl = 0.4;
    for (slice, &t_target) in slice_times.iter().enumerate() {
        while t < t_target {
            let umax = u.iter().fold(1e-12, |m: f64, v| m.max(v.abs()));
            let dt = (cfl * dx / umax).min(t_target - t);
            let mut fluxes = vec![0.0; nx + 1];
            for i in 0..=nx {
                let ul = u[(i + nx - 1) % nx];
                let ur = u[i % nx];
                fluxes[i] = godunov(ul, ur);
            }
            for i in 0..nx {
                u[i] -= dt / dx * (fluxes[i + 1] - fluxes[i]);
            }
            t += dt;
        }
        for (j, &v) in u.iter().enumerate() {
            values[(slice + 1, j)] = v;
        }
    }
    values
}

/// Fourth-order central differences + classical RK4 for the advection
/// equation. Kept alongside the spectral path so the solver's convergence
/// order can be measured against the analytic solution.
pub fn advection_mol_fd4(c: f64, t_final: f64, nt: usize, nx: usize) -> ReferenceSolution {
    let x_grid = periodic_grid(0.0, std::f64::consts::TAU, nx);
    let t_grid = linspace_inclusive(0.0, t_final, nt);
    let dx = std::f64::consts::TAU / nx as f64;

    let rhs = |u: &[f64]| -> Vec<f64> {
        let n = u.len();
        (0..n)
            .map(|i| {
                let um2 = u[(i + n - 2) % n];
                let um1 = u[(i + n - 1) % n];
                let up1 = u[(i + 1) % n];
                let up2 = u[(i + 2) % n];
                let ux = (-up2 + 8.0 * up1 - 8.0 * um1 + um2) / (12.0 * dx);
                -c * ux
            })
            .collect()
    };

    let mut u: Vec<f64> = x_grid.iter().map(|&x| x.sin()).collect();
    let mut values = Array2::zeros((nt, nx));
    for (j, &v) in u.iter().enumerate() {
        values[(0, j)] = v;
    }

    let dt0 = 0.5 * dx / c.abs();
    let slices = nt - 1;
    let steps_per_slice = ((t_final / slices as f64) / dt0).ceil() as usize;
    let dt = t_final / (slices * steps_per_slice) as f64;
    for slice in 1..nt {
        for _ in 0..steps_per_slice {
            let k1 = rhs(&u);
            let u2: Vec<f64> = u.iter().zip(&k1).map(|(&u, &k)| u + 0.5 * dt * k).collect();
            let k2 = rhs(&u2);
            let u3: Vec<f64> = u.iter().zip(&k2).map(|(&u, &k)| u + 0.5 * dt * k).collect();
            let k3 = rhs(&u3);
            let u4: Vec<f64> = u.iter().zip(&k3).map(|(&u, &k)| u + dt * k).collect();
            let k4 = rhs(&u4);
            for i in 0..u.len() {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        for (j, &v) in u.iter().enumerate() {
            values[(slice, j)] = v;
        }
    }
    ReferenceSolution {
        axes: vec![t_grid, x_grid],
        values,
        provenance: Provenance::MethodOfLines,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::relative_l2;
    use approx::assert_relative_eq;

    #[test]
    fn advection_reference_is_analytic_transport() {
        let spec = ProblemSpec::by_name("advection").unwrap();
        let r = reference_solve(&spec, (21, 64)).unwrap();
        assert_eq!(r.provenance, Provenance::Analytic);
        // t = 0.1 is grid row 1; x = 0 is column 0.
        assert_relative_eq!(r.values[(1, 0)], (-5.0f64).sin(), epsilon = 1e-12);
    }

    #[test]
    fn allen_cahn_initial_slice_matches_ic() {
        let spec = ProblemSpec::by_name("allen-cahn").unwrap();
        let r = reference_solve(&spec, (11, 64)).unwrap();
        for (j, &x) in r.axes[1].iter().enumerate() {
            assert_relative_eq!(
                r.values[(0, j)],
                x * x * (std::f64::consts::PI * x).cos(),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn allen_cahn_self_convergence_under_refinement() {
        // The transition layers have width ~sqrt(eps) = 1e-2, so convergence
        // needs the benchmark-scale 512-mode grid.
        let spec = ProblemSpec::by_name("allen-cahn").unwrap();
        let coarse = reference_solve(&spec, (11, 512)).unwrap();
        let fine = reference_solve(&spec, (11, 1024)).unwrap();
        // The coarse grid is every second node of the fine grid.
        let mut sub = Vec::new();
        for i in 0..11 {
            for j in 0..512 {
                sub.push(fine.values[(i, 2 * j)]);
            }
        }
        let coarse_flat: Vec<f64> = coarse.values.iter().copied().collect();
        let diff = relative_l2(&coarse_flat, &sub).unwrap();
        assert!(diff < 1e-3, "refinement changed solution by {diff}");
    }

    #[test]
    fn advection_fd4_converges_at_third_order_or_better() {
        let exact = |t: f64, x: f64, c: f64| (x - c * t).sin();
        let c = 1.0;
        let mut errs = Vec::new();
        for nx in [32usize, 64, 128] {
            let r = advection_mol_fd4(c, 1.0, 3, nx);
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &t) in r.axes[0].iter().enumerate() {
                for (j, &x) in r.axes[1].iter().enumerate() {
                    let e = r.values[(i, j)] - exact(t, x, c);
                    num += e * e;
                    den += exact(t, x, c).powi(2);
                }
            }
            errs.push((num / den).sqrt());
        }
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(
            order1 >= 3.0 && order2 >= 3.0,
            "orders {order1:.2}, {order2:.2} (errors {errs:?})"
        );
    }

    #[test]
    fn godunov_keeps_burgers_bounded_and_odd() {
        let spec = ProblemSpec::by_name("inviscid-burgers").unwrap();
        let r = reference_solve(&spec, (16, 256)).unwrap();
        let max = r.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1.0 + 1e-8, "max |u| = {max}");
        // Odd initial data on a symmetric domain: the mean stays ~0.
        for i in 0..16 {
            let mean: f64 = r.values.row(i).mean().unwrap();
            assert!(mean.abs() < 1e-12, "mean {mean} at slice {i}");
        }
    }

    #[test]
    fn kdv_and_ks_solve_without_blowup() {
        for name in ["kdv", "ks"] {
            let spec = ProblemSpec::by_name(name).unwrap();
            let r = reference_solve(&spec, (6, 256)).unwrap();
            assert!(r.values.iter().all(|v| v.is_finite()), "{name} is finite");
            let max = r.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 10.0, "{name} stayed bounded, max {max}");
        }
    }

    #[test]
    fn columnar_output_round_trips_precision() {
        let spec = ProblemSpec::by_name("advection").unwrap();
        let r = reference_solve(&spec, (3, 4)).unwrap();
        let mut buf = Vec::new();
        r.write_columnar(&mut buf, &["t", "x"]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x,value");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        let v: f64 = first[2].parse().unwrap();
        assert_eq!(v, r.values[(0, 0)]);
    }
}
