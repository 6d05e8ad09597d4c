//! Network architectures and input embeddings.
//!
//! The backbone is a PirateNet: random Fourier features, two shared gate
//! layers, and residual blocks with a trainable convex skip coefficient per
//! block. A plain MLP variant reuses the same dense stack with gating
//! disabled and the skip coefficient pinned to one. Periodic boundary
//! conditions are imposed exactly by a cos/sin embedding of the periodic
//! coordinates before the Fourier features.

pub mod batch;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::params::{Layout, ParamVector};
use crate::rng::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Swish,
}

impl Activation {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Swish => x.swish(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Gated residual blocks with trainable skip coefficients.
    Pirate,
    /// Same dense stack, no gates, skip coefficient fixed at 1.
    Mlp,
}

/// How one raw input coordinate enters the embedded feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoordKind {
    /// One feature `scale * x + shift` (used to rescale time into [0,1]).
    Affine { scale: f64, shift: f64 },
    /// Two features `cos(w x), sin(w x)` with `w = 2 pi / period`; exact
    /// periodicity by construction.
    Periodic { period: f64 },
}

/// Per-axis periodic embedding data (frequencies are `2 pi / period`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicEmbedding {
    pub periods: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub width: usize,
    pub blocks: usize,
    pub activation: Activation,
    /// Standard deviation of the random Fourier feature matrix entries.
    pub rff_scale: f64,
    pub out_dim: usize,
    pub coords: Vec<CoordKind>,
}

impl ModelConfig {
    pub fn in_dim(&self) -> usize {
        self.coords.len()
    }

    /// Embedded coordinate dimension before the Fourier features.
    pub fn embed_dim(&self) -> usize {
        self.coords
            .iter()
            .map(|c| match c {
                CoordKind::Affine { .. } => 1,
                CoordKind::Periodic { .. } => 2,
            })
            .sum()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.width == 0 || self.blocks == 0 {
            return Err(ModelError::BadConfig(
                "width and blocks must be positive".into(),
            ));
        }
        if self.width % 2 != 0 {
            return Err(ModelError::BadConfig(
                "width must be even (cos/sin feature split)".into(),
            ));
        }
        if self.out_dim == 0 || self.coords.is_empty() {
            return Err(ModelError::BadConfig(
                "output and coordinate arity must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Random Fourier feature map `x -> [cos(Bx); sin(Bx)]` with fixed `B`.
#[derive(Clone, Debug)]
pub struct FourierEmbedding {
    pub b: Array2<f64>,
    pub scale: f64,
}

/// Resolved segment indices into the layout, in evaluation order.
#[derive(Clone, Debug)]
pub(crate) struct SegIdx {
    pub gate_u: Option<(usize, usize)>, // (w, b)
    pub gate_v: Option<(usize, usize)>,
    pub blocks: Vec<BlockSeg>,
    pub readout: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockSeg {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub alpha: Option<usize>,
}

/// A network: configuration, fixed Fourier matrix, and parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub fourier: FourierEmbedding,
    pub layout: Arc<Layout>,
    pub(crate) seg: SegIdx,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let m = cfg.width / 2;
        let d = cfg.embed_dim();
        let mut rng = seeded_rng(seed, 0xB0);
        let normal = Normal::new(0.0, cfg.rff_scale).expect("positive rff scale");
        let b = Array2::from_shape_fn((m, d), |_| normal.sample(&mut rng));
        let fourier = FourierEmbedding {
            b,
            scale: cfg.rff_scale,
        };

        let w = cfg.width;
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let gated = cfg.arch == Arch::Pirate;
        if gated {
            shapes.push(("gate_u.w".into(), w, w));
            shapes.push(("gate_u.b".into(), w, 1));
            shapes.push(("gate_v.w".into(), w, w));
            shapes.push(("gate_v.b".into(), w, 1));
        }
        for l in 0..cfg.blocks {
            for part in ["w1", "b1", "w2", "b2", "w3", "b3"] {
                let (r, c) = if part.starts_with('w') { (w, w) } else { (w, 1) };
                shapes.push((format!("block{l}.{part}"), r, c));
            }
            if gated {
                shapes.push((format!("block{l}.alpha"), 1, 1));
            }
        }
        shapes.push(("readout.w".into(), cfg.out_dim, w));
        let layout = Layout::build(shapes);

        let find = |name: &str| {
            layout
                .segments
                .iter()
                .position(|s| s.name == name)
                .expect("segment present by construction")
        };
        let seg = SegIdx {
            gate_u: gated.then(|| (find("gate_u.w"), find("gate_u.b"))),
            gate_v: gated.then(|| (find("gate_v.w"), find("gate_v.b"))),
            blocks: (0..cfg.blocks)
                .map(|l| BlockSeg {
                    w1: find(&format!("block{l}.w1")),
                    b1: find(&format!("block{l}.b1")),
                    w2: find(&format!("block{l}.w2")),
                    b2: find(&format!("block{l}.b2")),
                    w3: find(&format!("block{l}.w3")),
                    b3: find(&format!("block{l}.b3")),
                    alpha: gated.then(|| find(&format!("block{l}.alpha"))),
                })
                .collect(),
            readout: find("readout.w"),
        };

        Ok(Model {
            cfg,
            fourier,
            layout,
            seg,
        })
    }

    /// Glorot-uniform hidden weights, zero biases, zero skip coefficients,
    /// zero readout (the untrained network outputs zero); deterministic for
    /// a given seed.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = seeded_rng(seed, 0x11);
        let mut params = ParamVector::zeros(self.layout.clone());
        for seg in &self.layout.segments.clone() {
            if seg.cols > 1 && !seg.name.starts_with("readout") {
                // Weight matrix: fan_in = cols, fan_out = rows.
                let limit = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                for v in params.seg_slice_mut(seg) {
                    *v = rng.gen_range(-limit..limit);
                }
            }
            // Biases, skip coefficients, and the readout stay zero.
        }
        params
    }

    /// Reference forward pass, generic over the scalar type. The batched
    /// plane-based path in [`batch`] must agree with this exactly.
    pub fn forward<S: Scalar>(&self, params: &ParamVector, coords: &[S]) -> Vec<S> {
        assert_eq!(coords.len(), self.cfg.in_dim(), "coordinate arity");
        let z = self.embed(coords);
        let phi = self.fourier_features(&z);

        let act = self.cfg.activation;
        let segs = &self.layout.segments;
        let gates = self.seg.gate_u.map(|(wu, bu)| {
            let (wv, bv) = self.seg.gate_v.unwrap();
            let u = matvec_act(
                act,
                params.seg_matrix(&segs[wu]),
                params.seg_slice(&segs[bu]),
                &phi,
            );
            let v = matvec_act(
                act,
                params.seg_matrix(&segs[wv]),
                params.seg_slice(&segs[bv]),
                &phi,
            );
            (u, v)
        });

        let mut x = phi;
        for bl in &self.seg.blocks {
            let f = matvec_act(
                act,
                params.seg_matrix(&segs[bl.w1]),
                params.seg_slice(&segs[bl.b1]),
                &x,
            );
            let z1 = gate_combine(&f, gates.as_ref());
            let g = matvec_act(
                act,
                params.seg_matrix(&segs[bl.w2]),
                params.seg_slice(&segs[bl.b2]),
                &z1,
            );
            let z2 = gate_combine(&g, gates.as_ref());
            let h = matvec_act(
                act,
                params.seg_matrix(&segs[bl.w3]),
                params.seg_slice(&segs[bl.b3]),
                &z2,
            );
            x = match bl.alpha {
                Some(ai) => {
                    let alpha = params.seg_slice(&segs[ai])[0];
                    x.iter()
                        .zip(&h)
                        .map(|(&xi, &hi)| xi + (hi - xi).scale(alpha))
                        .collect()
                }
                None => h,
            };
        }

        let w_out = params.seg_matrix(&segs[self.seg.readout]);
        (0..self.cfg.out_dim)
            .map(|o| {
                let row = w_out.row(o);
                let mut acc = x[0].scale(row[0]);
                for j in 1..x.len() {
                    acc = acc + x[j].scale(row[j]);
                }
                acc
            })
            .collect()
    }

    /// Coordinate embedding: affine rescale or exact-periodic cos/sin pairs.
    pub fn embed<S: Scalar>(&self, coords: &[S]) -> Vec<S> {
        let mut z = Vec::with_capacity(self.cfg.embed_dim());
        for (c, kind) in coords.iter().zip(&self.cfg.coords) {
            match *kind {
                CoordKind::Affine { scale, shift } => z.push(c.scale(scale).add_const(shift)),
                CoordKind::Periodic { period } => {
                    let omega = std::f64::consts::TAU / period;
                    let phase = c.reduce_mod(period).scale(omega);
                    z.push(phase.cos());
                    z.push(phase.sin());
                }
            }
        }
        z
    }

    /// `[cos(Bz); sin(Bz)]`, cos block first.
    pub fn fourier_features<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let m = self.cfg.width / 2;
        let mut phi = Vec::with_capacity(self.cfg.width);
        let mut sines = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.fourier.b.row(i);
            let mut phase = z[0].scale(row[0]);
            for j in 1..z.len() {
                phase = phase + z[j].scale(row[j]);
            }
            phi.push(phase.cos());
            sines.push(phase.sin());
        }
        phi.extend(sines);
        phi
    }
}

fn matvec_act<S: Scalar>(
    act: Activation,
    w: ndarray::ArrayView2<f64>,
    b: &[f64],
    x: &[S],
) -> Vec<S> {
    (0..w.nrows())
        .map(|i| {
            let row = w.row(i);
            let mut acc = x[0].scale(row[0]);
            for j in 1..x.len() {
                acc = acc + x[j].scale(row[j]);
            }
            act.apply(acc.add_const(b[i]))
        })
        .collect()
}

fn gate_combine<S: Scalar>(f: &[S], gates: Option<&(Vec<S>, Vec<S>)>) -> Vec<S> {
    match gates {
        Some((u, v)) => f
            .iter()
            .zip(u.iter().zip(v.iter()))
            .map(|(&fi, (&ui, &vi))| vi + fi * (ui - vi))
            .collect(),
        None => f.to_vec(),
    }
}
