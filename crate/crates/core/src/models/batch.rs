//! Batched jet-valued network evaluation and its hand-written reverse pass.
//!
//! Jets are stored interleaved: one `[f64; N]` coefficient block per matrix
//! element, contiguous in memory. Elementwise steps (activations, gate
//! mixing, transposed products) are single register-resident sweeps, and the
//! dense layers run one real matrix product per coefficient plane through
//! strided views, so the whole pass stays bandwidth-friendly. The reverse
//! pass propagates jet-valued cotangents: products against jets use the
//! transposed truncated product, and real parameters accumulate coefficient
//! dot products. sigma'(pre) jets are materialized during the forward pass,
//! so the backward pass is linear algebra plus one sweep per layer.
//!
//! Agreement with the generic scalar forward and with finite differences is
//! enforced by tests; the training loop relies on this path for all
//! parameter gradients.

use ndarray::ArrayView2;

use crate::autodiff::Jet;
use crate::params::ParamVector;

use super::{Activation, Model};

/// Thread-local recycling of jet buffers. First-touch writes to freshly
/// mapped pages dominate the pass cost on some hosts, so buffers are returned
/// here on drop and handed back warm. Values are always re-zeroed on
/// acquisition; only the memory is reused.
mod pool {
    use std::cell::RefCell;

    const MAX_POOLED: usize = 512;

    thread_local! {
        static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    }

    pub fn acquire_zeroed(len: usize) -> Vec<f64> {
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            p.iter()
                .rposition(|v| v.capacity() >= len && v.capacity() <= 2 * len)
                .map(|pos| p.swap_remove(pos))
        });
        match reused {
            Some(mut v) => {
                v.clear();
                v.resize(len, 0.0);
                v
            }
            None => vec![0.0; len],
        }
    }

    pub fn release(v: Vec<f64>) {
        if v.capacity() == 0 {
            return;
        }
        POOL.with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < MAX_POOLED {
                p.push(v);
            }
        });
    }
}

/// dgemm on one interleaved coefficient plane: the jet matrices carry an
/// element stride of `N`, which matrixmultiply packs natively.
#[allow(clippy::too_many_arguments)]
fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    // Bounds: the highest linear index touched per operand.
    let top = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        (rows as isize - 1).max(0) as usize * rs.unsigned_abs()
            + (cols as isize - 1).max(0) as usize * cs.unsigned_abs()
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    assert!(top(m, k, rsa, csa) < a.len());
    assert!(top(k, n, rsb, csb) < b.len());
    assert!(top(m, n, rsc, csc) < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// A `rows x cols` matrix of jets with `N` interleaved coefficients.
/// Buffers come from (and return to) a thread-local pool.
///
/// `fused` marks multi-directional first-order storage (value plus one
/// independent first derivative per extra coefficient) instead of a single
/// truncated Taylor direction; only the elementwise nonlinear ops differ.
#[derive(Debug)]
pub struct JetMat<const N: usize> {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    fused: bool,
}

impl<const N: usize> Clone for JetMat<N> {
    fn clone(&self) -> Self {
        let mut data = pool::acquire_zeroed(self.data.len());
        data.copy_from_slice(&self.data);
        JetMat {
            data,
            rows: self.rows,
            cols: self.cols,
            fused: self.fused,
        }
    }
}

impl<const N: usize> Drop for JetMat<N> {
    fn drop(&mut self) {
        pool::release(std::mem::take(&mut self.data));
    }
}

impl<const N: usize> JetMat<N> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        JetMat {
            data: pool::acquire_zeroed(rows * cols * N),
            rows,
            cols,
            fused: false,
        }
    }

    pub fn zeros_fused(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.fused = true;
        m
    }

    fn zeros_like(&self, rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.fused = self.fused;
        m
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    #[inline]
    fn emul(&self, a: Jet<N>, b: Jet<N>) -> Jet<N> {
        if self.fused {
            a.md_mul(b)
        } else {
            a * b
        }
    }

    #[inline]
    fn ecorr(&self, cbar: Jet<N>, b: Jet<N>) -> Jet<N> {
        if self.fused {
            cbar.md_corr(&b)
        } else {
            cbar.corr(&b)
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Jet<N> {
        let base = (i * self.cols + j) * N;
        let mut c = [0.0; N];
        c.copy_from_slice(&self.data[base..base + N]);
        Jet { c }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, jet: Jet<N>) {
        let base = (i * self.cols + j) * N;
        self.data[base..base + N].copy_from_slice(&jet.c);
    }

    fn elems(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(N)
    }

    fn elems_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(N)
    }

    #[inline]
    fn jet_of(chunk: &[f64]) -> Jet<N> {
        let mut c = [0.0; N];
        c.copy_from_slice(chunk);
        Jet { c }
    }

    /// `y = self * w^T` per coefficient plane; `w` has shape `(out, in)`,
    /// standard layout.
    pub fn matmul_wt(&self, w: ArrayView2<f64>) -> Self {
        let (out_dim, in_dim) = (w.nrows(), w.ncols());
        assert_eq!(in_dim, self.cols);
        let ws = w.to_slice().or_else(|| w.as_slice()).expect("standard layout");
        let mut out = self.zeros_like(self.rows, out_dim);
        let sn = N as isize;
        for k in 0..N {
            dgemm_strided(
                self.rows,
                in_dim,
                out_dim,
                1.0,
                &self.data[k..],
                (in_dim * N) as isize,
                sn,
                ws,
                1, // B = w^T: advancing the summation index walks a row of w
                in_dim as isize,
                0.0,
                &mut out.data[k..],
                (out_dim * N) as isize,
                sn,
            );
        }
        out
    }

    /// `y = self * w` per coefficient plane (cotangent backprop through a
    /// dense layer); `w` has shape `(out, in)`, `self` is `(rows, out)`.
    pub fn matmul_w(&self, w: ArrayView2<f64>) -> Self {
        let (out_dim, in_dim) = (w.nrows(), w.ncols());
        assert_eq!(out_dim, self.cols);
        let ws = w.to_slice().or_else(|| w.as_slice()).expect("standard layout");
        let mut out = self.zeros_like(self.rows, in_dim);
        let sn = N as isize;
        for k in 0..N {
            dgemm_strided(
                self.rows,
                out_dim,
                in_dim,
                1.0,
                &self.data[k..],
                (out_dim * N) as isize,
                sn,
                ws,
                in_dim as isize,
                1,
                0.0,
                &mut out.data[k..],
                (in_dim * N) as isize,
                sn,
            );
        }
        out
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum over all entries of the coefficient dot product.
    pub fn dot_all(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `out = corr(self, operand)` elementwise (transposed jet product,
    /// matching the storage's algebra).
    fn corr(&self, operand: &Self) -> Self {
        debug_assert_eq!(self.fused, operand.fused);
        let mut out = self.zeros_like(self.rows, self.cols);
        for ((o, c), b) in out.elems_mut().zip(self.elems()).zip(operand.elems()) {
            let r = self.ecorr(Self::jet_of(c), Self::jet_of(b));
            o.copy_from_slice(&r.c);
        }
        out
    }
}

/// Accumulate `grad += sum_k cot_k^T x_k` (gradient of a real weight matrix
/// fed by jet activations); `grad` has shape `(out, in)`, `cot` is
/// `(rows, out)` and `x` is `(rows, in)`.
fn accumulate_weight_grad<const N: usize>(
    cot: &JetMat<N>,
    x: &JetMat<N>,
    grad: &mut ndarray::ArrayViewMut2<f64>,
) {
    let (out_dim, in_dim) = (grad.nrows(), grad.ncols());
    assert_eq!(cot.cols, out_dim);
    assert_eq!(x.cols, in_dim);
    assert_eq!(cot.rows, x.rows);
    let gs = grad.as_slice_mut().expect("standard layout");
    let sn = N as isize;
    for k in 0..N {
        dgemm_strided(
            out_dim,
            cot.rows,
            in_dim,
            1.0,
            &cot.data[k..],
            sn, // A = cot^T: advancing the row of A walks a column of cot
            (out_dim * N) as isize,
            &x.data[k..],
            (in_dim * N) as isize,
            sn,
            1.0,
            gs,
            in_dim as isize,
            1,
        );
    }
}

/// Accumulate `grad_b += column sums of cot plane 0` (biases only move the
/// value coefficient).
fn accumulate_bias_grad<const N: usize>(cot: &JetMat<N>, grad: &mut [f64]) {
    assert_eq!(cot.cols, grad.len());
    for (idx, chunk) in cot.elems().enumerate() {
        grad[idx % cot.cols] += chunk[0];
    }
}

/// Activation output plus the jet of sigma'(pre), materialized forward.
#[derive(Clone, Debug)]
struct ActCache<const N: usize> {
    act: JetMat<N>,
    dact: JetMat<N>,
}

impl<const N: usize> ActCache<N> {
    /// One sweep: add the bias to the value coefficient, apply the
    /// activation, and record sigma' as a jet.
    fn apply(kind: Activation, pre: &JetMat<N>, bias: &[f64]) -> Self {
        let mut act = pre.zeros_like(pre.rows, pre.cols);
        let mut dact = pre.zeros_like(pre.rows, pre.cols);
        let cols = pre.cols;
        let fused = pre.fused;
        assert_eq!(bias.len(), cols);
        for (idx, ((a, d), p)) in act
            .elems_mut()
            .zip(dact.elems_mut())
            .zip(pre.elems())
            .enumerate()
        {
            let s = JetMat::<N>::jet_of(p).add_const(bias[idx % cols]);
            let (v, dv) = match (kind, fused) {
                (Activation::Tanh, false) => s.tanh_with_deriv(),
                (Activation::Swish, false) => s.swish_with_deriv(),
                (Activation::Tanh, true) => s.md_tanh_with_deriv(),
                (Activation::Swish, true) => s.md_swish_with_deriv(),
            };
            a.copy_from_slice(&v.c);
            d.copy_from_slice(&dv.c);
        }
        ActCache { act, dact }
    }
}

#[derive(Clone, Debug)]
struct GateCache<const N: usize> {
    u: ActCache<N>,
    v: ActCache<N>,
    /// `u - v`, shared by every block's combine and its reverse.
    diff: JetMat<N>,
}

#[derive(Clone, Debug)]
struct BlockCache<const N: usize> {
    x_in: JetMat<N>,
    f: ActCache<N>,
    z1: JetMat<N>,
    g: ActCache<N>,
    z2: JetMat<N>,
    h: ActCache<N>,
}

/// Forward evaluation of a batch with cached intermediates for
/// [`BatchOutput::backward`].
#[derive(Clone, Debug)]
pub struct BatchOutput<const N: usize> {
    pub outputs: JetMat<N>,
    phi: JetMat<N>,
    gates: Option<GateCache<N>>,
    blocks: Vec<BlockCache<N>>,
    x_final: JetMat<N>,
}

/// Gate mixing `z = v + f (u - v)` in one sweep.
fn gate_combine<const N: usize>(f: &JetMat<N>, gates: Option<&GateCache<N>>) -> JetMat<N> {
    match gates {
        None => f.clone(),
        Some(gc) => {
            let mut z = f.zeros_like(f.rows(), f.cols());
            let prod = |a: Jet<N>, b: Jet<N>| if f.fused { a.md_mul(b) } else { a * b };
            for (((o, fj), dj), vj) in z
                .elems_mut()
                .zip(f.elems())
                .zip(gc.diff.elems())
                .zip(gc.v.act.elems())
            {
                let r = JetMat::<N>::jet_of(vj)
                    + prod(JetMat::<N>::jet_of(fj), JetMat::<N>::jet_of(dj));
                o.copy_from_slice(&r.c);
            }
            z
        }
    }
}

/// How a batched forward seeds input derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Seed {
    /// Values only (all derivative coefficients zero).
    None,
    /// One truncated Taylor direction along the given raw coordinate.
    Axis(usize),
    /// Fused first-order pass: coefficient `1 + axis` carries d/d(axis) for
    /// every raw coordinate at once. Requires `N = in_dim + 1`.
    AllAxes,
}

impl Model {
    /// Batched forward pass over jets of `N` coefficients.
    ///
    /// `coords` is `(batch, in_dim)`; if `seed_axis` is set, that raw
    /// coordinate is seeded with unit first derivative.
    pub fn forward_batch<const N: usize>(
        &self,
        params: &ParamVector,
        coords: &ArrayView2<f64>,
        seed_axis: Option<usize>,
    ) -> BatchOutput<N> {
        if let Some(a) = seed_axis {
            assert!(a < self.cfg.in_dim(), "seed axis out of range");
            assert!(N >= 2, "seeded evaluation needs at least order 1");
        }
        self.forward_impl(params, coords, seed_axis.map_or(Seed::None, Seed::Axis))
    }

    /// Fused first-order pass: one evaluation carries the value and the
    /// first derivative along every raw coordinate (`N = in_dim + 1`).
    pub fn forward_batch_all_axes<const N: usize>(
        &self,
        params: &ParamVector,
        coords: &ArrayView2<f64>,
    ) -> BatchOutput<N> {
        assert_eq!(N, self.cfg.in_dim() + 1, "one slot per coordinate");
        self.forward_impl(params, coords, Seed::AllAxes)
    }

    fn forward_impl<const N: usize>(
        &self,
        params: &ParamVector,
        coords: &ArrayView2<f64>,
        seed: Seed,
    ) -> BatchOutput<N> {
        let batch = coords.nrows();
        assert_eq!(coords.ncols(), self.cfg.in_dim(), "coordinate arity");
        let fused = seed == Seed::AllAxes;

        // Coordinate embedding (small: arity <= 2, a few features).
        let d_z = self.cfg.embed_dim();
        let mut z = if fused {
            JetMat::<N>::zeros_fused(batch, d_z)
        } else {
            JetMat::<N>::zeros(batch, d_z)
        };
        for i in 0..batch {
            let mut col = 0;
            for (axis, kind) in self.cfg.coords.iter().enumerate() {
                let x = coords[(i, axis)];
                let slot = match seed {
                    Seed::Axis(a) if a == axis => Some(1),
                    Seed::AllAxes => Some(1 + axis),
                    _ => None,
                };
                match *kind {
                    super::CoordKind::Affine { scale, shift } => {
                        let mut jet = Jet::<N>::constant(scale * x + shift);
                        if let Some(k) = slot {
                            jet.c[k] = scale;
                        }
                        z.set(i, col, jet);
                        col += 1;
                    }
                    super::CoordKind::Periodic { period } => {
                        let omega = std::f64::consts::TAU / period;
                        let mut phase = Jet::<N>::constant(x.rem_euclid(period) * omega);
                        if let Some(k) = slot {
                            phase.c[k] = omega;
                        }
                        let (s, c) = if fused {
                            phase.md_sin_cos()
                        } else {
                            phase.sin_cos()
                        };
                        z.set(i, col, c);
                        z.set(i, col + 1, s);
                        col += 2;
                    }
                }
            }
        }

        // Random Fourier features: phases, then [cos; sin] in one sweep.
        let m = self.cfg.width / 2;
        let width = self.cfg.width;
        let phases = z.matmul_wt(self.fourier.b.view());
        let mut phi = z.zeros_like(batch, width);
        for (idx, p) in phases.elems().enumerate() {
            let (i, j) = (idx / m, idx % m);
            let jet = JetMat::<N>::jet_of(p);
            let (s, c) = if fused { jet.md_sin_cos() } else { jet.sin_cos() };
            phi.set(i, j, c);
            phi.set(i, m + j, s);
        }

        let segs = &self.layout.segments;
        let act = self.cfg.activation;
        let dense_act = |x: &JetMat<N>, wi: usize, bi: usize| {
            let s = x.matmul_wt(params.seg_matrix(&segs[wi]));
            ActCache::apply(act, &s, params.seg_slice(&segs[bi]))
        };

        let gates = self.seg.gate_u.map(|(wu, bu)| {
            let (wv, bv) = self.seg.gate_v.unwrap();
            let u = dense_act(&phi, wu, bu);
            let v = dense_act(&phi, wv, bv);
            let mut diff = phi.zeros_like(batch, width);
            for ((d, a), b) in diff.elems_mut().zip(u.act.elems()).zip(v.act.elems()) {
                for k in 0..N {
                    d[k] = a[k] - b[k];
                }
            }
            GateCache { u, v, diff }
        });

        let mut x = phi.clone();
        let mut blocks = Vec::with_capacity(self.cfg.blocks);
        for bl in &self.seg.blocks {
            let x_in = x;
            let f = dense_act(&x_in, bl.w1, bl.b1);
            let z1 = gate_combine(&f.act, gates.as_ref());
            let g = dense_act(&z1, bl.w2, bl.b2);
            let z2 = gate_combine(&g.act, gates.as_ref());
            let h = dense_act(&z2, bl.w3, bl.b3);
            x = match bl.alpha {
                Some(ai) => {
                    let alpha = params.seg_slice(&segs[ai])[0];
                    // x' = x + alpha (h - x), one sweep.
                    let mut out = phi.zeros_like(batch, width);
                    for ((o, xi), hi) in out.elems_mut().zip(x_in.elems()).zip(h.act.elems()) {
                        for k in 0..N {
                            o[k] = xi[k] + alpha * (hi[k] - xi[k]);
                        }
                    }
                    out
                }
                None => h.act.clone(),
            };
            blocks.push(BlockCache {
                x_in,
                f,
                z1,
                g,
                z2,
                h,
            });
        }

        let outputs = x.matmul_wt(params.seg_matrix(&segs[self.seg.readout]));
        BatchOutput {
            outputs,
            phi,
            gates,
            blocks,
            x_final: x,
        }
    }
}

impl<const N: usize> BatchOutput<N> {
    /// Accumulate `grad += d<cot, outputs>/d theta`, where the pairing is the
    /// coefficient dot product between the cotangent jets and the output jets.
    pub fn backward(
        &self,
        model: &Model,
        params: &ParamVector,
        cot: &JetMat<N>,
        grad: &mut ParamVector,
    ) {
        let segs = model.layout.segments.clone();

        // Readout.
        let w_out = params.seg_matrix(&segs[model.seg.readout]);
        accumulate_weight_grad(
            cot,
            &self.x_final,
            &mut grad.seg_matrix_mut(&segs[model.seg.readout]),
        );
        let mut xbar = cot.matmul_w(w_out);

        let mut ubar = self
            .gates
            .as_ref()
            .map(|_| xbar.zeros_like(xbar.rows(), xbar.cols()));
        let mut vbar = ubar.clone();

        for (bl, cache) in model.seg.blocks.iter().zip(&self.blocks).rev() {
            // Skip connection: one sweep produces hbar, the pass-through
            // cotangent, and the alpha gradient.
            let (hbar, mut x_in_bar) = match bl.alpha {
                Some(ai) => {
                    let alpha = params.seg_slice(&segs[ai])[0];
                    let mut hbar = xbar.zeros_like(xbar.rows(), xbar.cols());
                    let mut pass = xbar;
                    let mut alpha_grad = 0.0;
                    for (((hb, xb), hi), xi) in hbar
                        .elems_mut()
                        .zip(pass.elems_mut())
                        .zip(cache.h.act.elems())
                        .zip(cache.x_in.elems())
                    {
                        for k in 0..N {
                            alpha_grad += xb[k] * (hi[k] - xi[k]);
                            hb[k] = alpha * xb[k];
                            xb[k] *= 1.0 - alpha;
                        }
                    }
                    grad.seg_slice_mut(&segs[ai])[0] += alpha_grad;
                    (hbar, pass)
                }
                None => {
                    let (rows, cols) = (xbar.rows(), xbar.cols());
                    (xbar, JetMat::zeros(rows, cols))
                }
            };

            // h = act(s3), s3 = W3 z2 + b3
            let s3bar = hbar.corr(&cache.h.dact);
            accumulate_weight_grad(&s3bar, &cache.z2, &mut grad.seg_matrix_mut(&segs[bl.w3]));
            accumulate_bias_grad(&s3bar, grad.seg_slice_mut(&segs[bl.b3]));
            let z2bar = s3bar.matmul_w(params.seg_matrix(&segs[bl.w3]));

            let gbar =
                backprop_gate(&z2bar, &cache.g.act, self.gates.as_ref(), &mut ubar, &mut vbar);

            let s2bar = gbar.corr(&cache.g.dact);
            accumulate_weight_grad(&s2bar, &cache.z1, &mut grad.seg_matrix_mut(&segs[bl.w2]));
            accumulate_bias_grad(&s2bar, grad.seg_slice_mut(&segs[bl.b2]));
            let z1bar = s2bar.matmul_w(params.seg_matrix(&segs[bl.w2]));

            let fbar =
                backprop_gate(&z1bar, &cache.f.act, self.gates.as_ref(), &mut ubar, &mut vbar);

            let s1bar = fbar.corr(&cache.f.dact);
            accumulate_weight_grad(&s1bar, &cache.x_in, &mut grad.seg_matrix_mut(&segs[bl.w1]));
            accumulate_bias_grad(&s1bar, grad.seg_slice_mut(&segs[bl.b1]));
            x_in_bar.add_assign(&s1bar.matmul_w(params.seg_matrix(&segs[bl.w1])));
            xbar = x_in_bar;
        }

        // Gate layers read the embedded features directly.
        let mut phibar = xbar;
        if let (Some(gc), Some(ubar), Some(vbar)) = (&self.gates, ubar, vbar) {
            let (wu, bu) = model.seg.gate_u.unwrap();
            let (wv, bv) = model.seg.gate_v.unwrap();
            let subar = ubar.corr(&gc.u.dact);
            accumulate_weight_grad(&subar, &self.phi, &mut grad.seg_matrix_mut(&segs[wu]));
            accumulate_bias_grad(&subar, grad.seg_slice_mut(&segs[bu]));
            phibar.add_assign(&subar.matmul_w(params.seg_matrix(&segs[wu])));
            let svbar = vbar.corr(&gc.v.dact);
            accumulate_weight_grad(&svbar, &self.phi, &mut grad.seg_matrix_mut(&segs[wv]));
            accumulate_bias_grad(&svbar, grad.seg_slice_mut(&segs[bv]));
            phibar.add_assign(&svbar.matmul_w(params.seg_matrix(&segs[wv])));
        }
        // The Fourier matrix is fixed, so the sweep stops at the features.
        let _ = phibar;
    }
}

/// Reverse of `z = v + f (u - v)` in one sweep: returns the cotangent of `f`
/// and accumulates the gate cotangents (`vbar` gets `zbar - corr(zbar, f)`).
fn backprop_gate<const N: usize>(
    zbar: &JetMat<N>,
    f_act: &JetMat<N>,
    gates: Option<&GateCache<N>>,
    ubar: &mut Option<JetMat<N>>,
    vbar: &mut Option<JetMat<N>>,
) -> JetMat<N> {
    match gates {
        None => zbar.clone(),
        Some(gc) => {
            let ubar = ubar.as_mut().expect("gate cotangent buffer");
            let vbar = vbar.as_mut().expect("gate cotangent buffer");
            let mut fbar = zbar.zeros_like(zbar.rows(), zbar.cols());
            for (((((fb, ub), vb), zb), dj), fj) in fbar
                .elems_mut()
                .zip(ubar.elems_mut())
                .zip(vbar.elems_mut())
                .zip(zbar.elems())
                .zip(gc.diff.elems())
                .zip(f_act.elems())
            {
                let z = JetMat::<N>::jet_of(zb);
                let cf = zbar.ecorr(z, JetMat::<N>::jet_of(fj));
                let fr = zbar.ecorr(z, JetMat::<N>::jet_of(dj));
                for k in 0..N {
                    fb[k] = fr.c[k];
                    ub[k] += cf.c[k];
                    vb[k] += zb[k] - cf.c[k];
                }
            }
            fbar
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Jet;
    use crate::models::{Activation, Arch, CoordKind, Model, ModelConfig};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn test_model(arch: Arch, act: Activation) -> (Model, ParamVector) {
        let cfg = ModelConfig {
            arch,
            width: 8,
            blocks: 2,
            activation: act,
            rff_scale: 1.5,
            out_dim: 2,
            coords: vec![
                CoordKind::Affine {
                    scale: 0.5,
                    shift: 0.0,
                },
                CoordKind::Periodic {
                    period: std::f64::consts::TAU,
                },
            ],
        };
        let model = Model::new(cfg, 11).unwrap();
        let mut params = model.init_params(5);
        // Nonzero alphas, biases, and readout so every path carries signal.
        let mut rng = crate::rng::seeded_rng(17, 1);
        let segs = model.layout.segments.clone();
        for seg in &segs {
            if seg.name.ends_with("alpha") {
                params.seg_slice_mut(seg)[0] = 0.35;
            } else if seg.name.ends_with('b') || seg.name.starts_with("readout") {
                for v in params.seg_slice_mut(seg) {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
        }
        (model, params)
    }

    #[test]
    fn batched_forward_matches_generic_jets() {
        for (arch, act) in [
            (Arch::Pirate, Activation::Tanh),
            (Arch::Pirate, Activation::Swish),
            (Arch::Mlp, Activation::Tanh),
        ] {
            let (model, params) = test_model(arch, act);
            let coords = array![[0.3, 1.2], [0.9, 4.5], [0.05, 0.0]];
            let out = model.forward_batch::<3>(&params, &coords.view(), Some(1));
            for i in 0..coords.nrows() {
                let pt = [
                    Jet::<3>::constant(coords[(i, 0)]),
                    Jet::<3>::variable(coords[(i, 1)]),
                ];
                let expect = model.forward(&params, &pt);
                for o in 0..model.cfg.out_dim {
                    let got = out.outputs.get(i, o);
                    for k in 0..3 {
                        assert_relative_eq!(
                            got.c[k],
                            expect[o].c[k],
                            max_relative = 1e-12,
                            epsilon = 1e-14
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fifth_order_batch_matches_generic_jets() {
        let (model, params) = test_model(Arch::Pirate, Activation::Tanh);
        let coords = array![[0.4, 2.0]];
        let out = model.forward_batch::<5>(&params, &coords.view(), Some(1));
        let pt = [Jet::<5>::constant(0.4), Jet::<5>::variable(2.0)];
        let expect = model.forward(&params, &pt);
        for k in 0..5 {
            assert_relative_eq!(
                out.outputs.get(0, 0).c[k],
                expect[0].c[k],
                max_relative = 1e-11,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn fused_pass_matches_per_axis_passes() {
        for act in [Activation::Tanh, Activation::Swish] {
            let (model, params) = test_model(Arch::Pirate, act);
            let coords = array![[0.3, 1.2], [0.9, 4.5], [0.7, 0.01]];
            let fused = model.forward_batch_all_axes::<3>(&params, &coords.view());
            let ax0 = model.forward_batch::<2>(&params, &coords.view(), Some(0));
            let ax1 = model.forward_batch::<2>(&params, &coords.view(), Some(1));
            for i in 0..coords.nrows() {
                for o in 0..model.cfg.out_dim {
                    let f = fused.outputs.get(i, o);
                    let a = ax0.outputs.get(i, o);
                    let b = ax1.outputs.get(i, o);
                    assert_relative_eq!(f.c[0], a.c[0], max_relative = 1e-13);
                    assert_relative_eq!(f.c[1], a.c[1], max_relative = 1e-11, epsilon = 1e-13);
                    assert_relative_eq!(f.c[2], b.c[1], max_relative = 1e-11, epsilon = 1e-13);
                }
            }

            // Gradient of a fused objective matches the sum of per-axis
            // objectives' gradients.
            let mut cot_f = JetMat::<3>::zeros_fused(3, model.cfg.out_dim);
            let mut cot_a = JetMat::<2>::zeros(3, model.cfg.out_dim);
            let mut cot_b = JetMat::<2>::zeros(3, model.cfg.out_dim);
            let mut rng = crate::rng::seeded_rng(77, 3);
            for i in 0..3 {
                for o in 0..model.cfg.out_dim {
                    let c: [f64; 3] = [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    cot_f.set(i, o, Jet { c });
                    cot_a.set(i, o, Jet { c: [c[0], c[1]] });
                    cot_b.set(i, o, Jet { c: [0.0, c[2]] });
                }
            }
            let mut g_fused = params.zeros_like();
            fused.backward(&model, &params, &cot_f, &mut g_fused);
            let mut g_split = params.zeros_like();
            ax0.backward(&model, &params, &cot_a, &mut g_split);
            ax1.backward(&model, &params, &cot_b, &mut g_split);
            for (a, b) in g_fused.values.iter().zip(&g_split.values) {
                assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (arch, act) in [
            (Arch::Pirate, Activation::Tanh),
            (Arch::Pirate, Activation::Swish),
            (Arch::Mlp, Activation::Tanh),
        ] {
            let (model, params) = test_model(arch, act);
            let coords = array![[0.3, 1.2], [0.9, 4.5]];
            // Random but fixed cotangent jets define the scalar objective
            // g(theta) = sum_{points, outputs, coeffs} cot . output.
            let mut rng = crate::rng::seeded_rng(23, 9);
            let mut cot = JetMat::<3>::zeros(2, model.cfg.out_dim);
            for i in 0..2 {
                for o in 0..model.cfg.out_dim {
                    let mut c = [0.0; 3];
                    for v in c.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                    cot.set(i, o, Jet { c });
                }
            }

            let objective = |p: &ParamVector| -> f64 {
                let out = model.forward_batch::<3>(p, &coords.view(), Some(1));
                out.outputs.dot_all(&cot)
            };

            let out = model.forward_batch::<3>(&params, &coords.view(), Some(1));
            let mut grad = params.zeros_like();
            out.backward(&model, &params, &cot, &mut grad);

            let h = 1e-5;
            let floor = 1e-3 * grad.max_abs();
            let mut worst = 0.0f64;
            for i in 0..params.len() {
                let mut pp = params.clone();
                pp.values[i] += h;
                let mut pm = params.clone();
                pm.values[i] -= h;
                let fd = (objective(&pp) - objective(&pm)) / (2.0 * h);
                let denom = fd.abs().max(floor);
                worst = worst.max((grad.values[i] - fd).abs() / denom);
            }
            assert!(
                worst < 1e-6,
                "max relative gradient deviation {worst} ({arch:?}, {act:?})"
            );
        }
    }
}
