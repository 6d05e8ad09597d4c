//! Truncated Taylor-coefficient (jet) arithmetic.
//!
//! A `Jet<N>` carries the first `N` Taylor coefficients of a scalar quantity
//! along one seeded input direction: `c[k] = (1/k!) d^k f`. Arithmetic follows
//! the standard truncated-series recurrences, so jets are exact (to rounding)
//! for polynomials of degree `< N` and give true higher-order directional
//! derivatives of smooth compositions.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Largest supported coefficient count (order 4 derivatives).
pub const MAX_COEFFS: usize = 5;

/// Factorials 0!..=4!, used to convert coefficients to derivatives.
pub const FACTORIAL: [f64; MAX_COEFFS] = [1.0, 1.0, 2.0, 6.0, 24.0];

/// Truncated Taylor expansion with `N` coefficients (derivative order `N-1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    /// `c[k]` is the k-th Taylor coefficient along the seeded direction.
    pub c: [f64; N],
}

impl<const N: usize> Jet<N> {
    /// Jet of the seeded variable itself: value `x0`, unit first derivative.
    pub fn variable(x0: f64) -> Self {
        let mut c = [0.0; N];
        c[0] = x0;
        if N > 1 {
            c[1] = 1.0;
        }
        Jet { c }
    }

    /// Jet of a constant: all derivative coefficients zero.
    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; N];
        c[0] = v;
        Jet { c }
    }

    pub fn zero() -> Self {
        Jet { c: [0.0; N] }
    }

    /// Derivative order carried by this jet.
    pub fn order(&self) -> usize {
        N - 1
    }

    /// Value part (0-th coefficient).
    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn coeff(&self, k: usize) -> f64 {
        self.c[k]
    }

    /// True k-th derivative `k! * c[k]`.
    pub fn derivative(&self, k: usize) -> f64 {
        FACTORIAL[k] * self.c[k]
    }

    /// All derivatives `0..N` as a vector.
    pub fn derivatives(&self) -> [f64; N] {
        let mut d = self.c;
        for (k, v) in d.iter_mut().enumerate() {
            *v *= FACTORIAL[k];
        }
        d
    }

    /// Multiply every coefficient by a real constant.
    pub fn scale(self, a: f64) -> Self {
        let mut c = self.c;
        for v in &mut c {
            *v *= a;
        }
        Jet { c }
    }

    /// Add a real constant (value coefficient only).
    pub fn add_const(self, a: f64) -> Self {
        let mut c = self.c;
        c[0] += a;
        Jet { c }
    }

    /// Shift the value part into `[0, p)` without touching derivative
    /// coefficients. The reduction `x -> x mod p` has unit slope almost
    /// everywhere, so the chain rule through it is the identity.
    pub fn reduce_mod(self, p: f64) -> Self {
        let mut c = self.c;
        c[0] = c[0].rem_euclid(p);
        Jet { c }
    }

    /// Coefficient dot product `sum_k a_k b_k`. This is the pairing used when
    /// accumulating real-parameter gradients from jet-valued cotangents.
    pub fn dot(&self, other: &Self) -> f64 {
        let mut s = 0.0;
        for k in 0..N {
            s += self.c[k] * other.c[k];
        }
        s
    }

    /// Transposed truncated product: given a cotangent `self` for `c = a * b`,
    /// returns the cotangent contribution for `a`, i.e. `out_j = sum_{k>=j}
    /// self_k b_{k-j}`. The forward product is Toeplitz in the coefficients,
    /// so its adjoint is the corresponding correlation.
    pub fn corr(&self, b: &Self) -> Self {
        let mut out = [0.0; N];
        for j in 0..N {
            let mut s = 0.0;
            for k in j..N {
                s += self.c[k] * b.c[k - j];
            }
            out[j] = s;
        }
        Jet { c: out }
    }

    /// Reciprocal via the division recurrence. Panics on a zero value part.
    pub fn recip(self) -> Self {
        self.checked_recip()
            .expect("jet reciprocal: zero value part (domain error)")
    }

    pub fn checked_recip(self) -> Option<Self> {
        if self.c[0] == 0.0 {
            return None;
        }
        let mut out = [0.0; N];
        let inv = 1.0 / self.c[0];
        out[0] = inv;
        for k in 1..N {
            let mut s = 0.0;
            for j in 0..k {
                s += out[j] * self.c[k - j];
            }
            out[k] = -s * inv;
        }
        Some(Jet { c: out })
    }

    /// Integer power by repeated multiplication.
    pub fn powi(self, n: u32) -> Self {
        let mut acc = Jet::constant(1.0);
        for _ in 0..n {
            acc = acc * self;
        }
        acc
    }

    pub fn exp(self) -> Self {
        let mut out = [0.0; N];
        out[0] = self.c[0].exp();
        for k in 1..N {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.c[j] * out[k - j];
            }
            out[k] = s / k as f64;
        }
        Jet { c: out }
    }

    /// Sine and cosine share a coupled recurrence; compute both at once.
    pub fn sin_cos(self) -> (Self, Self) {
        let mut sn = [0.0; N];
        let mut cs = [0.0; N];
        let (s0, c0) = self.c[0].sin_cos();
        sn[0] = s0;
        cs[0] = c0;
        for k in 1..N {
            let mut ds = 0.0;
            let mut dc = 0.0;
            for j in 1..=k {
                let ja = j as f64 * self.c[j];
                ds += ja * cs[k - j];
                dc += ja * sn[k - j];
            }
            sn[k] = ds / k as f64;
            cs[k] = -dc / k as f64;
        }
        (Jet { c: sn }, Jet { c: cs })
    }

    pub fn sin(self) -> Self {
        self.sin_cos().0
    }

    pub fn cos(self) -> Self {
        self.sin_cos().1
    }

    pub fn tanh(self) -> Self {
        self.tanh_with_deriv().0
    }

    /// Tanh together with its derivative jet `1 - tanh^2` (the recurrence
    /// produces both at once).
    pub fn tanh_with_deriv(self) -> (Self, Self) {
        let mut t = [0.0; N];
        let mut w = [0.0; N]; // w = 1 - t^2, built alongside t
        t[0] = self.c[0].tanh();
        w[0] = 1.0 - t[0] * t[0];
        for k in 1..N {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * self.c[j] * w[k - j];
            }
            t[k] = s / k as f64;
            let mut q = 0.0;
            for i in 0..=k {
                q += t[i] * t[k - i];
            }
            w[k] = -q;
        }
        (Jet { c: t }, Jet { c: w })
    }

    pub fn sigmoid(self) -> Self {
        // 1 / (1 + exp(-x)); denominator value part is always positive.
        (self.neg().exp().add_const(1.0)).recip()
    }

    /// Swish activation `x * sigmoid(x)`.
    pub fn swish(self) -> Self {
        self * self.sigmoid()
    }

    /// Swish together with its derivative jet `s (1 + x (1 - s))`.
    pub fn swish_with_deriv(self) -> (Self, Self) {
        let s = self.sigmoid();
        let act = self * s;
        let dact = s * (self * ((-s).add_const(1.0))).add_const(1.0);
        (act, dact)
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|v| v.is_finite())
    }

    // Multi-directional first-order variants: coefficient 0 is the value and
    // every other slot is an independent first derivative. Products couple
    // each direction with the value only, so several axes share one
    // evaluation.

    pub fn md_mul(self, rhs: Self) -> Self {
        let mut out = [0.0; N];
        out[0] = self.c[0] * rhs.c[0];
        for d in 1..N {
            out[d] = self.c[0] * rhs.c[d] + self.c[d] * rhs.c[0];
        }
        Jet { c: out }
    }

    /// Transpose of [`Jet::md_mul`] in the first operand.
    pub fn md_corr(&self, b: &Self) -> Self {
        let mut out = [0.0; N];
        let mut a0 = self.c[0] * b.c[0];
        for d in 1..N {
            a0 += self.c[d] * b.c[d];
            out[d] = self.c[d] * b.c[0];
        }
        out[0] = a0;
        Jet { c: out }
    }

    pub fn md_sin_cos(self) -> (Self, Self) {
        let (s0, c0) = self.c[0].sin_cos();
        let mut sn = [0.0; N];
        let mut cs = [0.0; N];
        sn[0] = s0;
        cs[0] = c0;
        for d in 1..N {
            sn[d] = c0 * self.c[d];
            cs[d] = -s0 * self.c[d];
        }
        (Jet { c: sn }, Jet { c: cs })
    }

    /// Multi-directional tanh and its derivative 1 - tanh^2 (as a
    /// multi-directional value, i.e. the composition of tanh' with the input).
    pub fn md_tanh_with_deriv(self) -> (Self, Self) {
        let t0 = self.c[0].tanh();
        let w0 = 1.0 - t0 * t0;
        let mut t = [0.0; N];
        let mut w = [0.0; N];
        t[0] = t0;
        w[0] = w0;
        for d in 1..N {
            t[d] = w0 * self.c[d];
            w[d] = -2.0 * t0 * w0 * self.c[d];
        }
        (Jet { c: t }, Jet { c: w })
    }

    pub fn md_swish_with_deriv(self) -> (Self, Self) {
        // sigmoid as a multi-directional value
        let e0 = (-self.c[0]).exp();
        let s0 = 1.0 / (1.0 + e0);
        let ds = e0 * s0 * s0; // sigmoid'
        let mut s = [0.0; N];
        s[0] = s0;
        for d in 1..N {
            s[d] = ds * self.c[d];
        }
        let s = Jet { c: s };
        let act = self.md_mul(s);
        // swish' = s (1 + a (1 - s)), assembled with md products
        let one_minus_s = (-s).add_const(1.0);
        let dact = s.md_mul(self.md_mul(one_minus_s).add_const(1.0));
        (act, dact)
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut c = self.c;
        for k in 0..N {
            c[k] += rhs.c[k];
        }
        Jet { c }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut c = self.c;
        for k in 0..N {
            c[k] -= rhs.c[k];
        }
        Jet { c }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut c = self.c;
        for v in &mut c {
            *v = -*v;
        }
        Jet { c }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = [0.0; N];
        for k in 0..N {
            let mut s = 0.0;
            for j in 0..=k {
                s += self.c[j] * rhs.c[k - j];
            }
            out[k] = s;
        }
        Jet { c: out }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        assert!(
            rhs.c[0] != 0.0,
            "jet division: zero value part (domain error)"
        );
        let mut out = [0.0; N];
        let inv = 1.0 / rhs.c[0];
        for k in 0..N {
            let mut s = self.c[k];
            for j in 0..k {
                s -= out[j] * rhs.c[k - j];
            }
            out[k] = s * inv;
        }
        Jet { c: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sin_series_at_zero() {
        // sin seeded at x=0, order 4: coefficients (0, 1, 0, -1/6, 0)
        let x = Jet::<5>::variable(0.0);
        let s = x.sin();
        let expect = [0.0, 1.0, 0.0, -1.0 / 6.0, 0.0];
        for k in 0..5 {
            assert_relative_eq!(s.c[k], expect[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn tanh_first_order_at_zero() {
        // tanh'(0) = 1
        let x = Jet::<2>::variable(0.0);
        let t = x.tanh();
        assert_relative_eq!(t.c[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(t.c[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn polynomial_exactness_square() {
        // (2 + eps)^2 = 4 + 4 eps + eps^2
        let x = Jet::<3>::variable(2.0);
        let sq = x * x;
        assert_eq!(sq.c, [4.0, 4.0, 1.0]);
    }

    #[test]
    fn exp_series() {
        let x = Jet::<5>::variable(0.0);
        let e = x.exp();
        let expect = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0];
        for k in 0..5 {
            assert_relative_eq!(e.c[k], expect[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn division_recurrence_geometric() {
        // 1 / (1 - x) at x=0: all coefficients 1
        let one = Jet::<5>::constant(1.0);
        let x = Jet::<5>::variable(0.0);
        let g = one / (one - x);
        for k in 0..5 {
            assert_relative_eq!(g.c[k], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn recip_zero_value_is_domain_error() {
        assert!(Jet::<3>::variable(0.0).checked_recip().is_none());
    }

    #[test]
    fn derivatives_of_sin_at_half_pi() {
        let x = Jet::<5>::variable(std::f64::consts::FRAC_PI_2);
        let d = x.sin().derivatives();
        let expect = [1.0, 0.0, -1.0, 0.0, 1.0];
        for k in 0..5 {
            assert_relative_eq!(d[k], expect[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn tanh_matches_finite_differences() {
        let x0 = 0.37;
        let t = Jet::<4>::variable(x0).tanh();
        let h = 1e-5;
        let f = |x: f64| x.tanh();
        let d1 = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        let d2 = (f(x0 + h) - 2.0 * f(x0) + f(x0 - h)) / (h * h);
        assert_relative_eq!(t.derivative(1), d1, max_relative = 1e-8);
        assert_relative_eq!(t.derivative(2), d2, max_relative = 1e-5);
    }

    #[test]
    fn swish_value_and_slope() {
        let x0 = 0.8;
        let s = Jet::<2>::variable(x0).swish();
        let sig = 1.0 / (1.0 + (-x0 as f64).exp());
        assert_relative_eq!(s.value(), x0 * sig, epsilon = 1e-15);
        let ds = sig * (1.0 + x0 * (1.0 - sig));
        assert_relative_eq!(s.c[1], ds, max_relative = 1e-12);
    }

    #[test]
    fn corr_is_transpose_of_mul() {
        // <c_bar, a*b> == <corr(c_bar, b), a> for arbitrary jets
        let a = Jet::<4> {
            c: [0.3, -1.2, 0.7, 2.0],
        };
        let b = Jet::<4> {
            c: [1.1, 0.4, -0.9, 0.05],
        };
        let cbar = Jet::<4> {
            c: [-0.6, 0.8, 1.5, -0.2],
        };
        let lhs = cbar.dot(&(a * b));
        let rhs = cbar.corr(&b).dot(&a);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-14);
    }

    #[test]
    fn reduce_mod_keeps_derivatives() {
        let x = Jet::<3>::variable(7.25);
        let r = x.reduce_mod(6.5);
        assert_eq!(r.c, [0.75, 1.0, 0.0]);
    }
}
