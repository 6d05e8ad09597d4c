//! Scalar abstraction shared by plain evaluation, forward jets, and the
//! reverse tape. Network forwards and PDE residuals are written once against
//! this trait and instantiated with `f64` (values), `Jet<N>` (input
//! derivatives), or `Var` (parameter gradients).

use std::ops::{Add, Mul, Neg, Sub};

use super::jet::Jet;
use super::tape::Var;

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    /// Primal value.
    fn value(self) -> f64;
    /// Multiply by a real constant.
    fn scale(self, a: f64) -> Self;
    /// Add a real constant.
    fn add_const(self, a: f64) -> Self;
    /// Reduce the primal into `[0, p)`; derivative information is untouched.
    fn reduce_mod(self, p: f64) -> Self;
    fn tanh(self) -> Self;
    fn swish(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn scale(self, a: f64) -> Self {
        self * a
    }
    fn add_const(self, a: f64) -> Self {
        self + a
    }
    fn reduce_mod(self, p: f64) -> Self {
        self.rem_euclid(p)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn swish(self) -> Self {
        self / (1.0 + (-self).exp())
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

impl<const N: usize> Scalar for Jet<N> {
    fn value(self) -> f64 {
        Jet::value(&self)
    }
    fn scale(self, a: f64) -> Self {
        Jet::scale(self, a)
    }
    fn add_const(self, a: f64) -> Self {
        Jet::add_const(self, a)
    }
    fn reduce_mod(self, p: f64) -> Self {
        Jet::reduce_mod(self, p)
    }
    fn tanh(self) -> Self {
        Jet::tanh(self)
    }
    fn swish(self) -> Self {
        Jet::swish(self)
    }
    fn sin(self) -> Self {
        Jet::sin(self)
    }
    fn cos(self) -> Self {
        Jet::cos(self)
    }
    fn exp(self) -> Self {
        Jet::exp(self)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        Var::value(self)
    }
    fn scale(self, a: f64) -> Self {
        Var::scale(self, a)
    }
    fn add_const(self, a: f64) -> Self {
        Var::add_const(self, a)
    }
    fn reduce_mod(self, p: f64) -> Self {
        // d/dx (x mod p) = 1 almost everywhere
        self.add_const(self.value().rem_euclid(p) - self.value())
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn swish(self) -> Self {
        Var::swish(self)
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
}
