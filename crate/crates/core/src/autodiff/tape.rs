//! Reverse-mode Wengert tape over scalars.
//!
//! Every primitive operation appends one node holding its operand indices and
//! local partials; a single reverse sweep then yields the gradient of one
//! scalar output with respect to every recorded leaf. Values produced by jet
//! evaluations enter as leaves, and stop-gradient quantities enter as
//! constants, so the tape composes with forward jets without recording the
//! network internals.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy)]
struct Node {
    parent: [u32; 2],
    weight: [f64; 2],
}

/// Append-only record of primitive operations, topologically ordered.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A recorded scalar: an index into its tape plus the forward value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parent: [u32; 2], weight: [f64; 2]) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let i = nodes.len() as u32;
        nodes.push(Node { parent, weight });
        i
    }

    fn push_nullary(&self) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let i = nodes.len() as u32;
        // Parentless nodes point at themselves with zero weight, which keeps
        // the reverse sweep branch-free.
        nodes.push(Node {
            parent: [i, i],
            weight: [0.0, 0.0],
        });
        i
    }

    /// A differentiable input (gradients are reported for leaves).
    pub fn leaf(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            index: self.push_nullary(),
            value,
        }
    }

    /// A stop-gradient value: recorded as a constant, receives zero adjoint
    /// flow into anything it was computed from.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(value)
    }

    /// Reverse sweep from a single scalar output.
    pub fn gradient(&self, output: Var<'_>) -> Adjoints {
        assert!(std::ptr::eq(output.tape, self), "var from another tape");
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.index as usize] = 1.0;
        for i in (0..=output.index as usize).rev() {
            let a = adj[i];
            if a != 0.0 {
                let n = nodes[i];
                adj[n.parent[0] as usize] += n.weight[0] * a;
                adj[n.parent[1] as usize] += n.weight[1] * a;
            }
        }
        Adjoints { adj }
    }
}

/// Result of a reverse sweep: adjoints for every node on the tape.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, x: Var<'_>) -> f64 {
        self.adj[x.index as usize]
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    fn unary(self, value: f64, dv: f64) -> Self {
        Var {
            tape: self.tape,
            index: self.tape.push([self.index, self.index], [dv, 0.0]),
            value,
        }
    }

    fn binary(self, rhs: Self, value: f64, da: f64, db: f64) -> Self {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape));
        Var {
            tape: self.tape,
            index: self.tape.push([self.index, rhs.index], [da, db]),
            value,
        }
    }

    pub fn scale(self, a: f64) -> Self {
        self.unary(self.value * a, a)
    }

    pub fn add_const(self, a: f64) -> Self {
        self.unary(self.value + a, 1.0)
    }

    pub fn square(self) -> Self {
        self.unary(self.value * self.value, 2.0 * self.value)
    }

    pub fn recip(self) -> Self {
        assert!(self.value != 0.0, "var reciprocal: division by zero");
        let inv = 1.0 / self.value;
        self.unary(inv, -inv * inv)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn sin(self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }

    pub fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn swish(self) -> Self {
        let s = 1.0 / (1.0 + (-self.value).exp());
        self.unary(self.value * s, s * (1.0 + self.value * (1.0 - s)))
    }

    pub fn powi(self, n: i32) -> Self {
        self.unary(
            self.value.powi(n),
            n as f64 * self.value.powi(n - 1),
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        assert!(rhs.value != 0.0, "var division by zero");
        let inv = 1.0 / rhs.value;
        self.binary(
            rhs,
            self.value * inv,
            inv,
            -self.value * inv * inv,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let theta = [1.0, -2.0, 3.0].map(|v| tape.leaf(v));
        let loss = theta[0].square() + theta[1].square() + theta[2].square();
        let g = tape.gradient(loss);
        assert_eq!(g.wrt(theta[0]), 2.0);
        assert_eq!(g.wrt(theta[1]), -4.0);
        assert_eq!(g.wrt(theta[2]), 6.0);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(1.5);
        let y = tape.leaf(2.0);
        let loss = y.square();
        let g = tape.gradient(loss);
        assert_eq!(g.wrt(x), 0.0);
        assert_eq!(g.wrt(y), 4.0);
    }

    #[test]
    fn reverse_sweep_is_linear() {
        let tape = Tape::new();
        let x = tape.leaf(0.7);
        let y = tape.leaf(-1.3);
        let l1 = x * y + x.sin();
        let l2 = x.exp() * y;
        let combined = l1.scale(2.5) + l2.scale(-0.75);
        let gc = tape.gradient(combined);
        let g1 = tape.gradient(l1);
        let g2 = tape.gradient(l2);
        for leaf in [x, y] {
            assert_relative_eq!(
                gc.wrt(leaf),
                2.5 * g1.wrt(leaf) - 0.75 * g2.wrt(leaf),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn transcendental_partials_match_fd() {
        let x0 = 0.42;
        let fd = |f: &dyn Fn(f64) -> f64| (f(x0 + 1e-6) - f(x0 - 1e-6)) / 2e-6;
        let cases: Vec<(Box<dyn Fn(Var) -> Var>, Box<dyn Fn(f64) -> f64>)> = vec![
            (Box::new(|v: Var| v.tanh()), Box::new(|x: f64| x.tanh())),
            (Box::new(|v: Var| v.swish()), Box::new(|x: f64| x / (1.0 + (-x).exp()))),
            (Box::new(|v: Var| v.exp()), Box::new(|x: f64| x.exp())),
            (Box::new(|v: Var| v.sin()), Box::new(|x: f64| x.sin())),
        ];
        for (op, f) in cases {
            let tape = Tape::new();
            let x = tape.leaf(x0);
            let y = op(x);
            let g = tape.gradient(y);
            assert_relative_eq!(g.wrt(x), fd(f.as_ref()), max_relative = 1e-8);
        }
    }
}
