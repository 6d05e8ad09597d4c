//! Nested automatic differentiation: forward jets for directional input
//! derivatives up to order 4, and a reverse-mode tape for parameter gradients
//! of losses assembled from jet evaluations.

pub mod jet;
pub mod scalar;
pub mod tape;

pub use jet::{Jet, FACTORIAL, MAX_COEFFS};
pub use scalar::Scalar;
pub use tape::{Adjoints, Tape, Var};

use crate::params::ParamVector;

/// A scalar field evaluable over jets of any supported order.
///
/// Implementors get exact directional derivatives through
/// [`directional_derivative`]; closures cannot implement this because the
/// jet order is chosen at the call site.
pub trait JetFn {
    fn eval<const N: usize>(&self, coords: &[Jet<N>]) -> Jet<N>;
}

/// A vector-valued field evaluable over jets (one jet per output component).
pub trait JetField {
    fn eval<const N: usize>(&self, coords: &[Jet<N>]) -> Vec<Jet<N>>;
}

impl<F: JetFn> JetField for F {
    fn eval<const N: usize>(&self, coords: &[Jet<N>]) -> Vec<Jet<N>> {
        vec![JetFn::eval::<N>(self, coords)]
    }
}

/// Pure partial derivatives of `f` along one coordinate axis.
///
/// Returns the true derivatives of orders `0..=order` (not Taylor
/// coefficients) at `point`, obtained from a single jet evaluation seeded on
/// `axis`.
pub fn directional_derivative<F: JetFn>(
    f: &F,
    point: &[f64],
    axis: usize,
    order: usize,
) -> Vec<f64> {
    assert!(axis < point.len(), "axis out of range");
    assert!(order < MAX_COEFFS, "jet order above 4 is unsupported");
    fn go<const N: usize, F: JetFn>(f: &F, point: &[f64], axis: usize) -> Vec<f64> {
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
        f.eval::<N>(&coords).derivatives().to_vec()
    }
    match order {
        0 => go::<1, F>(f, point, axis),
        1 => go::<2, F>(f, point, axis),
        2 => go::<3, F>(f, point, axis),
        3 => go::<4, F>(f, point, axis),
        4 => go::<5, F>(f, point, axis),
        _ => unreachable!(),
    }
}

/// Exact reverse-mode gradient of a recorded scalar loss.
///
/// The closure receives a fresh tape plus one leaf per parameter and returns
/// the loss variable; anything it records as a tape constant is treated as
/// stop-gradient. Parameters with no path to the loss receive zero.
pub fn param_gradient<F>(params: &ParamVector, build_loss: F) -> ParamVector
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.values.iter().map(|&v| tape.leaf(v)).collect();
    let loss = build_loss(&tape, &leaves);
    let adj = tape.gradient(loss);
    let mut grad = params.zeros_like();
    for (g, leaf) in grad.values.iter_mut().zip(&leaves) {
        *g = adj.wrt(*leaf);
    }
    grad
}
