//! Numerical substrate: dense tensors, a seedable RNG, reverse-mode
//! autodiff on a tape, and a finite-difference gradient checker.
//!
//! Everything is `f64`. All operations are pure functions of their inputs
//! plus an explicit [`Rng`]; given equal inputs they produce bit-identical
//! outputs, which the determinism guarantees elsewhere in the crate rely on.

mod check;
mod graph;
mod rng;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;

/// GELU activation (tanh approximation), used by both transformer MLP
/// blocks and the dispatcher MLPs.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
