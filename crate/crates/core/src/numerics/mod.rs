//! Tensor substrate: a reverse-mode tape, neural layers, and a
//! finite-difference gradient checker.

mod graph;
mod gradcheck;
pub mod nn;
mod tensor;

pub use gradcheck::{grad_check, grad_check_floor, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{ParamId, ParamStore, Real, Tensor};

/// True when `DFMED_F64=1` asks for double precision.
pub fn f64_mode() -> bool {
    std::env::var("DFMED_F64").map(|v| v == "1").unwrap_or(false)
}

#[cfg(test)]
mod tests;
