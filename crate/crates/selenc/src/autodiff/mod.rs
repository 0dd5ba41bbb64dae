//! Reverse-mode automatic differentiation on a per-computation tape.
//!
//! Every backward rule is expressed through the same primitive ops, so a
//! reverse pass recorded with `create_graph` can itself be differentiated,
//! giving exact second-order gradients (gradient-of-gradient) to any depth.

mod tape;
mod tensor;

pub use tape::{record, Tape};
pub use tensor::Tensor;
