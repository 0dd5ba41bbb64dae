//! Workbench for studying selective encryption of model gradients.
//!
//! The crate wires together a reverse-mode autodiff engine, small vision
//! models, gradient significance metrics, a masking/encryption layer, an
//! optimization-based gradient inversion attack, and a federated averaging
//! simulator. The `parallel` feature (on by default) runs restart and sweep
//! loops on rayon; disabling it forces sequential execution with identical
//! numeric results.

pub mod attack;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod encryption;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod lemma;
pub mod model;
pub mod parallel;
pub mod quality;
pub mod significance;

pub use error::{Error, Result};

/// Derives an independent RNG seed from a base seed and a stream index
/// (splitmix64 finalizer). Used for per-restart, per-sample, and per-client
/// streams so reordering or parallelizing work cannot change any draw.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    // stream -> stream*odd + c is a bijection, as is the finalizer, so for a
    // fixed base no two streams collide.
    let mut z = base
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
