//! Deterministic skip-connection fusion pipeline: multi-scale feature
//! compression, dynamic hypergraph mixing, chaos-probed entropy gating,
//! and per-stage restoration, with exact reverse-mode gradients and
//! brute-force reference oracles for every nontrivial kernel.

pub mod error;
pub mod gating;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod postproc;
pub mod preproc;
pub mod rng;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;
