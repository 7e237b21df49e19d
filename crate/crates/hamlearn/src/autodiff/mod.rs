//! Reverse-mode automatic differentiation for tanh MLPs.
//!
//! The engine records vector-valued primitive operations on a [`tape::Tape`]
//! and differentiates a scalar output with respect to registered parameter
//! matrices in one reverse sweep. Network input-gradients are themselves built
//! from primitives (a closed-form tanh derivative chain), so compositions that
//! consume those gradients, such as a leapfrog rollout, get exact second-order
//! parameter gradients from the same sweep.

pub mod mlp;
pub mod tape;

pub use mlp::{init_gaussian, MlpParams, MlpSpec, TapeNet};
pub use tape::{NodeId, ParamId, Tape};
