//! Learning separable, parameter-dependent Hamiltonians H(q, p; λ) = K(p) + V(q; λ)
//! from extremely sparse, irregularly sampled, noise-corrupted trajectory data.
//!
//! The model is a pair of small tanh MLPs for K and V whose input-gradients drive
//! a Störmer–Verlet rollout; training matches rolled-out states against observed
//! ones, so no time-derivative estimation is ever needed. Trained models serve as
//! data generators for sparse polynomial recovery of the equations of motion and
//! of the Hamiltonian itself, and a Monte-Carlo module checks the expected-gradient
//! behaviour of the loss under correlated (Ornstein–Uhlenbeck) observation noise.
//!
//! Crate layout mirrors the pipeline:
//!
//! - [`autodiff`]: dense tape-based reverse-mode engine with first-class,
//!   differentiable MLP input-gradients (the second-order path the rollout
//!   loss needs).
//! - [`systems`]: analytic ground-truth Hamiltonians (Henon–Heiles, Morse,
//!   double well).
//! - [`integrate`]: symplectic Verlet stepping, generic over force providers.
//! - [`datagen`]: bounded-energy sampling, exact OU noise, sparse windows.
//! - [`model`]: the recurrent symplectic model, its losses and gradients.
//! - [`train`]: LBFGS (strong Wolfe) with Adam rescue, ensembles, reports.
//! - [`evaluate`]: fractional energy errors, parameter sweeps, potential curves.
//! - [`symreg`]: sequentially thresholded least squares over polynomial libraries.
//! - [`theory`]: Monte-Carlo verification of the noise-bias scaling laws.
//! - [`commands`]: config-driven CLI entry points emitting CSV/JSON artifacts.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod integrate;
pub mod io;
pub mod model;
pub mod par;
pub mod rng;
pub mod symreg;
pub mod systems;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
