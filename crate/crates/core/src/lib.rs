//! Spectral-Galerkin laboratory for fully coupled slow-fast stochastic PDEs.
//!
//! The crate simulates
//!
//! ```text
//! dX = (A X + F(X, Y)) dt + dW1
//! dY = eps^-1 (B Y + G(X, Y)) dt + eps^-1/2 dW2
//! ```
//!
//! in the eigenbasis of the diagonal operators `A`, `B`, builds the averaged
//! drift by ergodic sampling of the frozen fast equation, solves the fast
//! Poisson (cell) problem by a Feynman-Kac Monte Carlo method, and constructs
//! the Gaussian deviation limit of `(X - X_bar) / sqrt(eps)`. The
//! [`experiments`] module turns these into convergence-rate harnesses.

pub mod averaging;
pub mod deviation;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod models;
pub mod poisson;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
