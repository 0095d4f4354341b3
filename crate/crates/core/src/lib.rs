//! Continuous-discrete particle filtering for stochastic differential equation
//! state-space models.
//!
//! The state evolves as an Itô SDE `dx = f(x,t) dt + L(t) dβ` and is observed
//! at discrete times. Particles are propagated along a user supplied
//! importance process `ds = g(s,t) dt + B(t) dβ`; the scaled process
//! `ds* = L B⁻¹ ds` is a weak solution of the target SDE under a change of
//! measure whose log density `Λ` is integrated alongside the proposal with the
//! same Brownian increments. The resulting weights `exp(Λ)` make the proposal
//! an exact importance sampler of the path law (up to time discretisation).
//!
//! Modules:
//!
//! - [`sde_core`]: time grids, Brownian increments, Euler–Maruyama and Euler ODE stepping.
//! - [`girsanov`]: scaled-process construction and log-likelihood-ratio integration.
//! - [`particle_filter`]: the sequential importance resampling recursions.
//! - [`rao_blackwell`]: Kalman-marginalised linear sub-states and conjugate static parameters.
//! - [`importance_builder`]: EKF moment propagation and bridge proposals.
//! - [`models`]: the noisy pendulum, the stochastic SIR epidemic and linear test models.
//! - [`harness`]: configuration, CSV I/O and the command implementations behind the CLI.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod girsanov;
pub mod harness;
pub mod importance_builder;
pub mod models;
pub mod particle_filter;
pub mod rao_blackwell;
pub mod rng;
pub mod scalar;
pub mod sde_core;
pub mod special;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations of the generic types.
pub type SdeModel64 = sde_core::SdeModel<f64>;
pub type TimeGrid64 = sde_core::TimeGrid<f64>;
pub type ImportanceSpec64 = girsanov::ImportanceSpec<f64>;
pub type ParticleSet64<A = ()> = particle_filter::ParticleSet<f64, A>;
pub type Particle64<A = ()> = particle_filter::Particle<f64, A>;
pub type GaussianBlock64 = rao_blackwell::GaussianBlock<f64>;
pub type Summary64 = particle_filter::Summary<f64>;

/// `f32` instantiations of the generic types.
pub type SdeModel32 = sde_core::SdeModel<f32>;
pub type TimeGrid32 = sde_core::TimeGrid<f32>;
pub type ImportanceSpec32 = girsanov::ImportanceSpec<f32>;
pub type ParticleSet32<A = ()> = particle_filter::ParticleSet<f32, A>;
pub type GaussianBlock32 = rao_blackwell::GaussianBlock<f32>;
