//! Latent twin surrogates of ODE/PDE solution operators.
//!
//! A latent twin approximates a flow map Φ(t₂, t₁, x₁) as the composition
//! `decoder ∘ latent-map ∘ encoder`, evaluated in a single shot between
//! arbitrary time stamps — no time marching, in either direction. The crate
//! contains everything needed to reproduce that construction end to end:
//!
//! - [`numkit`]: dense f64 matrices, `expm` and its Fréchet derivative,
//!   thin SVD, seeded random streams.
//! - [`autodiff`]: a small reverse-mode MLP stack with Adam and learning
//!   rate schedules.
//! - [`odelab`]: four benchmark ODE systems and an adaptive Dormand-Prince
//!   5(4) integrator with dense output.
//! - [`datasets`]: random time-pair datasets, normalization, binary
//!   persistence.
//! - [`twin`]: the twin model itself — training, single-shot evaluation,
//!   recursive rollout, error-budget diagnostics.
//! - [`structured`]: exponential-flow latent maps `U e^{(t₂−t₁)W} Uᵀ`, POD
//!   bases, Galerkin generators, the matrix-exponential perturbation bound,
//!   and a hypernetwork generator for local chaotic dynamics.
//! - [`swe`]: a shallow-water solver (partially nonlinear, β-plane, TVD-RK3)
//!   used as the PDE testbed.
//! - [`assimilate`]: observation operators, latent-space state inference,
//!   and a strong-constraint 4D-Var baseline with exact adjoints.
//! - [`baselines`]: 10-to-1 recursive LSTM and branch/trunk DeepONet
//!   comparison models.
//! - [`cli`]: the command-line surface used by the `lt` binary.
//!
//! Start with the runnable programs under `examples/` — there is one per
//! capability.

pub mod autodiff;
pub mod datasets;
pub(crate) mod io;
pub mod numkit;
pub mod odelab;
pub mod structured;
pub mod twin;
