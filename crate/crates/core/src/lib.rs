//! Structured stochastic variational inference with convex-update surrogates.
//!
//! Programs are DAGs of conditional distributions ([`model`]). A surrogate
//! posterior is built automatically from the program ([`surrogates`]): every
//! latent conditional keeps its prior link `theta(parents)` but its parameters
//! become `lam * theta + (1 - lam) * alpha` with trainable `lam` and `alpha`.
//! The ELBO is optimized by stochastic gradients ([`inference`]) and checked
//! against exact references ([`oracles`]) on the benchmark programs in
//! [`tasks`].

pub mod autodiff;
pub mod cli;
pub mod distributions;
pub mod inference;
pub mod model;
pub mod oracles;
pub mod surrogates;
pub mod tasks;
