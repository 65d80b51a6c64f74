//! Score-based diffusion in function space over triangulated 2D domains.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`] builds triangulations, dual/vertex graphs and multiscale hierarchies.
//! * [`fem`] holds the Q1 reference-patch basis, the FEM convolution and a P1 Poisson solver.
//! * [`randfield`] discretises the RBF covariance operator `C` and samples from `N(0, C)`.
//! * [`sde`] provides noise schedules, forward perturbations and the Heun sampler.
//! * [`score`] defines the [`score::Denoiser`] contract, an analytic Gaussian denoiser and a
//!   trainable multiscale FEM-convolution network.
//! * [`guidance`] implements forward operators, the likelihood potential and the two
//!   posterior samplers (Tweedie guidance inside Heun, and decoupled annealing).
//! * [`data`] generates Gaussian-blob conductivity datasets.
//! * [`metrics`] computes RMSE of the posterior mean, the energy score and unbiased MMD.
//! * [`cli`] binds everything into the `femdiff` command line tool.

pub mod cli;
pub mod data;
pub mod fem;
pub mod field;
pub mod guidance;
pub mod mesh;
pub mod metrics;
pub mod randfield;
pub mod rng;
pub mod score;
pub mod sde;

pub use field::Field;
pub use mesh::Point;
