//! Stochastic-gradient Langevin samplers with a limited-memory quasi-Newton
//! metric.
//!
//! The centerpiece is the Hessian-approximated sampler ([`samplers::SamplerKind::Hamcmc`]):
//! each new sample is generated from the sample `M` iterations back, using a
//! dense L-BFGS inverse-Hessian approximation built from the other recent
//! samples. Because the metric never depends on the point being moved, no
//! correction drift is required and the chain stays asymptotically unbiased.
//!
//! Around it the crate provides
//!
//! * [`models`]: target posteriors (a conjugate linear-Gaussian model with
//!   closed-form ground truth, and a Gaussian matrix-factorization model),
//! * [`lbfgs`]: damped pair storage, two-loop products and square-root factors,
//! * [`samplers`]: SGLD, preconditioned SGLD, constant-metric Riemannian SGLD,
//!   a naive quasi-Newton Langevin sampler, and the Hessian-approximated one,
//! * [`diagnostics`]: step-weighted estimators, bias/MSE tables and RMSE,
//! * [`dist_sim`]: an in-process simulation of block-partitioned distributed
//!   sampling for matrix factorization,
//! * [`cli`]: config parsing, dataset ingestion and CSV-emitting experiments.

pub mod cli;
pub mod diagnostics;
pub mod dist_sim;
pub mod lbfgs;
pub mod models;
pub mod rng;
pub mod samplers;

pub use diagnostics::Trace;
pub use lbfgs::{InnerProduct, LbfgsMemory};
pub use models::{GaussianMfModel, LinearGaussianModel, Minibatch, Model};
pub use samplers::{run_chain, ChainConfig, SamplerKind, StepSchedule};
