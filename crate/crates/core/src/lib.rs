//! Likelihood-free Bayesian inference on Riemannian product manifolds.
//!
//! The crate combines a neural likelihood-to-evidence ratio with a geodesic
//! Hamiltonian Monte Carlo sampler and a Riemannian gradient-ascent MAP
//! estimator on spaces such as `R^n x S^1` (grasp positions and planar
//! orientations). A synthetic occupancy scene and grasp-outcome simulator
//! close the loop so that every stage can be checked against an analytic
//! ground truth.
//!
//! Module map:
//! - [`manifold`]: projections, geodesic flow and distances on products of
//!   Euclidean spaces and spheres.
//! - [`density`]: log-density trait, von Mises-Fisher, posterior composition.
//! - [`nre`]: multilayer perceptron, ratio training and ensembles.
//! - [`mcmc`]: Euclidean and geodesic HMC with multi-chain orchestration.
//! - [`map_opt`]: Riemannian gradient ascent and multi-start MAP.
//! - [`diagnostics`]: MMD, Frechet means, ESS, circular clustering.
//! - [`scene`]: analytic occupancy fields and the scene-dependent prior.
//! - [`graspsim`]: synthetic grasp outcomes and the end-to-end pipeline.
//! - [`cli`]: command-line runs.

pub mod cli;
pub mod density;
pub mod diagnostics;
pub mod error;
pub mod graspsim;
pub mod io;
pub mod manifold;
pub mod map_opt;
pub mod mcmc;
pub mod nre;
pub mod rng;
pub mod scene;
pub mod toy;

#[cfg(test)]
#[path = "../tests/common/mod.rs"]
mod testutil;

pub use error::{Error, Result};
