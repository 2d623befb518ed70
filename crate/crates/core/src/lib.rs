//! Neural samplers for unnormalized discrete distributions on periodic
//! square lattices (Ising and Potts), trained by aligning CTMC path measures.
//!
//! The crate provides:
//! - the lattice targets and their exact-enumeration oracle,
//! - a masked-diffusion sampler with exact random-order autoregressive
//!   simulation and Radon-Nikodym path weights,
//! - the RERF / LV / CE / WDCE learning objectives and a full training loop
//!   (AdamW, EMA, replay buffer, warm-up),
//! - Metropolis-Hastings and Swendsen-Wang baselines,
//! - statistical-physics evaluation metrics (ESS, divergences, observables),
//! - a uniform-diffusion sampler variant with Euler-discretized trajectories.

pub mod error;
pub mod exact;
pub mod lattice;
pub mod losses;
pub mod mdns;
pub mod rng;
pub mod score;

pub use error::{Error, Result};
