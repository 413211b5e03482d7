//! Koopman autoencoder toolkit for nonlinear dynamical systems.
//!
//! The crate covers the full pipeline: benchmark system definitions and
//! dataset generation ([`dynsys`]), a small reverse-mode autodiff engine
//! with an AdamW optimizer ([`gradengine`]), the Koopman autoencoder model
//! with continuous latent operators and bilinear discretization
//! ([`koopman`]), the three-term sequence training loop ([`training`]),
//! long-horizon rollouts under no / every-step / periodic reencoding
//! ([`rollout`]), a DMD baseline ([`dmd`]), and an experiment pipeline
//! driving all of it from JSON configs ([`pipeline`]).

pub mod dmd;
pub mod dynsys;
pub mod gradengine;
pub mod koopman;
pub mod linalg;
pub mod pipeline;
pub mod rollout;
pub mod training;

/// Latent or state norms above this abort a rollout as an explosion.
pub const EXPLOSION_NORM: f64 = 1e8;
