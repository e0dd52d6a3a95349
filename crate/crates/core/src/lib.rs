//! Compositional latent decoding of cortical-style surface maps.
//!
//! The pipeline has three stages:
//!
//! 1. A universal autoencoder ([`univae`]) maps masked surface maps into a
//!    compact token latent shared across subjects.
//! 2. A latent factorization–composition model ([`lfcm`]) splits each
//!    universal latent into a stimulus-driven code and a nuisance code under
//!    subject/dataset conditioning, and recomposes codes back into latents.
//!    Training ([`training`]) uses paired samples, pairwise code swapping and
//!    a re-factorizing consistency term.
//! 3. Zero-shot inference ([`inference`]) factorizes an unseen subject's
//!    latent under a default subject embedding, sweeps surrogate compositions
//!    over seen-subject conditions, rescales, averages and reads the result
//!    out against a bank of visual targets.
//!
//! Everything is verified against a deterministic synthetic world
//! ([`synthworld`]) with known ground-truth stimulus, subject, dataset and
//! trial factors. All numerics are `f64` on a small reverse-mode tape
//! ([`tape`]) so every loss is finite-difference checkable.

pub mod config;
pub mod container;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod experiments;
pub mod inference;
pub mod lfcm;
pub mod nn;
pub mod opt;
pub mod params;
pub mod seeding;
pub mod surface;
pub mod synthworld;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod univae;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
