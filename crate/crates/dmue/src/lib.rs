//! Ambiguous-label training with latent distribution mining and pairwise
//! uncertainty estimation, on a synthetic benchmark with known posteriors.

pub mod diffcore;

pub mod datagen;
pub mod losses;
pub mod model;
pub mod rng;
pub mod checkpoint;
pub mod trainer;
pub mod harness;
