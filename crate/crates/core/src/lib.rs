//! Unpaired image-to-image translation with cycle-consistent GANs whose
//! generators are UNets with a transformer bottleneck.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod session;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
