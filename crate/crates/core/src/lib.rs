//! Instruction-conditioned hierarchical land-use planning.
//!
//! A zone-level conditional GAN sketches functional zones for an empty area
//! from its geospatial contexts and a green-rate instruction; a grid-level
//! stage turns the zones into per-grid POI counts.

pub mod citysynth;
pub mod condaug;
pub mod config;
pub mod ctxembed;
pub mod error;
pub mod evalmetrics;
pub mod export;
pub mod functionalizer;
pub mod gridgen;
pub mod landuse;
pub mod pipeline;
pub mod zonedisc;
pub mod zonegan;

pub use error::{Error, Result};
