//! Single-image inverse rendering: spherical-harmonic shading, a natural
//! illumination prior, multiview cross-projection and an energy-minimisation
//! decomposer of photographs into albedo, normals and lighting.

pub mod camera;
pub mod cli;
pub mod color;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod prior;
pub mod sh;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
