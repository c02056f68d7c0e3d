//! Bubble-dynamics ground truth and a physics-informed operator network
//! that maps acoustic pressure histories to bubble-radius histories.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod integrator;
pub mod nn;
pub mod physics;
pub mod scalar;
pub mod spectral;
pub mod train;
