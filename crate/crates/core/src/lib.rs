//! Percussion stem separation toolkit: artificial mixture generation,
//! spectral-mask U-Net training and projection-based SDR evaluation.

pub mod audio;
pub mod bsseval;
pub mod cli;
pub mod corpus;
pub mod fixture;
pub mod mixgen;
pub mod separation;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod unet;
