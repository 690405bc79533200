//! A small, dependency-light engine for region-fused convolutional
//! classifiers on grayscale images.
//!
//! The model family here augments a plain VGG-style backbone with one or
//! two auxiliary sub-networks that look at overlapping grid regions of
//! the input. Each region is cropped, pushed through a shared-weight
//! sub-network, and the resulting patch is added into the matching slice
//! of an intermediate feature map of the main network, so later stages
//! see both global context and re-emphasized local detail. Region
//! geometry, the fusion arithmetic, and its exact gradient are in
//! [`region`]; the model assembly lives in [`model`].
//!
//! Everything runs on the CPU in `f64` with fixed iteration and
//! accumulation orders, and all randomness flows through seeded
//! counter-mode generators, so builds, training runs, and dataset
//! generation are reproducible bit for bit.
//!
//! The crate also ships the surrounding tooling: a from-scratch autodiff
//! layer zoo ([`layers`]), SGD training ([`train`]), binary-PGM handling
//! ([`pgm`]), a synthetic lesion dataset generator ([`synth`]),
//! activation heatmaps ([`heatmap`]), checkpointing ([`checkpoint`]),
//! and confusion-matrix metrics ([`metrics`]).

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pgm;
pub mod region;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
