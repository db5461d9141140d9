//! Trimap-based natural image matting with long-range context propagation.
//!
//! A context patch twice the side of the predicted tile is encoded by a
//! propagating network whose center-surround pyramid pooling bottleneck
//! carries evidence from far outside the tile into it; a matting network then
//! predicts alpha, foreground and background for the inner tile from the
//! tile itself plus those context features.

pub mod analysis;
pub mod border;
pub mod config;
pub mod cspp;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod losses;
pub mod matting;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod propagating;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use domain::{
    clamp_by_trimap, composite, encode_trimap, region_masks, AlphaMatte, ColorMap, Grid, Image, Label, Mask,
    RegionMasks, Sample, Trimap,
};
pub use error::{LfpError, Result};
pub use tensor::{FeatureMap, Tensor};
