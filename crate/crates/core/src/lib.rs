//! Video scene parsing with a bilateral network: a convolutional spatial
//! path, a shifted-window transformer context path, attention refinement and
//! feature fusion, plus a temporal context module that averages features of
//! frames 3, 6 and 9 steps back.

pub mod backbone;
pub mod bilateral;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};

use candle_core::Tensor;

/// A `[B, C, H, W]` tensor together with its stride relative to the input.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Self {
        Self { data, stride }
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }
}
