//! Face detection on a laptop: geometry, losses, sample mining, a tiny
//! two-stage CNN, multi-scale inference, FDDB/WIDER-style evaluation and a
//! synthetic data generator.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod matrix;
pub mod pyramid;
pub mod synthdata;
pub mod tinynet;

pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{BBox, Detection};
pub use matrix::Matrix;
