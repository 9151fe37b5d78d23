//! Conditional neural signed distance functions at desk scale.
//!
//! A point cloud conditions a small encoder/decoder network that predicts
//! the signed distance of any query coordinate to the described surface.
//! Training runs in two stages: episodic meta-learning on labeled analytic
//! shapes, then semi-supervision on unlabeled clouds from disjoint
//! categories, using a signed nearest-neighbor loss. Reconstruction
//! evaluates the field on a dense grid and extracts the zero level set with
//! marching cubes; evaluation is Chamfer-distance based.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod reconstruction;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
