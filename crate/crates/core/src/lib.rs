//! Detect-and-verify low-shot counting.
//!
//! Given a location density map, backbone features and an exemplar-similarity
//! tensor, the pipeline first detects a high-recall set of candidate boxes
//! (density peaks plus a dense box-regression head), then verifies the
//! candidates by clustering their appearance embeddings, drops the outlier
//! clusters, and zeroes the density map outside the surviving boxes. Counts
//! are reported both as the corrected density sum and as the number of
//! verified detections.
//!
//! The crate also ships desk-scale trainers for the two learnable heads, a
//! deterministic synthetic-scene generator used as the test oracle, detection
//! and counting metrics, and bit-exact file formats for every artifact.
//!
//! Heavy inner loops run in parallel via rayon when the default `parallel`
//! feature is enabled; results are bit-identical to the sequential fallback.

pub mod cluster;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use config::{CountingMode, FusionMode, PipelineConfig, TrainConfig};
pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use scene::{ExemplarSet, GroundTruth, Scene};
pub use tensor::{DensityMap, Tensor};
