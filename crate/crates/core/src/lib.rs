//! Facial spatiotemporal graphs and pulse estimation from face video.
//!
//! The pipeline turns a tracked 3D face mesh plus video frames into a
//! sparse spatiotemporal graph, runs a graph-convolutional network over it
//! to regress the blood volume pulse, and evaluates pulse rate against a
//! reference. A built-in synthetic face renderer provides end-to-end
//! verification with exact ground truth.

pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod files;
pub mod gradsuite;
pub mod graph;
pub mod mesh;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod pool;
pub mod raster;
pub mod stgraph;
pub mod synth;

pub use error::{Error, Result};
