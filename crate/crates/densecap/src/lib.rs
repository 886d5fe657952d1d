//! Dense captioning on a CPU-sized budget: a two-stage detector whose
//! second stage jointly decodes a caption and refines the box, with
//! optional whole-image context fused into the decoder.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: f64 tensors with a dynamic gradient tape and SGD
//! - [`geometry`]: boxes, IoU, NMS, anchors, offset encoding
//! - [`dataset`]: synthetic scene corpora and a region-annotation loader
//! - [`backbone`]: proposal plumbing around the convolutional trunk
//! - [`model`]: the parameters and forward passes of every head variant
//! - [`training`]: the joint loss and the training/fine-tuning loops
//! - [`evaluation`]: caption similarity, AP grids, and the pipeline sweep
//! - [`checkpoint`]: a binary container for parameters and configuration
//! - [`config`]: line-oriented run configuration
//! - [`render`]: SVG visualizations of predictions and decode steps

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod render;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
