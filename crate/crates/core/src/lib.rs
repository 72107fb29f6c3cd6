//! Multi-task channel pruning for encoder-decoder segmentation networks.
//!
//! The crate covers the whole desk-scale workflow: a layer graph with
//! backbone/decoder partitions ([`netgraph`]), a small CPU training engine
//! ([`nn`]), alternating augmented-Lagrangian sparse training
//! ([`sparse_trainer`]), percentile-threshold channel pruning and graph
//! surgery ([`pruner`]), cost profiling ([`profiler`]) and the end-to-end
//! experiment pipeline ([`pipeline`]).

pub mod config;
pub mod error;
pub mod netgraph;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod profiler;
pub mod pruner;
pub mod sparse_trainer;
pub mod task;

pub use config::{MtpConfig, ThresholdPolicy};
pub use error::{Error, Result};
pub use netgraph::{NetworkGraph, Partition, ScalingVector};
pub use params::ParamStore;
