//! Optimization-free test-time adaptation for sensor-based activity
//! recognition: a small CNN inference/training stack, test-time
//! batch-norm statistic mixing, an entropy-filtered prototype classifier,
//! streaming evaluation protocols, and their file formats.

pub mod commands;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod normalization;
pub mod prototype;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
