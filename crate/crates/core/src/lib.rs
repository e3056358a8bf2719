//! Two-stage insect monitoring: a single-shot moth detector finds insects in
//! trap images, and a part-based classifier names the species of each crop.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod parts;
pub mod pipeline;
pub mod priors;
pub mod seed;
pub mod train;
