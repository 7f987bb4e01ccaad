//! Curvilinear landmark detection on RGB-D laparoscopic frames.

pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod prompt_geometry;

pub use error::{Error, Result};

/// Landmark classes in channel order.
pub const CLASSES: [&str; 3] = ["silhouette", "ligament", "ridge"];
