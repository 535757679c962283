//! Dense 3D captioning with disentangled instance and context queries and
//! bi-directional contextual attention, trained and evaluated on synthetic
//! point-cloud scenes.

pub mod bica;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod datasynth;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod geom;
pub mod heads;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod queries;
pub mod training;

pub use error::{BicaError, Result};
