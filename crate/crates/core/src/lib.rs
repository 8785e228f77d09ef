//! Pedestrian trajectory forecasting with a learnable pedestrian-domain
//! spatial attention and interleaved temporal attention.
//!
//! Everything is fp64 and differentiated by the small tape in
//! [`autodiff`].

pub mod autodiff;
pub mod data;
pub mod generative;
pub mod geometry;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod spatial_attention;
pub mod temporal_attention;
pub mod training;
