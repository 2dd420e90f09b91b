//! Query rewriting with class-private adapters: corpus handling, metrics,
//! the encoder-decoder model, training and ensembles.

pub mod corpus;
pub mod ensemble;
pub mod metrics;
pub mod model;
pub mod training;
