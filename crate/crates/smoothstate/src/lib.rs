//! Self-supervised state representation learning on pixel observation
//! sequences. Sequences are carved into a spatial-temporal cube graph and
//! masked along a random walk; a query encoder plus causal decoder predicts
//! per-timestep states from the masked view, and a multi-level temporal
//! contrastive objective against a momentum key encoder pulls temporally
//! close states together more strongly than distant ones.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod decoder;
pub mod encoder;
pub mod env;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod graph_mask;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod pgm;
pub mod probe;
pub mod rngstream;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
