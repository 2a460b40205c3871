//! Hierarchical deep generative model for multi-subject dynamic graphs.
//!
//! Subjects carry a graph embedding, nodes and communities carry
//! time-evolving embeddings, and every observed edge is explained by a latent
//! community drawn from the source node's community mixture. Training
//! maximises a structured variational lower bound by reverse-mode
//! differentiation.

pub mod autodiff;
mod error;
pub mod eval;
pub mod generative;
pub mod graph;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
