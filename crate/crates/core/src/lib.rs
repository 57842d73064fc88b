//! Domain-adaptive detection transformer with sequence feature alignment,
//! evaluated on a synthetic two-domain shape-detection benchmark.
//!
//! The crate is organized around the training objective: a supervised
//! set-prediction loss on the labeled source domain, adversarial
//! alignment losses on the encoder/decoder token sequences of both
//! domains (domain-query and token-wise, aggregated hierarchically over
//! layers), and a bipartite matching consistency regularizer across
//! decoder layers. The min-max structure is realized with a
//! gradient-reversal layer, never with alternating optimization.

pub mod alignment;
pub mod config;
pub mod consistency;
pub mod data;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::CoreError;
