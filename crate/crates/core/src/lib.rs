//! Patient representation learning from clinical notes, with synthetic
//! cohorts, embedding training, baselines and evaluation.

pub mod baselines;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod rng;
pub mod seqmodel;
pub mod synthgen;

pub use error::{Error, Result};
