//! Desk-scale toolkit that trains a small autoregressive language model and a
//! binary sentence classifier, then fine-tunes the language model with a
//! classifier-derived punishment added to its sentence loss so that the
//! frequency of undesirable generated sentences goes down.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod lm;
pub mod normtune;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
