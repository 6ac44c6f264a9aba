//! Adversarial differentiable architecture search: supernet, search loop,
//! attacks, adversarial training and evaluation.

pub mod error;
pub mod nn;
pub mod space;
pub mod attack;
pub mod mgda;
pub mod optim;
pub mod data;
pub mod search;
pub mod train;
pub mod checkpoint;
pub mod config;

pub use error::{Error, ErrorCategory, Result};
