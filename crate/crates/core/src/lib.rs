//! Contrastive pre-training with cutmix-mixed local positives on a plain f64 CPU stack.

pub mod augmentation;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod neighborhood;
pub mod numerics;
pub mod parallel;
pub mod reporting;
pub mod trainer;

pub use error::{ClimError, ErrorClass, Result};
