//! Hierarchical multi-task sequential recommender.
//!
//! An intent encoder predicts metadata of the next interaction (action type,
//! genre, movie/show, recency), folds those predictions into an intent
//! embedding, and a second encoder uses it to rank the next item.

pub mod ablation;
pub mod analytics;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod features;
pub mod intent;
pub mod item;
pub mod manifest;
pub mod model;
mod nn;
pub mod trainer;

pub use config::{Arch, Config, HeadSpec, HeadTarget};
pub use error::{Error, Result};
pub use model::{Model, Network};
pub use seqintent_tensor as tensor;
