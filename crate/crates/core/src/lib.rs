//! Structured autoencoders: multi-level embeddings learned by composing token
//! embeddings up a binary sentence tree and decomposing them back down.

pub mod corpus;
pub mod desk;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
