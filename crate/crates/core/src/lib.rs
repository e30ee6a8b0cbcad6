//! Interactive video retrieval by dialog.
//!
//! A hierarchical recurrent encoder turns a caption plus question/answer
//! rounds into a history vector, which is mapped into a joint embedding space
//! shared with pooled video features and compared by cosine similarity. A
//! recurrent decoder generates the next question from the same history
//! vector. The crate also carries the training loop, evaluation metrics, a
//! synthetic scene corpus and an in-memory session service.

pub mod corpus;
pub mod dialog_model;
mod error;
pub mod joint_embedding;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod service;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, RetrievalModel};
pub use numerics::{Tape, Tensor, Var};
