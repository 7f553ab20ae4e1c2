//! Message-level transformer (MeLT) over sequences of pooled message vectors.
//!
//! The word level turns each message into one vector (mean of its token
//! vectors). The message level is a transformer encoder over a user's
//! chronologically ordered messages, pre-trained by masking whole messages
//! and regressing their vectors, then fine-tuned for 3-way stance detection.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod stance;
pub mod synth;
pub mod tensor;
pub mod word;

pub use error::{MeltError, Result};
