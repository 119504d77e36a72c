//! Energy-based controlled text generation by tuning biases over the logits of
//! an autoregressive language model.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod discriminator;
pub mod energy;
pub mod error;
pub mod harness;
pub mod lm;

pub use error::{Error, Result};
