//! Multi-stage domain adaptation for sentence embedding models.
//!
//! The pipeline has three stages:
//!
//! 1. **Vocabulary augmentation**: train a subword vocabulary on domain text,
//!    append the domain tokens the base vocabulary lacks, and initialize each
//!    new embedding row as the mean of its base-subword rows.
//! 2. **Joint training**: contrastive loss over in-batch negatives plus an
//!    `alpha`-weighted masked-token loss whose softmax runs over the domain
//!    tokens only. Queries are masked; both losses share that forward pass.
//! 3. **Contrastive refinement**: contrastive loss alone.
//!
//! Supporting modules cover pair data and consistency filtering ([`data`]),
//! retrieval and STS metrics ([`eval`]), and checkpointing ([`trainer`]).

pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod fsutil;
pub mod numerics;
pub mod objectives;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
