//! Deterministic simulator of split federated momentum-contrastive learning.
//!
//! Clients own the first layers of an encoder, a single server owns the
//! rest plus the projector and the negative queue. Two synchronization
//! schemes are implemented: averaging the online client models only, and
//! additionally averaging the client momentum models.

pub mod arch;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod moco;
pub mod nn;
pub mod params;
pub mod protocol;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
