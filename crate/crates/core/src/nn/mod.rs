//! Dense layers, layer stacks with reverse-mode gradients, and optimizers.

pub mod layer;
pub mod loss;
pub mod optim;
pub mod stack;

pub use layer::{Conv2d, Dense, Layer};
pub use optim::{cosine_lr, Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
pub use stack::{Gradients, Stack};
