//! Conditional-GAN laboratory for restoring samples of an image classifier's
//! training distribution.
//!
//! A generator is conditioned on a substrate image and a random tiled class
//! input, and trained against a frozen victim classifier with a four-part
//! objective (adversarial, white-background masking, crop-based class
//! presence, substrate fidelity). Everything runs on a small dense-tensor
//! engine with reverse-mode differentiation defined in [`tensor`].

pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod oracle;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, ImageError, Result};
pub use tensor::{AdamHyper, AdamState, Real, Tape, Tensor, Var};
pub use losses::{LossReport, LossWeights};
pub use models::{ClassTile, Classifier, Discriminator, Generator, TargetVector};

pub use training::{ModelCheckpoint, TrainConfig};
