//! Victim training, restoration-GAN training, generation, and persistence.

mod checkpoint;
mod classifier;
mod config;
mod gan;

pub use checkpoint::{ModelCheckpoint, FORMAT_VERSION};
pub use classifier::{accuracy, load_classifier, train_classifier, ClassifierOutcome};
pub use config::{RealPair, TrainConfig};
pub use gan::{train_gan, GanModel, GanOutcome, GanOutputs, GanTrainer, StepState, MAX_GENERATION_MIX};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{synth_labeled_shapes, synth_substrates, ImageSample};
use crate::error::Result;

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Substrates = 1,
    ShapesTrain = 2,
    ShapesTest = 3,
    ClassifierInit = 4,
    ClassifierBatches = 5,
    GanInit = 6,
    GanLoop = 7,
    Generation = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// The procedural substrate pool described by `cfg`.
pub fn synth_substrate_pool(cfg: &TrainConfig) -> Result<Vec<ImageSample>> {
    synth_substrates(cfg.substrate_count, cfg.substrate_size, &mut stream(cfg.seed, Stream::Substrates))
}

/// Train and held-out shape sets described by `cfg`.
pub fn synth_shape_splits(cfg: &TrainConfig) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let c = cfg.classifier_input;
    let train = synth_labeled_shapes(cfg.shapes_per_class, cfg.n_total, c, &mut stream(cfg.seed, Stream::ShapesTrain))?;
    let test = synth_labeled_shapes(cfg.test_per_class, cfg.n_total, c, &mut stream(cfg.seed, Stream::ShapesTest))?;
    Ok((train, test))
}
