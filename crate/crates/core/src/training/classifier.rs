use rand::seq::SliceRandom;

use crate::data::{stack_images, ImageSample};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::{adam_step, AdamState, Tape, Tensor};

use super::checkpoint::ModelCheckpoint;
use super::config::TrainConfig;
use super::{stream, Stream};

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub checkpoint: ModelCheckpoint,
    pub classifier: Classifier,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Cross-entropy of the last step, `None` for zero steps.
    pub final_loss: Option<f64>,
}

fn check_split(what: &str, samples: &[ImageSample], cfg: &TrainConfig) -> Result<()> {
    let c = cfg.classifier_input;
    for s in samples {
        if s.pixels.shape() != [3, c, c] {
            return Err(Error::shape(format!(
                "{what} image has shape {:?}, classifier expects [3, {c}, {c}]",
                s.pixels.shape()
            )));
        }
        match s.label {
            Some(l) if l < cfg.n_total => {}
            Some(l) => return Err(Error::shape(format!("{what} label {l} ≥ n_total {}", cfg.n_total))),
            None => return Err(Error::shape(format!("{what} image has no label"))),
        }
    }
    Ok(())
}

/// Fraction of `samples` whose arg-max prediction equals the label.
pub fn accuracy(classifier: &Classifier, samples: &[ImageSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let n_total = classifier.spec.n_total;
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let refs: Vec<_> = chunk.iter().collect();
        let probs = classifier.predict(&stack_images(&refs)?)?;
        for (row, s) in probs.data().chunks(n_total).zip(chunk) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            if Some(best.0) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains the victim with softmax cross-entropy and Adam on shuffled
/// mini-batches.
pub fn train_classifier(cfg: &TrainConfig, train: &[ImageSample], test: &[ImageSample]) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::shape("classifier training set is empty"));
    }
    check_split("training", train, cfg)?;
    check_split("test", test, cfg)?;
    let mut classifier = Classifier::new(cfg.classifier_spec()?, &mut stream(cfg.seed, Stream::ClassifierInit));
    let mut rng = stream(cfg.seed, Stream::ClassifierBatches);
    let mut state = AdamState::for_params(classifier.params.tensors());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut final_loss = None;
    for step in 0..cfg.classifier_steps {
        let mut batch = Vec::with_capacity(cfg.classifier_batch);
        while batch.len() < cfg.classifier_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.label.expect("checked")).collect();
        let images: Tensor<f32> = stack_images(&batch)?;

        let mut tape = Tape::new();
        let vars = classifier.params.bind(&mut tape, true);
        let x = tape.leaf_owned(images);
        let logits = classifier.logits(&mut tape, &vars, x)?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.gather_rows(logp, &labels)?;
        let mean = tape.mean(picked);
        let loss = tape.neg(mean);
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("classifier cross-entropy = {value}"),
            });
        }
        tape.backward(loss)?;
        classifier.params.collect_grads(&tape, &vars)?;
        adam_step(classifier.params.tensors_mut(), &mut state, &cfg.classifier_adam)?;
        final_loss = Some(value);
    }
    let train_accuracy = accuracy(&classifier, train)?;
    let test_accuracy = accuracy(&classifier, test)?;
    let mut snapshot = cfg.clone();
    snapshot.inference_only = true;
    let mut checkpoint = ModelCheckpoint::new(&snapshot, cfg.classifier_steps as u64);
    checkpoint.add_params(&classifier.params);
    Ok(ClassifierOutcome {
        checkpoint,
        classifier,
        train_accuracy,
        test_accuracy,
        final_loss,
    })
}

/// Rebuilds the classifier stored in a checkpoint.
pub fn load_classifier(cp: &ModelCheckpoint) -> Result<(TrainConfig, Classifier)> {
    let cfg = cp.train_config()?;
    let classifier = Classifier::from_params(cfg.classifier_spec()?, cp.params("cls."))?;
    Ok((cfg, classifier))
}
