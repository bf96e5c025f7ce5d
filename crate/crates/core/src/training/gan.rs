use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_augmentation, stack_images, unstack_images, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{
    loss_cgan_d, loss_cgan_g, loss_mask, loss_substrate, loss_total, loss_vgg, sample_crops, GeneratorTerms,
    LossReport,
};
use crate::models::{sample_class_tile, sample_target, stack_tiles, Classifier, Discriminator, Generator, TargetVector};
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

use super::checkpoint::ModelCheckpoint;
use super::classifier::load_classifier;
use super::config::{RealPair, TrainConfig};
use super::{stream, Stream};

/// Most target classes that may be mixed in one generated image.
pub const MAX_GENERATION_MIX: usize = 3;

/// Victim probabilities `[B, n]` at the configured target indices.
fn target_probs(
    tape: &mut Tape<f32>,
    victim: &Classifier,
    vars: &[Var],
    image: Var,
    targets: &[usize],
) -> Result<Var> {
    let p = victim.forward(tape, vars, image)?;
    tape.select_cols(p, targets)
}

/// Data and generator forward pass shared by the two halves of one step.
pub struct StepState {
    x: Tensor<f32>,
    y: Tensor<f32>,
    t: TargetVector,
    tape: Tape<f32>,
    g_vars: Vec<Var>,
    x_var: Var,
    fake: Var,
    l_cgan_d: Option<f64>,
}

impl StepState {
    pub fn target(&self) -> &TargetVector {
        &self.t
    }
}

pub struct GanTrainer {
    cfg: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    victim: Classifier,
    victim_fingerprint: u64,
    g_state: Vec<AdamState>,
    d_state: Vec<AdamState>,
    substrates: Vec<ImageSample>,
    rng: ChaCha8Rng,
    step: usize,
}

impl GanTrainer {
    pub fn new(cfg: &TrainConfig, victim_cp: &ModelCheckpoint, substrates: Vec<ImageSample>) -> Result<Self> {
        cfg.validate()?;
        let (vcfg, victim) = load_classifier(victim_cp)?;
        if vcfg.classifier_input != cfg.classifier_input || vcfg.n_total != cfg.n_total {
            return Err(Error::shape(format!(
                "victim expects {0}x{0} inputs over {1} classes; config has {2}x{2} over {3}",
                vcfg.classifier_input, vcfg.n_total, cfg.classifier_input, cfg.n_total
            )));
        }
        if substrates.is_empty() {
            return Err(Error::shape("substrate set is empty"));
        }
        let s = cfg.substrate_size;
        if let Some(bad) = substrates.iter().find(|x| x.pixels.shape() != [3, s, s]) {
            return Err(Error::shape(format!(
                "substrate has shape {:?}, config expects [3, {s}, {s}]",
                bad.pixels.shape()
            )));
        }
        let mut init = stream(cfg.seed, Stream::GanInit);
        let mut generator = Generator::new(cfg.generator_spec()?, &mut init);
        let mut discriminator = Discriminator::new(cfg.discriminator_spec()?, &mut init);
        if let Some(g) = cfg.gain_init {
            generator.params.fill_gains(g as f32);
            discriminator.params.fill_gains(g as f32);
        }
        let mut cfg = cfg.clone();
        cfg.classifier_base = vcfg.classifier_base;
        cfg.classifier_hidden = vcfg.classifier_hidden;
        Ok(GanTrainer {
            g_state: AdamState::for_params(generator.params.tensors()),
            d_state: AdamState::for_params(discriminator.params.tensors()),
            victim_fingerprint: victim.params.fingerprint(),
            rng: stream(cfg.seed, Stream::GanLoop),
            cfg,
            generator,
            discriminator,
            victim,
            substrates,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn victim(&self) -> &Classifier {
        &self.victim
    }

    fn draw_batch(&mut self) -> Result<Tensor<f32>> {
        let picked: Vec<ImageSample> = (0..self.cfg.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..self.substrates.len());
                apply_augmentation(&self.substrates[i], &self.cfg.augmentation, &mut self.rng)
            })
            .collect();
        stack_images(&picked.iter().collect::<Vec<_>>())
    }

    /// Samples the batch, target vector and tiles, and runs G forward.
    pub fn begin_step(&mut self) -> Result<StepState> {
        let x = self.draw_batch()?;
        let y = match self.cfg.real_pair {
            RealPair::Unpaired => self.draw_batch()?,
            RealPair::Substrate => x.clone(),
        };
        let t = sample_target(self.cfg.n, self.cfg.p_null(), self.cfg.max_mixed, &mut self.rng)?;
        let s = self.generator.spec.tile_side();
        let tiles = (0..self.cfg.batch_size)
            .map(|_| sample_class_tile::<f32, _>(&t, s, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let tile = stack_tiles(&tiles)?;

        let mut tape = Tape::new();
        let g_vars = self.generator.params.bind(&mut tape, true);
        let x_var = tape.constant(x.shape(), x.data().to_vec())?;
        let tile_var = tape.leaf_owned(tile);
        let fake = self.generator.forward(&mut tape, &g_vars, x_var, tile_var)?;
        Ok(StepState {
            x,
            y,
            t,
            tape,
            g_vars,
            x_var,
            fake,
            l_cgan_d: None,
        })
    }

    /// Updates D on the real pair against the (detached) fake pair.
    pub fn discriminator_step(&mut self, st: &mut StepState) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.discriminator.params.bind(&mut tape, true);
        let x = tape.constant(st.x.shape(), st.x.data().to_vec())?;
        let y = tape.constant(st.y.shape(), st.y.data().to_vec())?;
        let fake = tape.constant(st.tape.shape(st.fake), st.tape.value(st.fake).to_vec())?;
        let d_real = self.discriminator.forward(&mut tape, &vars, x, y)?;
        let d_fake = self.discriminator.forward(&mut tape, &vars, x, fake)?;
        let loss = loss_cgan_d(&mut tape, d_real, d_fake)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("l_cgan_d = {value}"),
            });
        }
        tape.backward(loss)?;
        self.discriminator.params.collect_grads(&tape, &vars)?;
        adam_step(self.discriminator.params.tensors_mut(), &mut self.d_state, &self.cfg.adam)?;
        st.l_cgan_d = Some(value);
        Ok(value)
    }

    /// Updates G on the weighted objective against the current D and the
    /// frozen victim.
    pub fn generator_step(&mut self, mut st: StepState) -> Result<LossReport> {
        let tape = &mut st.tape;
        let (x, fake) = (st.x_var, st.fake);
        let d_vars = self.discriminator.params.bind(tape, false);
        let v_vars = self.victim.params.bind(tape, false);
        let c = self.cfg.classifier_input;
        let targets = &self.cfg.target_indices;

        let d_fake = self.discriminator.forward(tape, &d_vars, x, fake)?;
        let cgan_g = loss_cgan_g(tape, d_fake)?;
        let mask = loss_mask(tape, fake, x, self.cfg.white_threshold)?;
        let resized = tape.resize_bilinear(fake, c, c)?;
        let c_r = target_probs(tape, &self.victim, &v_vars, resized, targets)?;
        let crops = sample_crops(tape, fake, c, self.cfg.crop_count, &mut self.rng)?
            .into_iter()
            .map(|crop| target_probs(tape, &self.victim, &v_vars, crop, targets))
            .collect::<Result<Vec<_>>>()?;
        let vgg = loss_vgg(tape, c_r, &crops, &st.t)?;
        let sub = loss_substrate(tape, x, fake)?;
        let terms = GeneratorTerms { cgan_g, mask, vgg, sub };
        let l_cgan_d = st.l_cgan_d.unwrap_or(f64::NAN);
        let (total, report) = loss_total(tape, &terms, l_cgan_d, &self.cfg.weights)?;
        if !report.is_finite() {
            let detail = report
                .components()
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::Divergence { step: self.step, detail });
        }
        tape.backward(total)?;
        self.generator.params.collect_grads(tape, &st.g_vars)?;
        adam_step(self.generator.params.tensors_mut(), &mut self.g_state, &self.cfg.adam)?;
        self.step += 1;
        Ok(report)
    }

    /// One full iteration: D step, then G step.
    pub fn step(&mut self) -> Result<LossReport> {
        let mut st = self.begin_step()?;
        self.discriminator_step(&mut st)?;
        self.generator_step(st)
    }

    /// Generator, discriminator and victim parameters with an
    /// inference-only config snapshot.
    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        if self.victim.params.fingerprint() != self.victim_fingerprint {
            return Err(Error::shape("victim parameters changed during GAN training"));
        }
        let mut snapshot = self.cfg.clone();
        snapshot.inference_only = true;
        let mut cp = ModelCheckpoint::new(&snapshot, self.step as u64);
        cp.add_params(&self.generator.params);
        cp.add_params(&self.discriminator.params);
        cp.add_params(&self.victim.params);
        Ok(cp)
    }
}

/// Where [`train_gan`] writes its artifacts; `None` skips the file.
#[derive(Clone, Debug, Default)]
pub struct GanOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<(usize, LossReport)>,
}

/// Runs `cfg.steps` iterations, logging every `log_interval` steps (and the
/// last) and checkpointing every `checkpoint_interval` steps (and the end).
pub fn train_gan(
    cfg: &TrainConfig,
    victim: &ModelCheckpoint,
    substrates: Vec<ImageSample>,
    outputs: &GanOutputs,
) -> Result<GanOutcome> {
    let mut trainer = GanTrainer::new(cfg, victim, substrates)?;
    let mut writer = match &outputs.log {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(p, e))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    let mut log = Vec::new();
    for i in 0..cfg.steps {
        let report = trainer.step()?;
        if i % cfg.log_interval == 0 || i + 1 == cfg.steps {
            if let Some((p, w)) = writer.as_mut() {
                writeln!(w, "{}", report.csv_line(i)).map_err(|e| Error::io(&*p, e))?;
                w.flush().map_err(|e| Error::io(&*p, e))?;
            }
            log.push((i, report));
        }
        if (i + 1) % cfg.checkpoint_interval == 0 && i + 1 < cfg.steps {
            if let Some(p) = &outputs.checkpoint {
                trainer.checkpoint()?.save(p)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(p) = &outputs.checkpoint {
        checkpoint.save(p)?;
    }
    Ok(GanOutcome { checkpoint, log })
}

/// A trained generator together with the victim it was trained against.
#[derive(Clone, Debug)]
pub struct GanModel {
    pub config: TrainConfig,
    pub generator: Generator,
    pub victim: Classifier,
}

impl GanModel {
    pub fn from_checkpoint(cp: &ModelCheckpoint) -> Result<Self> {
        let config = cp.train_config()?;
        let generator = Generator::from_params(config.generator_spec()?, cp.params("gen."))?;
        let victim = Classifier::from_params(config.classifier_spec()?, cp.params("cls."))?;
        Ok(GanModel {
            config,
            generator,
            victim,
        })
    }

    /// `count` outputs for one substrate, each with a fresh tile.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        substrate: &ImageSample,
        t: &TargetVector,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<ImageSample>> {
        let s = self.config.substrate_size;
        if substrate.pixels.shape() != [3, s, s] {
            return Err(Error::shape(format!(
                "substrate has shape {:?}, model expects [3, {s}, {s}]",
                substrate.pixels.shape()
            )));
        }
        if t.len() != self.config.n {
            return Err(Error::shape(format!(
                "target vector has {} entries, model has {} classes",
                t.len(),
                self.config.n
            )));
        }
        if t.popcount() > MAX_GENERATION_MIX {
            return Err(Error::shape(format!(
                "at most {MAX_GENERATION_MIX} classes can be mixed, {} requested",
                t.popcount()
            )));
        }
        let side = self.generator.spec.tile_side();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let tile = stack_tiles(&[sample_class_tile::<f32, _>(t, side, rng)?])?;
            let x = stack_images(&[substrate])?;
            let y = self.generator.generate(&x, &tile)?;
            out.extend(unstack_images(&y)?);
        }
        Ok(out)
    }

    /// Victim probabilities at the target indices for each image, judged
    /// on the image resized to the classifier input.
    pub fn target_probabilities(&self, images: &[ImageSample]) -> Result<Vec<Vec<f64>>> {
        let c = self.config.classifier_input;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let batch = stack_images(&chunk.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let vars = self.victim.params.bind(&mut tape, false);
            let x = tape.leaf_owned(batch);
            let r = tape.resize_bilinear(x, c, c)?;
            let p = target_probs(&mut tape, &self.victim, &vars, r, &self.config.target_indices)?;
            let n = self.config.n;
            out.extend(tape.value(p).chunks(n).map(|row| row.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }
}
