//! Experiment configuration in a flat `key = value` text format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, WHITE_THRESHOLD};
use crate::models::{ClassifierSpec, DiscriminatorSpec, GeneratorSpec};
use crate::tensor::AdamHyper;

/// What the discriminator treats as the real half of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealPair {
    /// `(x, y)` with `y` an independently drawn augmented substrate.
    Unpaired,
    /// `(x, x)`.
    Substrate,
}

impl RealPair {
    fn as_str(self) -> &'static str {
        match self {
            RealPair::Unpaired => "unpaired",
            RealPair::Substrate => "substrate",
        }
    }
}

impl FromStr for RealPair {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unpaired" => Ok(RealPair::Unpaired),
            "substrate" => Ok(RealPair::Substrate),
            _ => Err(format!("expected `unpaired` or `substrate`, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub substrate_size: usize,
    pub classifier_input: usize,
    pub n: usize,
    pub n_total: usize,
    pub target_indices: Vec<usize>,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub disc_depth: usize,
    /// Initial weight-norm gain of every G and D layer; `None` keeps
    /// `g = ‖v‖`.
    pub gain_init: Option<f64>,
    pub weights: LossWeights,
    pub white_threshold: f64,
    /// `None` means `1 / (n + 1)`.
    pub p_null: Option<f64>,
    pub max_mixed: usize,
    pub crop_count: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamHyper,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub real_pair: RealPair,
    pub substrate_count: usize,
    pub augmentation: AugmentationPolicy,
    pub classifier_base: usize,
    pub classifier_hidden: usize,
    pub classifier_steps: usize,
    pub classifier_batch: usize,
    pub classifier_adam: AdamHyper,
    pub shapes_per_class: usize,
    pub test_per_class: usize,
    /// Set in checkpoint snapshots that carry no optimizer state.
    pub inference_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            substrate_size: 64,
            classifier_input: 32,
            n: 5,
            n_total: 8,
            target_indices: vec![1, 2, 5, 6, 7],
            base_channels: 16,
            channel_cap: 128,
            disc_depth: 4,
            gain_init: Some(1.0),
            weights: LossWeights::default(),
            white_threshold: WHITE_THRESHOLD,
            p_null: Some(0.35),
            max_mixed: 1,
            crop_count: 3,
            batch_size: 2,
            steps: 4000,
            adam: AdamHyper::default(),
            checkpoint_interval: 500,
            log_interval: 1,
            real_pair: RealPair::Unpaired,
            substrate_count: 256,
            augmentation: AugmentationPolicy::default(),
            classifier_base: 8,
            classifier_hidden: 64,
            classifier_steps: 1500,
            classifier_batch: 16,
            classifier_adam: AdamHyper {
                alpha: 2e-3,
                beta1: 0.9,
                ..AdamHyper::default()
            },
            shapes_per_class: 200,
            test_per_class: 80,
            inference_only: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn p_null(&self) -> f64 {
        self.p_null.unwrap_or(1.0 / (self.n as f64 + 1.0))
    }

    /// Parses `key = value` lines. `#` starts a comment. Unknown or repeated
    /// keys are errors; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key} given twice", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form without validating the whole config.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let aug = &mut self.augmentation;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "substrate_size" => self.substrate_size = parse(key, v)?,
            "classifier_input" => self.classifier_input = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "n_total" => self.n_total = parse(key, v)?,
            "target_indices" => self.target_indices = parse_list(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "channel_cap" => self.channel_cap = parse(key, v)?,
            "disc_depth" => self.disc_depth = parse(key, v)?,
            "gain_init" => self.gain_init = if v == "norm" { None } else { Some(parse(key, v)?) },
            "w_cgan" => self.weights.w_cgan = parse(key, v)?,
            "w_mask" => self.weights.w_mask = parse(key, v)?,
            "w_vgg" => self.weights.w_vgg = parse(key, v)?,
            "w_sub" => self.weights.w_sub = parse(key, v)?,
            "white_threshold" => self.white_threshold = parse(key, v)?,
            "p_null" => self.p_null = if v == "auto" { None } else { Some(parse(key, v)?) },
            "max_mixed" => self.max_mixed = parse(key, v)?,
            "crop_count" => self.crop_count = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "alpha" => self.adam.alpha = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "epsilon" => self.adam.epsilon = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "log_interval" => self.log_interval = parse(key, v)?,
            "real_pair" => self.real_pair = parse(key, v)?,
            "substrate_count" => self.substrate_count = parse(key, v)?,
            "augment_swap" => aug.enable_swap = parse(key, v)?,
            "augment_shift" => aug.enable_shift = parse(key, v)?,
            "augment_hflip" => aug.enable_hflip = parse(key, v)?,
            "p_swap" => aug.p_swap = parse(key, v)?,
            "p_shift" => aug.p_shift = parse(key, v)?,
            "p_hflip" => aug.p_hflip = parse(key, v)?,
            "classifier_base" => self.classifier_base = parse(key, v)?,
            "classifier_hidden" => self.classifier_hidden = parse(key, v)?,
            "classifier_steps" => self.classifier_steps = parse(key, v)?,
            "classifier_batch" => self.classifier_batch = parse(key, v)?,
            "classifier_alpha" => self.classifier_adam.alpha = parse(key, v)?,
            "classifier_beta1" => self.classifier_adam.beta1 = parse(key, v)?,
            "shapes_per_class" => self.shapes_per_class = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "inference_only" => self.inference_only = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, one per line, parseable by
    /// [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let p_null = self.p_null.map_or("auto".to_string(), |p| p.to_string());
        let aug = &self.augmentation;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("substrate_size", self.substrate_size.to_string()),
            ("classifier_input", self.classifier_input.to_string()),
            ("n", self.n.to_string()),
            ("n_total", self.n_total.to_string()),
            ("target_indices", join(&self.target_indices)),
            ("base_channels", self.base_channels.to_string()),
            ("channel_cap", self.channel_cap.to_string()),
            ("disc_depth", self.disc_depth.to_string()),
            ("gain_init", self.gain_init.map_or("norm".to_string(), |g| g.to_string())),
            ("w_cgan", self.weights.w_cgan.to_string()),
            ("w_mask", self.weights.w_mask.to_string()),
            ("w_vgg", self.weights.w_vgg.to_string()),
            ("w_sub", self.weights.w_sub.to_string()),
            ("white_threshold", self.white_threshold.to_string()),
            ("p_null", p_null),
            ("max_mixed", self.max_mixed.to_string()),
            ("crop_count", self.crop_count.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("alpha", self.adam.alpha.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("epsilon", self.adam.epsilon.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("real_pair", self.real_pair.as_str().to_string()),
            ("substrate_count", self.substrate_count.to_string()),
            ("augment_swap", aug.enable_swap.to_string()),
            ("augment_shift", aug.enable_shift.to_string()),
            ("augment_hflip", aug.enable_hflip.to_string()),
            ("p_swap", aug.p_swap.to_string()),
            ("p_shift", aug.p_shift.to_string()),
            ("p_hflip", aug.p_hflip.to_string()),
            ("classifier_base", self.classifier_base.to_string()),
            ("classifier_hidden", self.classifier_hidden.to_string()),
            ("classifier_steps", self.classifier_steps.to_string()),
            ("classifier_batch", self.classifier_batch.to_string()),
            ("classifier_alpha", self.classifier_adam.alpha.to_string()),
            ("classifier_beta1", self.classifier_adam.beta1.to_string()),
            ("shapes_per_class", self.shapes_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("inference_only", self.inference_only.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.substrate_size == 0 || self.substrate_size % 64 != 0 {
            return fail(format!("substrate_size {} is not a positive multiple of 64", self.substrate_size));
        }
        if self.classifier_input == 0 || self.classifier_input % 8 != 0 {
            return fail(format!("classifier_input {} is not a positive multiple of 8", self.classifier_input));
        }
        if self.classifier_input > self.substrate_size {
            return fail("classifier_input exceeds substrate_size".into());
        }
        if self.n_total < 2 {
            return fail("n_total must be at least 2".into());
        }
        if self.n == 0 || self.n > self.n_total {
            return fail(format!("n = {} must lie in 1..={}", self.n, self.n_total));
        }
        if self.target_indices.len() != self.n {
            return fail(format!("target_indices lists {} classes, n = {}", self.target_indices.len(), self.n));
        }
        let distinct: HashSet<_> = self.target_indices.iter().collect();
        if distinct.len() != self.n {
            return fail("target_indices must be distinct".into());
        }
        if let Some(&bad) = self.target_indices.iter().find(|&&i| i >= self.n_total) {
            return fail(format!("target index {bad} ≥ n_total {}", self.n_total));
        }
        for (k, v) in [
            ("base_channels", self.base_channels),
            ("channel_cap", self.channel_cap),
            ("batch_size", self.batch_size),
            ("crop_count", self.crop_count),
            ("checkpoint_interval", self.checkpoint_interval),
            ("log_interval", self.log_interval),
            ("classifier_base", self.classifier_base),
            ("classifier_hidden", self.classifier_hidden),
            ("classifier_batch", self.classifier_batch),
        ] {
            if v == 0 {
                return fail(format!("{k} must be at least 1"));
            }
        }
        let max_depth = self.substrate_size.trailing_zeros() as usize;
        if self.disc_depth == 0 || self.disc_depth > max_depth {
            return fail(format!("disc_depth must lie in 1..={max_depth}"));
        }
        let side = self.substrate_size - self.classifier_input + 1;
        if side * side < self.crop_count {
            return fail(format!(
                "only {} distinct crops exist, crop_count = {}",
                side * side,
                self.crop_count
            ));
        }
        if !(0.0..1.0).contains(&self.p_null()) {
            return fail(format!("p_null {} outside [0, 1)", self.p_null()));
        }
        if self.max_mixed == 0 || self.max_mixed > self.n {
            return fail(format!("max_mixed must lie in 1..={}", self.n));
        }
        if !(-1.0..=1.0).contains(&self.white_threshold) {
            return fail("white_threshold must lie in [-1, 1]".into());
        }
        if let Some(g) = self.gain_init {
            if !(g > 0.0 && g.is_finite()) {
                return fail(format!("gain_init {g} must be positive"));
            }
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augmentation.validate()?;
        for (what, h) in [("", &self.adam), ("classifier_", &self.classifier_adam)] {
            if !(h.alpha > 0.0 && h.epsilon > 0.0) {
                return fail(format!("{what}alpha and epsilon must be positive"));
            }
            for b in [h.beta1, h.beta2] {
                if !(b > 0.0 && b < 1.0) {
                    return fail(format!("{what}beta {b} outside (0, 1)"));
                }
            }
        }
        Ok(())
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        GeneratorSpec::new(self.substrate_size, self.n, self.base_channels, self.channel_cap)
    }

    pub fn discriminator_spec(&self) -> Result<DiscriminatorSpec> {
        DiscriminatorSpec::new(self.substrate_size, self.base_channels, self.channel_cap, self.disc_depth)
    }

    pub fn classifier_spec(&self) -> Result<ClassifierSpec> {
        ClassifierSpec::new(self.classifier_input, self.n_total, self.classifier_base, self.classifier_hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = TrainConfig::default();
        d.validate().unwrap();
        let text = d.to_text();
        assert_eq!(TrainConfig::parse(&text).unwrap(), d);
        assert_eq!(TrainConfig::parse("").unwrap(), d);
        assert_eq!(d.p_null(), 0.35);
        let auto = TrainConfig::parse("p_null = auto\ngain_init = norm").unwrap();
        assert!((auto.p_null() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(auto.gain_init, None);
    }

    #[test]
    fn comments_and_overrides() {
        let c = TrainConfig::parse("# desk run\nsteps = 10 # short\np_null=0.25\ntarget_indices = 3,1,0,7,5\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.p_null(), 0.25);
        assert_eq!(c.target_indices, vec![3, 1, 0, 7, 5]);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "bogus = 1",
            "steps = many",
            "steps = 1\nsteps = 2",
            "substrate_size = 96",
            "classifier_input = 128",
            "target_indices = 0,0,1,2,3",
            "target_indices = 0,1,2,3,8",
            "batch_size = 0",
            "p_null = 1.0",
            "max_mixed = 6",
            "w_vgg = -1",
            "p_hflip = 2",
            "beta1 = 1",
            "no equals sign",
        ] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
