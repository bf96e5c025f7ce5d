use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use c2g_core::data::{load_dataset, load_image, manifest_path, save_image, synth_labeled_shapes, synth_substrates, write_dataset};
use c2g_core::oracle::{run_suite, ORACLE_EPSILON};
use c2g_core::tensor::OpKind;
use c2g_core::training::{load_classifier, train_classifier, train_gan, GanModel, GanOutputs, MAX_GENERATION_MIX};
use c2g_core::{Error, LossReport, ModelCheckpoint, TargetVector, TrainConfig};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "c2g", version, about = "Restore a classifier's training distribution with a conditional GAN")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Substrates,
    Shapes,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural dataset (PNGs plus manifest.tsv).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "shapes")]
        kind: Kind,
        /// Images in total for substrates, per class for shapes.
        #[arg(long, default_value_t = 80)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the victim classifier on a labelled dataset.
    TrainClassifier {
        /// Config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training set (directory or manifest).
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; accuracy is only reported on the training set when omitted.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides classifier_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Extra key=value config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train the generator and discriminator against a frozen victim.
    TrainGan {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Victim classifier checkpoint.
        #[arg(long)]
        victim: PathBuf,
        /// Substrate set (directory or manifest).
        #[arg(long)]
        substrates: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// CSV loss log [default: the checkpoint path with a .csv extension]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate images for a class combination from a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Substrate PNG.
        #[arg(long)]
        substrate: PathBuf,
        /// Comma-separated target positions, at most 3; empty for the null category.
        #[arg(long, default_value = "")]
        classes: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every backward rule against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Scale the named op's backward by 1.5 (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// A failure carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let diverged = err.chain().any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Divergence { .. })));
        Failure {
            code: if diverged { EXIT_DIVERGED } else { EXIT_USAGE },
            err,
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::SynthData {
            out,
            kind,
            count,
            size,
            seed,
        } => synth_data(&out, kind, count, size, seed),
        Cmd::TrainClassifier {
            config,
            data,
            test_data,
            out,
            steps,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = steps {
                cfg.classifier_steps = s;
            }
            cfg.validate()?;
            let train = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let test = match &test_data {
                Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
                None => Vec::new(),
            };
            check_parent(&out)?;
            let outcome = train_classifier(&cfg, &train, &test)?;
            outcome.checkpoint.save(&out)?;
            println!("train accuracy {:.4}", outcome.train_accuracy);
            if test_data.is_some() {
                println!("test accuracy {:.4}", outcome.test_accuracy);
            }
            if let Some(l) = outcome.final_loss {
                println!("final loss {l:.6}");
            }
            Ok(())
        }
        Cmd::TrainGan {
            config,
            victim,
            substrates,
            out,
            log,
            steps,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let victim_cp = ModelCheckpoint::load(&victim).with_context(|| format!("loading victim {}", victim.display()))?;
            load_classifier(&victim_cp).context("victim checkpoint")?;
            let subs = load_dataset(&substrates).with_context(|| format!("loading {}", substrates.display()))?;
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            check_parent(&out)?;
            check_parent(&log)?;
            let outputs = GanOutputs {
                checkpoint: Some(out.clone()),
                log: Some(log.clone()),
            };
            let outcome = train_gan(&cfg, &victim_cp, subs, &outputs)?;
            if let (Some((i, first)), Some((j, last))) = (outcome.log.first(), outcome.log.last()) {
                println!("{}", LossReport::CSV_HEADER);
                println!("{}", first.csv_line(*i));
                println!("{}", last.csv_line(*j));
            }
            println!("checkpoint {}", out.display());
            println!("log {}", log.display());
            Ok(())
        }
        Cmd::Generate {
            checkpoint,
            substrate,
            classes,
            count,
            seed,
            out,
        } => generate(&checkpoint, &substrate, &classes, count, seed, &out),
        Cmd::Gradcheck { seed, inject_fault } => gradcheck(seed, inject_fault.as_deref()),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn check_parent(path: &Path) -> anyhow::Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    Ok(())
}

fn synth_data(out: &Path, kind: Kind, count: usize, size: usize, seed: u64) -> Result<(), Failure> {
    if out.exists() && !out.is_dir() {
        return Err(anyhow!("{} exists and is not a directory", out.display()).into());
    }
    if manifest_path(out).exists() {
        return Err(anyhow!("{} already holds a dataset", out.display()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        Kind::Substrates => synth_substrates(count, size, &mut rng)?,
        Kind::Shapes => synth_labeled_shapes(count, 8, size, &mut rng)?,
    };
    write_dataset(out, &samples).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}

fn parse_classes(spec: &str, n: usize) -> anyhow::Result<TargetVector> {
    let mut idx = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let i: usize = part.parse().with_context(|| format!("class {part:?} is not an index"))?;
        if i >= n {
            bail!("class {i} out of range, the model has {n} target classes");
        }
        if idx.contains(&i) {
            bail!("class {i} listed twice");
        }
        idx.push(i);
    }
    if idx.len() > MAX_GENERATION_MIX {
        bail!("at most {MAX_GENERATION_MIX} classes can be mixed, {} given", idx.len());
    }
    Ok(TargetVector::from_indices(n, &idx)?)
}

fn generate(checkpoint: &Path, substrate: &Path, classes: &str, count: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let cp = ModelCheckpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = GanModel::from_checkpoint(&cp).context("checkpoint does not hold a generator")?;
    let t = parse_classes(classes, model.config.n)?;
    let sub = load_image(substrate)?;
    let s = model.config.substrate_size;
    if sub.pixels.shape() != [3, s, s] {
        return Err(anyhow!("substrate is {}x{}, model expects {s}x{s}", sub.width(), sub.height()).into());
    }
    if out.exists() && !out.is_dir() {
        return Err(anyhow!("{} exists and is not a directory", out.display()).into());
    }
    let images = model.generate(&sub, &t, count, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let probs = model.target_probabilities(&images)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let header: Vec<String> = model.config.target_indices.iter().map(|c| format!("cls{c}")).collect();
    println!("sample\t{}", header.join("\t"));
    for (i, (img, p)) in images.iter().zip(&probs).enumerate() {
        let path = out.join(format!("sample_{i:03}.png"));
        save_image(img, &path)?;
        let cols: Vec<String> = p.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}\t{}", path.display(), cols.join("\t"));
    }
    Ok(())
}

fn gradcheck(seed: u64, fault: Option<&str>) -> Result<(), Failure> {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| anyhow!("unknown op {name:?}"))?),
        None => None,
    };
    let outcomes = run_suite(seed, fault)?;
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    println!("{:width$}  max rel error  (eps {ORACLE_EPSILON:e})", "case");
    let mut failed = Vec::new();
    for o in &outcomes {
        let mark = if o.passed() { "ok" } else { "FAIL" };
        println!("{:width$}  {:.3e}  {mark}", o.name, o.max_rel_error);
        if !o.passed() {
            failed.push(o.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} cases passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            err: anyhow!("{} case(s) failed: {}", failed.len(), failed.join(", ")),
        })
    }
}
