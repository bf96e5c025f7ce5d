//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2g_core::data::{colour_shift, colour_swap, distinct_colours, hflip, synth_substrates, ImageSample};
use c2g_core::error::CheckpointError;
use c2g_core::losses::{
    linear_log_penalty, loss_cgan_d, loss_substrate, loss_total, negative_diff, positive_diff, GeneratorTerms, VggTerms,
};
use c2g_core::models::sample_class_tile;
use c2g_core::oracle::run_suite;
use c2g_core::training::{
    synth_shape_splits, synth_substrate_pool, train_classifier, train_gan, GanModel, GanOutputs,
};
use c2g_core::{LossReport, LossWeights, ModelCheckpoint, Tape, TargetVector, Tensor, TrainConfig};

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        id,
        pass,
        detail: detail.into(),
    }
}

fn scalar(tape: &Tape<f64>, v: c2g_core::Var) -> f64 {
    tape.scalar(v)
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let out = run_suite(3, None).expect("suite runs");
    let elapsed = t0.elapsed();
    let worst = out.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = out.iter().filter(|o| !o.passed()).map(|o| o.name.clone()).collect();
    let pass = failed.is_empty() && out.iter().all(|o| o.tolerance <= 1e-3) && elapsed < Duration::from_secs(120);
    verdict(
        1,
        pass,
        format!("{} cases, worst rel error {worst:.2e}, {elapsed:.1?}, failed {failed:?}", out.len()),
    )
}

fn criterion_2() -> Verdict {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[1, 1], vec![0.5]).unwrap();
    let llp = linear_log_penalty(&mut t, x).unwrap();
    let llp = t.value(llp)[0];

    let sub = t.constant(&[1], vec![1.0]).unwrap();
    let gen = t.constant(&[1], vec![0.0]).unwrap();
    let ls = loss_substrate(&mut t, sub, gen).unwrap();
    let ls = scalar(&t, ls);

    let half = t.constant(&[1, 1, 1, 1], vec![0.5]).unwrap();
    let ld = loss_cgan_d(&mut t, half, half).unwrap();
    let ld = scalar(&t, ld);

    let one = t.constant(&[1], vec![1.0]).unwrap();
    let halfs = t.constant(&[1], vec![0.5]).unwrap();
    let terms = GeneratorTerms {
        cgan_g: one,
        mask: one,
        vgg: VggTerms {
            l_p: halfs,
            l_n: halfs,
            l_vgg: one,
        },
        sub: one,
    };
    let (total, report) = loss_total(&mut t, &terms, 0.0, &LossWeights::default()).unwrap();
    let total = scalar(&t, total);

    let ok = (llp - 1.1931).abs() <= 1e-4
        && (ls - 1.2877).abs() <= 1e-4
        && (ld - 2.0 * std::f64::consts::LN_2).abs() <= 1e-5
        && (total - 213.0).abs() <= 1e-5
        && (report.total - 213.0).abs() <= 1e-5;
    verdict(
        2,
        ok,
        format!("llp(0.5)={llp:.5} l_s(1,0)={ls:.5} l_cgan_d(.5,.5)={ld:.6} total(1s)={total}"),
    )
}

fn criterion_3(log: &[(usize, LossReport)]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=8);
        let bits: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let t = TargetVector::new(bits.clone());
        let mut tape = Tape::<f64>::new();
        let vv = tape.constant(&[1, n], v.clone()).unwrap();
        let p = positive_diff(&mut tape, vv, &t).unwrap();
        let q = negative_diff(&mut tape, vv, &t).unwrap();
        for i in 0..n {
            let ti = if bits[i] { 1.0 } else { 0.0 };
            let err = (tape.value(p)[i] + tape.value(q)[i] - (ti - v[i]).abs()).abs();
            worst = worst.max(err);
        }
    }
    let vgg_ok = log.iter().all(|(_, r)| r.l_vgg == r.l_p + r.l_n);
    verdict(
        3,
        worst <= 1e-12 && vgg_ok && !log.is_empty(),
        format!("max |P+N-|t-v|| = {worst:.1e} over 10000 trials; L_VGG = L_p + L_n on {} logged steps: {vgg_ok}", log.len()),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let t = TargetVector::from_indices(2, &[0]).unwrap();
    let tile = sample_class_tile::<f64, _>(&t, 100, &mut rng).unwrap().tile;
    let (on, off) = tile.data().split_at(10_000);
    let mean = on.iter().sum::<f64>() / on.len() as f64;
    let var = on.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / on.len() as f64;
    let zero = off.iter().all(|&x| x == 0.0);
    verdict(
        4,
        mean.abs() <= 0.05 && (var - 3.0).abs() <= 0.15 && zero,
        format!("mean {mean:.4}, variance {var:.4}, inactive plane zero: {zero}"),
    )
}

fn criterion_5(cfg: &TrainConfig) -> (Verdict, ModelCheckpoint) {
    let t0 = Instant::now();
    let (train, test) = synth_shape_splits(cfg).unwrap();
    let out = train_classifier(cfg, &train, &test).unwrap();
    let elapsed = t0.elapsed();
    let v = verdict(
        5,
        out.test_accuracy >= 0.95 && cfg.classifier_steps <= 2000 && elapsed < Duration::from_secs(300),
        format!(
            "held-out accuracy {:.4} on {} images after {} steps, {elapsed:.1?}",
            out.test_accuracy,
            test.len(),
            cfg.classifier_steps
        ),
    );
    (v, out.checkpoint)
}

fn mean_cols(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows[0].len();
    (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

fn held_out_substrates(cfg: &TrainConfig) -> Vec<ImageSample> {
    synth_substrates(20, cfg.substrate_size, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xacce97)).unwrap()
}

fn quarter_means(xs: &[f64]) -> (f64, f64) {
    let q = (xs.len() / 4).max(1);
    let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (m(&xs[..q]), m(&xs[xs.len() - q..]))
}

fn criterion_6(cfg: &TrainConfig, model: &GanModel, log: &[(usize, LossReport)], elapsed: Duration) -> Verdict {
    let held = held_out_substrates(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut per_class = Vec::new();
    for c in 0..cfg.n {
        let t = TargetVector::from_indices(cfg.n, &[c]).unwrap();
        let mut imgs = Vec::new();
        for s in &held {
            imgs.extend(model.generate(s, &t, 1, &mut rng).unwrap());
        }
        per_class.push(mean_cols(&model.target_probabilities(&imgs).unwrap())[c]);
    }
    let hits = per_class.iter().filter(|&&p| p >= 0.5).count();
    let l_n: Vec<f64> = log.iter().map(|(_, r)| r.l_n).collect();
    let (first, last) = quarter_means(&l_n);
    let mask = log.last().map(|(_, r)| r.l_mask).unwrap_or(f64::INFINITY);
    let steps_ok = (2000..=5000).contains(&cfg.steps);
    let pass = hits >= 4 && last < first && mask <= 0.1 && steps_ok && elapsed <= Duration::from_secs(3600);
    verdict(
        6,
        pass,
        format!(
            "target probs {per_class:.3?} ({hits}/5 >= 0.5); l_n quarters {first:.4} -> {last:.4}; final mask {mask:.4}; {} steps in {elapsed:.1?}",
            cfg.steps
        ),
    )
}

fn criterion_7(cfg: &TrainConfig, model: &GanModel) -> Verdict {
    let held = held_out_substrates(cfg);
    let t = TargetVector::zeros(cfg.n);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut imgs = Vec::new();
    for s in &held {
        imgs.extend(model.generate(s, &t, 1, &mut rng).unwrap());
    }
    let means = mean_cols(&model.target_probabilities(&imgs).unwrap());
    let repeat = model.generate(&held[0], &t, 4, &mut rng).unwrap();
    let identical = repeat.iter().all(|s| s.pixels.data() == repeat[0].pixels.data());
    verdict(
        7,
        means.iter().all(|&p| p <= 0.25) && identical,
        format!("null-category target probs {means:.3?}; repeated samples identical: {identical}"),
    )
}

fn criterion_8(first: (&[u8], &[u8]), second: (&[u8], &[u8])) -> Verdict {
    let same_cp = first.0 == second.0;
    let same_log = first.1 == second.1;
    verdict(
        8,
        same_cp && same_log,
        format!("checkpoints identical: {same_cp}; CSV logs identical: {same_log}"),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut shift_ok, mut flip_ok, mut swap_ok) = (true, true, true);
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let palette: Vec<[u8; 3]> = (0..rng.random_range(1..6)).map(|_| rng.random()).collect();
        let rgb: Vec<u8> = (0..w * h).flat_map(|_| palette[rng.random_range(0..palette.len())]).collect();
        let img = ImageSample::from_rgb_bytes(w, h, &rgb, None).unwrap();
        shift_ok &= distinct_colours(&colour_shift(&img, &mut rng)) == distinct_colours(&img);
        flip_ok &= hflip(&hflip(&img)).pixels.data() == img.pixels.data();
        let grey: Vec<u8> = rgb.chunks(3).flat_map(|p| [p[0]; 3]).collect();
        let grey = ImageSample::from_rgb_bytes(w, h, &grey, None).unwrap();
        swap_ok &= colour_swap(&grey, &mut rng).pixels.data() == grey.pixels.data();
    }
    verdict(
        9,
        shift_ok && flip_ok && swap_ok,
        format!("1000 images: shift keeps colour count {shift_ok}, flip twice identity {flip_ok}, swap on grey identity {swap_ok}"),
    )
}

fn criterion_10(cp: &ModelCheckpoint, dir: &Path) -> Verdict {
    let p = dir.join("c10.ckpt");
    cp.save(&p).unwrap();
    let original = std::fs::read(&p).unwrap();
    let back = ModelCheckpoint::load(&p).unwrap();
    back.save(&p).unwrap();
    let stable = std::fs::read(&p).unwrap() == original && back == *cp;

    let mut magic = original.clone();
    magic[0] ^= 0xff;
    let mut version = original.clone();
    version[7] = b'9';
    let truncated = &original[..original.len() - 4];
    // Rename the second tensor to the first one's name (same length).
    let mut dup = cp.clone();
    let first = dup.tensors[0].0.clone();
    let second = dup.tensors[1].0.clone();
    let duplicated = if first.len() == second.len() {
        let bytes = dup.to_bytes().unwrap();
        let at = bytes.windows(second.len()).position(|w| w == second.as_bytes()).unwrap();
        let mut b = bytes.clone();
        b[at..at + first.len()].copy_from_slice(first.as_bytes());
        b
    } else {
        dup.tensors[1].0 = "x".repeat(first.len());
        let bytes = dup.to_bytes().unwrap();
        let fake = "x".repeat(first.len());
        let at = bytes.windows(fake.len()).position(|w| w == fake.as_bytes()).unwrap();
        let mut b = bytes.clone();
        b[at..at + first.len()].copy_from_slice(first.as_bytes());
        b
    };
    let errors = [
        ModelCheckpoint::from_bytes(&magic),
        ModelCheckpoint::from_bytes(&version),
        ModelCheckpoint::from_bytes(truncated),
        ModelCheckpoint::from_bytes(&duplicated),
    ];
    let distinct = matches!(errors[0], Err(CheckpointError::BadMagic))
        && matches!(errors[1], Err(CheckpointError::Version(b'9')))
        && matches!(errors[2], Err(CheckpointError::Truncated(_)))
        && matches!(errors[3], Err(CheckpointError::DuplicateName(_)));
    verdict(
        10,
        stable && distinct,
        format!("save/load/save bitwise stable: {stable}; corruptions give distinct errors: {distinct}"),
    )
}

/// One GAN run of the desk configuration; returns checkpoint and CSV bytes.
fn gan_run(cfg: &TrainConfig, victim: &ModelCheckpoint, dir: &Path, tag: &str) -> (Vec<u8>, Vec<u8>, Vec<(usize, LossReport)>, Duration) {
    let outputs = GanOutputs {
        checkpoint: Some(dir.join(format!("{tag}.ckpt"))),
        log: Some(dir.join(format!("{tag}.csv"))),
    };
    let t0 = Instant::now();
    let out = train_gan(cfg, victim, synth_substrate_pool(cfg).unwrap(), &outputs).unwrap();
    let elapsed = t0.elapsed();
    let cp = std::fs::read(outputs.checkpoint.unwrap()).unwrap();
    let csv = std::fs::read(outputs.log.unwrap()).unwrap();
    (cp, csv, out.log, elapsed)
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_4(), criterion_9()];

    let (v5, victim) = criterion_5(&cfg);
    verdicts.push(v5);

    let (cp_a, csv_a, log, elapsed) = gan_run(&cfg, &victim, dir.path(), "a");
    let parsed: Vec<(usize, LossReport)> = String::from_utf8(csv_a.clone())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| LossReport::parse_csv_line(l).unwrap())
        .collect();
    assert_eq!(parsed.len(), log.len());
    let finite = log.iter().all(|(_, r)| r.is_finite());
    let cp = ModelCheckpoint::from_bytes(&cp_a).unwrap();
    let model = GanModel::from_checkpoint(&cp).unwrap();
    verdicts.push(criterion_3(&parsed));
    let mut v6 = criterion_6(&cfg, &model, &log, elapsed);
    v6.pass &= finite;
    verdicts.push(v6);
    verdicts.push(criterion_7(&cfg, &model));

    let (cp_b, csv_b, _, _) = gan_run(&cfg, &victim, dir.path(), "b");
    verdicts.push(criterion_8((&cp_a, &csv_a), (&cp_b, &csv_b)));
    verdicts.push(criterion_10(&cp, dir.path()));

    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!("criterion {:>2}: {} | {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn tile_mixture_components_are_separate() {
    // Sanity on the mixture behind criterion 4: both centres are populated.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = TargetVector::from_indices(1, &[0]).unwrap();
    let tile: Tensor<f64> = sample_class_tile(&t, 50, &mut rng).unwrap().tile;
    let pos = tile.data().iter().filter(|&&x| x > 0.0).count();
    assert!((900..1600).contains(&pos), "{pos}");
}
