use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2g_core::models::Classifier;
use c2g_core::training::{synth_substrate_pool, GanTrainer};
use c2g_core::{ModelCheckpoint, Tape, Tensor, TrainConfig};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), true).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 16, 32, 32], &mut rng);
    let w = random(&[32, 16, 4, 4], &mut rng);
    let b = random(&[32], &mut rng);
    c.bench_function("conv2d 16->32 @32 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(&x), t.leaf(&w), t.leaf(&b));
            let y = t.conv2d(xv, wv, bv, 2, 1).unwrap();
            let l = t.sum(y);
            t.backward(l).unwrap();
        })
    });
    let wt = random(&[16, 32, 4, 4], &mut rng);
    c.bench_function("conv_transpose2d 16->32 @32 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(&x), t.leaf(&wt), t.leaf(&b));
            let y = t.conv_transpose2d(xv, wv, bv, 2, 1).unwrap();
            let l = t.sum(y);
            t.backward(l).unwrap();
        })
    });
}

fn gan_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let victim = Classifier::<f32>::new(cfg.classifier_spec().unwrap(), &mut ChaCha8Rng::seed_from_u64(2));
    let mut cp = ModelCheckpoint::new(&cfg, 0);
    cp.add_params(&victim.params);
    let mut pool_cfg = cfg.clone();
    pool_cfg.substrate_count = 8;
    let subs = synth_substrate_pool(&pool_cfg).unwrap();
    let mut trainer = GanTrainer::new(&cfg, &cp, subs).unwrap();
    c.bench_function("gan step S=64 batch 2", |bench| bench.iter(|| trainer.step().unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, gan_step
}
criterion_main!(benches);
