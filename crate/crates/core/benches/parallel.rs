//! Sequential versus rayon paths of the data-parallel kernels. Both paths
//! produce identical bits, so only time differs.

use chanfuse::data::{generate, MotionClass, SynthMotionSpec};
use chanfuse::layers::{conv2d_backward, conv2d_forward, ConvGeometry};
use chanfuse::model::{BlockSpec, PolicySource, ToyNet, ToyNetConfig};
use chanfuse::train::evaluate;
use chanfuse::par;
use chanfuse::tensor::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PATHS: [(&str, bool); 2] = [("sequential", true), ("parallel", false)];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // One batch of 8-frame clips through a 16-channel 3×3 layer.
    let x = random(&[256, 16, 16, 16], &mut rng);
    let w = random(&[16, 3, 3, 16], &mut rng);
    let b = random(&[16], &mut rng);
    let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
    let geo = ConvGeometry::new(x.shape(), w.shape(), 1, 1).unwrap();
    let mut group = c.benchmark_group("conv2d");
    group.sample_size(20);
    for (name, sequential) in PATHS {
        par::set_sequential(sequential);
        group.bench_function(BenchmarkId::new("forward", name), |bench| {
            bench.iter(|| conv2d_forward(&x, &w, &b, 1, 1).unwrap())
        });
        group.bench_function(BenchmarkId::new("backward", name), |bench| {
            bench.iter(|| conv2d_backward(&geo, x.data(), w.data(), y.data(), [true; 3]))
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn data(c: &mut Criterion) {
    let spec = SynthMotionSpec {
        n_samples: 256,
        classes: vec![MotionClass::Left, MotionClass::Right, MotionClass::RotateCw, MotionClass::Grow],
        ..Default::default()
    };
    let mut group = c.benchmark_group("synth_motion");
    group.sample_size(10);
    for (name, sequential) in PATHS {
        par::set_sequential(sequential);
        group.bench_function(BenchmarkId::new("generate_256", name), |bench| {
            bench.iter(|| generate(&spec).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn eval_pass(c: &mut Criterion) {
    let mut config = ToyNetConfig {
        stem_channels: 8,
        stem_stride: 2,
        blocks: vec![
            BlockSpec::new(8, 8, 1),
            BlockSpec::new(8, 16, 2),
            BlockSpec::new(16, 16, 1),
            BlockSpec::new(16, 32, 2),
        ],
        ..ToyNetConfig::default()
    };
    config.set_all_gated(true);
    let net = ToyNet::new(config).unwrap();
    let spec = SynthMotionSpec {
        n_samples: 32,
        ..Default::default()
    };
    let ds = generate(&spec).unwrap();
    let mut group = c.benchmark_group("gated_forward");
    group.sample_size(10);
    for (name, sequential) in PATHS {
        par::set_sequential(sequential);
        group.bench_function(BenchmarkId::new("eval_32_clips", name), |bench| {
            bench.iter(|| evaluate(&net, &ds, &PolicySource::Learned, 32, 0, false).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, data, eval_pass);
criterion_main!(benches);
