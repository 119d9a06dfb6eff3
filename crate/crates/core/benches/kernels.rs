use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tagnet::config::{BackboneConfig, InputSize};
use tagnet::exec::{set_policy, Policy};
use tagnet::graph::{Graph, Mode};
use tagnet::tensor::ops::{bilinear_resize, conv2d, ConvGeometry};
use tagnet::{synth, MultiTaskNet, Tensor};

const POLICIES: [(&str, Policy); 2] = [("sequential", Policy::Sequential), ("parallel", Policy::Parallel)];

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[2, 64, 64, 128], &mut rng);
    let w = Tensor::randn(&[64, 64, 3, 3], &mut rng);
    let small = Tensor::randn(&[2, 64, 16, 32], &mut rng);

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, p) in POLICIES {
        set_policy(p);
        group.bench_function(BenchmarkId::new("conv3x3_64", name), |b| {
            b.iter(|| conv2d(&x, &w, ConvGeometry::same(3, 1, 1)).unwrap())
        });
        group.bench_function(BenchmarkId::new("resize_x8", name), |b| b.iter(|| bilinear_resize(&small, 8).unwrap()));
    }
    group.finish();
    set_policy(Policy::Parallel);
}

fn train_step(c: &mut Criterion) {
    let size = InputSize::new(128, 256);
    let cfg = BackboneConfig::slim(size);
    let (net, store) = MultiTaskNet::init(&cfg, 0).unwrap();
    let batch = synth::generate(0, size, 2, &cfg).unwrap();

    let mut group = c.benchmark_group("slim_train_step");
    group.sample_size(10);
    for (name, p) in POLICIES {
        set_policy(p);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::new(&store, Mode::Train);
                let x = g.input(batch.image.clone());
                let out = net.forward(&mut g, x).unwrap();
                let l = net.loss(&mut g, &out, &batch).unwrap();
                g.backward(l.total).unwrap()
            })
        });
    }
    group.finish();
    set_policy(Policy::Parallel);
}

criterion_group!(benches, kernels, train_step);
criterion_main!(benches);
