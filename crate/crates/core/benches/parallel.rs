//! Sequential vs data-parallel execution of the convolution kernels and a
//! full training step. Build with `--no-default-features` to compare against
//! a binary without rayon at all (both modes then run sequentially).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstd_core::nn::{build_table1_network, conv2d_backward, conv2d_forward, ConvGeometry, LayerCompression, NetworkSpec};
use rstd_core::tdmodel::TopologyKind;
use rstd_core::trainer::sgd_nesterov_step;
use rstd_core::{DenseTensor, ExecMode};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn random(shape: &[usize], seed: u64) -> DenseTensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(shape, |_| r.random_range(-1.0..1.0)).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = random(&[32, 32, 32, 32], 1);
    let k = random(&[32, 3, 3, 32], 2);
    let b = random(&[32], 3);
    let geom = ConvGeometry::new(1, 1);
    let dy = random(&[32, 32, 32, 32], 4);
    let mut g = c.benchmark_group("conv3x3_b32_c32_32x32");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("forward", name), |bench| {
            bench.iter(|| conv2d_forward(&x, &k, &b, geom, mode).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward", name), |bench| {
            bench.iter(|| conv2d_backward(&x, &k, &dy, geom, mode).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let x = random(&[32, 3, 32, 32], 5);
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let specs = [
        ("uncompressed", NetworkSpec::uncompressed(32)),
        (
            "rstd_tr_r4",
            NetworkSpec::uniform(32, LayerCompression::decomposition(TopologyKind::TensorRing, vec![4; 4], true)),
        ),
    ];
    let mut g = c.benchmark_group("train_step_desk_b32");
    g.sample_size(10);
    for (spec_name, spec) in &specs {
        for (name, mode) in MODES {
            let mut net = build_table1_network::<f32>(spec, 0).unwrap();
            net.set_exec_mode(mode);
            let names = net.param_names();
            let mut vel: Vec<DenseTensor<f32>> =
                net.named_params().iter().map(|(_, p)| DenseTensor::zeros(p.shape()).unwrap()).collect();
            g.bench_function(BenchmarkId::new(*spec_name, name), |bench| {
                bench.iter(|| {
                    let (_, grads) = net.loss_and_grads(&x, &labels).unwrap();
                    sgd_nesterov_step(&mut net.params_mut(), &grads, &mut vel, &names, 1e-3, 0.9).unwrap();
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
