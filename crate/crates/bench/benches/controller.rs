use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tenet_bench::{probe_state, random_policy, WIDTHS};
use tenet_core::controller::{mlp_controller, Precision};
use tenet_core::{instantiate, HashEmbedder, ModelConfig, TenetModel};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("policy_forward");
    let state = probe_state(4);
    for width in WIDTHS {
        for precision in [Precision::F64, Precision::F32] {
            let mut ctl = mlp_controller(random_policy(4, width, 2, 7), precision);
            let mut out = vec![0.0; 2];
            g.bench_with_input(BenchmarkId::new(precision.to_string(), width), &width, |b, _| {
                b.iter(|| {
                    ctl.act(black_box(&state), &mut out);
                    black_box(&out);
                })
            });
        }
    }
    g.finish();
}

fn instantiation(c: &mut Criterion) {
    let config = ModelConfig::default();
    let encoder = HashEmbedder::new(config.d_z).unwrap();
    let model = TenetModel::init(config, 0).unwrap();
    c.bench_function("instantiate_from_text", |b| {
        b.iter(|| instantiate(&model, black_box("reach the goal at the right wall"), &encoder).unwrap())
    });
}

criterion_group!(benches, forward, instantiation);
criterion_main!(benches);
