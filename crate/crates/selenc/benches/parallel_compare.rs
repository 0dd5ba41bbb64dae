//! Parallel vs sequential execution on the two hot paths: discrete
//! sensitivity scoring (per-input-coordinate gradient pairs) and inversion
//! restarts. Both must agree bitwise; this measures what the parallel
//! feature buys on top of that.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use selenc::attack::{invert_with_exec, AttackConfig, Matching};
use selenc::data::synth_images;
use selenc::encryption::{attacker_view, top_s_mask, SubstitutionMode};
use selenc::model::{Model, ModelSpec, ParamVector};
use selenc::parallel::Execution;
use selenc::significance::{grad_magnitude, sensitivity_discrete};

fn setup() -> (Model, ParamVector, Vec<f64>, usize) {
    let (model, params) = Model::build(ModelSpec::lenet_small([1, 8, 8], 4), 7).unwrap();
    let img = synth_images(1, 11, 4, [1, 8, 8]).pop().unwrap();
    let label = img.label;
    (model, params, img.pixels, label)
}

const MODES: [(&str, Execution); 2] = [
    ("parallel", Execution::Auto),
    ("sequential", Execution::Sequential),
];

fn bench_sensitivity_discrete(c: &mut Criterion) {
    let (model, params, x, label) = setup();
    let mut g = c.benchmark_group("sensitivity_discrete");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                sensitivity_discrete(&model, &params, &x, label, 1e-3, black_box(exec)).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_invert_restarts(c: &mut Criterion) {
    let (model, params, x, label) = setup();
    let (_, g0) = model.loss_and_grad_label(&params, &x, label).unwrap();
    let scores = grad_magnitude(&g0);
    let mask = top_s_mask(&scores, 0.3).unwrap();
    let view = attacker_view(&g0, &mask, SubstitutionMode::Exclude, 0).unwrap();
    let cfg = AttackConfig {
        matching: Matching::Cosine,
        alpha_tv: 1e-4,
        iterations: 60,
        restarts: 4,
        step_size: 0.1,
        signed: true,
        seed: 0,
    };
    let mut g = c.benchmark_group("invert_restarts");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                invert_with_exec(&model, &params, label, &view, &cfg, black_box(exec)).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sensitivity_discrete, bench_invert_restarts);
criterion_main!(benches);
