use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use epg_core::engine::RunState;
use epg_core::env::certify_environment;
use epg_core::erm::SolverOptions;
use epg_core::{build_environment, Algorithm, EnvironmentConfig, ParameterVector, RunOptions};

fn logit() -> EnvironmentConfig {
    EnvironmentConfig::load("logit-2seg").unwrap()
}

/// Newton solve from zero after 5000 pure-exploration steps.
fn erm_fit(c: &mut Criterion) {
    let env = build_environment(&logit()).unwrap();
    let mut options = RunOptions::from_env(&env, Algorithm::PureExplore);
    options.t_max = 5000;
    options.checkpoints = vec![];
    let mut run = RunState::new(&env, options, 1).unwrap();
    for _ in 0..5000 {
        run.step(false, false).unwrap();
    }
    let state = run.erm().clone();
    let zero = ParameterVector::zeros(env.dim());
    c.bench_function("erm_fit_5000_obs", |b| {
        b.iter(|| {
            state
                .fit_from(&env.loss, black_box(&zero), SolverOptions::default())
                .unwrap()
        })
    });
}

/// Steady-state cost of one loop step, including amortized refits.
fn loop_step(c: &mut Criterion) {
    let env = build_environment(&logit()).unwrap();
    let mut options = RunOptions::from_env(&env, Algorithm::Epg);
    options.t_max = 1_000_000;
    options.checkpoints = vec![];
    c.bench_function("epg_1000_steps", |b| {
        b.iter_batched(
            || {
                let mut s = RunState::new(&env, options.clone(), 3).unwrap();
                for _ in 0..2000 {
                    s.step(false, false).unwrap();
                }
                s
            },
            |mut s| {
                for _ in 0..1000 {
                    s.step(false, false).unwrap();
                }
                s
            },
            BatchSize::LargeInput,
        )
    });
}

fn certify(c: &mut Criterion) {
    let mut group = c.benchmark_group("certify");
    group.sample_size(10);
    for name in ["logit-2seg", "gauss-1seg"] {
        let config = EnvironmentConfig::load(name).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| certify_environment(black_box(&config)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, erm_fit, loop_step, certify);
criterion_main!(benches);
