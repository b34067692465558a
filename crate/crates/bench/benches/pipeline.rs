use criterion::{criterion_group, criterion_main, Criterion};
use robmix::glm::ols_fit;
use robmix::jmmd::fit_joint;
use robmix::moments::{jmmd_moment_model, EvalMode};
use robmix::optimizer::{scenario_to_coded, solve, RobustDesignProblem, ScenarioSpec, BREAD_BOUNDS};
use robmix::terms::presets;
use robmix::NoiseCoding;
use robmix_bench::{corpus, joint_fit, joint_spec};
use std::hint::black_box;

fn bench_ols(c: &mut Criterion) {
    let data = corpus();
    let spec = presets::mean_model_18();
    c.bench_function("ols_fit_18_terms", |b| {
        b.iter(|| ols_fit(black_box(&spec), black_box(&data)).unwrap())
    });
}

fn bench_joint(c: &mut Criterion) {
    let data = corpus();
    let spec = joint_spec();
    c.bench_function("fit_joint_18x16", |b| {
        b.iter(|| fit_joint(black_box(&spec), black_box(&data)).unwrap())
    });
}

fn bench_moment_eval(c: &mut Criterion) {
    let data = corpus();
    let fit = joint_fit(&data);
    let noise = scenario_to_coded(
        &ScenarioSpec {
            mu_raw: [15.0, 41.25],
            sigma2_raw: [6.25, 9.766],
        },
        &NoiseCoding::bread(),
    )
    .unwrap();
    let model = jmmd_moment_model(&fit, &noise, EvalMode::Exact).unwrap();
    let x = [0.306, 0.568, 0.126];
    c.bench_function("moment_model_eval", |b| {
        b.iter(|| {
            (
                model.mean_of(black_box(&x)).unwrap(),
                model.var_of(black_box(&x)).unwrap(),
            )
        })
    });
}

fn bench_solve(c: &mut Criterion) {
    let data = corpus();
    let fit = joint_fit(&data);
    let noise = scenario_to_coded(
        &ScenarioSpec {
            mu_raw: [15.0, 41.25],
            sigma2_raw: [6.25, 9.766],
        },
        &NoiseCoding::bread(),
    )
    .unwrap();
    let model = jmmd_moment_model(&fit, &noise, EvalMode::Paper).unwrap();
    let problem = RobustDesignProblem::new(model, 530.0, BREAD_BOUNDS).unwrap();
    c.bench_function("solve_one_scenario", |b| {
        b.iter(|| solve(black_box(&problem), 1e-3, 16, 7).unwrap())
    });
}

criterion_group!(benches, bench_ols, bench_joint, bench_moment_eval, bench_solve);
criterion_main!(benches);
