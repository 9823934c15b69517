//! Sequential against parallel execution of the jobs that fan out: chains of
//! one fit, models of one LFO comparison, and SBC replications.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stcar::forecast::{run_lfo, LfoConfig};
use stcar::model::Parameterization;
use stcar::parallel::Execution;
use stcar::synth::{calibration_design, calibration_priors, sbc_run, simulate_dataset, SbcConfig, SimConfig, Truth};
use stcar::{run_inference, Dataset, ModelSpec, ModelVariant, SamplerConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sim(variant: ModelVariant, seed: u64) -> SimConfig {
    SimConfig {
        group_sizes: vec![4, 4, 4],
        group_labels: vec!["James".into(), "T1".into(), "T2".into()],
        n_years: 6,
        design: calibration_design(),
        ..SimConfig::desk(variant, Truth::Prior(calibration_priors()), seed)
    }
}

fn dataset() -> Dataset {
    simulate_dataset(&sim(ModelVariant::M4, 7)).unwrap().0
}

fn spec(variant: ModelVariant, ds: &Dataset) -> ModelSpec {
    ModelSpec::new(variant).with_priors(calibration_priors()).with_parameterization(Parameterization::suggest(ds))
}

fn chains(c: &mut Criterion) {
    let ds = dataset();
    let spec = spec(ModelVariant::M4, &ds);
    let mut group = c.benchmark_group("fit_4_chains");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SamplerConfig::default().with_iters(300, 300).with_chains(4).with_execution(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_inference(&spec, &ds, &cfg).unwrap()));
    }
    group.finish();
}

fn lfo(c: &mut Criterion) {
    let ds = dataset();
    let specs: Vec<ModelSpec> = ModelVariant::ALL.iter().map(|&v| spec(v, &ds)).collect();
    let holdout = ds.year_of(ds.n_years - 1);
    let mut group = c.benchmark_group("lfo_5_models");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = LfoConfig {
            execution: exec,
            ..LfoConfig::new(SamplerConfig::default().with_iters(200, 200).with_chains(2).with_execution(exec))
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_lfo(&specs, &ds, holdout, &cfg).unwrap()));
    }
    group.finish();
}

fn sbc(c: &mut Criterion) {
    let spec = ModelSpec::new(ModelVariant::M1).with_priors(calibration_priors());
    let sim = sim(ModelVariant::M1, 11);
    let mut group = c.benchmark_group("sbc_8_reps");
    group.sample_size(10);
    for (name, exec) in MODES {
        let sampler = SamplerConfig::default().with_iters(150, 150).with_chains(2);
        let cfg = SbcConfig { execution: exec, n_ranked: 63, ..SbcConfig::new(8, sampler) };
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| sbc_run(&spec, &sim, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, chains, lfo, sbc);
criterion_main!(benches);
