#![allow(dead_code)]

use stcar::model::{ModelSpec, ParamLayout, Parameters};
use stcar::sampler::ChainDraws;
use stcar::synth::{calibration_design, calibration_priors, simulate_dataset, Design, SimConfig, Truth};
use stcar::{Dataset, ModelVariant, PosteriorDraws, SamplerConfig};

/// A single-chain posterior holding exactly `params`.
pub fn draws_from(spec: ModelSpec, ds: &Dataset, params: &[Parameters]) -> PosteriorDraws {
    let layout = ParamLayout::for_dataset(spec.variant, ds);
    let mut values = Vec::new();
    for p in params {
        values.extend(p.to_flat(&layout).unwrap());
    }
    let n = params.len();
    let chain = ChainDraws {
        chain: 0,
        n_params: layout.dim,
        values,
        log_density: vec![0.0; n],
        accept_stat: vec![1.0; n],
        divergent: vec![false; n],
        tree_depth: vec![1; n],
        n_leapfrog: vec![1; n],
        energy: vec![0.0; n],
        step_size: 1.0,
        inv_metric: vec![1.0; layout.dim],
    };
    PosteriorDraws { spec, names: layout.names(ds), layout, chains: vec![chain], config: SamplerConfig::desk() }
}

/// Generic-design dataset with prior-drawn truth on chains of `groups`.
pub fn small(variant: ModelVariant, groups: &[usize], years: usize, seed: u64) -> (Dataset, Parameters) {
    with_design(variant, groups, years, seed, calibration_design(), Truth::Prior(calibration_priors()))
}

pub fn with_design(
    variant: ModelVariant,
    groups: &[usize],
    years: usize,
    seed: u64,
    design: Design,
    truth: Truth,
) -> (Dataset, Parameters) {
    let sim = SimConfig {
        group_sizes: groups.to_vec(),
        group_labels: (0..groups.len()).map(|g| if g == 0 { "James".into() } else { format!("T{g}") }).collect(),
        n_years: years,
        design,
        ..SimConfig::desk(variant, truth, seed)
    };
    simulate_dataset(&sim).unwrap()
}
