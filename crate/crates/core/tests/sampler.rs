mod common;

use stcar::graph::ArealGraph;
use stcar::model::{linear_predictor, Parameterization};
use stcar::synth::calibration_priors;
use stcar::sampler::{effective_sample_size, sample_target, LogDensity};
use stcar::{run_inference, Dataset, ModelSpec, ModelVariant, SamplerConfig};

/// Zero data and a single coefficient with a N(0, 1) prior.
struct StandardNormal;

impl LogDensity for StandardNormal {
    fn dim(&self) -> usize {
        1
    }

    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = -u[0];
        -0.5 * u[0] * u[0]
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn toy_target_moments() {
    let cfg = SamplerConfig::default().with_iters(1000, 10_000).with_seed(3);
    let chain = sample_target(&StandardNormal, &cfg, 0, |_| vec![0.5], |u| Ok(u.to_vec())).unwrap();
    let (m, sd) = moments(&chain.column(0));
    assert_eq!(chain.n_draws(), 10_000);
    assert!(m.abs() < 0.05, "mean {m}");
    assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
}

#[test]
fn toy_target_pooled_over_four_chains() {
    let cfg = SamplerConfig::default().with_iters(500, 2500).with_seed(4);
    let mut pooled = Vec::new();
    for c in 0..4 {
        let chain = sample_target(&StandardNormal, &cfg, c, |_| vec![-1.0], |u| Ok(u.to_vec())).unwrap();
        pooled.extend(chain.column(0));
    }
    let (m, sd) = moments(&pooled);
    assert!(m.abs() < 0.05, "mean {m}");
    assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
}

/// Normalized posterior moments of `f` on a uniform grid.
fn grid_moments(grid: &[f64], log_f: impl Fn(f64) -> f64) -> (f64, f64) {
    let lf: Vec<f64> = grid.iter().map(|&x| log_f(x)).collect();
    let top = lf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lf.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let m = grid.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
    let v = grid.iter().zip(&w).map(|(x, w)| (x - m).powi(2) * w).sum::<f64>() / z;
    (m, v.sqrt())
}

/// One observed cell with a large count under M1. The marginal prior of
/// `ln μ − offset = β₀ + θ₀` is N(0, 100 + σ²) mixed over σ² ~ IG(1, 1);
/// the posterior of `ln μ` then follows by one-dimensional quadrature.
#[test]
fn large_count_cell_matches_quadrature() {
    let y = 400u64;
    let offset = 50f64.ln();
    let graph = ArealGraph::chains(&[2], None).unwrap();
    let ds = Dataset::new(graph, 2000, 1, vec![], vec![Some(y), None], vec![offset, 0.0], vec![]).unwrap();

    let log_prior = |z: f64| {
        // ∫ N(z; 0, 100 + s) IG(s; 1, 1) ds with s = e^v.
        let n = 4000;
        let (lo, hi) = (-12.0, 16.0);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let v: f64 = lo + i as f64 * h;
            let s = v.exp();
            let var = 100.0 + s;
            let normal = (-0.5 * z * z / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            let ig = s.powi(-2) * (-1.0 / s).exp();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * normal * ig * s * h;
        }
        acc.ln()
    };
    let grid: Vec<f64> = (0..4001).map(|i| 5.4 + 1.2 * i as f64 / 4000.0).collect();
    let (qm, qsd) = grid_moments(&grid, |eta| y as f64 * eta - eta.exp() + log_prior(eta - offset));

    let spec = ModelSpec::new(ModelVariant::M1);
    let cfg = SamplerConfig::default().with_iters(1000, 2000).with_seed(8);
    let draws = run_inference(&spec, &ds, &cfg).unwrap();
    let mut per_chain = Vec::new();
    let mut eta = Vec::new();
    let all = draws.parameter_draws().unwrap();
    for c in 0..draws.n_chains() {
        let col: Vec<f64> =
            all[c * 2000..(c + 1) * 2000].iter().map(|p| linear_predictor(p, &ds, 0, 0).unwrap()).collect();
        eta.extend_from_slice(&col);
        per_chain.push(col);
    }
    let refs: Vec<&[f64]> = per_chain.iter().map(|c| c.as_slice()).collect();
    let ess = effective_sample_size(&refs).unwrap();
    let (m, sd) = moments(&eta);
    let se = qsd / ess.sqrt();
    assert!((m - qm).abs() < 4.0 * se, "mean {m} vs quadrature {qm} (se {se}, ess {ess})");
    assert!((sd - qsd).abs() < 0.1 * qsd, "sd {sd} vs quadrature {qsd}");
    assert!((qm - (y as f64).ln()).abs() < 0.01);
}

#[test]
fn one_chain_has_no_rhat() {
    let (ds, _) = common::small(ModelVariant::M1, &[3, 3], 3, 5);
    let cfg = SamplerConfig::default().with_iters(100, 100).with_chains(1).with_seed(2);
    let draws = run_inference(&ModelSpec::new(ModelVariant::M1), &ds, &cfg).unwrap();
    assert_eq!(draws.n_chains(), 1);
    assert!(draws.max_rhat().is_none());
    assert!(draws.rhat(0).is_none());
}

#[test]
fn fixed_seed_reproduces_draws() {
    let (ds, _) = common::small(ModelVariant::M4, &[3, 3], 3, 6);
    let cfg = SamplerConfig::default().with_iters(100, 100).with_chains(2).with_seed(9);
    let spec = ModelSpec::new(ModelVariant::M4);
    let a = run_inference(&spec, &ds, &cfg).unwrap();
    let b = run_inference(&spec, &ds, &cfg).unwrap();
    for (x, y) in a.chains.iter().zip(&b.chains) {
        assert_eq!(x, y);
    }
}

/// Divergences stay rare on data from the fitted model.
#[test]
fn well_specified_fit_has_few_divergences() {
    let (ds, _) = common::small(ModelVariant::M4, &[4, 4, 4], 6, 12);
    let cfg = SamplerConfig::default().with_iters(300, 500).with_seed(1);
    let spec = ModelSpec::new(ModelVariant::M4)
        .with_priors(calibration_priors())
        .with_parameterization(Parameterization::suggest(&ds));
    let draws = run_inference(&spec, &ds, &cfg).unwrap();
    let total = draws.n_total();
    let divergent: usize = draws.chains.iter().map(|c| c.n_divergent()).sum();
    assert!((divergent as f64) < 0.01 * total as f64, "{divergent} of {total}");
    assert!(draws.max_rhat().unwrap() < 1.05);
}
