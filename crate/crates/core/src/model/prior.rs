use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{sample_car, ArealGraph};
use crate::model::{ModelSpec, ModelVariant, Parameters};

/// Draws a full parameter set from the prior, including random effects.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &ModelSpec,
    graph: &ArealGraph,
    n_years: usize,
    n_covariates: usize,
    rng: &mut R,
) -> Result<Parameters> {
    spec.validate()?;
    let pr = &spec.priors;
    let beta_dist = Normal::new(0.0, pr.beta_variance.sqrt()).map_err(|e| Error::Structure(e.to_string()))?;
    let precision = Gamma::new(pr.inv_gamma_shape, 1.0 / pr.inv_gamma_scale)
        .map_err(|e| Error::Structure(e.to_string()))?;
    let inv_gamma = |rng: &mut R| 1.0 / precision.sample(rng);
    let beta: Vec<f64> = (0..=n_covariates).map(|_| beta_dist.sample(rng)).collect();

    let mut p = Parameters {
        variant: spec.variant,
        beta,
        sigma2_theta: None,
        sigma2_phi: None,
        sigma2_eta: None,
        lambda: None,
        rho: None,
        p_global: None,
        r: Vec::new(),
        theta: Vec::new(),
        phi: Vec::new(),
        eta: Vec::new(),
    };
    match spec.variant {
        ModelVariant::M1 => p.sigma2_theta = Some(inv_gamma(rng)),
        ModelVariant::M2 | ModelVariant::M3a | ModelVariant::M3b => {
            p.sigma2_phi = Some(inv_gamma(rng));
            p.lambda = Some(rng.random());
            match spec.variant {
                ModelVariant::M3a => {
                    p.sigma2_eta = Some(inv_gamma(rng));
                    p.rho = Some(rng.random());
                }
                ModelVariant::M3b => {
                    let offset = Normal::new(0.0, pr.offset_variance.sqrt())
                        .map_err(|e| Error::Structure(e.to_string()))?;
                    p.sigma2_eta = Some(inv_gamma(rng));
                    p.p_global = Some(rng.sample(Open01));
                    p.r = (0..graph.n_groups().saturating_sub(1)).map(|_| offset.sample(rng)).collect();
                }
                _ => {}
            }
        }
        ModelVariant::M4 => {
            p.sigma2_phi = Some(inv_gamma(rng));
            p.lambda = Some(rng.random());
            p.rho = Some(rng.random());
        }
    }
    sample_effects(&mut p, graph, n_years, rng)?;
    Ok(p)
}

/// Draws the random effects of `p` from their process given its
/// hyperparameters, replacing any existing effects.
pub fn sample_effects<R: Rng + ?Sized>(p: &mut Parameters, graph: &ArealGraph, n_years: usize, rng: &mut R) -> Result<()> {
    let kk = graph.n_sections();
    let missing = |name: &str| Error::Structure(format!("{} needs {name} to draw effects", p.variant));
    p.theta.clear();
    p.phi.clear();
    p.eta.clear();
    match p.variant {
        ModelVariant::M1 => {
            let sd = p.sigma2_theta.ok_or_else(|| missing("sigma2_theta"))?.sqrt();
            p.theta = (0..kk).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        }
        ModelVariant::M2 | ModelVariant::M3a | ModelVariant::M3b => {
            let s = p.sigma2_phi.ok_or_else(|| missing("sigma2_phi"))?;
            let lambda = p.lambda.ok_or_else(|| missing("lambda"))?;
            p.phi = sample_car(graph, lambda, s, rng)?;
            if p.variant != ModelVariant::M2 {
                let s_eta = p.sigma2_eta.ok_or_else(|| missing("sigma2_eta"))?;
                let rhos = if p.variant == ModelVariant::M3a {
                    vec![p.rho.ok_or_else(|| missing("rho"))?]
                } else {
                    p.p_global.ok_or_else(|| missing("P"))?;
                    if p.r.len() != graph.n_groups().saturating_sub(1) {
                        return Err(missing("one offset per non-final group"));
                    }
                    p.rho_groups()
                };
                let mut eta = Vec::with_capacity(rhos.len() * n_years);
                for rho in rhos {
                    eta.extend(sample_ar1(n_years, rho, s_eta, rng));
                }
                p.eta = eta;
            }
        }
        ModelVariant::M4 => {
            let s = p.sigma2_phi.ok_or_else(|| missing("sigma2_phi"))?;
            let lambda = p.lambda.ok_or_else(|| missing("lambda"))?;
            let rho = p.rho.ok_or_else(|| missing("rho"))?;
            let mut phi = Vec::with_capacity(kk * n_years);
            for t in 0..n_years {
                let innovation = sample_car(graph, lambda, s, rng)?;
                if t == 0 {
                    phi.extend(innovation);
                } else {
                    let prev = (t - 1) * kk;
                    for (k, e) in innovation.into_iter().enumerate() {
                        let m = rho * phi[prev + k];
                        phi.push(m + e);
                    }
                }
            }
            p.phi = phi;
        }
    }
    Ok(())
}

fn sample_ar1<R: Rng + ?Sized>(n: usize, rho: f64, sigma2: f64, rng: &mut R) -> Vec<f64> {
    let sd = sigma2.sqrt();
    let mut out: Vec<f64> = Vec::with_capacity(n);
    for t in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let mean = if t == 0 { 0.0 } else { rho * out[t - 1] };
        out.push(mean + sd * z);
    }
    out
}
