//! Forward simulation from the model variants and simulation-based
//! calibration of the sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{Dataset, SectionYearRecord, MANAGEMENT_START_YEAR};
use crate::error::{Error, Result};
use crate::graph::ArealGraph;
use crate::model::{linear_predictor, sample_effects, sample_prior, ModelSpec, ModelVariant, ParamLayout, Parameterization, Parameters, Priors};
use crate::parallel::{map_indexed, Execution};
use crate::sampler::{run_inference, SamplerConfig};

/// Simulated log rates above this are rejected.
pub const MAX_LOG_RATE: f64 = 20.0;

/// Ranges of the standard-schema covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateRanges {
    pub secchi_m: (f64, f64),
    pub rsa: (f64, f64),
    pub rma: (f64, f64),
    /// Raw predator counts; the covariate is ln(1 + count).
    pub predator_count: (f64, f64),
    pub tow_distance_m: (f64, f64),
    pub management_start_year: i32,
}

impl Default for CovariateRanges {
    fn default() -> Self {
        CovariateRanges {
            secchi_m: (0.26, 2.34),
            rsa: (0.0, 0.17),
            rma: (0.01, 0.48),
            predator_count: (0.0, 2838.0),
            tow_distance_m: (5000.0, 20000.0),
            management_start_year: MANAGEMENT_START_YEAR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Raw records of the standard schema, drawn within the given ranges.
    Standard(CovariateRanges),
    /// `p` iid standard-normal covariates and offsets ln U(lo, hi).
    Gaussian { p: usize, offset_range: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// Everything drawn from the prior.
    Prior(Priors),
    /// β and hyperparameters given; random effects drawn from their process.
    Hyperparameters(Parameters),
    /// Every parameter given.
    Full(Parameters),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub variant: ModelVariant,
    /// Sections per group; each group is a chain.
    pub group_sizes: Vec<usize>,
    pub group_labels: Vec<String>,
    pub first_year: i32,
    pub n_years: usize,
    pub design: Design,
    pub truth: Truth,
    /// `(section index, year index)` cells left unobserved.
    pub missing: Vec<(usize, usize)>,
    pub seed: u64,
}

impl SimConfig {
    /// 37 sections as chains of 14, 13 and 10 over 21 years, standard schema.
    pub fn desk(variant: ModelVariant, truth: Truth, seed: u64) -> Self {
        SimConfig {
            variant,
            group_sizes: vec![14, 13, 10],
            group_labels: vec!["James".into(), "Rappahannock".into(), "York".into()],
            first_year: 1996,
            n_years: 21,
            design: Design::Standard(CovariateRanges::default()),
            truth,
            missing: Vec::new(),
            seed,
        }
    }

    pub fn graph(&self) -> Result<ArealGraph> {
        let labels: Vec<&str> = self.group_labels.iter().map(|s| s.as_str()).collect();
        if labels.len() != self.group_sizes.len() {
            return Err(Error::Usage("one label per group required".into()));
        }
        ArealGraph::chains(&self.group_sizes, Some(&labels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_years == 0 || self.group_sizes.is_empty() {
            return Err(Error::Usage("simulation needs sections and years".into()));
        }
        if let Design::Standard(r) = &self.design {
            let ok = |(lo, hi): (f64, f64), min: f64, max: f64| lo <= hi && lo >= min && hi <= max;
            if !(ok(r.secchi_m, 0.0, f64::INFINITY)
                && ok(r.rsa, 0.0, 1.0)
                && ok(r.rma, 0.0, 1.0)
                && ok(r.predator_count, 0.0, f64::INFINITY)
                && r.tow_distance_m.0 > 0.0
                && ok(r.tow_distance_m, 0.0, f64::INFINITY))
            {
                return Err(Error::Usage("covariate ranges violate record invariants".into()));
            }
        }
        if let Design::Gaussian { offset_range: (lo, hi), .. } = self.design {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Usage("offset range must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A fixed truth for the standard schema with `n_groups` tributaries: the
/// coefficients have the magnitudes of a fit to the survey data, and
/// σ² = 0.5, λ = 0.55, ρ = 0.15 give counts in the hundreds at desk scale.
/// Random effects are left empty, to be drawn from their process.
pub fn reference_truth(variant: ModelVariant, n_groups: usize) -> Parameters {
    // Intercept, turbidity, seagrass, marsh, marsh × turbidity, predators,
    // management, then tributary dummies.
    let mut beta = vec![-4.33, 0.48, -1.24, 2.55, 3.42, 0.04, -0.34];
    beta.extend([0.09, 0.74].iter().cycle().take(n_groups.saturating_sub(1)));
    let mut p = Parameters {
        variant,
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
    match variant {
        ModelVariant::M1 => p.sigma2_theta = Some(0.5),
        ModelVariant::M2 => {
            p.sigma2_phi = Some(0.5);
            p.lambda = Some(0.55);
        }
        ModelVariant::M3a => {
            p.sigma2_phi = Some(0.5);
            p.lambda = Some(0.55);
            p.sigma2_eta = Some(0.1);
            p.rho = Some(0.15);
        }
        ModelVariant::M3b => {
            p.sigma2_phi = Some(0.5);
            p.lambda = Some(0.55);
            p.sigma2_eta = Some(0.1);
            p.p_global = Some(0.15);
            p.r = [0.2, -0.1].iter().cycle().take(n_groups.saturating_sub(1)).copied().collect();
        }
        ModelVariant::M4 => {
            p.sigma2_phi = Some(0.5);
            p.lambda = Some(0.55);
            p.rho = Some(0.15);
        }
    }
    p
}

/// Priors for calibration runs. Tighter than the model defaults so that
/// prior-drawn truths keep simulated rates finite.
pub fn calibration_priors() -> Priors {
    Priors { beta_variance: 0.25, inv_gamma_shape: 3.0, inv_gamma_scale: 1.0, ..Priors::default() }
}

/// Two standard-normal covariates and offsets ln U(20, 60): rates near 30
/// at zero coefficients.
pub fn calibration_design() -> Design {
    Design::Gaussian { p: 2, offset_range: (20.0, 60.0) }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Section-level habitat plus year-level noise, clamped to the ranges.
fn standard_records<R: Rng + ?Sized>(
    graph: &ArealGraph,
    first_year: i32,
    n_years: usize,
    r: &CovariateRanges,
    rng: &mut R,
) -> Vec<SectionYearRecord> {
    let kk = graph.n_sections();
    let base: Vec<(f64, f64, f64)> = (0..kk)
        .map(|_| (uniform(rng, r.secchi_m), uniform(rng, r.rsa), uniform(rng, r.rma)))
        .collect();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let log_pred = (r.predator_count.0.ln_1p(), r.predator_count.1.ln_1p());
    let mut out = Vec::with_capacity(kk * n_years);
    for t in 0..n_years {
        let year = first_year + t as i32;
        for &(secchi, rsa, rma) in &base {
            let jitter = |rng: &mut R, v: f64, sd: f64, (lo, hi): (f64, f64)| (v + sd * noise.sample(rng)).clamp(lo, hi);
            out.push(SectionYearRecord {
                count: 0,
                tow_distance_m: uniform(rng, r.tow_distance_m),
                secchi_m: jitter(rng, secchi, 0.15, r.secchi_m),
                rsa: jitter(rng, rsa, 0.1 * rsa, r.rsa),
                rma: jitter(rng, rma, 0.1 * rma, r.rma),
                // Log-uniform counts, skewed toward few predators.
                log_predator: uniform(rng, log_pred),
                management: if year >= r.management_start_year { 1.0 } else { 0.0 },
            });
        }
    }
    out
}

/// Simulates a dataset and returns it with the parameters that generated it.
pub fn simulate_dataset(config: &SimConfig) -> Result<(Dataset, Parameters)> {
    config.validate()?;
    let graph = config.graph()?;
    let kk = graph.n_sections();
    let n_cells = kk * config.n_years;
    for &(k, t) in &config.missing {
        if k >= kk || t >= config.n_years {
            return Err(Error::Usage(format!("missing cell ({k}, {t}) outside the lattice")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut ds = match &config.design {
        Design::Standard(ranges) => {
            let recs = standard_records(&graph, config.first_year, config.n_years, ranges, &mut rng);
            Dataset::from_records(graph.clone(), config.first_year, config.n_years, recs.into_iter().map(Some).collect())?
        }
        Design::Gaussian { p, offset_range } => {
            let design: Vec<f64> = (0..n_cells * p).map(|_| rng.sample(StandardNormal)).collect();
            let offsets: Vec<f64> = (0..n_cells).map(|_| uniform(&mut rng, *offset_range).ln()).collect();
            let names = (1..=*p).map(|i| format!("x{i}")).collect();
            Dataset::new(graph.clone(), config.first_year, config.n_years, names, vec![Some(0); n_cells], offsets, design)?
        }
    };

    let spec = ModelSpec::new(config.variant);
    let layout = ParamLayout::for_dataset(config.variant, &ds);
    let truth = match &config.truth {
        Truth::Prior(priors) => {
            sample_prior(&spec.with_priors(*priors), &graph, config.n_years, ds.n_covariates(), &mut rng)?
        }
        Truth::Hyperparameters(p) => {
            let mut p = p.clone();
            sample_effects(&mut p, &graph, config.n_years, &mut rng)?;
            p
        }
        Truth::Full(p) => p.clone(),
    };
    if truth.variant != config.variant {
        return Err(Error::Structure(format!("truth is {} but simulating {}", truth.variant, config.variant)));
    }
    truth.check(&layout)?;

    for t in 0..config.n_years {
        for k in 0..kk {
            let c = ds.cell(k, t);
            let eta = linear_predictor(&truth, &ds, k, t)?;
            if !(eta <= MAX_LOG_RATE) {
                return Err(Error::Data(format!(
                    "log expected count {eta:.1} at section {k}, year {t} exceeds {MAX_LOG_RATE}; rescale the fixture"
                )));
            }
            let y = Poisson::new(eta.exp()).map_err(|e| Error::Data(e.to_string()))?.sample(&mut rng) as u64;
            ds.counts[c] = Some(y);
            if let Some(recs) = ds.records.as_mut() {
                if let Some(r) = recs[c].as_mut() {
                    r.count = y;
                }
            }
        }
    }
    for &(k, t) in &config.missing {
        let c = ds.cell(k, t);
        ds.counts[c] = None;
        ds.offsets[c] = 0.0;
        let p = ds.n_covariates();
        ds.design[c * p..(c + 1) * p].iter_mut().for_each(|v| *v = 0.0);
        if let Some(recs) = ds.records.as_mut() {
            recs[c] = None;
        }
    }
    Ok((ds, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcConfig {
    pub n_reps: usize,
    pub sampler: SamplerConfig,
    /// Posterior draws kept per replication for ranking.
    pub n_ranked: usize,
    pub n_bins: usize,
    /// Replications with any R̂ at or above this are excluded.
    pub rhat_threshold: f64,
    /// Likelihood rate multiplier of the fitted model; 1 is correct.
    pub fit_rate_scale: f64,
    /// Picks the parameterization of each fit from its simulated data with
    /// [`Parameterization::suggest`] instead of using the spec's.
    pub suggest_parameterization: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl SbcConfig {
    pub fn new(n_reps: usize, sampler: SamplerConfig) -> Self {
        SbcConfig {
            n_reps,
            sampler,
            n_ranked: 1023,
            n_bins: 8,
            rhat_threshold: 1.05,
            fit_rate_scale: 1.0,
            suggest_parameterization: true,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcGroup {
    pub name: String,
    pub parameters: Vec<String>,
    /// Bonferroni-adjusted minimum of per-parameter chi-square p-values.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    pub variant: ModelVariant,
    pub names: Vec<String>,
    pub n_ranked: usize,
    pub n_bins: usize,
    /// Replication index and ranks (one per parameter) of used replications.
    pub ranks: Vec<(usize, Vec<u32>)>,
    /// Replications excluded for R̂ at or above the threshold.
    pub nonconverged: Vec<usize>,
    /// Replications whose simulation or fit failed.
    pub failed: Vec<(usize, String)>,
    /// Per-parameter chi-square p-values; `None` below two replications.
    pub p_values: Vec<Option<f64>>,
    pub groups: Vec<SbcGroup>,
}

impl SbcResult {
    /// Whether every group's p-value exceeds `alpha`.
    pub fn passes(&self, alpha: f64) -> bool {
        self.groups.iter().all(|g| g.p_value.is_none_or(|p| p > alpha))
    }

    pub fn group(&self, name: &str) -> Option<&SbcGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Chi-square p-value of rank uniformity over `n_bins` equal bins of the
/// `n_ranked + 1` possible ranks.
pub fn rank_uniformity_p(ranks: &[u32], n_ranked: usize, n_bins: usize) -> Option<f64> {
    if ranks.len() < 2 || n_bins < 2 {
        return None;
    }
    let n_values = n_ranked + 1;
    let mut counts = vec![0f64; n_bins];
    for &r in ranks {
        counts[(r as usize * n_bins / n_values).min(n_bins - 1)] += 1.0;
    }
    let expected = ranks.len() as f64 / n_bins as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((n_bins - 1) as f64).ok()?;
    Some(dist.sf(stat))
}

/// Parameter groups by block: fixed effects, variances, dependence
/// parameters, group offsets and random effects.
fn parameter_groups(layout: &ParamLayout) -> Vec<(&'static str, Vec<usize>)> {
    let scalars = |ix: &[Option<usize>]| ix.iter().flatten().copied().collect::<Vec<_>>();
    let effects: Vec<usize> = layout.theta.clone().chain(layout.phi.clone()).chain(layout.eta.clone()).collect();
    vec![
        ("beta", layout.beta.clone().collect()),
        ("variance", scalars(&[layout.sigma2_theta, layout.sigma2_phi, layout.sigma2_eta])),
        ("dependence", scalars(&[layout.lambda, layout.rho, layout.p_global])),
        ("offsets", layout.r.clone().collect()),
        ("effects", effects),
    ]
    .into_iter()
    .filter(|(_, ix)| !ix.is_empty())
    .collect()
}

/// Evenly spaced indices selecting `m` of `n` draws.
fn thin_indices(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| i * n / m).collect()
}

/// Simulation-based calibration: per replication, draw parameters from the
/// prior, simulate data, fit, and rank the truth among thinned draws.
///
/// `sim.truth` must be [`Truth::Prior`]; the fit uses the same priors.
pub fn sbc_run(spec: &ModelSpec, sim: &SimConfig, config: &SbcConfig) -> Result<SbcResult> {
    let Truth::Prior(priors) = sim.truth else {
        return Err(Error::Usage("calibration draws its truths from the prior".into()));
    };
    if sim.variant != spec.variant {
        return Err(Error::Usage("simulation and fitted variants differ".into()));
    }
    if config.n_reps == 0 {
        return Err(Error::Usage("calibration needs at least one replication".into()));
    }
    let total = config.sampler.n_chains * config.sampler.sampling_iters;
    if total < config.n_ranked {
        return Err(Error::Usage(format!("{total} draws per fit cannot be thinned to {}", config.n_ranked)));
    }
    let fit_spec = ModelSpec { priors, rate_scale: config.fit_rate_scale, ..*spec };
    let mut sampler = config.sampler.clone();
    if config.execution.is_parallel() && config.n_reps > 1 {
        sampler.execution = Execution::Sequential;
    }

    let outcomes = map_indexed(config.execution, config.n_reps, |rep| -> Result<(Vec<u32>, f64)> {
        let rep_sim = SimConfig { seed: sim.seed.wrapping_add(rep as u64), ..sim.clone() };
        let (ds, truth) = simulate_dataset(&rep_sim)?;
        let rep_sampler = sampler.clone().with_seed(sampler.seed.wrapping_add(rep as u64));
        let rep_spec = if config.suggest_parameterization {
            fit_spec.with_parameterization(Parameterization::suggest(&ds))
        } else {
            fit_spec
        };
        let draws = run_inference(&rep_spec, &ds, &rep_sampler)?;
        let truth_flat = truth.to_flat(&draws.layout)?;
        let keep = thin_indices(draws.n_total(), config.n_ranked);
        let ranks = (0..draws.n_params())
            .map(|j| {
                let pooled = draws.pooled(j);
                keep.iter().filter(|&&i| pooled[i] < truth_flat[j]).count() as u32
            })
            .collect();
        Ok((ranks, draws.max_rhat().unwrap_or(f64::INFINITY)))
    });

    let shape = shape_dataset(sim)?;
    let layout = ParamLayout::for_dataset(spec.variant, &shape);
    let names = layout.names(&shape);
    let mut ranks = Vec::new();
    let mut nonconverged = Vec::new();
    let mut failed = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((r, rhat)) if rhat < config.rhat_threshold => ranks.push((rep, r)),
            Ok(_) => nonconverged.push(rep),
            Err(e) => failed.push((rep, e.to_string())),
        }
    }
    if !nonconverged.is_empty() {
        log::warn!("{} of {} replications excluded for R-hat >= {}", nonconverged.len(), config.n_reps, config.rhat_threshold);
    }
    let p_values: Vec<Option<f64>> = (0..layout.dim)
        .map(|j| {
            let col: Vec<u32> = ranks.iter().map(|(_, r)| r[j]).collect();
            rank_uniformity_p(&col, config.n_ranked, config.n_bins)
        })
        .collect();
    let groups = parameter_groups(&layout)
        .into_iter()
        .map(|(name, ix)| {
            let m = ix.len() as f64;
            let p_value = ix
                .iter()
                .map(|&j| p_values[j])
                .collect::<Option<Vec<f64>>>()
                .map(|ps| (ps.into_iter().fold(1.0, f64::min) * m).min(1.0));
            SbcGroup { name: name.to_string(), parameters: ix.iter().map(|&j| names[j].clone()).collect(), p_value }
        })
        .collect();
    Ok(SbcResult {
        variant: spec.variant,
        names,
        n_ranked: config.n_ranked,
        n_bins: config.n_bins,
        ranks,
        nonconverged,
        failed,
        p_values,
        groups,
    })
}

/// An all-unobserved dataset with the lattice and design columns of `sim`.
fn shape_dataset(sim: &SimConfig) -> Result<Dataset> {
    let graph = sim.graph()?;
    let n = graph.n_sections() * sim.n_years;
    let names = match &sim.design {
        Design::Standard(_) => crate::data::standard_covariate_names(&graph),
        Design::Gaussian { p, .. } => (1..=*p).map(|i| format!("x{i}")).collect(),
    };
    let p = names.len();
    Dataset::new(graph, sim.first_year, sim.n_years, names, vec![None; n], vec![0.0; n], vec![0.0; n * p])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ranks_pass_and_piled_ranks_fail() {
        let even: Vec<u32> = (0..800).map(|i| (i * 1024 / 800) as u32).collect();
        assert!(rank_uniformity_p(&even, 1023, 8).unwrap() > 0.99);
        let piled = vec![0u32; 100];
        assert!(rank_uniformity_p(&piled, 1023, 8).unwrap() < 1e-10);
        assert!(rank_uniformity_p(&[5], 1023, 8).is_none());
    }

    #[test]
    fn thinning_is_even_and_in_range() {
        let ix = thin_indices(4000, 1023);
        assert_eq!(ix.len(), 1023);
        assert!(ix.windows(2).all(|w| w[1] > w[0]) && *ix.last().unwrap() < 4000);
    }
}
