//! Multi-chain NUTS sampling of the model posteriors.

mod adapt;
mod diagnostics;
mod metric;
mod nuts;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamLayout, Parameters, Target};
use crate::parallel::{map_indexed, Execution};

pub use diagnostics::{effective_sample_size, split_rhat, Rhat};

use adapt::{DualAveraging, Welford, Windows};
use metric::Metric;
use nuts::{Nuts, Point};

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density, or −∞
    /// when undefined.
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64;
    /// Number of leading coordinates given a dense metric during adaptation.
    fn dense_block(&self) -> usize {
        0
    }
}

impl LogDensity for Target<'_> {
    fn dim(&self) -> usize {
        Target::dim(self)
    }

    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        Target::log_density_grad(self, u, grad)
    }

    /// The regression coefficients, which are often strongly correlated.
    fn dense_block(&self) -> usize {
        debug_assert_eq!(self.layout().beta.start, 0);
        self.layout().n_beta()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: u32,
    /// Fast-adaptation buffers and first slow window of the metric schedule.
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
    /// Half-width of the uniform jitter around prior medians for inits.
    pub init_jitter: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            warmup_iters: 15_000,
            sampling_iters: 15_000,
            seed: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_buffer: 75,
            term_buffer: 50,
            base_window: 25,
            init_jitter: 0.5,
            execution: Execution::default(),
        }
    }
}

impl SamplerConfig {
    /// 4 chains of 1,500 warm-up and 1,500 sampling iterations.
    pub fn desk() -> Self {
        SamplerConfig { warmup_iters: 1_500, sampling_iters: 1_500, ..Default::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iters(mut self, warmup: usize, sampling: usize) -> Self {
        self.warmup_iters = warmup;
        self.sampling_iters = sampling;
        self
    }

    pub fn with_chains(mut self, n: usize) -> Self {
        self.n_chains = n;
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Usage("n_chains must be at least 1".into()));
        }
        if self.sampling_iters == 0 {
            return Err(Error::Usage("sampling_iters must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::domain("target_accept", self.target_accept, "(0, 1)"));
        }
        if !(1..=30).contains(&self.max_tree_depth) {
            return Err(Error::Usage(format!("max_tree_depth {} outside 1..=30", self.max_tree_depth)));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::domain("init_jitter", self.init_jitter, "[0, inf)"));
        }
        Ok(())
    }
}

/// Post-warm-up output of one chain. Draws are row-major on the flat
/// constrained scale (or the raw scale for generic targets).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    pub n_params: usize,
    pub values: Vec<f64>,
    pub log_density: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<u32>,
    pub n_leapfrog: Vec<u32>,
    pub energy: Vec<f64>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

impl ChainDraws {
    pub fn n_draws(&self) -> usize {
        if self.n_params == 0 {
            0
        } else {
            self.values.len() / self.n_params
        }
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_params..(i + 1) * self.n_params]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(self.n_params).copied().collect()
    }

    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    pub fn mean_accept(&self) -> f64 {
        self.accept_stat.iter().sum::<f64>() / self.accept_stat.len().max(1) as f64
    }
}

/// Runs one chain of NUTS on an arbitrary target. `init` proposes starting
/// points; `transform` maps each kept unconstrained draw to its stored form.
pub fn sample_target<D, I, T>(
    target: &D,
    config: &SamplerConfig,
    chain: usize,
    mut init: I,
    transform: T,
) -> Result<ChainDraws>
where
    D: LogDensity + ?Sized,
    I: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    T: Fn(&[f64]) -> Result<Vec<f64>>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let dim = target.dim();

    const MAX_INIT_TRIES: usize = 100;
    let mut current = None;
    for _ in 0..MAX_INIT_TRIES {
        let p = Point::new(target, init(&mut rng));
        if p.logp.is_finite() && p.grad.iter().all(|g| g.is_finite()) {
            current = Some(p);
            break;
        }
    }
    let mut current = current.ok_or_else(|| {
        Error::Sampler(format!(
            "chain {chain}: log density not finite at {MAX_INIT_TRIES} initial points"
        ))
    })?;

    let block = target.dense_block();
    let mut nuts = Nuts { target, metric: Metric::identity(dim, block), step_size: 1.0, max_depth: config.max_tree_depth };
    nuts.find_reasonable_step_size(&current, &mut rng);
    let mut da = DualAveraging::new(config.target_accept);
    da.restart(nuts.step_size);
    let mut windows = Windows::new(config.warmup_iters, config.init_buffer, config.term_buffer, config.base_window);
    let mut welford = Welford::new(dim, block);

    for i in 0..config.warmup_iters {
        let (next, stats) = nuts.transition(&current, &mut rng);
        current = next;
        nuts.step_size = da.update(stats.accept_stat);
        if windows.in_slow(i) {
            welford.push(&current.q);
        }
        if windows.end_of_window(i) {
            nuts.metric = welford.metric();
            welford.reset();
            nuts.find_reasonable_step_size(&current, &mut rng);
            da.restart(nuts.step_size);
        }
    }
    if config.warmup_iters > 0 {
        nuts.step_size = da.final_step_size();
    }
    if !(nuts.step_size.is_finite() && nuts.step_size > 0.0) {
        return Err(Error::Sampler(format!("chain {chain}: step size adaptation failed")));
    }

    let n = config.sampling_iters;
    let n_params = transform(&current.q)?.len();
    let mut out = ChainDraws {
        chain,
        n_params,
        values: Vec::with_capacity(n * n_params),
        log_density: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        tree_depth: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        energy: Vec::with_capacity(n),
        step_size: nuts.step_size,
        inv_metric: nuts.metric.variances(),
    };
    for _ in 0..n {
        let (next, stats) = nuts.transition(&current, &mut rng);
        current = next;
        out.values.extend(transform(&current.q)?);
        out.log_density.push(current.logp);
        out.accept_stat.push(stats.accept_stat);
        out.divergent.push(stats.divergent);
        out.tree_depth.push(stats.tree_depth);
        out.n_leapfrog.push(stats.n_leapfrog);
        out.energy.push(stats.energy);
    }
    Ok(out)
}

/// Unconstrained initial point: prior medians plus uniform jitter.
fn initial_point<R: Rng + ?Sized>(spec: &ModelSpec, layout: &ParamLayout, jitter: f64, rng: &mut R) -> Vec<f64> {
    let mut u = vec![0.0; layout.dim];
    // Median of inverse-Gamma(a, b) is b / (median of Gamma(a, 1)); for a = 1
    // that is b / ln 2. Other shapes use the same approximation.
    let ig_median = spec.priors.inv_gamma_scale / std::f64::consts::LN_2;
    for i in [layout.sigma2_theta, layout.sigma2_phi, layout.sigma2_eta].into_iter().flatten() {
        u[i] = ig_median.ln();
    }
    if jitter > 0.0 {
        for v in &mut u {
            *v += rng.random_range(-jitter..=jitter);
        }
    }
    u
}

/// Runs one chain on a model posterior; draws are stored constrained.
pub fn run_chain(spec: &ModelSpec, dataset: &Dataset, config: &SamplerConfig, chain: usize) -> Result<ChainDraws> {
    spec.validate()?;
    let target = Target::new(*spec, dataset);
    let layout = target.layout().clone();
    sample_target(
        &target,
        config,
        chain,
        |rng| initial_point(spec, &layout, config.init_jitter, rng),
        |u| target.constrain(u)?.to_flat(&layout),
    )
}

/// Pooled output of all chains on the constrained scale.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub spec: ModelSpec,
    pub layout: ParamLayout,
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    pub config: SamplerConfig,
}

/// Runs `config.n_chains` independent chains. Chain `i` uses stream `i` of
/// the seeded generator.
pub fn run_inference(spec: &ModelSpec, dataset: &Dataset, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    spec.validate()?;
    let results = map_indexed(config.execution, config.n_chains, |c| run_chain(spec, dataset, config, c));
    let mut chains = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => chains.push(c),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::PartialInference { completed: chains, message: failures.join("; ") });
    }
    let layout = ParamLayout::for_dataset(spec.variant, dataset);
    Ok(PosteriorDraws { spec: *spec, names: layout.names(dataset), layout, chains, config: config.clone() })
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    /// Draws per chain.
    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, |c| c.n_draws())
    }

    pub fn n_total(&self) -> usize {
        self.chains.iter().map(|c| c.n_draws()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn chain_columns(&self, j: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.column(j)).collect()
    }

    /// All draws of parameter `j`, chain by chain.
    pub fn pooled(&self, j: usize) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.column(j)).collect()
    }

    pub fn pooled_by_name(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .index_of(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named '{name}'")))?;
        Ok(self.pooled(j))
    }

    /// Pooled draws as parameter sets, chain by chain.
    pub fn parameter_draws(&self) -> Result<Vec<Parameters>> {
        self.chains
            .iter()
            .flat_map(|c| (0..c.n_draws()).map(move |i| c.draw(i)))
            .map(|d| Parameters::from_flat(&self.layout, d))
            .collect()
    }

    /// Split R̂ of parameter `j`; `None` with fewer than two chains.
    pub fn rhat(&self, j: usize) -> Option<Rhat> {
        let cols = self.chain_columns(j);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        split_rhat(&refs).ok()
    }

    pub fn ess(&self, j: usize) -> Option<f64> {
        let cols = self.chain_columns(j);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        effective_sample_size(&refs)
    }

    /// Largest R̂ over all parameters, or `None` with fewer than two chains.
    pub fn max_rhat(&self) -> Option<f64> {
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.n_params() {
            let r = self.rhat(j)?.value;
            max = max.max(if r.is_nan() { f64::INFINITY } else { r });
        }
        Some(max)
    }

    pub fn n_divergent(&self) -> usize {
        self.chains.iter().map(|c| c.n_divergent()).sum()
    }

    pub fn divergence_fraction(&self) -> f64 {
        self.n_divergent() as f64 / self.n_total().max(1) as f64
    }

    pub fn mean_accept(&self) -> f64 {
        let n = self.n_total().max(1) as f64;
        self.chains.iter().flat_map(|c| c.accept_stat.iter()).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent normal target with per-coordinate scales.
    struct Gaussian {
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.sd.len()
        }

        fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for ((g, x), s) in grad.iter_mut().zip(u).zip(&self.sd) {
                *g = -x / (s * s);
                lp -= 0.5 * x * x / (s * s);
            }
            lp
        }
    }

    fn run_gaussian(sd: Vec<f64>, seed: u64, chain: usize) -> ChainDraws {
        let config = SamplerConfig::default().with_iters(1000, 4000).with_seed(seed);
        let t = Gaussian { sd };
        sample_target(&t, &config, chain, |_| vec![0.5; t.dim()], |u| Ok(u.to_vec())).unwrap()
    }

    #[test]
    fn gaussian_moments_and_acceptance() {
        // Acceptance after warm-up runs above the target in one to three
        // dimensions, as with other dual-averaging samplers.
        let sd: Vec<f64> = (0..20).map(|i| [0.1, 1.0, 10.0][i % 3] * (1.0 + 0.05 * i as f64)).collect();
        let c = run_gaussian(sd.clone(), 3, 0);
        for (j, s) in sd.iter().enumerate() {
            let x = c.column(j);
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0);
            assert!(m.abs() < 0.1 * s, "coordinate {j} mean {m}");
            assert!((v.sqrt() / s - 1.0).abs() < 0.08, "coordinate {j} sd {}", v.sqrt());
        }
        assert!((0.65..=0.9).contains(&c.mean_accept()), "accept {}", c.mean_accept());
        assert_eq!(c.n_divergent(), 0);
        // The adapted metric recovers the scales.
        assert!((c.inv_metric[2] / (sd[2] * sd[2]) - 1.0).abs() < 0.5);
    }

    /// Gaussian with unit variances and correlation `r` between the first
    /// two coordinates, which form the dense block.
    struct Correlated {
        r: f64,
        dim: usize,
    }

    impl LogDensity for Correlated {
        fn dim(&self) -> usize {
            self.dim
        }

        fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
            let (a, b) = (u[0], u[1]);
            let k = 1.0 / (1.0 - self.r * self.r);
            grad[0] = -k * (a - self.r * b);
            grad[1] = -k * (b - self.r * a);
            let mut lp = -0.5 * k * (a * a - 2.0 * self.r * a * b + b * b);
            for i in 2..self.dim {
                grad[i] = -u[i];
                lp -= 0.5 * u[i] * u[i];
            }
            lp
        }

        fn dense_block(&self) -> usize {
            2
        }
    }

    #[test]
    fn dense_block_adapts_to_correlation() {
        let t = Correlated { r: 0.995, dim: 10 };
        let config = SamplerConfig::default().with_iters(1000, 2000).with_seed(4);
        let c = sample_target(&t, &config, 0, |_| vec![0.5; 10], |u| Ok(u.to_vec())).unwrap();
        let depth = c.tree_depth.iter().sum::<u32>() as f64 / c.tree_depth.len() as f64;
        println!("step {} depth {depth} accept {}", c.step_size, c.mean_accept());
        assert!(depth < 3.5, "mean tree depth {depth}");
        assert!(c.step_size > 0.4);
        let (x, y) = (c.column(0), c.column(1));
        let n = x.len() as f64;
        let cov = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((cov - 0.995).abs() < 0.1, "covariance {cov}");
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = run_gaussian(vec![1.0, 2.0], 7, 1);
        let b = run_gaussian(vec![1.0, 2.0], 7, 1);
        assert_eq!(a, b);
        let c = run_gaussian(vec![1.0, 2.0], 7, 2);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn non_finite_initialization_aborts() {
        struct Broken;
        impl LogDensity for Broken {
            fn dim(&self) -> usize {
                1
            }
            fn log_density_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 0.0;
                f64::NEG_INFINITY
            }
        }
        let config = SamplerConfig::desk().with_iters(10, 10);
        let err = sample_target(&Broken, &config, 0, |_| vec![0.0], |u| Ok(u.to_vec())).unwrap_err();
        assert!(matches!(err, Error::Sampler(_)));
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().with_chains(0).validate().is_err());
        assert!(SamplerConfig::default().with_iters(10, 0).validate().is_err());
        assert!(SamplerConfig { target_accept: 1.0, ..Default::default() }.validate().is_err());
        let d = SamplerConfig::desk();
        assert_eq!((d.n_chains, d.warmup_iters, d.sampling_iters), (4, 1500, 1500));
    }
}
