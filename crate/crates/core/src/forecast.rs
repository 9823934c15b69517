//! One-step-ahead posterior predictive forecasts and leave-future-out
//! cross-validation.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::sample_car;
use crate::model::{fixed_part, ModelSpec, ModelVariant, Parameters};
use crate::parallel::{map_indexed, Execution};
use crate::sampler::{run_inference, PosteriorDraws, SamplerConfig};

/// Largest expected count a forecast will simulate.
const MAX_RATE: f64 = 1e15;

/// Covariates and offset of one section in the forecast year; `None` marks a
/// section that cannot be forecast.
pub type NewCell = Option<(Vec<f64>, f64)>;

/// Predictive count draws per section, `None` where no covariates exist.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDraws {
    pub sections: Vec<Option<Vec<u64>>>,
}

/// Random effect of each section in year T+1 given one posterior draw.
fn next_effects<R: Rng + ?Sized>(p: &Parameters, ds: &Dataset, rng: &mut R) -> Result<Vec<f64>> {
    let g = &ds.graph;
    let kk = ds.n_sections();
    let last = ds.n_years - 1;
    let normal = |rng: &mut R, mean: f64, var: f64| mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    Ok(match p.variant {
        ModelVariant::M1 => p.theta.clone(),
        ModelVariant::M2 => p.phi.clone(),
        ModelVariant::M3a => {
            let eta = normal(rng, p.rho.unwrap() * p.eta[last], p.sigma2_eta.unwrap());
            p.phi.iter().map(|f| f + eta).collect()
        }
        ModelVariant::M3b => {
            let rhos = p.rho_groups();
            let s = p.sigma2_eta.unwrap();
            let eta: Vec<f64> = (0..g.n_groups())
                .map(|gi| normal(rng, rhos[gi] * p.eta[gi * ds.n_years + last], s))
                .collect();
            (0..kk).map(|k| p.phi[k] + eta[g.group_of(k)]).collect()
        }
        ModelVariant::M4 => {
            let innovation = sample_car(g, p.lambda.unwrap(), p.sigma2_phi.unwrap(), rng)?;
            let rho = p.rho.unwrap();
            (0..kk).map(|k| rho * p.phi[last * kk + k] + innovation[k]).collect()
        }
    })
}

/// Draws `Y_{k,T+1}` for every posterior draw. `fitted` is the dataset the
/// draws were fitted to; `new_cells` has one entry per section.
pub fn forecast_year(
    draws: &PosteriorDraws,
    fitted: &Dataset,
    new_cells: &[NewCell],
    seed: u64,
) -> Result<PredictiveDraws> {
    let kk = fitted.n_sections();
    if new_cells.len() != kk {
        return Err(Error::Structure(format!("{} forecast cells for {kk} sections", new_cells.len())));
    }
    for (k, c) in new_cells.iter().enumerate() {
        if let Some((x, o)) = c {
            if x.len() != fitted.n_covariates() || !o.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("invalid forecast covariates for section {}", fitted.graph.ids()[k])));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Option<Vec<u64>>> =
        new_cells.iter().map(|c| c.as_ref().map(|_| Vec::with_capacity(draws.n_total()))).collect();
    for p in draws.parameter_draws()? {
        let effects = next_effects(&p, fitted, &mut rng)?;
        for (k, cell) in new_cells.iter().enumerate() {
            let Some((x, offset)) = cell else { continue };
            let mu = (fixed_part(&p.beta, x) + offset + effects[k]).exp();
            if !(mu <= MAX_RATE) {
                return Err(Error::Sampler(format!("forecast rate {mu} too large for section {k}")));
            }
            let y = if mu > 0.0 { Poisson::new(mu).map_err(|e| Error::Sampler(e.to_string()))?.sample(&mut rng) as u64 } else { 0 };
            out[k].as_mut().unwrap().push(y);
        }
    }
    Ok(PredictiveDraws { sections: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    /// Narrowest integer interval holding at least the requested mass.
    #[default]
    Hpd,
    EqualTail,
}

impl FromStr for IntervalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "hpd" | "hpdi" => Ok(IntervalMethod::Hpd),
            "equal-tail" => Ok(IntervalMethod::EqualTail),
            _ => Err(Error::Usage(format!("unknown interval method '{s}'"))),
        }
    }
}

/// Integer prediction interval from count draws.
pub fn prediction_interval(draws: &[u64], level: f64, method: IntervalMethod) -> Result<(u64, u64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("level", level, "(0, 1)"));
    }
    if draws.is_empty() {
        return Err(Error::Usage("no predictive draws".into()));
    }
    let mut s = draws.to_vec();
    s.sort_unstable();
    let n = s.len();
    match method {
        IntervalMethod::Hpd => {
            let m = ((level * n as f64).ceil() as usize).clamp(1, n);
            // Among windows of equal width prefer the one holding more draws.
            let mut best = (u64::MAX, 0usize, 0u64, 0u64);
            for i in 0..=n - m {
                let (lo, hi) = (s[i], s[i + m - 1]);
                let width = hi - lo;
                if width > best.0 {
                    continue;
                }
                let mass = s.partition_point(|&v| v <= hi) - s.partition_point(|&v| v < lo);
                if width < best.0 || mass > best.1 {
                    best = (width, mass, lo, hi);
                }
            }
            Ok((best.2, best.3))
        }
        IntervalMethod::EqualTail => {
            let tail = (1.0 - level) / 2.0;
            let lo = ((tail * n as f64).floor() as usize).min(n - 1);
            let hi = (((1.0 - tail) * n as f64).ceil() as usize).clamp(1, n) - 1;
            Ok((s[lo], s[hi]))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub section: String,
    pub observed: Option<u64>,
    pub median: u64,
    pub low: u64,
    pub high: u64,
    pub inside: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model: ModelVariant,
    pub year: i32,
    pub level: f64,
    pub rows: Vec<ForecastRow>,
    pub coverage: f64,
    pub n_evaluated: usize,
    pub mean_width: f64,
}

/// Fraction of evaluated sections whose observed count lies in its interval.
pub fn coverage(rows: &[ForecastRow]) -> Result<f64> {
    let inside: Vec<bool> = rows.iter().filter_map(|r| r.inside).collect();
    if inside.is_empty() {
        return Err(Error::Usage("no evaluated sections".into()));
    }
    Ok(inside.iter().filter(|&&b| b).count() as f64 / inside.len() as f64)
}

/// Builds the report of one model from predictive draws and the observed
/// counts of the forecast year.
pub fn forecast_report(
    model: ModelVariant,
    year: i32,
    ids: &[String],
    predictive: &PredictiveDraws,
    observed: &[Option<u64>],
    level: f64,
    method: IntervalMethod,
) -> Result<ForecastReport> {
    let mut rows = Vec::new();
    for (k, draws) in predictive.sections.iter().enumerate() {
        let Some(draws) = draws else { continue };
        let (low, high) = prediction_interval(draws, level, method)?;
        let mut s = draws.clone();
        s.sort_unstable();
        let obs = observed[k];
        rows.push(ForecastRow {
            section: ids[k].clone(),
            observed: obs,
            median: s[(s.len() - 1) / 2],
            low,
            high,
            inside: obs.map(|y| low <= y && y <= high),
        });
    }
    let cov = coverage(&rows)?;
    let evaluated: Vec<&ForecastRow> = rows.iter().filter(|r| r.inside.is_some()).collect();
    let mean_width = evaluated.iter().map(|r| (r.high - r.low) as f64).sum::<f64>() / evaluated.len() as f64;
    Ok(ForecastReport { model, year, level, n_evaluated: evaluated.len(), rows, coverage: cov, mean_width })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfoConfig {
    pub sampler: SamplerConfig,
    pub level: f64,
    pub method: IntervalMethod,
    /// Runs model fits concurrently; each fit's chains then run in turn.
    #[serde(skip)]
    pub execution: Execution,
}

impl LfoConfig {
    pub fn new(sampler: SamplerConfig) -> Self {
        LfoConfig { sampler, level: 0.8, method: IntervalMethod::Hpd, execution: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfoOutcome {
    pub model: ModelVariant,
    pub report: Option<ForecastReport>,
    pub error: Option<String>,
    pub max_rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfoResult {
    pub holdout_year: i32,
    pub outcomes: Vec<LfoOutcome>,
    /// Successful models from closest-to-nominal coverage to farthest, ties
    /// broken by narrower intervals. `None` with fewer than two models.
    pub ranking: Option<Vec<ModelVariant>>,
}

/// The forecast-year cells of `dataset` at year index `t`.
pub fn cells_for_year(dataset: &Dataset, t: usize) -> (Vec<NewCell>, Vec<Option<u64>>) {
    (0..dataset.n_sections())
        .map(|k| {
            let c = dataset.cell(k, t);
            let cell = dataset.is_observed(c).then(|| (dataset.covariates(c).to_vec(), dataset.offsets[c]));
            (cell, dataset.counts[c])
        })
        .unzip()
}

/// Fits each model to the years before `holdout_year` and scores its
/// forecast of that year.
pub fn run_lfo(specs: &[ModelSpec], dataset: &Dataset, holdout_year: i32, config: &LfoConfig) -> Result<LfoResult> {
    let t = dataset
        .year_index(holdout_year)
        .ok_or_else(|| Error::Usage(format!("holdout year {holdout_year} not in the data")))?;
    if t == 0 {
        return Err(Error::Usage("holdout year leaves no years to fit".into()));
    }
    if specs.is_empty() {
        return Err(Error::Usage("no models to compare".into()));
    }
    let train = dataset.truncate_years(t)?;
    let (cells, observed) = cells_for_year(dataset, t);
    let mut sampler = config.sampler.clone();
    if config.execution.is_parallel() && specs.len() > 1 {
        sampler.execution = Execution::Sequential;
    }
    let outcomes = map_indexed(config.execution, specs.len(), |i| {
        let spec = &specs[i];
        let result = run_inference(spec, &train, &sampler).and_then(|draws| {
            let seed = sampler.seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let pred = forecast_year(&draws, &train, &cells, seed)?;
            let report = forecast_report(spec.variant, holdout_year, dataset.graph.ids(), &pred, &observed, config.level, config.method)?;
            Ok((report, draws.max_rhat()))
        });
        match result {
            Ok((report, max_rhat)) => LfoOutcome { model: spec.variant, report: Some(report), error: None, max_rhat },
            Err(e) => {
                log::warn!("{} failed: {e}", spec.variant);
                LfoOutcome { model: spec.variant, report: None, error: Some(e.to_string()), max_rhat: None }
            }
        }
    });
    let ranking = (specs.len() > 1).then(|| rank(&outcomes, config.level));
    Ok(LfoResult { holdout_year, outcomes, ranking })
}

fn rank(outcomes: &[LfoOutcome], level: f64) -> Vec<ModelVariant> {
    let mut ok: Vec<&ForecastReport> = outcomes.iter().filter_map(|o| o.report.as_ref()).collect();
    ok.sort_by(|a, b| {
        let da = (a.coverage - level).abs();
        let db = (b.coverage - level).abs();
        // Coverages are multiples of 1/n; compare with a small tolerance.
        if (da - db).abs() > 1e-12 {
            da.total_cmp(&db)
        } else {
            a.mean_width.total_cmp(&b.mean_width)
        }
    });
    ok.iter().map(|r| r.model).collect()
}
