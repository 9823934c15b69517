//! Posterior summaries, conditional-effects curves and temporal aggregation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MANAGEMENT, MARSH, MARSH_X_TURBIDITY, TURBIDITY};
use crate::error::{Error, Result};
use crate::model::ModelVariant;
use crate::sampler::PosteriorDraws;

pub const DEFAULT_LEVEL: f64 = 0.8;
pub const MIN_HPDI_DRAWS: usize = 50;

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::domain("level", level, "(0, 1)"))
    }
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted(x), p)
}

/// Shortest window of `ceil(level·n)` consecutive sorted values.
fn shortest_window(sorted: &[f64], level: f64) -> (f64, f64) {
    let n = sorted.len();
    let m = ((level * n as f64).ceil() as usize).clamp(1, n);
    let mut best = 0;
    let mut width = f64::INFINITY;
    for i in 0..=n - m {
        let w = sorted[i + m - 1] - sorted[i];
        if w < width {
            width = w;
            best = i;
        }
    }
    (sorted[best], sorted[best + m - 1])
}

/// Highest posterior density interval from draws.
pub fn hpdi(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if draws.len() < MIN_HPDI_DRAWS {
        return Err(Error::Usage(format!(
            "HPDI needs at least {MIN_HPDI_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    if draws.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN among draws".into()));
    }
    Ok(shortest_window(&sorted(draws), level))
}

/// Central interval with `(1 − level)/2` in each tail.
pub fn equal_tail(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if draws.is_empty() {
        return Err(Error::Usage("no draws".into()));
    }
    let s = sorted(draws);
    Ok((quantile_sorted(&s, (1.0 - level) / 2.0), quantile_sorted(&s, (1.0 + level) / 2.0)))
}

/// Fraction of aligned draw pairs with `a > b`, counting ties as one half.
pub fn prob_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("draw counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Usage("no draws".into()));
    }
    let score: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 })
        .sum();
    Ok(score / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub q_low: f64,
    pub median: f64,
    pub q_high: f64,
    pub hpdi_low: f64,
    pub hpdi_high: f64,
    /// Whether the HPDI excludes zero.
    pub excludes_zero: bool,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub level: f64,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }
}

/// Summarizes one parameter's pooled draws.
pub fn summarize_column(parameter: &str, draws: &[f64], level: f64) -> Result<SummaryRow> {
    let (hpdi_low, hpdi_high) = hpdi(draws, level)?;
    let s = sorted(draws);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(SummaryRow {
        parameter: parameter.to_string(),
        mean,
        sd,
        q_low: quantile_sorted(&s, (1.0 - level) / 2.0),
        median: quantile_sorted(&s, 0.5),
        q_high: quantile_sorted(&s, (1.0 + level) / 2.0),
        hpdi_low,
        hpdi_high,
        excludes_zero: !(hpdi_low <= 0.0 && 0.0 <= hpdi_high),
        rhat: None,
        ess: None,
    })
}

/// One row per parameter with quantiles, HPDI, R̂ and ESS.
pub fn summarize(draws: &PosteriorDraws, level: f64) -> Result<SummaryTable> {
    check_level(level)?;
    let rows = (0..draws.n_params())
        .map(|j| {
            let mut row = summarize_column(&draws.names[j], &draws.pooled(j), level)?;
            row.rhat = draws.rhat(j).map(|r| r.value);
            row.ess = draws.ess(j);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SummaryTable { level, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectVariable {
    Turbidity,
    Marsh,
}

impl EffectVariable {
    pub fn name(self) -> &'static str {
        match self {
            EffectVariable::Turbidity => TURBIDITY,
            EffectVariable::Marsh => MARSH,
        }
    }

    /// The covariate held at its percentiles while this one varies.
    pub fn conditioning(self) -> EffectVariable {
        match self {
            EffectVariable::Turbidity => EffectVariable::Marsh,
            EffectVariable::Marsh => EffectVariable::Turbidity,
        }
    }
}

impl fmt::Display for EffectVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EffectVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "turbidity" => Ok(EffectVariable::Turbidity),
            "marsh" => Ok(EffectVariable::Marsh),
            _ => Err(Error::Usage(format!("cannot vary '{s}'; expected turbidity or marsh"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsConfig {
    pub vary: EffectVariable,
    /// Percentiles (0–100) of the conditioning covariate.
    pub percentiles: Vec<f64>,
    /// Grid points of the varying covariate; empty means evenly spaced over
    /// its observed range.
    pub grid: Vec<f64>,
    pub grid_size: usize,
    pub log_offset: f64,
    pub include_intercept: bool,
    pub level: f64,
}

impl EffectsConfig {
    pub fn new(vary: EffectVariable) -> Self {
        EffectsConfig {
            vary,
            percentiles: vec![1.0, 20.0, 40.0, 60.0, 80.0, 99.0],
            grid: Vec::new(),
            grid_size: 50,
            log_offset: 1000f64.ln(),
            include_intercept: false,
            level: DEFAULT_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsRow {
    pub percentile: f64,
    pub conditioning_value: f64,
    pub x: f64,
    pub median: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsTable {
    pub vary: EffectVariable,
    pub rows: Vec<EffectsRow>,
}

/// Coefficients entering the conditional mean, one set per draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectCoefficients {
    pub intercept: f64,
    pub turbidity: f64,
    pub marsh: f64,
    pub interaction: f64,
    pub management: f64,
}

impl EffectCoefficients {
    /// `ln μ_cond` at the given turbidity and marsh values, with the other
    /// continuous covariates at 0, the baseline group and management on.
    pub fn log_mu(&self, turbidity: f64, marsh: f64, log_offset: f64, include_intercept: bool) -> f64 {
        let b0 = if include_intercept { self.intercept } else { 0.0 };
        b0 + turbidity * self.turbidity + marsh * self.marsh + marsh * turbidity * self.interaction
            + self.management
            + log_offset
    }
}

/// Extracts per-draw effect coefficients by covariate name.
pub fn effect_coefficients(draws: &PosteriorDraws) -> Result<Vec<EffectCoefficients>> {
    let col = |name: &str| draws.pooled_by_name(&format!("beta_{name}"));
    let b0 = draws.pooled_by_name("beta_intercept")?;
    let bt = col(TURBIDITY)?;
    let bm = col(MARSH)?;
    let bx = col(MARSH_X_TURBIDITY)?;
    let bman = col(MANAGEMENT)?;
    Ok((0..b0.len())
        .map(|i| EffectCoefficients {
            intercept: b0[i],
            turbidity: bt[i],
            marsh: bm[i],
            interaction: bx[i],
            management: bman[i],
        })
        .collect())
}

/// Observed values of a named covariate.
fn observed_covariate(dataset: &Dataset, name: &str) -> Result<Vec<f64>> {
    let j = dataset
        .covariate_index(name)
        .ok_or_else(|| Error::Usage(format!("covariate '{name}' not in the model")))?;
    Ok((0..dataset.n_cells())
        .filter(|&c| dataset.is_observed(c))
        .map(|c| dataset.covariates(c)[j])
        .collect())
}

/// Pointwise median and HPDI band of `exp(ln μ_cond)` over a grid of the
/// varying covariate, for each conditioning percentile.
pub fn conditional_effects(
    coefficients: &[EffectCoefficients],
    dataset: &Dataset,
    config: &EffectsConfig,
) -> Result<EffectsTable> {
    check_level(config.level)?;
    if coefficients.is_empty() {
        return Err(Error::Usage("no draws".into()));
    }
    let varying = sorted(&observed_covariate(dataset, config.vary.name())?);
    let conditioning = sorted(&observed_covariate(dataset, config.vary.conditioning().name())?);
    if varying.is_empty() {
        return Err(Error::Data("no observed cells".into()));
    }
    let grid = if config.grid.is_empty() {
        let (lo, hi) = (varying[0], varying[varying.len() - 1]);
        let n = config.grid_size.max(2);
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    } else {
        config.grid.clone()
    };
    let mut rows = Vec::with_capacity(grid.len() * config.percentiles.len());
    let mut values = vec![0.0; coefficients.len()];
    for &pct in &config.percentiles {
        if !(0.0..=100.0).contains(&pct) {
            return Err(Error::domain("percentile", pct, "[0, 100]"));
        }
        let c = quantile_sorted(&conditioning, pct / 100.0);
        for &x in &grid {
            let (turb, marsh) = match config.vary {
                EffectVariable::Turbidity => (x, c),
                EffectVariable::Marsh => (c, x),
            };
            for (v, b) in values.iter_mut().zip(coefficients) {
                *v = b.log_mu(turb, marsh, config.log_offset, config.include_intercept).exp();
            }
            let s = sorted(&values);
            let (low, high) = shortest_window(&s, config.level);
            rows.push(EffectsRow { percentile: pct, conditioning_value: c, x, median: quantile_sorted(&s, 0.5), low, high });
        }
    }
    Ok(EffectsTable { vary: config.vary, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub section: String,
    pub group: String,
    pub n_years: usize,
    pub median: f64,
    pub hpdi_low: f64,
    pub hpdi_high: f64,
    /// Median standardized to mean 0, sd 1 within the section's group.
    pub standardized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub first_year: i32,
    pub last_year: i32,
    pub level: f64,
    pub rows: Vec<AggregateRow>,
}

/// Per-draw `μ̄_k` for each section from the grand means of covariates,
/// offsets and Φ over the observed years of the window. Sections without
/// observed years are `None`.
pub fn aggregate_draws(draws: &PosteriorDraws, dataset: &Dataset, first_year: i32, last_year: i32) -> Result<Vec<Option<Vec<f64>>>> {
    if draws.spec.variant != ModelVariant::M4 {
        return Err(Error::Structure(format!(
            "aggregation needs section-year effects (M4), got {}",
            draws.spec.variant
        )));
    }
    let (Some(t0), Some(t1)) = (dataset.year_index(first_year), dataset.year_index(last_year)) else {
        return Err(Error::Usage(format!("year window {first_year}..={last_year} outside the data")));
    };
    if t0 > t1 {
        return Err(Error::Usage(format!("empty year window {first_year}..={last_year}")));
    }
    let layout = &draws.layout;
    let kk = dataset.n_sections();
    let p = dataset.n_covariates();
    let mut out = Vec::with_capacity(kk);
    for k in 0..kk {
        let years: Vec<usize> = (t0..=t1).filter(|&t| dataset.is_observed(dataset.cell(k, t))).collect();
        if years.is_empty() {
            log::warn!("section {} has no observed years in {first_year}..={last_year}; excluded", dataset.graph.ids()[k]);
            out.push(None);
            continue;
        }
        let nt = years.len() as f64;
        let mut x_bar = vec![0.0; p];
        let mut o_bar = 0.0;
        for &t in &years {
            let c = dataset.cell(k, t);
            for (a, x) in x_bar.iter_mut().zip(dataset.covariates(c)) {
                *a += x / nt;
            }
            o_bar += dataset.offsets[c] / nt;
        }
        let mut mu = Vec::with_capacity(draws.n_total());
        for chain in &draws.chains {
            for i in 0..chain.n_draws() {
                let d = chain.draw(i);
                let beta = &d[layout.beta.clone()];
                let phi = &d[layout.phi.clone()];
                let phi_bar = years.iter().map(|&t| phi[t * kk + k]).sum::<f64>() / nt;
                let eta = beta[0] + beta[1..].iter().zip(&x_bar).map(|(b, x)| b * x).sum::<f64>();
                mu.push((eta + o_bar + phi_bar).exp());
            }
        }
        out.push(Some(mu));
    }
    Ok(out)
}

/// Pseudo-posterior of the inter-annual mean abundance per section.
pub fn aggregate_pseudo_posterior(
    draws: &PosteriorDraws,
    dataset: &Dataset,
    first_year: i32,
    last_year: i32,
    level: f64,
) -> Result<AggregateTable> {
    check_level(level)?;
    let per_section = aggregate_draws(draws, dataset, first_year, last_year)?;
    let g = &dataset.graph;
    let mut rows = Vec::new();
    for (k, mu) in per_section.iter().enumerate() {
        let Some(mu) = mu else { continue };
        let s = sorted(mu);
        let (lo, hi) = shortest_window(&s, level);
        let n_years = (dataset.year_index(first_year).unwrap()..=dataset.year_index(last_year).unwrap())
            .filter(|&t| dataset.is_observed(dataset.cell(k, t)))
            .count();
        rows.push(AggregateRow {
            section: g.ids()[k].clone(),
            group: g.group_labels()[g.group_of(k)].clone(),
            n_years,
            median: quantile_sorted(&s, 0.5),
            hpdi_low: lo,
            hpdi_high: hi,
            standardized: 0.0,
        });
    }
    for label in g.group_labels() {
        let idx: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| &r.group == label).map(|(i, _)| i).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| rows[i].median).collect();
        for (&i, z) in idx.iter().zip(standardize(&vals)) {
            rows[i].standardized = z;
        }
    }
    Ok(AggregateTable { first_year, last_year, level, rows })
}

/// Z-scores with the sample standard deviation; all zero when undefined.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return vec![0.0; x.len()];
    }
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - m) / sd).collect()
}
