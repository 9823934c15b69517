//! The five model variants for areal Poisson counts.
//!
//! All variants share the data level
//!
//! ```text
//! Y_kt ~ Poisson(μ_kt),  ln μ_kt = x_kt·β + O_kt + (random effect)
//! ```
//!
//! and differ in the random-effect term:
//!
//! | variant | term            | process                                         |
//! |---------|-----------------|-------------------------------------------------|
//! | M1      | θ_k             | iid N(0, σ²_θ)                                  |
//! | M2      | Φ_k             | proper CAR, Σ = σ²_Φ (D − λW)⁻¹                 |
//! | M3a     | Φ_k + η_t       | CAR + global AR(1) with ρ                       |
//! | M3b     | Φ_k + η_{g(k)t} | CAR + per-group AR(1), logit ρ_g = logit P + r_g |
//! | M4      | Φ_kt            | Φ_1 CAR, Φ_t ~ MVN(ρ Φ_{t−1}, Σ)                |
//!
//! AR(1) series start at their innovation distribution: `η_1 ~ N(0, σ²_η)` and
//! `Φ_1 ~ MVN(0, Σ)`.
//!
//! Poisson log-factorial terms are dropped throughout: every log density here
//! is `Σ (Y ln μ − μ)` plus the prior terms, which differs from the full
//! log-likelihood by the parameter-free constant `−Σ ln Y!`.

mod density;
mod prior;

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::ArealGraph;

pub use density::Target;
pub use prior::{sample_effects, sample_prior};

/// Serialized as `M1` .. `M4`; parsed from `1`, `3a`, `M4` and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelVariant {
    M1,
    M2,
    M3a,
    M3b,
    M4,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::M1,
        ModelVariant::M2,
        ModelVariant::M3a,
        ModelVariant::M3b,
        ModelVariant::M4,
    ];

    /// Short label used on the command line: `1`, `2`, `3a`, `3b`, `4`.
    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::M1 => "1",
            ModelVariant::M2 => "2",
            ModelVariant::M3a => "3a",
            ModelVariant::M3b => "3b",
            ModelVariant::M4 => "4",
        }
    }

    fn has_car(self) -> bool {
        !matches!(self, ModelVariant::M1)
    }

    fn has_eta(self) -> bool {
        matches!(self, ModelVariant::M3a | ModelVariant::M3b)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.label())
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches(['M', 'm']);
        match t.to_ascii_lowercase().as_str() {
            "1" => Ok(ModelVariant::M1),
            "2" => Ok(ModelVariant::M2),
            "3a" => Ok(ModelVariant::M3a),
            "3b" => Ok(ModelVariant::M3b),
            "4" => Ok(ModelVariant::M4),
            _ => Err(Error::Usage(format!(
                "unknown model '{s}' (expected 1, 2, 3a, 3b or 4)"
            ))),
        }
    }
}

/// Prior hyperparameters. Normal second parameters are variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    /// β_i ~ N(0, beta_variance).
    pub beta_variance: f64,
    /// Variances ~ inverse-Gamma(shape, scale).
    pub inv_gamma_shape: f64,
    pub inv_gamma_scale: f64,
    /// Free group offsets r_g ~ N(0, offset_variance).
    pub offset_variance: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            beta_variance: 100.0,
            inv_gamma_shape: 1.0,
            inv_gamma_scale: 1.0,
            offset_variance: 0.25,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_variance", self.beta_variance),
            ("inv_gamma_shape", self.inv_gamma_shape),
            ("inv_gamma_scale", self.inv_gamma_scale),
            ("offset_variance", self.offset_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(name, v, "(0, inf)"));
            }
        }
        Ok(())
    }
}

/// How random effects are stored on the unconstrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Effects sampled directly.
    Centered,
    /// Effects sampled as `effect / σ`, which removes the funnel between a
    /// variance and its effects when the data are weak.
    #[default]
    NonCentered,
    /// The spatial effects are sampled shifted by the fixed part, averaged
    /// over the cells each effect enters. Suits large counts, where the data
    /// pin down the sum of the two better than either term.
    Shifted,
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "centered" => Ok(Parameterization::Centered),
            "noncentered" => Ok(Parameterization::NonCentered),
            "shifted" => Ok(Parameterization::Shifted),
            _ => Err(Error::Usage(format!("unknown parameterization '{s}'"))),
        }
    }
}

impl Parameterization {
    /// Mean observed count at or above which [`Parameterization::Shifted`] is
    /// suggested.
    pub const LARGE_COUNT: f64 = 10.0;

    /// Picks from the data alone: shifted for large counts, otherwise
    /// non-centered. The posterior is the same either way.
    pub fn suggest(dataset: &Dataset) -> Self {
        let n = dataset.n_observed();
        let total: f64 = dataset.counts.iter().flatten().map(|&c| c as f64).sum();
        if n > 0 && total / n as f64 >= Self::LARGE_COUNT {
            Parameterization::Shifted
        } else {
            Parameterization::NonCentered
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub priors: Priors,
    pub parameterization: Parameterization,
    /// Multiplies every expected count in the likelihood. Only `1.0` gives the
    /// model as stated; other values produce a deliberately misspecified
    /// likelihood for calibration negative controls.
    pub rate_scale: f64,
}

impl ModelSpec {
    pub fn new(variant: ModelVariant) -> Self {
        ModelSpec {
            variant,
            priors: Priors::default(),
            parameterization: Parameterization::default(),
            rate_scale: 1.0,
        }
    }

    pub fn with_priors(mut self, priors: Priors) -> Self {
        self.priors = priors;
        self
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        if !(self.rate_scale > 0.0 && self.rate_scale.is_finite()) {
            return Err(Error::domain("rate_scale", self.rate_scale, "(0, inf)"));
        }
        Ok(())
    }
}

/// Positions of each parameter block in the flat parameter vector.
///
/// Block order: β, σ²_θ, σ²_Φ, σ²_η, λ, ρ, P, r, θ, Φ, η. Absent blocks are
/// empty. Φ in M4 and η in M3b are stored year-major and group-major
/// respectively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub variant: ModelVariant,
    pub n_sections: usize,
    pub n_years: usize,
    pub n_groups: usize,
    pub beta: Range<usize>,
    pub sigma2_theta: Option<usize>,
    pub sigma2_phi: Option<usize>,
    pub sigma2_eta: Option<usize>,
    pub lambda: Option<usize>,
    pub rho: Option<usize>,
    pub p_global: Option<usize>,
    pub r: Range<usize>,
    pub theta: Range<usize>,
    pub phi: Range<usize>,
    pub eta: Range<usize>,
    pub dim: usize,
}

impl ParamLayout {
    pub fn new(
        variant: ModelVariant,
        n_beta: usize,
        n_sections: usize,
        n_years: usize,
        n_groups: usize,
    ) -> Self {
        use ModelVariant::*;
        let mut next = 0usize;
        let mut block = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let scalar = |present: bool, block: &mut dyn FnMut(usize) -> Range<usize>| {
            present.then(|| block(1).start)
        };
        let beta = block(n_beta);
        let sigma2_theta = scalar(variant == M1, &mut block);
        let sigma2_phi = scalar(variant.has_car(), &mut block);
        let sigma2_eta = scalar(variant.has_eta(), &mut block);
        let lambda = scalar(variant.has_car(), &mut block);
        let rho = scalar(matches!(variant, M3a | M4), &mut block);
        let p_global = scalar(variant == M3b, &mut block);
        let r = block(if variant == M3b { n_groups.saturating_sub(1) } else { 0 });
        let theta = block(if variant == M1 { n_sections } else { 0 });
        let phi = block(match variant {
            M1 => 0,
            M2 | M3a | M3b => n_sections,
            M4 => n_sections * n_years,
        });
        let eta = block(match variant {
            M3a => n_years,
            M3b => n_groups * n_years,
            _ => 0,
        });
        ParamLayout {
            variant,
            n_sections,
            n_years,
            n_groups,
            beta,
            sigma2_theta,
            sigma2_phi,
            sigma2_eta,
            lambda,
            rho,
            p_global,
            r,
            theta,
            phi,
            eta,
            dim: next,
        }
    }

    pub fn for_dataset(variant: ModelVariant, ds: &Dataset) -> Self {
        ParamLayout::new(
            variant,
            ds.n_covariates() + 1,
            ds.n_sections(),
            ds.n_years,
            ds.graph.n_groups(),
        )
    }

    pub fn n_beta(&self) -> usize {
        self.beta.len()
    }

    /// Number of leading non-random-effect parameters.
    pub fn n_scalar(&self) -> usize {
        self.theta.start
    }

    /// Parameter names, in layout order.
    pub fn names(&self, ds: &Dataset) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim);
        names.push("beta_intercept".to_string());
        names.extend(ds.covariate_names.iter().map(|c| format!("beta_{c}")));
        let scalars = [
            (self.sigma2_theta, "sigma2_theta"),
            (self.sigma2_phi, "sigma2_phi"),
            (self.sigma2_eta, "sigma2_eta"),
            (self.lambda, "lambda"),
            (self.rho, "rho"),
            (self.p_global, "P"),
        ];
        for (slot, name) in scalars {
            if slot.is_some() {
                names.push(name.to_string());
            }
        }
        names.extend((0..self.r.len()).map(|g| format!("r_{}", g + 1)));
        let ids = ds.graph.ids();
        names.extend(self.theta.clone().map(|i| format!("theta_{}", ids[i - self.theta.start])));
        for i in 0..self.phi.len() {
            if self.variant == ModelVariant::M4 {
                let (t, k) = (i / self.n_sections, i % self.n_sections);
                names.push(format!("phi_{}_{}", ids[k], ds.year_of(t)));
            } else {
                names.push(format!("phi_{}", ids[i]));
            }
        }
        for i in 0..self.eta.len() {
            if self.variant == ModelVariant::M3b {
                let (g, t) = (i / self.n_years, i % self.n_years);
                names.push(format!("eta_{}_{}", ds.graph.group_labels()[g], ds.year_of(t)));
            } else {
                names.push(format!("eta_{}", ds.year_of(i)));
            }
        }
        debug_assert_eq!(names.len(), self.dim);
        names
    }
}

/// Model parameters on their natural (constrained) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub variant: ModelVariant,
    /// Intercept first, then one coefficient per covariate.
    pub beta: Vec<f64>,
    pub sigma2_theta: Option<f64>,
    pub sigma2_phi: Option<f64>,
    pub sigma2_eta: Option<f64>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    /// Global temporal autocorrelation `P` (M3b).
    pub p_global: Option<f64>,
    /// Free group offsets `r_1 .. r_{G−1}`; `r_G = −Σ r_g`.
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub eta: Vec<f64>,
}

impl Parameters {
    /// All offsets including the constrained last one.
    pub fn r_full(&self) -> Vec<f64> {
        let mut r = self.r.clone();
        r.push(-self.r.iter().sum::<f64>());
        r
    }

    /// Per-group temporal autocorrelations `ρ_g = logistic(logit P + r_g)` (M3b).
    pub fn rho_groups(&self) -> Vec<f64> {
        let lp = logit(self.p_global.unwrap_or(0.5));
        self.r_full().iter().map(|r| logistic(lp + r)).collect()
    }

    pub fn check(&self, layout: &ParamLayout) -> Result<()> {
        let mismatch = |what: &str, want: usize, got: usize| {
            Error::Structure(format!(
                "{}: {what} has length {got}, layout expects {want}",
                self.variant
            ))
        };
        if self.variant != layout.variant {
            return Err(Error::Structure(format!(
                "parameters for {} used with a {} layout",
                self.variant, layout.variant
            )));
        }
        for (what, want, got) in [
            ("beta", layout.beta.len(), self.beta.len()),
            ("r", layout.r.len(), self.r.len()),
            ("theta", layout.theta.len(), self.theta.len()),
            ("phi", layout.phi.len(), self.phi.len()),
            ("eta", layout.eta.len(), self.eta.len()),
        ] {
            if want != got {
                return Err(mismatch(what, want, got));
            }
        }
        for (what, want, got) in [
            ("sigma2_theta", layout.sigma2_theta, self.sigma2_theta),
            ("sigma2_phi", layout.sigma2_phi, self.sigma2_phi),
            ("sigma2_eta", layout.sigma2_eta, self.sigma2_eta),
            ("lambda", layout.lambda, self.lambda),
            ("rho", layout.rho, self.rho),
            ("P", layout.p_global, self.p_global),
        ] {
            if want.is_some() != got.is_some() {
                return Err(Error::Structure(format!(
                    "{}: {what} {} but the layout {} it",
                    self.variant,
                    if got.is_some() { "given" } else { "missing" },
                    if want.is_some() { "requires" } else { "has no slot for" }
                )));
            }
        }
        Ok(())
    }

    /// True when every constrained parameter lies in its domain.
    pub fn in_domain(&self) -> bool {
        let pos = |v: Option<f64>| v.is_none_or(|x| x > 0.0 && x.is_finite());
        let unit = |v: Option<f64>| v.is_none_or(|x| (0.0..1.0).contains(&x));
        let open_unit = |v: Option<f64>| v.is_none_or(|x| x > 0.0 && x < 1.0);
        pos(self.sigma2_theta)
            && pos(self.sigma2_phi)
            && pos(self.sigma2_eta)
            && unit(self.lambda)
            && unit(self.rho)
            && open_unit(self.p_global)
            && self
                .beta
                .iter()
                .chain(&self.r)
                .chain(&self.theta)
                .chain(&self.phi)
                .chain(&self.eta)
                .all(|x| x.is_finite())
    }

    /// Flattens into layout order (constrained scale).
    pub fn to_flat(&self, layout: &ParamLayout) -> Result<Vec<f64>> {
        self.check(layout)?;
        let mut v = vec![0.0; layout.dim];
        v[layout.beta.clone()].copy_from_slice(&self.beta);
        let scalars = [
            (layout.sigma2_theta, self.sigma2_theta),
            (layout.sigma2_phi, self.sigma2_phi),
            (layout.sigma2_eta, self.sigma2_eta),
            (layout.lambda, self.lambda),
            (layout.rho, self.rho),
            (layout.p_global, self.p_global),
        ];
        for (slot, value) in scalars {
            if let (Some(i), Some(x)) = (slot, value) {
                v[i] = x;
            }
        }
        v[layout.r.clone()].copy_from_slice(&self.r);
        v[layout.theta.clone()].copy_from_slice(&self.theta);
        v[layout.phi.clone()].copy_from_slice(&self.phi);
        v[layout.eta.clone()].copy_from_slice(&self.eta);
        Ok(v)
    }

    pub fn from_flat(layout: &ParamLayout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.dim {
            return Err(Error::Structure(format!(
                "flat vector of length {} for a layout of dimension {}",
                v.len(),
                layout.dim
            )));
        }
        let get = |slot: Option<usize>| slot.map(|i| v[i]);
        Ok(Parameters {
            variant: layout.variant,
            beta: v[layout.beta.clone()].to_vec(),
            sigma2_theta: get(layout.sigma2_theta),
            sigma2_phi: get(layout.sigma2_phi),
            sigma2_eta: get(layout.sigma2_eta),
            lambda: get(layout.lambda),
            rho: get(layout.rho),
            p_global: get(layout.p_global),
            r: v[layout.r.clone()].to_vec(),
            theta: v[layout.theta.clone()].to_vec(),
            phi: v[layout.phi.clone()].to_vec(),
            eta: v[layout.eta.clone()].to_vec(),
        })
    }

    /// Maps to the unconstrained sampling space: log for variances, logit for
    /// λ, ρ and P, and `effect / σ` for random effects when non-centered.
    ///
    /// The shifted parameterization depends on the data; use
    /// [`Target::unconstrain`] for it.
    pub fn unconstrain(&self, spec: &ModelSpec, layout: &ParamLayout) -> Result<Vec<f64>> {
        if spec.parameterization == Parameterization::Shifted {
            return Err(needs_dataset());
        }
        if !self.in_domain() {
            return Err(Error::Structure(format!("{} parameters outside their domain", self.variant)));
        }
        let mut u = self.to_flat(layout)?;
        for i in [layout.sigma2_theta, layout.sigma2_phi, layout.sigma2_eta].into_iter().flatten() {
            u[i] = u[i].ln();
        }
        for i in [layout.lambda, layout.rho, layout.p_global].into_iter().flatten() {
            u[i] = logit(u[i]);
        }
        if spec.parameterization == Parameterization::NonCentered {
            for (range, var) in effect_blocks(layout, self) {
                let sd = var.sqrt();
                for x in &mut u[range] {
                    *x /= sd;
                }
            }
        }
        Ok(u)
    }

    /// Inverse of [`Parameters::unconstrain`].
    pub fn constrain(spec: &ModelSpec, layout: &ParamLayout, u: &[f64]) -> Result<Self> {
        if spec.parameterization == Parameterization::Shifted {
            return Err(needs_dataset());
        }
        let mut v = u.to_vec();
        for i in [layout.sigma2_theta, layout.sigma2_phi, layout.sigma2_eta].into_iter().flatten() {
            v[i] = v[i].exp();
        }
        for i in [layout.lambda, layout.rho, layout.p_global].into_iter().flatten() {
            v[i] = logistic(v[i]);
        }
        let mut params = Parameters::from_flat(layout, &v)?;
        if spec.parameterization == Parameterization::NonCentered {
            let mut flat = v;
            for (range, var) in effect_blocks(layout, &params) {
                let sd = var.sqrt();
                for x in &mut flat[range] {
                    *x *= sd;
                }
            }
            params = Parameters::from_flat(layout, &flat)?;
        }
        Ok(params)
    }
}

fn needs_dataset() -> Error {
    Error::Usage("the shifted parameterization needs the dataset; go through Target".into())
}

/// `ln |det J|` of the map from unconstrained `u` to natural parameters.
pub fn log_abs_det_jacobian(spec: &ModelSpec, layout: &ParamLayout, u: &[f64]) -> f64 {
    let mut lj = 0.0;
    for i in [layout.sigma2_theta, layout.sigma2_phi, layout.sigma2_eta].into_iter().flatten() {
        lj += u[i];
    }
    for i in [layout.lambda, layout.rho, layout.p_global].into_iter().flatten() {
        lj += log_logistic(u[i]) + log_logistic(-u[i]);
    }
    if spec.parameterization == Parameterization::NonCentered {
        let pairs = [
            (layout.theta.len(), layout.sigma2_theta),
            (layout.phi.len(), layout.sigma2_phi),
            (layout.eta.len(), layout.sigma2_eta),
        ];
        for (n, slot) in pairs {
            if let Some(i) = slot {
                lj += 0.5 * n as f64 * u[i];
            }
        }
    }
    lj
}

/// Random-effect blocks and their variances.
fn effect_blocks(layout: &ParamLayout, p: &Parameters) -> Vec<(Range<usize>, f64)> {
    let mut out = Vec::new();
    if let Some(s) = p.sigma2_theta {
        out.push((layout.theta.clone(), s));
    }
    if let Some(s) = p.sigma2_phi {
        out.push((layout.phi.clone(), s));
    }
    if let Some(s) = p.sigma2_eta {
        out.push((layout.eta.clone(), s));
    }
    out
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln logistic(x)`, stable for large `|x|`.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Random-effect contribution to `ln μ_kt` (zero-based section and year).
pub fn random_effect(params: &Parameters, graph: &ArealGraph, k: usize, t: usize) -> f64 {
    let kk = graph.n_sections();
    match params.variant {
        ModelVariant::M1 => params.theta[k],
        ModelVariant::M2 => params.phi[k],
        ModelVariant::M3a => params.phi[k] + params.eta[t],
        ModelVariant::M3b => {
            let years = params.eta.len() / graph.n_groups();
            params.phi[k] + params.eta[graph.group_of(k) * years + t]
        }
        ModelVariant::M4 => params.phi[t * kk + k],
    }
}

/// `ln μ_kt` for section `k` and year `t` (both zero-based).
pub fn linear_predictor(params: &Parameters, dataset: &Dataset, k: usize, t: usize) -> Result<f64> {
    params.check(&ParamLayout::for_dataset(params.variant, dataset))?;
    if k >= dataset.n_sections() || t >= dataset.n_years {
        return Err(Error::Structure(format!("cell ({k}, {t}) outside the lattice")));
    }
    let cell = dataset.cell(k, t);
    Ok(fixed_part(&params.beta, dataset.covariates(cell)) + dataset.offsets[cell]
        + random_effect(params, &dataset.graph, k, t))
}

/// `β_0 + Σ_i x_i β_{i+1}`.
pub fn fixed_part(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// Components of the unnormalized log posterior on the natural scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogJointParts {
    /// `Σ_observed (Y ln μ − μ)`.
    pub likelihood: f64,
    pub beta_prior: f64,
    /// Density of the random effects given their hyperparameters.
    pub random_effects: f64,
    /// Priors on variances, autocorrelations and group offsets.
    pub hyperpriors: f64,
}

impl LogJointParts {
    pub fn total(&self) -> f64 {
        self.likelihood + self.beta_prior + self.random_effects + self.hyperpriors
    }
}

/// Unnormalized log posterior at natural-scale parameters. Returns `−∞` for
/// parameters outside their domain.
pub fn log_joint(params: &Parameters, dataset: &Dataset, spec: &ModelSpec) -> Result<f64> {
    Ok(log_joint_parts(params, dataset, spec)?.total())
}

/// [`log_joint`] broken into its components.
///
/// This is a direct evaluation of the model equations and is kept separate
/// from [`Target`], whose gradient code it cross-checks.
pub fn log_joint_parts(params: &Parameters, dataset: &Dataset, spec: &ModelSpec) -> Result<LogJointParts> {
    if params.variant != spec.variant {
        return Err(Error::Structure(format!(
            "parameters for {} evaluated under {}",
            params.variant, spec.variant
        )));
    }
    let layout = ParamLayout::for_dataset(spec.variant, dataset);
    params.check(&layout)?;
    if !params.in_domain() {
        return Ok(LogJointParts {
            likelihood: f64::NEG_INFINITY,
            beta_prior: 0.0,
            random_effects: 0.0,
            hyperpriors: 0.0,
        });
    }
    let g = &dataset.graph;
    let kk = g.n_sections();
    let tt = dataset.n_years;
    let ln_scale = spec.rate_scale.ln();

    let mut likelihood = 0.0;
    for t in 0..tt {
        for k in 0..kk {
            let cell = dataset.cell(k, t);
            if let Some(y) = dataset.counts[cell] {
                let eta = fixed_part(&params.beta, dataset.covariates(cell))
                    + dataset.offsets[cell]
                    + random_effect(params, g, k, t)
                    + ln_scale;
                likelihood += y as f64 * eta - eta.exp();
            }
        }
    }

    let pr = &spec.priors;
    let beta_prior: f64 = params.beta.iter().map(|b| normal_logpdf(*b, pr.beta_variance)).sum();

    let mut random_effects = 0.0;
    let mut hyperpriors = 0.0;
    for s in [params.sigma2_theta, params.sigma2_phi, params.sigma2_eta].into_iter().flatten() {
        hyperpriors += inv_gamma_logpdf(s, pr.inv_gamma_shape, pr.inv_gamma_scale);
    }
    // λ, ρ, P ~ U(0, 1) contribute ln 1 = 0.
    hyperpriors += params.r.iter().map(|r| normal_logpdf(*r, pr.offset_variance)).sum::<f64>();

    let lambda = params.lambda.unwrap_or(0.0);
    match params.variant {
        ModelVariant::M1 => {
            let s = params.sigma2_theta.unwrap();
            random_effects += params.theta.iter().map(|x| normal_logpdf(*x, s)).sum::<f64>();
        }
        ModelVariant::M2 => {
            random_effects += car_logpdf(g, &params.phi, None, lambda, params.sigma2_phi.unwrap())?;
        }
        ModelVariant::M3a => {
            random_effects += car_logpdf(g, &params.phi, None, lambda, params.sigma2_phi.unwrap())?;
            random_effects += ar1_logpdf(&params.eta, params.rho.unwrap(), params.sigma2_eta.unwrap());
        }
        ModelVariant::M3b => {
            random_effects += car_logpdf(g, &params.phi, None, lambda, params.sigma2_phi.unwrap())?;
            let s = params.sigma2_eta.unwrap();
            for (gi, rho) in params.rho_groups().into_iter().enumerate() {
                random_effects += ar1_logpdf(&params.eta[gi * tt..(gi + 1) * tt], rho, s);
            }
        }
        ModelVariant::M4 => {
            let s = params.sigma2_phi.unwrap();
            let rho = params.rho.unwrap();
            for t in 0..tt {
                let cur = &params.phi[t * kk..(t + 1) * kk];
                let mean: Option<Vec<f64>> =
                    (t > 0).then(|| params.phi[(t - 1) * kk..t * kk].iter().map(|x| rho * x).collect());
                random_effects += car_logpdf(g, cur, mean.as_deref(), lambda, s)?;
            }
        }
    }
    Ok(LogJointParts {
        likelihood,
        beta_prior,
        random_effects,
        hyperpriors,
    })
}

pub(crate) fn normal_logpdf(x: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * PI * variance).ln() - x * x / (2.0 * variance)
}

pub(crate) fn inv_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - statrs::function::gamma::ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Log density of `x ~ MVN(mean, σ² (D − λW)⁻¹)` using the sparse precision.
fn car_logpdf(g: &ArealGraph, x: &[f64], mean: Option<&[f64]>, lambda: f64, sigma2: f64) -> Result<f64> {
    let q = crate::graph::car_precision(g, lambda, sigma2)?;
    let e: Vec<f64> = match mean {
        Some(m) => x.iter().zip(m).map(|(a, b)| a - b).collect(),
        None => x.to_vec(),
    };
    let mut quad = 0.0;
    for i in 0..e.len() {
        quad += e[i] * q.diag[i] * e[i];
        for &(j, v) in &q.rows[i] {
            quad += e[i] * v * e[j];
        }
    }
    let n = e.len() as f64;
    let log_det_q = crate::graph::log_det_precision(g, lambda)? - n * sigma2.ln();
    Ok(-0.5 * n * (2.0 * PI).ln() + 0.5 * log_det_q - 0.5 * quad)
}

/// `η_1 ~ N(0, σ²)`, `η_t ~ N(ρ η_{t−1}, σ²)`.
fn ar1_logpdf(eta: &[f64], rho: f64, sigma2: f64) -> f64 {
    eta.iter()
        .enumerate()
        .map(|(t, &x)| {
            let mean = if t == 0 { 0.0 } else { rho * eta[t - 1] };
            normal_logpdf(x - mean, sigma2)
        })
        .sum()
}
