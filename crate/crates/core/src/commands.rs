//! Run configuration and the commands of the `stcar` tool.
//!
//! A [`RunConfig`] starts from defaults, is optionally loaded from a JSON
//! file, and is then overridden by flags. The resolved config is hashed into
//! each run's manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MANAGEMENT_START_YEAR};
use crate::error::{Error, Result};
use crate::forecast::{run_lfo, IntervalMethod, LfoConfig};
use crate::io::{self, InputDigest, Manifest, RunInfo, Shape};
use crate::model::{ModelSpec, ModelVariant, Parameterization, Parameters, Priors};
use crate::parallel::Execution;
use crate::posterior::{
    aggregate_pseudo_posterior, conditional_effects, effect_coefficients, summarize, EffectVariable, EffectsConfig,
    DEFAULT_LEVEL,
};
use crate::sampler::{run_inference, SamplerConfig};
use crate::synth::{
    calibration_design, calibration_priors, reference_truth, sbc_run, simulate_dataset, CovariateRanges, Design, SbcConfig,
    SimConfig, Truth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Cv,
    Simulate,
    Sbc,
    Summarize,
    Effects,
    Aggregate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Cv => "cv",
            Command::Simulate => "simulate",
            Command::Sbc => "sbc",
            Command::Summarize => "summarize",
            Command::Effects => "effects",
            Command::Aggregate => "aggregate",
        }
    }
}

/// Simulation settings for `simulate` and `sbc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    /// Sections per tributary chain.
    pub groups: Vec<usize>,
    pub labels: Vec<String>,
    pub first_year: i32,
    pub years: usize,
    /// JSON file of true parameters; random effects left out are drawn from
    /// their process. Defaults to [`reference_truth`].
    pub truth: Option<PathBuf>,
    /// Draw every parameter from the prior instead.
    pub from_prior: bool,
    /// `(section index, year index)` cells to leave unobserved.
    pub missing: Vec<(usize, usize)>,
    pub ranges: CovariateRanges,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            groups: vec![14, 13, 10],
            labels: vec!["James".into(), "Rappahannock".into(), "York".into()],
            first_year: 1996,
            years: 21,
            truth: None,
            from_prior: false,
            missing: Vec::new(),
            ranges: CovariateRanges::default(),
        }
    }
}

/// Settings of `sbc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbcSettings {
    pub reps: usize,
    pub n_ranked: usize,
    pub n_bins: usize,
    pub rhat_threshold: f64,
    pub alpha: f64,
    /// Fits with the likelihood mean doubled, which calibration should reject.
    pub negative_control: bool,
    /// Default to [`calibration_priors`] and [`calibration_design`] rather
    /// than the run's priors and the standard schema.
    pub priors: Option<Priors>,
    pub design: Option<Design>,
}

impl Default for SbcSettings {
    fn default() -> Self {
        SbcSettings { reps: 100, n_ranked: 1023, n_bins: 8, rhat_threshold: 1.05, alpha: 0.01, negative_control: false, priors: None, design: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelVariant,
    /// Models compared by `cv`.
    pub models: Vec<ModelVariant>,
    /// `None` picks from the data with [`Parameterization::suggest`].
    pub parameterization: Option<Parameterization>,
    pub priors: Priors,
    pub records: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub sections: Option<PathBuf>,
    /// Subtract observed means from the continuous covariates.
    pub center_covariates: bool,
    pub out_dir: PathBuf,
    /// Output directory of an earlier `fit`, read by `summarize`, `effects`
    /// and `aggregate`. Defaults to `out_dir`.
    pub fit_dir: Option<PathBuf>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub parallel: bool,
    pub level: f64,
    pub interval: IntervalMethod,
    /// Defaults to the last year of the data.
    pub holdout_year: Option<i32>,
    pub vary: EffectVariable,
    pub percentiles: Vec<f64>,
    pub grid_size: usize,
    /// Add the intercept to conditional-effect curves.
    pub include_intercept: bool,
    /// Years averaged by `aggregate`; defaults to the management period.
    pub window: Option<(i32, i32)>,
    pub sim: SimSettings,
    pub sbc: SbcSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let effects = EffectsConfig::new(EffectVariable::Marsh);
        RunConfig {
            model: ModelVariant::M4,
            models: ModelVariant::ALL.to_vec(),
            parameterization: None,
            priors: Priors::default(),
            records: None,
            adjacency: None,
            sections: None,
            center_covariates: false,
            out_dir: PathBuf::from("stcar_out"),
            fit_dir: None,
            seed: 1,
            sampler: SamplerConfig::default(),
            parallel: true,
            level: DEFAULT_LEVEL,
            interval: IntervalMethod::default(),
            holdout_year: None,
            vary: effects.vary,
            percentiles: effects.percentiles,
            grid_size: effects.grid_size,
            include_intercept: effects.include_intercept,
            window: None,
            sim: SimSettings::default(),
            sbc: SbcSettings::default(),
        }
    }
}

impl RunConfig {
    /// Loads a JSON config; absent fields keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("invalid config {}: {e}", path.display())))
    }

    fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Sampler settings with the run seed and execution mode applied.
    pub fn sampler_config(&self) -> SamplerConfig {
        let mut s = self.sampler.clone().with_seed(self.seed);
        s.execution = self.execution();
        s
    }

    pub fn spec_for(&self, variant: ModelVariant, dataset: &Dataset) -> ModelSpec {
        let p = self.parameterization.unwrap_or_else(|| Parameterization::suggest(dataset));
        ModelSpec::new(variant).with_priors(self.priors).with_parameterization(p)
    }

    fn fit_dir(&self) -> &Path {
        self.fit_dir.as_deref().unwrap_or(&self.out_dir)
    }

    fn data_paths(&self) -> Result<[(&'static str, &Path); 3]> {
        let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
            let p = p.clone().ok_or_else(|| Error::Usage(format!("--{flag} is required")))?;
            if !p.is_file() {
                return Err(Error::Usage(format!("{} does not exist", p.display())));
            }
            Ok(p)
        };
        need(&self.records, "records")?;
        need(&self.adjacency, "adjacency")?;
        need(&self.sections, "sections")?;
        Ok([
            ("records", self.records.as_deref().unwrap()),
            ("adjacency", self.adjacency.as_deref().unwrap()),
            ("sections", self.sections.as_deref().unwrap()),
        ])
    }

    /// Reads the inputs and applies preprocessing.
    pub fn dataset(&self) -> Result<(Dataset, Vec<InputDigest>)> {
        let paths = self.data_paths()?;
        let mut ds = io::ingest(paths[0].1, paths[1].1, paths[2].1)?;
        if self.center_covariates {
            ds.center_continuous();
        }
        let digests = paths.iter().map(|(role, p)| io::digest_file(role, p)).collect::<Result<_>>()?;
        Ok((ds, digests))
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        self.sampler.validate()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Usage(format!("level {} must lie in (0, 1)", self.level)));
        }
        match command {
            Command::Fit | Command::Cv | Command::Effects | Command::Aggregate => {
                self.data_paths()?;
            }
            _ => {}
        }
        if command == Command::Cv {
            if self.models.is_empty() {
                return Err(Error::Usage("--models is empty".into()));
            }
        }
        if command == Command::Sbc && self.sbc.reps == 0 {
            return Err(Error::Usage("--reps must be positive".into()));
        }
        Ok(())
    }

    fn sim_config(&self, truth: Truth) -> SimConfig {
        SimConfig {
            variant: self.model,
            group_sizes: self.sim.groups.clone(),
            group_labels: self.sim.labels.clone(),
            first_year: self.sim.first_year,
            n_years: self.sim.years,
            design: Design::Standard(self.sim.ranges.clone()),
            truth,
            missing: self.sim.missing.clone(),
            seed: self.seed,
        }
    }
}

/// Runs a command and returns the files it wrote.
pub fn run(command: Command, config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate(command)?;
    fs::create_dir_all(&config.out_dir)?;
    match command {
        Command::Fit => fit(config),
        Command::Cv => cv(config),
        Command::Simulate => simulate(config),
        Command::Sbc => sbc(config),
        Command::Summarize => summarize_fit(config),
        Command::Effects => effects(config),
        Command::Aggregate => aggregate(config),
    }
}

fn fit(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (ds, inputs) = config.dataset()?;
    let spec = config.spec_for(config.model, &ds);
    log::info!("fitting {} ({:?}) with {} chains", spec.variant, spec.parameterization, config.sampler.n_chains);
    let sampler = config.sampler_config();
    let draws = run_inference(&spec, &ds, &sampler)?;
    let out = &config.out_dir;
    let mut written = io::write_chains(out, &draws)?;
    let manifest = Manifest::new(RunInfo::new("fit", config, inputs, config.seed)?, &draws, Shape::of(&ds));
    match manifest.max_rhat {
        Some(r) if r >= 1.01 => log::warn!("max R-hat {r:.4} is not below 1.01"),
        None if draws.n_chains() < 2 => log::warn!("R-hat needs at least two chains"),
        _ => {}
    }
    if draws.n_divergent() > 0 {
        log::warn!("{} divergent transitions", draws.n_divergent());
    }
    let path = out.join("manifest.json");
    io::write_json(&path, &manifest)?;
    written.push(path);
    let path = out.join("summary.csv");
    io::write_summary(&path, &summarize(&draws, config.level)?)?;
    written.push(path);
    Ok(written)
}

fn read_fit(config: &RunConfig) -> Result<(Manifest, crate::sampler::PosteriorDraws)> {
    let dir = config.fit_dir();
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::Usage(format!("no fit found in {} (missing manifest.json)", dir.display())));
    }
    let manifest = Manifest::read(&path)?;
    let draws = io::read_chains(dir, &manifest)?;
    Ok((manifest, draws))
}

fn summarize_fit(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (_, draws) = read_fit(config)?;
    let path = config.out_dir.join("summary.csv");
    io::write_summary(&path, &summarize(&draws, config.level)?)?;
    Ok(vec![path])
}

/// Checks that the dataset has the shape the fit was run on.
fn matching_dataset(config: &RunConfig, manifest: &Manifest) -> Result<Dataset> {
    let (ds, _) = config.dataset()?;
    if Shape::of(&ds) != manifest.shape {
        return Err(Error::Structure("data do not match the fit's dimensions".into()));
    }
    Ok(ds)
}

fn effects(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (manifest, draws) = read_fit(config)?;
    let ds = matching_dataset(config, &manifest)?;
    let ec = EffectsConfig {
        percentiles: config.percentiles.clone(),
        grid_size: config.grid_size,
        include_intercept: config.include_intercept,
        level: config.level,
        ..EffectsConfig::new(config.vary)
    };
    let table = conditional_effects(&effect_coefficients(&draws)?, &ds, &ec)?;
    let path = config.out_dir.join(format!("effects_{}.csv", config.vary.name()));
    io::write_effects(&path, &table)?;
    Ok(vec![path])
}

fn aggregate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (manifest, draws) = read_fit(config)?;
    let ds = matching_dataset(config, &manifest)?;
    let last = ds.year_of(ds.n_years - 1);
    // The management period, or every year if the data end before it.
    let start = if MANAGEMENT_START_YEAR <= last { MANAGEMENT_START_YEAR.max(ds.first_year) } else { ds.first_year };
    let (first, last) = config.window.unwrap_or((start, last));
    let table = aggregate_pseudo_posterior(&draws, &ds, first, last, config.level)?;
    let path = config.out_dir.join("aggregate.csv");
    io::write_aggregate(&path, &table)?;
    Ok(vec![path])
}

fn cv(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let (ds, inputs) = config.dataset()?;
    let holdout = config.holdout_year.unwrap_or_else(|| ds.year_of(ds.n_years - 1));
    let specs: Vec<ModelSpec> = config.models.iter().map(|&m| config.spec_for(m, &ds)).collect();
    let lfo = LfoConfig {
        sampler: config.sampler_config(),
        level: config.level,
        method: config.interval,
        execution: config.execution(),
    };
    let result = run_lfo(&specs, &ds, holdout, &lfo)?;
    if result.outcomes.iter().all(|o| o.report.is_none()) {
        return Err(Error::Sampler("every model failed to fit".into()));
    }
    io::write_cv(&config.out_dir, &result)?;
    let path = config.out_dir.join("manifest.json");
    io::write_json(&path, &RunInfo::new("cv", config, inputs, config.seed)?)?;
    Ok(vec![config.out_dir.join("cv_report.csv"), config.out_dir.join("cv_summary.json"), path])
}

fn simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let truth = match &config.sim.truth {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read truth {}: {e}", path.display())))?;
            let p: Parameters = serde_json::from_str(&text)?;
            inputs.push(io::digest_file("truth", path)?);
            if p.theta.is_empty() && p.phi.is_empty() && p.eta.is_empty() {
                Truth::Hyperparameters(p)
            } else {
                Truth::Full(p)
            }
        }
        None if config.sim.from_prior => Truth::Prior(config.priors),
        None => Truth::Hyperparameters(reference_truth(config.model, config.sim.groups.len())),
    };
    let (ds, truth) = simulate_dataset(&config.sim_config(truth))?;
    let out = &config.out_dir;
    let paths = [out.join("records.csv"), out.join("adjacency.csv"), out.join("sections.csv")];
    io::write_dataset(&ds, &paths[0], &paths[1], &paths[2])?;
    let truth_path = out.join("truth.json");
    io::write_json(&truth_path, &truth)?;
    let manifest = out.join("manifest.json");
    io::write_json(&manifest, &RunInfo::new("simulate", config, inputs, config.seed)?)?;
    let mut written = paths.to_vec();
    written.extend([truth_path, manifest]);
    Ok(written)
}

fn sbc(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let priors = config.sbc.priors.unwrap_or_else(calibration_priors);
    let spec = ModelSpec::new(config.model)
        .with_priors(priors)
        .with_parameterization(config.parameterization.unwrap_or_default());
    let s = &config.sbc;
    let sbc_config = SbcConfig {
        n_ranked: s.n_ranked,
        n_bins: s.n_bins,
        rhat_threshold: s.rhat_threshold,
        fit_rate_scale: if s.negative_control { 2.0 } else { 1.0 },
        suggest_parameterization: config.parameterization.is_none(),
        execution: config.execution(),
        ..SbcConfig::new(s.reps, config.sampler_config())
    };
    let sim = SimConfig {
        design: config.sbc.design.clone().unwrap_or_else(calibration_design),
        ..config.sim_config(Truth::Prior(priors))
    };
    let result = sbc_run(&spec, &sim, &sbc_config)?;
    io::write_sbc(&config.out_dir, &result, s.alpha)?;
    let path = config.out_dir.join("manifest.json");
    io::write_json(&path, &RunInfo::new("sbc", config, Vec::new(), config.seed)?)?;
    Ok(vec![config.out_dir.join("sbc_ranks.csv"), config.out_dir.join("sbc_summary.json"), path])
}
