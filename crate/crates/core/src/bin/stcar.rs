//! Command-line front end. Flags override values from `--config`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stcar::commands::{self, Command, RunConfig};
use stcar::forecast::IntervalMethod;
use stcar::model::{ModelVariant, Parameterization};
use stcar::posterior::EffectVariable;
use stcar::Error;

#[derive(Parser)]
#[command(name = "stcar", version, about = "Hierarchical Bayesian CAR models for spatiotemporal count data")]
struct Cli {
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one model and write chains, a summary and a manifest.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        sampler: Sampler,
        #[arg(long)]
        model: Option<ModelVariant>,
    },
    /// Leave-future-out coverage for several models.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        sampler: Sampler,
        /// Comma-separated, e.g. 1,2,3a,3b,4.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelVariant>>,
        #[arg(long)]
        holdout_year: Option<i32>,
        /// hpd or equal-tail.
        #[arg(long)]
        interval: Option<IntervalMethod>,
    },
    /// Simulate a dataset in the ingest format.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: Sim,
    },
    /// Simulation-based calibration.
    Sbc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: Sim,
        #[command(flatten)]
        sampler: Sampler,
        #[arg(long)]
        reps: Option<usize>,
        /// Thinned draws per replication used for ranks.
        #[arg(long)]
        n_ranked: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        /// Fit with the likelihood mean doubled; calibration should fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Re-summarize the chains of an earlier fit.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fit_dir: Option<PathBuf>,
    },
    /// Conditional-effect curves from an earlier fit.
    Effects {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        fit_dir: Option<PathBuf>,
        /// Variable on the x-axis: marsh or turbidity.
        #[arg(long)]
        vary: Option<EffectVariable>,
        /// Percentiles of the other variable, comma-separated.
        #[arg(long, value_delimiter = ',')]
        percentiles: Option<Vec<f64>>,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        include_intercept: bool,
    },
    /// Pseudo-posterior aggregation over sections and years.
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        fit_dir: Option<PathBuf>,
        #[arg(long)]
        first_year: Option<i32>,
        #[arg(long)]
        last_year: Option<i32>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Interval probability.
    #[arg(long)]
    level: Option<f64>,
    /// Run chains and fits one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct Data {
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long)]
    sections: Option<PathBuf>,
    /// Subtract observed means from the continuous covariates.
    #[arg(long)]
    center: bool,
}

#[derive(Args)]
struct Sampler {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_depth: Option<u32>,
    /// centered, noncentered, shifted or auto.
    #[arg(long)]
    parameterization: Option<ParamChoice>,
}

#[derive(Args)]
struct Sim {
    #[arg(long)]
    model: Option<ModelVariant>,
    /// Sections per tributary chain, comma-separated.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<usize>>,
    #[arg(long)]
    years: Option<usize>,
    #[arg(long)]
    first_year: Option<i32>,
    /// JSON file of true parameters.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Draw the truth from the prior.
    #[arg(long)]
    from_prior: bool,
}

#[derive(Clone, Copy)]
enum ParamChoice {
    Auto,
    Fixed(Parameterization),
}

impl std::str::FromStr for ParamChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(ParamChoice::Auto)
        } else {
            s.parse().map(ParamChoice::Fixed)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.out_dir, self.out);
        set(&mut c.seed, self.seed);
        set(&mut c.level, self.level);
        if self.sequential {
            c.parallel = false;
        }
    }
}

impl Data {
    fn apply(self, c: &mut RunConfig) {
        c.records = self.records.or(c.records.take());
        c.adjacency = self.adjacency.or(c.adjacency.take());
        c.sections = self.sections.or(c.sections.take());
        c.center_covariates |= self.center;
    }
}

impl Sampler {
    fn apply(self, c: &mut RunConfig) {
        let s = &mut c.sampler;
        set(&mut s.n_chains, self.chains);
        set(&mut s.warmup_iters, self.warmup);
        set(&mut s.sampling_iters, self.samples);
        set(&mut s.target_accept, self.target_accept);
        set(&mut s.max_tree_depth, self.max_depth);
        match self.parameterization {
            Some(ParamChoice::Auto) => c.parameterization = None,
            Some(ParamChoice::Fixed(p)) => c.parameterization = Some(p),
            None => {}
        }
    }
}

impl Sim {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.model, self.model);
        set(&mut c.sim.groups, self.groups);
        set(&mut c.sim.years, self.years);
        set(&mut c.sim.first_year, self.first_year);
        c.sim.truth = self.truth.or(c.sim.truth.take());
        c.sim.from_prior |= self.from_prior;
        if c.sim.labels.len() != c.sim.groups.len() {
            c.sim.labels = (0..c.sim.groups.len())
                .map(|g| match g {
                    0 => "James".to_string(),
                    _ => format!("T{g}"),
                })
                .collect();
        }
    }
}

fn resolve(cli: Cli) -> Result<(Command, RunConfig), Error> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let command = match cli.command {
        Cmd::Fit { common, data, sampler, model } => {
            common.apply(&mut c);
            data.apply(&mut c);
            sampler.apply(&mut c);
            set(&mut c.model, model);
            Command::Fit
        }
        Cmd::Cv { common, data, sampler, models, holdout_year, interval } => {
            common.apply(&mut c);
            data.apply(&mut c);
            sampler.apply(&mut c);
            set(&mut c.models, models);
            c.holdout_year = holdout_year.or(c.holdout_year);
            set(&mut c.interval, interval);
            Command::Cv
        }
        Cmd::Simulate { common, sim } => {
            common.apply(&mut c);
            sim.apply(&mut c);
            Command::Simulate
        }
        Cmd::Sbc { common, sim, sampler, reps, n_ranked, bins, negative_control } => {
            common.apply(&mut c);
            sim.apply(&mut c);
            sampler.apply(&mut c);
            set(&mut c.sbc.reps, reps);
            set(&mut c.sbc.n_ranked, n_ranked);
            set(&mut c.sbc.n_bins, bins);
            c.sbc.negative_control |= negative_control;
            Command::Sbc
        }
        Cmd::Summarize { common, fit_dir } => {
            common.apply(&mut c);
            c.fit_dir = fit_dir.or(c.fit_dir.take());
            Command::Summarize
        }
        Cmd::Effects { common, data, fit_dir, vary, percentiles, grid_size, include_intercept } => {
            common.apply(&mut c);
            data.apply(&mut c);
            c.fit_dir = fit_dir.or(c.fit_dir.take());
            set(&mut c.vary, vary);
            set(&mut c.percentiles, percentiles);
            set(&mut c.grid_size, grid_size);
            c.include_intercept |= include_intercept;
            Command::Effects
        }
        Cmd::Aggregate { common, data, fit_dir, first_year, last_year } => {
            common.apply(&mut c);
            data.apply(&mut c);
            c.fit_dir = fit_dir.or(c.fit_dir.take());
            match (first_year, last_year) {
                (None, None) => {}
                (Some(a), Some(b)) => c.window = Some((a, b)),
                _ => return Err(Error::Usage("--first-year and --last-year go together".into())),
            }
            Command::Aggregate
        }
    };
    Ok((command, c))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = resolve(cli).and_then(|(command, config)| commands::run(command, &config));
    match outcome {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
