//! File formats: input CSVs, per-chain draws, result tables and the run
//! manifest.
//!
//! Inputs:
//!
//! * records CSV with columns `section_id, year, count, tow_distance_m,
//!   secchi_m, rsa, rma, log_predator, management, tributary` (extra columns
//!   are ignored). Absent section-years become unobserved cells.
//! * adjacency: one `id_a,id_b` pair per line; blank lines, `#` comments and
//!   an `id_a,id_b` header are skipped.
//! * sections CSV with columns `section_id, tributary`. Its row order fixes
//!   the section order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, SectionYearRecord};
use crate::error::{Error, Result};
use crate::forecast::LfoResult;
use crate::graph::ArealGraph;
use crate::model::{ModelSpec, ParamLayout};
use crate::posterior::{AggregateTable, EffectsTable, SummaryTable};
use crate::sampler::{ChainDraws, PosteriorDraws, SamplerConfig};
use crate::synth::SbcResult;

/// Tributary used as the design baseline when present.
pub const BASELINE_GROUP: &str = "James";

const RECORD_COLUMNS: [&str; 10] = [
    "section_id",
    "year",
    "count",
    "tow_distance_m",
    "secchi_m",
    "rsa",
    "rma",
    "log_predator",
    "management",
    "tributary",
];

/// Sampler diagnostics appended after the parameters in each chain file.
const DIAGNOSTIC_COLUMNS: [&str; 6] = ["lp__", "accept_stat__", "divergent__", "treedepth__", "n_leapfrog__", "energy__"];

/// Reads `section_id, tributary` rows.
pub fn read_sections(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let (id, trib) = (col("section_id")?, col("tributary")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        if get(id).is_empty() || get(trib).is_empty() {
            return Err(Error::Data(format!("{} line {line}: empty section id or tributary", path.display())));
        }
        out.push((get(id).to_string(), get(trib).to_string()));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no sections", path.display())));
    }
    Ok(out)
}

/// Reads an edge list.
pub fn read_adjacency(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let is_header = first && line.replace(' ', "").eq_ignore_ascii_case("id_a,id_b");
        first = false;
        if is_header {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Data(format!("{} line {}: expected 'id_a,id_b'", path.display(), i + 1)));
        }
        edges.push((parts[0].to_string(), parts[1].to_string()));
    }
    Ok(edges)
}

/// Builds the graph from sections and edges; the baseline tributary comes
/// first when present.
pub fn graph_from_parts(sections: &[(String, String)], edges: &[(String, String)]) -> Result<ArealGraph> {
    let ids: Vec<&str> = sections.iter().map(|(id, _)| id.as_str()).collect();
    let labels: Vec<&str> = sections.iter().map(|(_, g)| g.as_str()).collect();
    let e: Vec<(&str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    ArealGraph::new(&ids, &e, &labels, &[BASELINE_GROUP])
}

/// Reads the records file against a graph. Every invalid row is reported
/// with its line number.
pub fn read_records(path: &Path, graph: &ArealGraph) -> Result<(i32, usize, Vec<Option<SectionYearRecord>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 10];
    for (slot, name) in cols.iter_mut().zip(RECORD_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))?;
    }

    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |j: usize| rec.get(cols[j]).map(str::trim).unwrap_or("");
        let section = field(0);
        let Some(k) = graph.index_of(section) else {
            return Err(Error::Data(format!(
                "{} line {line}: unknown section id '{section}'",
                path.display()
            )));
        };
        let parsed = (|| -> std::result::Result<(i32, SectionYearRecord), String> {
            let year: i32 = field(1).parse().map_err(|_| format!("year '{}' is not an integer", field(1)))?;
            let count: u64 = field(2)
                .parse()
                .map_err(|_| format!("count '{}' is not a non-negative integer", field(2)))?;
            let num = |j: usize| -> std::result::Result<f64, String> {
                field(j)
                    .parse::<f64>()
                    .map_err(|_| format!("{} '{}' is not a number", RECORD_COLUMNS[j], field(j)))
            };
            let r = SectionYearRecord {
                count,
                tow_distance_m: num(3)?,
                secchi_m: num(4)?,
                rsa: num(5)?,
                rma: num(6)?,
                log_predator: num(7)?,
                management: num(8)?,
            };
            let trib = field(9);
            let expected = &graph.group_labels()[graph.group_of(k)];
            if trib != expected {
                return Err(format!("tributary '{trib}' disagrees with '{expected}' in the sections file"));
            }
            Ok((year, r))
        })();
        match parsed {
            Ok((year, r)) => rows.push((line, k, year, r)),
            Err(msg) => problems.push((line, msg)),
        }
    }
    if rows.is_empty() && problems.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }

    let first = rows.iter().map(|r| r.2).min().unwrap_or(0);
    let last = rows.iter().map(|r| r.2).max().unwrap_or(0);
    let n_years = (last - first + 1).max(1) as usize;
    let kk = graph.n_sections();
    let mut records: Vec<Option<SectionYearRecord>> = vec![None; kk * n_years];
    let mut seen_line = vec![0u64; kk * n_years];
    for (line, k, year, r) in rows {
        let cell = (year - first) as usize * kk + k;
        if seen_line[cell] != 0 {
            problems.push((
                line,
                format!("duplicate section {} year {year} (first on line {})", graph.ids()[k], seen_line[cell]),
            ));
            continue;
        }
        seen_line[cell] = line;
        if r.tow_distance_m <= 0.0 && r.count == 0 {
            log::warn!("line {line}: no tow distance and no catch; section-year treated as unobserved");
            continue;
        }
        match r.validate() {
            Ok(()) => records[cell] = Some(r),
            Err(msg) => problems.push((line, msg)),
        }
    }
    if !problems.is_empty() {
        problems.sort_by_key(|p| p.0);
        let report: Vec<String> = problems.iter().map(|(l, m)| format!("line {l}: {m}")).collect();
        return Err(Error::Data(format!("{} rejected:\n  {}", path.display(), report.join("\n  "))));
    }
    Ok((first, n_years, records))
}

/// Reads all three inputs into a validated dataset.
pub fn ingest(records: &Path, adjacency: &Path, sections: &Path) -> Result<Dataset> {
    let graph = graph_from_parts(&read_sections(sections)?, &read_adjacency(adjacency)?)?;
    let (first_year, n_years, recs) = read_records(records, &graph)?;
    let ds = Dataset::from_records(graph, first_year, n_years, recs)?;
    log::info!(
        "ingested {} sections x {} years, {} observed, {} masked",
        ds.n_sections(),
        ds.n_years,
        ds.n_observed(),
        ds.n_cells() - ds.n_observed()
    );
    Ok(ds)
}

#[derive(Serialize)]
struct RecordRow<'a> {
    section_id: &'a str,
    year: i32,
    count: u64,
    tow_distance_m: f64,
    secchi_m: f64,
    rsa: f64,
    rma: f64,
    log_predator: f64,
    management: f64,
    tributary: &'a str,
}

/// Writes a standard-schema dataset as the three input files. Unobserved
/// cells are omitted.
pub fn write_dataset(ds: &Dataset, records: &Path, adjacency: &Path, sections: &Path) -> Result<()> {
    let recs = ds
        .records
        .as_ref()
        .ok_or_else(|| Error::Usage("only datasets built from records can be written".into()))?;
    let g = &ds.graph;
    let label = |k: usize| g.group_labels()[g.group_of(k)].as_str();

    let mut w = csv::Writer::from_path(records)?;
    for t in 0..ds.n_years {
        for k in 0..ds.n_sections() {
            let c = ds.cell(k, t);
            let (Some(r), Some(count)) = (&recs[c], ds.counts[c]) else { continue };
            w.serialize(RecordRow {
                section_id: &g.ids()[k],
                year: ds.year_of(t),
                count,
                tow_distance_m: r.tow_distance_m,
                secchi_m: r.secchi_m,
                rsa: r.rsa,
                rma: r.rma,
                log_predator: r.log_predator,
                management: r.management,
                tributary: label(k),
            })?;
        }
    }
    w.flush()?;

    let mut f = fs::File::create(adjacency)?;
    for &(a, b) in g.edges() {
        writeln!(f, "{},{}", g.ids()[a], g.ids()[b])?;
    }

    let mut w = csv::Writer::from_path(sections)?;
    w.write_record(["section_id", "tributary"])?;
    for k in 0..g.n_sections() {
        w.write_record([g.ids()[k].as_str(), label(k)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn chain_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}.csv"))
}

/// Writes `chain_<i>.csv` per chain: one column per parameter, then the
/// sampler diagnostics.
pub fn write_chains(dir: &Path, draws: &PosteriorDraws) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for c in &draws.chains {
        let path = chain_path(dir, c.chain);
        let mut w = csv::Writer::from_path(&path)?;
        let header: Vec<&str> = draws.names.iter().map(String::as_str).chain(DIAGNOSTIC_COLUMNS).collect();
        w.write_record(&header)?;
        // `Display` for f64 is the shortest string that parses back exactly.
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..c.n_draws() {
            row.clear();
            row.extend(c.draw(i).iter().map(f64::to_string));
            row.push(c.log_density[i].to_string());
            row.push(c.accept_stat[i].to_string());
            row.push(u8::from(c.divergent[i]).to_string());
            row.push(c.tree_depth[i].to_string());
            row.push(c.n_leapfrog[i].to_string());
            row.push(c.energy[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads chain files written by [`write_chains`].
pub fn read_chains(dir: &Path, manifest: &Manifest) -> Result<PosteriorDraws> {
    let layout = manifest.shape.layout(manifest.spec.variant);
    let mut chains = Vec::new();
    for info in &manifest.chains {
        let path = chain_path(dir, info.chain);
        let mut rdr = csv::Reader::from_path(&path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let n_params = header.len().saturating_sub(DIAGNOSTIC_COLUMNS.len());
        if n_params != layout.dim || header[..n_params] != manifest.parameters[..] {
            return Err(Error::Structure(format!("{}: columns do not match the manifest", path.display())));
        }
        let mut c = ChainDraws {
            chain: info.chain,
            n_params,
            values: Vec::new(),
            log_density: Vec::new(),
            accept_stat: Vec::new(),
            divergent: Vec::new(),
            tree_depth: Vec::new(),
            n_leapfrog: Vec::new(),
            energy: Vec::new(),
            step_size: info.step_size,
            inv_metric: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
            if v.len() != header.len() {
                return Err(Error::Data(format!("{} line {line}: wrong number of fields", path.display())));
            }
            c.values.extend_from_slice(&v[..n_params]);
            let d = &v[n_params..];
            c.log_density.push(d[0]);
            c.accept_stat.push(d[1]);
            c.divergent.push(d[2] != 0.0);
            c.tree_depth.push(d[3] as u32);
            c.n_leapfrog.push(d[4] as u32);
            c.energy.push(d[5]);
        }
        chains.push(c);
    }
    Ok(PosteriorDraws {
        spec: manifest.spec,
        layout,
        names: manifest.parameters.clone(),
        chains,
        config: manifest.sampler.clone(),
    })
}

/// Dimensions needed to rebuild a parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub n_beta: usize,
    pub n_sections: usize,
    pub n_years: usize,
    pub n_groups: usize,
}

impl Shape {
    pub fn of(ds: &Dataset) -> Self {
        Shape {
            n_beta: ds.n_covariates() + 1,
            n_sections: ds.n_sections(),
            n_years: ds.n_years,
            n_groups: ds.graph.n_groups(),
        }
    }

    pub fn layout(&self, variant: crate::model::ModelVariant) -> ParamLayout {
        ParamLayout::new(variant, self.n_beta, self.n_sections, self.n_years, self.n_groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainInfo {
    pub chain: usize,
    /// Random stream of the seeded generator used by this chain.
    pub stream: u64,
    pub step_size: f64,
    pub n_divergent: usize,
    pub mean_accept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatEntry {
    pub parameter: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Provenance shared by every command. Contains no timestamps, so identical
/// runs give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the compact JSON of `config`.
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
}

impl RunInfo {
    pub fn new<C: Serialize>(command: &str, config: &C, inputs: Vec<InputDigest>, seed: u64) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(RunInfo {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            inputs,
            seed,
        })
    }
}

/// Everything needed to reproduce and re-read a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub run: RunInfo,
    pub spec: ModelSpec,
    pub sampler: SamplerConfig,
    pub shape: Shape,
    pub parameters: Vec<String>,
    pub chains: Vec<ChainInfo>,
    pub max_rhat: Option<f64>,
    pub n_divergent: usize,
    pub rhat: Vec<RhatEntry>,
}

impl Manifest {
    pub fn new(run: RunInfo, draws: &PosteriorDraws, shape: Shape) -> Self {
        let rhat = (0..draws.n_params())
            .map(|j| RhatEntry {
                parameter: draws.names[j].clone(),
                rhat: draws.rhat(j).map(|r| r.value).filter(|v| v.is_finite()),
                ess: draws.ess(j).filter(|v| v.is_finite()),
            })
            .collect();
        Manifest {
            run,
            spec: draws.spec,
            sampler: draws.config.clone(),
            shape,
            parameters: draws.names.clone(),
            chains: draws
                .chains
                .iter()
                .map(|c| ChainInfo {
                    chain: c.chain,
                    stream: c.chain as u64,
                    step_size: c.step_size,
                    n_divergent: c.n_divergent(),
                    mean_accept: c.mean_accept(),
                })
                .collect(),
            max_rhat: draws.max_rhat().filter(|v| v.is_finite()),
            n_divergent: draws.n_divergent(),
            rhat,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of an input file, recorded under `role`.
pub fn digest_file(role: &str, path: &Path) -> Result<InputDigest> {
    Ok(InputDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: sha256_hex(&fs::read(path)?),
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, table: &SummaryTable) -> Result<()> {
    write_rows(path, &table.rows)
}

pub fn write_effects(path: &Path, table: &EffectsTable) -> Result<()> {
    write_rows(path, &table.rows)
}

pub fn write_aggregate(path: &Path, table: &AggregateTable) -> Result<()> {
    write_rows(path, &table.rows)
}

#[derive(Serialize)]
struct CvRow<'a> {
    model: String,
    section: &'a str,
    observed: Option<u64>,
    median: u64,
    low: u64,
    high: u64,
    inside: Option<bool>,
}

#[derive(Serialize)]
struct CvModelSummary {
    model: String,
    coverage: Option<f64>,
    n_evaluated: Option<usize>,
    mean_width: Option<f64>,
    max_rhat: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct CvSummary {
    holdout_year: i32,
    level: Option<f64>,
    models: Vec<CvModelSummary>,
    ranking: Option<Vec<String>>,
}

/// Writes `cv_report.csv` (one row per model and section) and
/// `cv_summary.json` (coverage per model and the ranking).
pub fn write_cv(dir: &Path, result: &LfoResult) -> Result<()> {
    let mut rows = Vec::new();
    for o in &result.outcomes {
        let Some(rep) = &o.report else { continue };
        for r in &rep.rows {
            rows.push(CvRow {
                model: o.model.label().to_string(),
                section: &r.section,
                observed: r.observed,
                median: r.median,
                low: r.low,
                high: r.high,
                inside: r.inside,
            });
        }
    }
    write_rows(&dir.join("cv_report.csv"), &rows)?;
    let summary = CvSummary {
        holdout_year: result.holdout_year,
        level: result.outcomes.iter().find_map(|o| o.report.as_ref().map(|r| r.level)),
        models: result
            .outcomes
            .iter()
            .map(|o| CvModelSummary {
                model: o.model.label().to_string(),
                coverage: o.report.as_ref().map(|r| r.coverage),
                n_evaluated: o.report.as_ref().map(|r| r.n_evaluated),
                mean_width: o.report.as_ref().map(|r| r.mean_width),
                max_rhat: o.max_rhat.filter(|v| v.is_finite()),
                error: o.error.clone(),
            })
            .collect(),
        ranking: result
            .ranking
            .as_ref()
            .map(|r| r.iter().map(|m| m.label().to_string()).collect()),
    };
    write_json(&dir.join("cv_summary.json"), &summary)
}

#[derive(Serialize)]
struct RankRow<'a> {
    replication: usize,
    parameter: &'a str,
    rank: u32,
}

/// Writes `sbc_ranks.csv` and `sbc_summary.json`.
pub fn write_sbc(dir: &Path, result: &SbcResult, alpha: f64) -> Result<()> {
    let mut rows = Vec::new();
    for (rep, ranks) in &result.ranks {
        for (name, &rank) in result.names.iter().zip(ranks) {
            rows.push(RankRow { replication: *rep, parameter: name, rank });
        }
    }
    write_rows(&dir.join("sbc_ranks.csv"), &rows)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        model: String,
        n_ranked: usize,
        n_bins: usize,
        n_used: usize,
        nonconverged: &'a [usize],
        failed: &'a [(usize, String)],
        alpha: f64,
        passes: bool,
        groups: &'a [crate::synth::SbcGroup],
    }
    write_json(
        &dir.join("sbc_summary.json"),
        &Summary {
            model: result.variant.label().to_string(),
            n_ranked: result.n_ranked,
            n_bins: result.n_bins,
            n_used: result.ranks.len(),
            nonconverged: &result.nonconverged,
            failed: &result.failed,
            alpha,
            passes: result.passes(alpha),
            groups: &result.groups,
        },
    )
}
