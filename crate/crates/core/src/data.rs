//! Section-year records on a `K × T` lattice.
//!
//! Cells are stored year-major: cell `(k, t)` lives at `t * K + k`, so each
//! year's map of sections is contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ArealGraph;

pub const TURBIDITY: &str = "turbidity";
pub const SEAGRASS: &str = "seagrass";
pub const MARSH: &str = "marsh";
pub const MARSH_X_TURBIDITY: &str = "marsh_x_turbidity";
pub const PREDATOR: &str = "log_predator";
pub const MANAGEMENT: &str = "management";

/// Continuous covariates in the standard schema, in column order.
pub const CONTINUOUS: [&str; 5] = [TURBIDITY, SEAGRASS, MARSH, MARSH_X_TURBIDITY, PREDATOR];

/// First calendar year of the post-2008 management regime.
pub const MANAGEMENT_START_YEAR: i32 = 2009;

/// Raw per-cell measurements of the standard schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionYearRecord {
    pub count: u64,
    pub tow_distance_m: f64,
    pub secchi_m: f64,
    pub rsa: f64,
    pub rma: f64,
    pub log_predator: f64,
    pub management: f64,
}

impl SectionYearRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.tow_distance_m > 0.0 && self.tow_distance_m.is_finite()) {
            return Err(format!("tow distance {} must be positive", self.tow_distance_m));
        }
        for (name, v) in [("rsa", self.rsa), ("rma", self.rma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("secchi_m", self.secchi_m),
            ("log_predator", self.log_predator),
            ("management", self.management),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        Ok(())
    }
}

/// Counts, offsets and covariates over all section-years.
///
/// The intercept column is implicit; `covariate_names` lists the `p` explicit
/// columns of the design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: ArealGraph,
    pub first_year: i32,
    pub n_years: usize,
    pub covariate_names: Vec<String>,
    /// `None` marks an unobserved cell.
    pub counts: Vec<Option<u64>>,
    pub offsets: Vec<f64>,
    /// Row-major `n_cells × p`.
    pub design: Vec<f64>,
    /// Raw records of the standard schema, when the dataset was built from them.
    pub records: Option<Vec<Option<SectionYearRecord>>>,
}

impl Dataset {
    /// Builds a dataset from a generic design. Unobserved cells carry `None`.
    pub fn new(
        graph: ArealGraph,
        first_year: i32,
        n_years: usize,
        covariate_names: Vec<String>,
        counts: Vec<Option<u64>>,
        offsets: Vec<f64>,
        design: Vec<f64>,
    ) -> Result<Self> {
        let n = graph.n_sections() * n_years;
        let p = covariate_names.len();
        if n_years == 0 {
            return Err(Error::Data("dataset has no years".into()));
        }
        if counts.len() != n || offsets.len() != n || design.len() != n * p {
            return Err(Error::Structure(format!(
                "expected {n} cells with {p} covariates, got {} counts, {} offsets, {} design entries",
                counts.len(),
                offsets.len(),
                design.len()
            )));
        }
        for (i, c) in counts.iter().enumerate() {
            if c.is_some() && !offsets[i].is_finite() {
                return Err(Error::Data(format!("non-finite offset at cell {i}")));
            }
        }
        if counts
            .iter()
            .zip(design.chunks(p.max(1)))
            .any(|(c, row)| c.is_some() && p > 0 && row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Data("non-finite covariate in an observed cell".into()));
        }
        Ok(Dataset {
            graph,
            first_year,
            n_years,
            covariate_names,
            counts,
            offsets,
            design,
            records: None,
        })
    }

    /// Builds a dataset in the standard schema from raw records.
    ///
    /// Derived columns: turbidity = −Secchi depth, marsh × turbidity, offset =
    /// ln(tow distance), and one dummy per non-baseline group (group 0 is the
    /// baseline).
    pub fn from_records(
        graph: ArealGraph,
        first_year: i32,
        n_years: usize,
        records: Vec<Option<SectionYearRecord>>,
    ) -> Result<Self> {
        let k = graph.n_sections();
        if records.len() != k * n_years {
            return Err(Error::Structure(format!(
                "expected {} records, got {}",
                k * n_years,
                records.len()
            )));
        }
        let names = standard_covariate_names(&graph);
        let p = names.len();
        let mut counts = Vec::with_capacity(records.len());
        let mut offsets = Vec::with_capacity(records.len());
        let mut design = Vec::with_capacity(records.len() * p);
        for (i, rec) in records.iter().enumerate() {
            let section = i % k;
            match rec {
                Some(r) => {
                    r.validate().map_err(|e| {
                        Error::Data(format!(
                            "section {} year {}: {e}",
                            graph.ids()[section],
                            first_year + (i / k) as i32
                        ))
                    })?;
                    counts.push(Some(r.count));
                    offsets.push(r.tow_distance_m.ln());
                    design.extend(standard_row(r, graph.group_of(section), graph.n_groups()));
                }
                None => {
                    counts.push(None);
                    offsets.push(0.0);
                    design.extend(std::iter::repeat_n(0.0, p));
                }
            }
        }
        let mut ds = Dataset::new(graph, first_year, n_years, names, counts, offsets, design)?;
        ds.records = Some(records);
        Ok(ds)
    }

    pub fn n_sections(&self) -> usize {
        self.graph.n_sections()
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn cell(&self, k: usize, t: usize) -> usize {
        t * self.n_sections() + k
    }

    pub fn covariates(&self, cell: usize) -> &[f64] {
        let p = self.n_covariates();
        &self.design[cell * p..(cell + 1) * p]
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn is_observed(&self, cell: usize) -> bool {
        self.counts[cell].is_some()
    }

    pub fn n_observed(&self) -> usize {
        self.counts.iter().filter(|c| c.is_some()).count()
    }

    pub fn year_of(&self, t: usize) -> i32 {
        self.first_year + t as i32
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        let t = year - self.first_year;
        (t >= 0 && (t as usize) < self.n_years).then_some(t as usize)
    }

    /// The first `n_years` years.
    pub fn truncate_years(&self, n_years: usize) -> Result<Dataset> {
        if n_years == 0 || n_years > self.n_years {
            return Err(Error::Structure(format!(
                "cannot keep {n_years} of {} years",
                self.n_years
            )));
        }
        let n = n_years * self.n_sections();
        let p = self.n_covariates();
        Ok(Dataset {
            graph: self.graph.clone(),
            first_year: self.first_year,
            n_years,
            covariate_names: self.covariate_names.clone(),
            counts: self.counts[..n].to_vec(),
            offsets: self.offsets[..n].to_vec(),
            design: self.design[..n * p].to_vec(),
            records: self.records.as_ref().map(|r| r[..n].to_vec()),
        })
    }

    /// Subtracts the observed-cell mean from each continuous covariate and
    /// recomputes the marsh × turbidity product from the centered factors.
    pub fn center_continuous(&mut self) {
        let p = self.n_covariates();
        let idx: Vec<usize> = CONTINUOUS
            .iter()
            .filter(|&&n| n != MARSH_X_TURBIDITY)
            .filter_map(|n| self.covariate_index(n))
            .collect();
        let observed: Vec<usize> = (0..self.n_cells()).filter(|&c| self.is_observed(c)).collect();
        if observed.is_empty() {
            return;
        }
        for &j in &idx {
            let mean = observed.iter().map(|&c| self.design[c * p + j]).sum::<f64>() / observed.len() as f64;
            for &c in &observed {
                self.design[c * p + j] -= mean;
            }
        }
        if let (Some(m), Some(tb), Some(mt)) = (
            self.covariate_index(MARSH),
            self.covariate_index(TURBIDITY),
            self.covariate_index(MARSH_X_TURBIDITY),
        ) {
            for &c in &observed {
                self.design[c * p + mt] = self.design[c * p + m] * self.design[c * p + tb];
            }
        }
        // Centered design no longer corresponds to the raw records.
        self.records = None;
    }
}

/// Covariate names of the standard schema for a graph's groups.
pub fn standard_covariate_names(graph: &ArealGraph) -> Vec<String> {
    let mut names: Vec<String> = CONTINUOUS.iter().map(|s| s.to_string()).collect();
    names.push(MANAGEMENT.to_string());
    names.extend(
        graph.group_labels()[1..]
            .iter()
            .map(|l| group_dummy_name(l)),
    );
    names
}

pub fn group_dummy_name(label: &str) -> String {
    label.to_lowercase().replace(|c: char| !c.is_alphanumeric(), "_")
}

/// One design row of the standard schema.
pub fn standard_row(r: &SectionYearRecord, group: usize, n_groups: usize) -> Vec<f64> {
    let turbidity = -r.secchi_m;
    let mut row = vec![
        turbidity,
        r.rsa,
        r.rma,
        r.rma * turbidity,
        r.log_predator,
        r.management,
    ];
    row.extend((1..n_groups).map(|g| if g == group { 1.0 } else { 0.0 }));
    row
}
