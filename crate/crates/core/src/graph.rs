//! Areal adjacency structure and proper-CAR precision algebra.
//!
//! A proper CAR field on `K` sections has precision `Q = (D - λW) / σ²`, where
//! `W` is the binary adjacency matrix and `D` the diagonal matrix of neighbor
//! counts. Writing `D - λW = D^{1/2} (I - λ A) D^{1/2}` with
//! `A = D^{-1/2} W D^{-1/2}` gives
//!
//! ```text
//! log det(D - λW) = Σ_k ln d_k + Σ_i ln(1 - λ γ_i)
//! ```
//!
//! where `γ_i` are the eigenvalues of `A`. They are computed once when the graph
//! is built, so log-determinants cost O(K) afterwards.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues of `D^{-1/2} W D^{-1/2}` plus `ln det D`.
#[derive(Debug, Clone)]
pub struct CarSpectral {
    pub eigenvalues: Vec<f64>,
    pub log_det_d: f64,
}

impl CarSpectral {
    fn compute(neighbors: &[Vec<usize>]) -> Self {
        let k = neighbors.len();
        let inv_sqrt: Vec<f64> = neighbors
            .iter()
            .map(|nb| 1.0 / (nb.len() as f64).sqrt())
            .collect();
        let mut a = DMatrix::<f64>::zeros(k, k);
        for (i, nb) in neighbors.iter().enumerate() {
            for &j in nb {
                a[(i, j)] = inv_sqrt[i] * inv_sqrt[j];
            }
        }
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|x, y| x.total_cmp(y));
        let log_det_d = neighbors.iter().map(|nb| (nb.len() as f64).ln()).sum();
        CarSpectral {
            eigenvalues,
            log_det_d,
        }
    }

    /// `ln det(D - λW)`.
    pub fn log_det(&self, lambda: f64) -> f64 {
        self.log_det_d
            + self
                .eigenvalues
                .iter()
                .map(|&g| (-lambda * g).ln_1p())
                .sum::<f64>()
    }

    /// `d/dλ ln det(D - λW) = -Σ γ_i / (1 - λ γ_i)`.
    pub fn log_det_derivative(&self, lambda: f64) -> f64 {
        -self
            .eigenvalues
            .iter()
            .map(|&g| g / (1.0 - lambda * g))
            .sum::<f64>()
    }
}

/// Section adjacency with tributary (group) labels.
///
/// Sections are indexed `0..K` in the order given at construction.
#[derive(Debug, Clone)]
pub struct ArealGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    group_of: Vec<usize>,
    group_labels: Vec<String>,
    component_of: Vec<usize>,
    n_components: usize,
    spectral: CarSpectral,
}

impl PartialEq for ArealGraph {
    fn eq(&self, other: &Self) -> bool {
        self.ids() == other.ids()
            && self.edges() == other.edges()
            && self.group_labels() == other.group_labels()
            && (0..self.n_sections()).all(|k| self.group_of(k) == other.group_of(k))
    }
}

/// Builds a graph, taking group order from first appearance in `group_labels`.
pub fn build_graph<S: AsRef<str>>(
    section_ids: &[S],
    edges: &[(S, S)],
    group_labels: &[S],
) -> Result<ArealGraph> {
    ArealGraph::new(section_ids, edges, group_labels, &[] as &[&str])
}

impl ArealGraph {
    /// Builds and validates a graph.
    ///
    /// `group_order` fixes the leading groups (e.g. the baseline tributary first);
    /// groups not listed follow in order of first appearance.
    pub fn new<S: AsRef<str>, G: AsRef<str>>(
        section_ids: &[S],
        edges: &[(S, S)],
        group_labels: &[S],
        group_order: &[G],
    ) -> Result<Self> {
        let k = section_ids.len();
        if k == 0 {
            return Err(Error::Graph("graph has no sections".into()));
        }
        if group_labels.len() != k {
            return Err(Error::Graph(format!(
                "{} group labels for {} sections",
                group_labels.len(),
                k
            )));
        }
        let ids: Vec<String> = section_ids.iter().map(|s| s.as_ref().to_string()).collect();
        let mut index = HashMap::with_capacity(k);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate section id '{id}'")));
            }
        }

        let mut seen = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); k];
        let mut edge_list = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            let ia = *index
                .get(a)
                .ok_or_else(|| Error::Graph(format!("edge references unknown section '{a}'")))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| Error::Graph(format!("edge references unknown section '{b}'")))?;
            if ia == ib {
                return Err(Error::Graph(format!("self-loop on section '{a}'")));
            }
            let key = (ia.min(ib), ia.max(ib));
            if !seen.insert(key) {
                return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
            }
            neighbors[ia].push(ib);
            neighbors[ib].push(ia);
            edge_list.push(key);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        let isolated: Vec<&str> = neighbors
            .iter()
            .enumerate()
            .filter(|(_, nb)| nb.is_empty())
            .map(|(i, _)| ids[i].as_str())
            .collect();
        if !isolated.is_empty() {
            return Err(Error::Graph(format!(
                "isolated section(s) with no neighbors: {}",
                isolated.join(", ")
            )));
        }

        let mut labels: Vec<String> = group_order.iter().map(|g| g.as_ref().to_string()).collect();
        let mut group_of = Vec::with_capacity(k);
        for label in group_labels {
            let label = label.as_ref();
            let g = match labels.iter().position(|l| l == label) {
                Some(g) => g,
                None => {
                    labels.push(label.to_string());
                    labels.len() - 1
                }
            };
            group_of.push(g);
        }
        // Drop listed-but-unused groups so ids stay contiguous.
        let used: Vec<bool> = (0..labels.len()).map(|g| group_of.contains(&g)).collect();
        if used.iter().any(|u| !u) {
            let mut remap = vec![usize::MAX; labels.len()];
            let mut kept = Vec::new();
            for (g, l) in labels.iter().enumerate() {
                if used[g] {
                    remap[g] = kept.len();
                    kept.push(l.clone());
                }
            }
            for g in &mut group_of {
                *g = remap[*g];
            }
            labels = kept;
        }

        for &(a, b) in &edge_list {
            if group_of[a] != group_of[b] {
                log::warn!(
                    "edge ({}, {}) crosses groups '{}' and '{}'",
                    ids[a],
                    ids[b],
                    labels[group_of[a]],
                    labels[group_of[b]]
                );
            }
        }

        let (component_of, n_components) = components(&neighbors);
        let spectral = CarSpectral::compute(&neighbors);
        Ok(ArealGraph {
            ids,
            index,
            neighbors,
            edges: edge_list,
            group_of,
            group_labels: labels,
            component_of,
            n_components,
            spectral,
        })
    }

    /// Sections arranged as disjoint chains (river tributaries), one group per chain.
    ///
    /// Ids are `1..=K`; group labels are taken from `labels` or default to `g1`, `g2`, ...
    pub fn chains(sizes: &[usize], labels: Option<&[&str]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut groups = Vec::new();
        let mut edges = Vec::new();
        let mut next = 1usize;
        for (g, &n) in sizes.iter().enumerate() {
            let label = match labels {
                Some(l) => l
                    .get(g)
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::Graph("fewer labels than chains".into()))?,
                None => format!("g{}", g + 1),
            };
            for i in 0..n {
                ids.push(next.to_string());
                groups.push(label.clone());
                if i > 0 {
                    edges.push(((next - 1).to_string(), next.to_string()));
                }
                next += 1;
            }
        }
        build_graph(&ids, &edges, &groups)
    }

    pub fn n_sections(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Undirected edges as `(low, high)` index pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn group_of(&self, k: usize) -> usize {
        self.group_of[k]
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn component_of(&self, k: usize) -> usize {
        self.component_of[k]
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn spectral(&self) -> &CarSpectral {
        &self.spectral
    }

    /// `(D - λW) v`.
    pub fn car_mul(&self, lambda: f64, v: &[f64], out: &mut [f64]) {
        for (k, nb) in self.neighbors.iter().enumerate() {
            let s: f64 = nb.iter().map(|&j| v[j]).sum();
            out[k] = nb.len() as f64 * v[k] - lambda * s;
        }
    }

    /// Returns `(vᵀ D v, vᵀ W v)`.
    pub fn car_quadratic_parts(&self, v: &[f64]) -> (f64, f64) {
        let mut dq = 0.0;
        let mut wq = 0.0;
        for (k, nb) in self.neighbors.iter().enumerate() {
            dq += nb.len() as f64 * v[k] * v[k];
            wq += v[k] * nb.iter().map(|&j| v[j]).sum::<f64>();
        }
        (dq, wq)
    }

    /// Dense adjacency matrix `W`.
    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let k = self.n_sections();
        let mut w = DMatrix::zeros(k, k);
        for &(a, b) in &self.edges {
            w[(a, b)] = 1.0;
            w[(b, a)] = 1.0;
        }
        w
    }
}

fn components(neighbors: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; neighbors.len()];
    let mut n = 0;
    for start in 0..neighbors.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = n;
        while let Some(v) = stack.pop() {
            for &u in &neighbors[v] {
                if comp[u] == usize::MAX {
                    comp[u] = n;
                    stack.push(u);
                }
            }
        }
        n += 1;
    }
    (comp, n)
}

fn check_car_domain(lambda: f64, sigma2: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::domain("lambda", lambda, "[0, 1)"));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::domain("sigma2", sigma2, "(0, inf)"));
    }
    Ok(())
}

/// Sparse symmetric matrix stored as full rows (both triangles).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    pub diag: Vec<f64>,
    /// `rows[i]` holds `(j, value)` for off-diagonal entries, sorted by `j`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSymmetric {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.rows[i]
            .iter()
            .find(|(c, _)| *c == j)
            .map_or(0.0, |(_, v)| *v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &(j, v) in &self.rows[i] {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// `Q = (D - λW) / σ²`.
pub fn car_precision(graph: &ArealGraph, lambda: f64, sigma2: f64) -> Result<SparseSymmetric> {
    check_car_domain(lambda, sigma2)?;
    let diag = graph
        .neighbors
        .iter()
        .map(|nb| nb.len() as f64 / sigma2)
        .collect();
    let rows = graph
        .neighbors
        .iter()
        .map(|nb| nb.iter().map(|&j| (j, -lambda / sigma2)).collect())
        .collect();
    Ok(SparseSymmetric { diag, rows })
}

/// `ln det(D - λW)` from the cached spectrum.
pub fn log_det_precision(graph: &ArealGraph, lambda: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::domain("lambda", lambda, "[0, 1)"));
    }
    Ok(graph.spectral.log_det(lambda))
}

/// Cholesky factor `L` (lower) with row-envelope storage.
///
/// Row `i` stores columns `first[i]..=i`. For river chains numbered along the
/// axis the envelope has width two, so factorization is O(K).
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl EnvelopeCholesky {
    pub fn factor(q: &SparseSymmetric) -> Result<Self> {
        let n = q.dim();
        let first: Vec<usize> = (0..n)
            .map(|i| {
                q.rows[i]
                    .iter()
                    .map(|&(j, _)| j)
                    .filter(|&j| j < i)
                    .min()
                    .unwrap_or(i)
            })
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let fi = first[i];
            let mut row = vec![0.0; i - fi + 1];
            for &(j, v) in &q.rows[i] {
                if j < i {
                    row[j - fi] = v;
                }
            }
            row[i - fi] = q.diag[i];
            for j in fi..=i {
                let fj = if j == i { fi } else { first[j] };
                let start = fi.max(fj);
                let mut s = row[j - fi];
                for c in start..j {
                    let ljc = if j == i { row[c - fi] } else { rows[j][c - fj] };
                    s -= row[c - fi] * ljc;
                }
                if j < i {
                    let ljj = *rows[j].last().expect("non-empty row");
                    row[j - fi] = s / ljj;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Sampler(format!(
                            "matrix not positive definite (pivot {s:e} at row {i})"
                        )));
                    }
                    row[i - fi] = s.sqrt();
                }
            }
            rows.push(row);
        }
        Ok(EnvelopeCholesky { first, rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn pivot(&self, i: usize) -> f64 {
        *self.rows[i].last().expect("non-empty row")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.pivot(i).ln()).sum::<f64>()
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, x: &mut [f64]) {
        for i in (0..self.dim()).rev() {
            let fi = self.first[i];
            let row = &self.rows[i];
            x[i] /= row[i - fi];
            let xi = x[i];
            for j in fi..i {
                x[j] -= row[j - fi] * xi;
            }
        }
    }
}

/// Exact draw from `MVN(0, σ² (D - λW)⁻¹)`.
pub fn sample_car<R: Rng + ?Sized>(
    graph: &ArealGraph,
    lambda: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let q = car_precision(graph, lambda, sigma2)?;
    let chol = EnvelopeCholesky::factor(&q)?;
    let mut x: Vec<f64> = (0..graph.n_sections())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    chol.solve_upper_in_place(&mut x);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> ArealGraph {
        build_graph(&["1", "2", "3"], &[("1", "2"), ("2", "3")], &["a", "a", "a"]).unwrap()
    }

    #[test]
    fn path_graph_structure() {
        let g = path3();
        assert_eq!(g.degrees(), vec![1, 2, 1]);
        assert_eq!(g.n_components(), 1);
        assert_eq!(g.n_groups(), 1);
    }

    #[test]
    fn river_chains_match_section_count() {
        let g = ArealGraph::chains(&[14, 13, 10], Some(&["James", "Rappahannock", "York"])).unwrap();
        assert_eq!(g.n_sections(), 37);
        assert_eq!(g.n_components(), 3);
        assert_eq!(g.n_groups(), 3);
        assert_eq!(g.group_labels()[0], "James");
    }

    #[test]
    fn rejects_isolated_nodes() {
        let err = build_graph(&["a", "b"], &[], &["g", "g"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("isolated") && msg.contains('a'), "{msg}");
    }

    #[test]
    fn rejects_duplicates_and_self_loops() {
        assert!(build_graph(&["a", "b"], &[("a", "b"), ("b", "a")], &["g", "g"]).is_err());
        assert!(build_graph(&["a", "b"], &[("a", "a"), ("a", "b")], &["g", "g"]).is_err());
        assert!(build_graph(&["a", "a"], &[("a", "a")], &["g", "g"]).is_err());
        assert!(build_graph(&["a", "b"], &[("a", "c")], &["g", "g"]).is_err());
    }

    #[test]
    fn cross_group_edges_are_allowed() {
        let g = build_graph(&["a", "b"], &[("a", "b")], &["x", "y"]).unwrap();
        assert_eq!(g.n_groups(), 2);
    }

    #[test]
    fn explicit_group_order_puts_baseline_first() {
        let g = ArealGraph::new(
            &["a", "b", "c", "d"],
            &[("a", "b"), ("c", "d")],
            &["York", "York", "James", "James"],
            &["James"],
        )
        .unwrap();
        assert_eq!(g.group_labels(), &["James".to_string(), "York".to_string()]);
        assert_eq!(g.group_of(0), 1);
        assert_eq!(g.group_of(2), 0);
    }

    #[test]
    fn precision_of_path3() {
        let q = car_precision(&path3(), 0.5, 1.0).unwrap().to_dense();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -0.5, 0.0, -0.5, 2.0, -0.5, 0.0, -0.5, 1.0]);
        assert_eq!(q, expected);
    }

    #[test]
    fn precision_at_zero_lambda_is_diagonal() {
        let g = ArealGraph::chains(&[4, 3], None).unwrap();
        let q = car_precision(&g, 0.0, 2.0).unwrap();
        for i in 0..g.n_sections() {
            assert_eq!(q.diag[i], g.degree(i) as f64 / 2.0);
            assert!(q.rows[i].iter().all(|&(_, v)| v == 0.0));
        }
    }

    #[test]
    fn precision_domain_errors() {
        let g = path3();
        assert!(car_precision(&g, 1.0, 1.0).is_err());
        assert!(car_precision(&g, -0.1, 1.0).is_err());
        assert!(car_precision(&g, 0.5, 0.0).is_err());
        assert!(log_det_precision(&g, 1.0).is_err());
    }

    #[test]
    fn near_unit_lambda_is_positive_definite() {
        let g = path3();
        let q = car_precision(&g, 0.99, 1.0).unwrap();
        let dense_eigs = SymmetricEigen::new(q.to_dense()).eigenvalues;
        assert!(dense_eigs.iter().all(|&e| e > 0.0));
        let chol = EnvelopeCholesky::factor(&q).unwrap();
        assert!((0..3).all(|i| chol.pivot(i) > 0.0));
    }

    #[test]
    fn log_det_examples() {
        let g = path3();
        assert_relative_eq!(log_det_precision(&g, 0.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(log_det_precision(&g, 0.5).unwrap(), 1.5f64.ln(), epsilon = 1e-12);
        let two = ArealGraph::chains(&[3, 3], None).unwrap();
        assert_relative_eq!(
            log_det_precision(&two, 0.5).unwrap(),
            2.0 * 1.5f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_det_derivative_matches_differences() {
        let g = ArealGraph::chains(&[5, 4], None).unwrap();
        let s = g.spectral();
        for &lam in &[0.1, 0.5, 0.9] {
            let h = 1e-6;
            let fd = (s.log_det(lam + h) - s.log_det(lam - h)) / (2.0 * h);
            assert_relative_eq!(s.log_det_derivative(lam), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn top_eigenvalue_per_component_is_one() {
        let g = ArealGraph::chains(&[4, 6, 2], None).unwrap();
        let ones = g
            .spectral()
            .eigenvalues
            .iter()
            .filter(|&&e| (e - 1.0).abs() < 1e-10)
            .count();
        assert_eq!(ones, 3);
        assert!(g.spectral().eigenvalues.iter().all(|&e| e <= 1.0 + 1e-10));
    }

    #[test]
    fn cholesky_log_det_matches_spectral() {
        let g = ArealGraph::chains(&[7, 5], None).unwrap();
        for &lam in &[0.0, 0.4, 0.95] {
            let q = car_precision(&g, lam, 1.0).unwrap();
            let chol = EnvelopeCholesky::factor(&q).unwrap();
            assert_relative_eq!(chol.log_det(), g.spectral().log_det(lam), max_relative = 1e-10);
        }
    }

    #[test]
    fn sample_car_is_deterministic_for_a_seed() {
        let g = path3();
        let a = sample_car(&g, 0.3, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_car(&g, 0.3, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn independent_case_variances() {
        // λ = 0: Σ = σ² D⁻¹.
        let g = path3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let x = sample_car(&g, 0.0, 2.0, &mut rng).unwrap();
            for k in 0..3 {
                sq[k] += x[k] * x[k];
            }
        }
        for k in 0..3 {
            let var = sq[k] / n as f64;
            let expected = 2.0 / g.degree(k) as f64;
            // se of a variance estimate is sqrt(2/n) * var.
            assert!((var - expected).abs() < 4.0 * (2.0 / n as f64).sqrt() * expected);
        }
    }
}
