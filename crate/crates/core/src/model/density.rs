//! Log density and analytic gradient on the unconstrained sampling space.

use crate::data::Dataset;
use crate::error::Result;
use crate::graph::ArealGraph;
use crate::model::{log_logistic, logistic, ModelSpec, ModelVariant, ParamLayout, Parameterization, Parameters};

const THETA: usize = 0;
const PHI: usize = 1;
const ETA: usize = 2;

#[derive(Debug, Clone)]
struct ObservedCell {
    cell: usize,
    y: f64,
    /// Unconstrained indices of the random effects entering this cell, with
    /// their block (θ, Φ or η).
    effects: [(usize, usize); 2],
    n_effects: usize,
}

/// A model bound to a dataset: the log posterior over unconstrained
/// parameters, including transform Jacobians.
///
/// Immutable and `Sync`, so one target can serve several chains.
#[derive(Debug, Clone)]
pub struct Target<'a> {
    spec: ModelSpec,
    dataset: &'a Dataset,
    layout: ParamLayout,
    observed: Vec<ObservedCell>,
    shift: Option<Shift>,
}

/// Linear map `ψ_i = effect_i + x̄_i · β` over the spatial block.
#[derive(Debug, Clone)]
struct Shift {
    block: std::ops::Range<usize>,
    /// Row-major `block.len() × n_beta`, intercept column included.
    xbar: Vec<f64>,
    n_beta: usize,
}

impl Shift {
    fn new(variant: ModelVariant, layout: &ParamLayout, ds: &Dataset) -> Self {
        let nb = layout.n_beta();
        let kk = ds.n_sections();
        let row = |cell: usize| {
            let mut r = vec![1.0];
            r.extend_from_slice(ds.covariates(cell));
            r
        };
        let mut xbar = Vec::new();
        let block = match variant {
            ModelVariant::M1 => layout.theta.clone(),
            _ => layout.phi.clone(),
        };
        if variant == ModelVariant::M4 {
            for cell in 0..ds.n_cells() {
                xbar.extend(row(cell));
            }
        } else {
            for k in 0..kk {
                let mut acc = vec![0.0; nb];
                let mut n = 0.0;
                for t in 0..ds.n_years {
                    let cell = t * kk + k;
                    if ds.counts[cell].is_some() {
                        acc.iter_mut().zip(row(cell)).for_each(|(a, x)| *a += x);
                        n += 1.0;
                    }
                }
                if n == 0.0 {
                    acc[0] = 1.0;
                } else {
                    acc.iter_mut().for_each(|a| *a /= n);
                }
                xbar.extend(acc);
            }
        }
        debug_assert_eq!(xbar.len(), block.len() * nb);
        Shift { block, xbar, n_beta: nb }
    }

    /// Adds `sign · x̄_i · β` to each block entry.
    fn apply(&self, u: &mut [f64], beta_start: usize, sign: f64) {
        let beta: Vec<f64> = u[beta_start..beta_start + self.n_beta].to_vec();
        for (i, idx) in self.block.clone().enumerate() {
            let x = &self.xbar[i * self.n_beta..(i + 1) * self.n_beta];
            u[idx] += sign * x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

impl<'a> Target<'a> {
    pub fn new(spec: ModelSpec, dataset: &'a Dataset) -> Self {
        let layout = ParamLayout::for_dataset(spec.variant, dataset);
        let kk = dataset.n_sections();
        let tt = dataset.n_years;
        let g = &dataset.graph;
        let observed = (0..dataset.n_cells())
            .filter_map(|cell| {
                let y = dataset.counts[cell]? as f64;
                let (k, t) = (cell % kk, cell / kk);
                let mut effects = [(0, 0); 2];
                let n_effects = match spec.variant {
                    ModelVariant::M1 => {
                        effects[0] = (layout.theta.start + k, THETA);
                        1
                    }
                    ModelVariant::M2 => {
                        effects[0] = (layout.phi.start + k, PHI);
                        1
                    }
                    ModelVariant::M3a => {
                        effects[0] = (layout.phi.start + k, PHI);
                        effects[1] = (layout.eta.start + t, ETA);
                        2
                    }
                    ModelVariant::M3b => {
                        effects[0] = (layout.phi.start + k, PHI);
                        effects[1] = (layout.eta.start + g.group_of(k) * tt + t, ETA);
                        2
                    }
                    ModelVariant::M4 => {
                        effects[0] = (layout.phi.start + t * kk + k, PHI);
                        1
                    }
                };
                Some(ObservedCell {
                    cell,
                    y,
                    effects,
                    n_effects,
                })
            })
            .collect();
        let shift = (spec.parameterization == Parameterization::Shifted)
            .then(|| Shift::new(spec.variant, &layout, dataset));
        Target {
            spec,
            dataset,
            layout,
            observed,
            shift,
        }
    }

    /// Maps unconstrained values to natural parameters.
    pub fn constrain(&self, u: &[f64]) -> Result<Parameters> {
        match &self.shift {
            Some(shift) => {
                let mut v = u.to_vec();
                shift.apply(&mut v, self.layout.beta.start, -1.0);
                Parameters::constrain(&self.centered_spec(), &self.layout, &v)
            }
            None => Parameters::constrain(&self.spec, &self.layout, u),
        }
    }

    /// Inverse of [`Target::constrain`].
    pub fn unconstrain(&self, params: &Parameters) -> Result<Vec<f64>> {
        match &self.shift {
            Some(shift) => {
                let mut u = params.unconstrain(&self.centered_spec(), &self.layout)?;
                shift.apply(&mut u, self.layout.beta.start, 1.0);
                Ok(u)
            }
            None => params.unconstrain(&self.spec, &self.layout),
        }
    }

    fn centered_spec(&self) -> ModelSpec {
        self.spec.with_parameterization(Parameterization::Centered)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        let mut grad = vec![0.0; u.len()];
        self.log_density_grad(u, &mut grad)
    }

    /// Writes the gradient into `grad` and returns the log density. Non-finite
    /// densities are reported as `−∞`.
    pub fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(u.len(), self.layout.dim);
        let Some(shift) = &self.shift else {
            return self.centered_log_density_grad(u, grad);
        };
        let mut v = u.to_vec();
        let b0 = self.layout.beta.start;
        shift.apply(&mut v, b0, -1.0);
        let lp = self.centered_log_density_grad(&v, grad);
        // Chain rule through effect = ψ − x̄ β.
        for (i, idx) in shift.block.clone().enumerate() {
            let g = grad[idx];
            let x = &shift.xbar[i * shift.n_beta..(i + 1) * shift.n_beta];
            for (gb, xj) in grad[b0..b0 + shift.n_beta].iter_mut().zip(x) {
                *gb -= g * xj;
            }
        }
        lp
    }

    fn centered_log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let l = &self.layout;
        let ds = self.dataset;
        let pr = &self.spec.priors;
        let nc = self.spec.parameterization == Parameterization::NonCentered;
        let variances = [l.sigma2_theta, l.sigma2_phi, l.sigma2_eta];
        let scale: [f64; 3] = variances.map(|slot| slot.map_or(1.0, |i| u[i].exp()));
        let mult: [f64; 3] = if nc { scale.map(f64::sqrt) } else { [1.0; 3] };

        let beta = &u[l.beta.clone()];
        let b0 = l.beta.start;
        let ln_rate = self.spec.rate_scale.ln();
        let mut lp = 0.0;
        let mut scale_acc = [0.0; 3];
        for o in &self.observed {
            let x = ds.covariates(o.cell);
            let mut eta = beta[0] + ds.offsets[o.cell] + ln_rate;
            for (xi, bi) in x.iter().zip(&beta[1..]) {
                eta += xi * bi;
            }
            for &(idx, block) in &o.effects[..o.n_effects] {
                eta += mult[block] * u[idx];
            }
            let mu = eta.exp();
            lp += o.y * eta - mu;
            let r = o.y - mu;
            grad[b0] += r;
            for (gi, xi) in grad[b0 + 1..l.beta.end].iter_mut().zip(x) {
                *gi += r * xi;
            }
            for &(idx, block) in &o.effects[..o.n_effects] {
                grad[idx] += mult[block] * r;
                scale_acc[block] += r * u[idx];
            }
        }
        if nc {
            for (block, slot) in variances.iter().enumerate() {
                if let Some(i) = slot {
                    grad[*i] += 0.5 * mult[block] * scale_acc[block];
                }
            }
        }

        for (j, b) in beta.iter().enumerate() {
            lp += -0.5 * (2.0 * std::f64::consts::PI * pr.beta_variance).ln() - b * b / (2.0 * pr.beta_variance);
            grad[b0 + j] -= b / pr.beta_variance;
        }

        // Random-effect densities. Non-centered effects have unit scale.
        let field_scale = |block: usize| if nc { 1.0 } else { scale[block] };
        let lambda = l.lambda.map_or(0.0, |i| logistic(u[i]));
        let graph = &ds.graph;
        let kk = ds.n_sections();
        let tt = ds.n_years;
        let mut d_lambda = 0.0;
        let mut d_rho = 0.0;
        let mut d_log_scale = [0.0; 3];
        let mut d_rho_groups = Vec::new();

        match self.spec.variant {
            ModelVariant::M1 => {
                let f = field_logp(u, grad, l.theta.clone(), kk, 1, None, 0.0, field_scale(THETA));
                lp += f.logp;
                d_log_scale[THETA] += f.d_log_scale;
            }
            ModelVariant::M2 | ModelVariant::M3a | ModelVariant::M3b => {
                let f = field_logp(u, grad, l.phi.clone(), kk, 1, Some((graph, lambda)), 0.0, field_scale(PHI));
                lp += f.logp;
                d_lambda += f.d_lambda;
                d_log_scale[PHI] += f.d_log_scale;
                if self.spec.variant == ModelVariant::M3a {
                    let rho = logistic(u[l.rho.unwrap()]);
                    let f = field_logp(u, grad, l.eta.clone(), 1, tt, None, rho, field_scale(ETA));
                    lp += f.logp;
                    d_rho += f.d_rho;
                    d_log_scale[ETA] += f.d_log_scale;
                } else if self.spec.variant == ModelVariant::M3b {
                    let rhos = group_rhos(u, l);
                    for (gi, &rho) in rhos.iter().enumerate() {
                        let start = l.eta.start + gi * tt;
                        let f = field_logp(u, grad, start..start + tt, 1, tt, None, rho, field_scale(ETA));
                        lp += f.logp;
                        d_log_scale[ETA] += f.d_log_scale;
                        d_rho_groups.push(f.d_rho * rho * (1.0 - rho));
                    }
                }
            }
            ModelVariant::M4 => {
                let rho = logistic(u[l.rho.unwrap()]);
                let f = field_logp(u, grad, l.phi.clone(), kk, tt, Some((graph, lambda)), rho, field_scale(PHI));
                lp += f.logp;
                d_lambda += f.d_lambda;
                d_rho += f.d_rho;
                d_log_scale[PHI] += f.d_log_scale;
            }
        }

        // Inverse-gamma priors on ln σ², including the log Jacobian u.
        let (a, b) = (pr.inv_gamma_shape, pr.inv_gamma_scale);
        let norm = a * b.ln() - statrs::function::gamma::ln_gamma(a);
        for (block, slot) in variances.iter().enumerate() {
            if let Some(i) = *slot {
                let v = u[i];
                lp += norm - a * v - b * (-v).exp();
                grad[i] += -a + b * (-v).exp();
                if !nc {
                    grad[i] += d_log_scale[block];
                }
            }
        }

        // Uniform priors on λ, ρ, P with logit Jacobians.
        if let Some(i) = l.lambda {
            lp += log_logistic(u[i]) + log_logistic(-u[i]);
            grad[i] += 1.0 - 2.0 * lambda + d_lambda * lambda * (1.0 - lambda);
        }
        if let Some(i) = l.rho {
            let rho = logistic(u[i]);
            lp += log_logistic(u[i]) + log_logistic(-u[i]);
            grad[i] += 1.0 - 2.0 * rho + d_rho * rho * (1.0 - rho);
        }
        if let Some(i) = l.p_global {
            let p = logistic(u[i]);
            lp += log_logistic(u[i]) + log_logistic(-u[i]);
            grad[i] += 1.0 - 2.0 * p + d_rho_groups.iter().sum::<f64>();
            let last = *d_rho_groups.last().unwrap_or(&0.0);
            for (j, ri) in l.r.clone().enumerate() {
                let r = u[ri];
                lp += -0.5 * (2.0 * std::f64::consts::PI * pr.offset_variance).ln() - r * r / (2.0 * pr.offset_variance);
                grad[ri] += d_rho_groups[j] - last - r / pr.offset_variance;
            }
        }

        if lp.is_finite() {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// `ρ_g = logistic(logit P + r_g)` with `r_G = −Σ r_g`, from unconstrained values.
fn group_rhos(u: &[f64], l: &ParamLayout) -> Vec<f64> {
    let lp = u[l.p_global.unwrap()];
    let free = &u[l.r.clone()];
    let last = -free.iter().sum::<f64>();
    free.iter()
        .chain(std::iter::once(&last))
        .map(|r| logistic(lp + r))
        .collect()
}

struct FieldTerms {
    logp: f64,
    d_rho: f64,
    d_lambda: f64,
    /// Derivative with respect to the log of the innovation variance.
    d_log_scale: f64,
}

/// Gaussian AR(1) field over `years` maps of `dim` values:
///
/// ```text
/// v_1 ~ MVN(0, s Q₀⁻¹),  v_t | v_{t−1} ~ MVN(ρ v_{t−1}, s Q₀⁻¹)
/// ```
///
/// with `Q₀ = D − λW` for a CAR field or the identity otherwise. Values are read
/// from `u[range]` (year-major) and their gradient is accumulated into
/// `grad[range]`.
#[allow(clippy::too_many_arguments)]
fn field_logp(
    u: &[f64],
    grad: &mut [f64],
    range: std::ops::Range<usize>,
    dim: usize,
    years: usize,
    car: Option<(&ArealGraph, f64)>,
    rho: f64,
    s: f64,
) -> FieldTerms {
    let v = &u[range.clone()];
    let gv = &mut grad[range];
    let mut e = vec![0.0; dim];
    let mut we = vec![0.0; dim];
    let mut qe = vec![0.0; dim];
    let mut logp = 0.0;
    let mut d_rho = 0.0;
    let mut wq_sum = 0.0;
    let mut quad_sum = 0.0;
    for t in 0..years {
        let cur = &v[t * dim..(t + 1) * dim];
        if t == 0 {
            e.copy_from_slice(cur);
        } else {
            let prev = &v[(t - 1) * dim..t * dim];
            for i in 0..dim {
                e[i] = cur[i] - rho * prev[i];
            }
        }
        let (quad, wq) = match car {
            Some((g, lambda)) => {
                let mut quad = 0.0;
                let mut wq = 0.0;
                for i in 0..dim {
                    let nb = g.neighbors(i);
                    let w: f64 = nb.iter().map(|&j| e[j]).sum();
                    we[i] = w;
                    qe[i] = nb.len() as f64 * e[i] - lambda * w;
                    quad += e[i] * qe[i];
                    wq += e[i] * w;
                }
                (quad, wq)
            }
            None => {
                qe.copy_from_slice(&e);
                (e.iter().map(|x| x * x).sum::<f64>(), 0.0)
            }
        };
        quad_sum += quad;
        wq_sum += wq;
        let base = t * dim;
        for i in 0..dim {
            gv[base + i] -= qe[i] / s;
        }
        if t > 0 {
            let prev_base = (t - 1) * dim;
            let mut dot = 0.0;
            for i in 0..dim {
                gv[prev_base + i] += rho * qe[i] / s;
                dot += qe[i] * v[prev_base + i];
            }
            d_rho += dot / s;
        }
    }
    let _ = &we;
    let n = (dim * years) as f64;
    let (log_det, d_log_det) = match car {
        Some((g, lambda)) => (g.spectral().log_det(lambda), g.spectral().log_det_derivative(lambda)),
        None => (0.0, 0.0),
    };
    logp += -0.5 * n * (2.0 * std::f64::consts::PI * s).ln() + 0.5 * years as f64 * log_det - quad_sum / (2.0 * s);
    FieldTerms {
        logp,
        d_rho,
        d_lambda: 0.5 * years as f64 * d_log_det + wq_sum / (2.0 * s),
        d_log_scale: -0.5 * n + quad_sum / (2.0 * s),
    }
}
