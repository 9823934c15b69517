//! Multinomial no-U-turn transition.

use rand::Rng;

use super::metric::Metric;
use super::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone, Debug)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn new<D: LogDensity + ?Sized>(target: &D, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_grad(&q, &mut grad);
        let p = vec![0.0; q.len()];
        Point { q, p, grad, logp }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct TransitionStats {
    pub accept_stat: f64,
    pub n_leapfrog: u32,
    pub tree_depth: u32,
    pub divergent: bool,
    pub energy: f64,
}

pub(crate) struct Nuts<'a, D: LogDensity + ?Sized> {
    pub target: &'a D,
    pub metric: Metric,
    pub step_size: f64,
    pub max_depth: u32,
}

/// A finished subtree, oriented in generation order.
struct Tree {
    log_sum_w: f64,
    sample: Point,
    rho: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
}

struct Walk {
    h0: f64,
    n_leapfrog: u32,
    sum_metro: f64,
    divergent: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn no_uturn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl<D: LogDensity + ?Sized> Nuts<'_, D> {
    pub fn kinetic(&self, p: &[f64]) -> f64 {
        self.metric.kinetic(p)
    }

    pub fn hamiltonian(&self, z: &Point) -> f64 {
        -z.logp + self.kinetic(&z.p)
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        self.metric.velocity(p)
    }

    pub fn sample_momentum<R: Rng + ?Sized>(&self, z: &mut Point, rng: &mut R) {
        self.metric.sample_momentum(&mut z.p, rng);
    }

    pub fn leapfrog(&self, z: &mut Point, eps: f64) {
        let half = 0.5 * eps;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
        for (q, v) in z.q.iter_mut().zip(self.metric.velocity(&z.p)) {
            *q += eps * v;
        }
        z.logp = self.target.log_density_grad(&z.q, &mut z.grad);
        if z.logp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += half * g;
            }
        }
    }

    fn build_tree<R: Rng + ?Sized>(
        &self,
        depth: u32,
        z: &mut Point,
        eps: f64,
        walk: &mut Walk,
        rng: &mut R,
    ) -> Option<Tree> {
        if depth == 0 {
            self.leapfrog(z, eps);
            walk.n_leapfrog += 1;
            let h = if z.logp.is_finite() { self.hamiltonian(z) } else { f64::INFINITY };
            if !h.is_finite() || h - walk.h0 > MAX_DELTA_H {
                walk.divergent = true;
                return None;
            }
            let log_w = walk.h0 - h;
            walk.sum_metro += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            let p_sharp = self.p_sharp(&z.p);
            return Some(Tree {
                log_sum_w: log_w,
                sample: z.clone(),
                rho: z.p.clone(),
                p_sharp_beg: p_sharp.clone(),
                p_sharp_end: p_sharp,
                p_beg: z.p.clone(),
                p_end: z.p.clone(),
            });
        }
        let first = self.build_tree(depth - 1, z, eps, walk, rng)?;
        let second = self.build_tree(depth - 1, z, eps, walk, rng)?;
        let log_sum_w = log_add_exp(first.log_sum_w, second.log_sum_w);
        let take_second = rng.random::<f64>() < (second.log_sum_w - log_sum_w).exp();
        let rho = add(&first.rho, &second.rho);
        let mut ok = no_uturn(&first.p_sharp_beg, &second.p_sharp_end, &rho);
        ok &= no_uturn(&first.p_sharp_beg, &second.p_sharp_beg, &add(&first.rho, &second.p_beg));
        ok &= no_uturn(&first.p_sharp_end, &second.p_sharp_end, &add(&second.rho, &first.p_end));
        if !ok {
            return None;
        }
        Some(Tree {
            log_sum_w,
            sample: if take_second { second.sample } else { first.sample },
            rho,
            p_sharp_beg: first.p_sharp_beg,
            p_sharp_end: second.p_sharp_end,
            p_beg: first.p_beg,
            p_end: second.p_end,
        })
    }

    /// One transition from `current`; returns the new state and statistics.
    pub fn transition<R: Rng + ?Sized>(&self, current: &Point, rng: &mut R) -> (Point, TransitionStats) {
        let mut z0 = current.clone();
        self.sample_momentum(&mut z0, rng);
        let h0 = self.hamiltonian(&z0);
        let mut walk = Walk { h0, n_leapfrog: 0, sum_metro: 0.0, divergent: false };

        let mut sample = z0.clone();
        let mut log_sum_w = 0.0;
        let mut rho = z0.p.clone();
        // Time-oriented edges of the whole trajectory.
        let mut p_sharp_left = self.p_sharp(&z0.p);
        let mut p_sharp_right = p_sharp_left.clone();
        let mut p_left = z0.p.clone();
        let mut p_right = z0.p.clone();
        let mut z_left = z0.clone();
        let mut z_right = z0;
        let mut depth = 0;

        while depth < self.max_depth {
            let forward = rng.random::<f64>() < 0.5;
            let sub = if forward {
                self.build_tree(depth, &mut z_right, self.step_size, &mut walk, rng)
            } else {
                self.build_tree(depth, &mut z_left, -self.step_size, &mut walk, rng)
            };
            depth += 1;
            let Some(sub) = sub else { break };

            if rng.random::<f64>().ln() < sub.log_sum_w - log_sum_w {
                sample = sub.sample;
            }
            log_sum_w = log_add_exp(log_sum_w, sub.log_sum_w);

            // Orient the subtree in time, then check the merged trajectory.
            let (old_rho, ok) = if forward {
                let ok1 = no_uturn(&p_sharp_left, &sub.p_sharp_beg, &add(&rho, &sub.p_beg));
                let ok2 = no_uturn(&p_sharp_right, &sub.p_sharp_end, &add(&sub.rho, &p_right));
                p_sharp_right = sub.p_sharp_end;
                p_right = sub.p_end;
                (std::mem::take(&mut rho), ok1 && ok2)
            } else {
                // Generated backwards: its last point is the new left edge.
                let ok1 = no_uturn(&sub.p_sharp_end, &p_sharp_left, &add(&sub.rho, &p_left));
                let ok2 = no_uturn(&sub.p_sharp_beg, &p_sharp_right, &add(&rho, &sub.p_beg));
                p_sharp_left = sub.p_sharp_end;
                p_left = sub.p_end;
                (std::mem::take(&mut rho), ok1 && ok2)
            };
            rho = add(&old_rho, &sub.rho);
            if !(ok && no_uturn(&p_sharp_left, &p_sharp_right, &rho)) {
                break;
            }
        }
        let stats = TransitionStats {
            accept_stat: if walk.n_leapfrog > 0 { walk.sum_metro / walk.n_leapfrog as f64 } else { 0.0 },
            n_leapfrog: walk.n_leapfrog,
            tree_depth: depth,
            divergent: walk.divergent,
            energy: self.hamiltonian(&sample),
        };
        (sample, stats)
    }

    /// Doubles or halves the step size until one leapfrog step crosses an
    /// acceptance probability of 0.8.
    pub fn find_reasonable_step_size<R: Rng + ?Sized>(&mut self, current: &Point, rng: &mut R) {
        let mut z = current.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step_size);
        let delta = h0 - self.energy_or_inf(&z);
        let up = delta > 0.8f64.ln();
        for _ in 0..100 {
            let mut z = current.clone();
            self.sample_momentum(&mut z, rng);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step_size);
            let delta = h0 - self.energy_or_inf(&z);
            if (up && !(delta > 0.8f64.ln())) || (!up && !(delta < 0.8f64.ln())) {
                break;
            }
            self.step_size = if up { self.step_size * 2.0 } else { self.step_size * 0.5 };
            if !(1e-10..=1e7).contains(&self.step_size) {
                self.step_size = self.step_size.clamp(1e-10, 1e7);
                break;
            }
        }
    }

    fn energy_or_inf(&self, z: &Point) -> f64 {
        if z.logp.is_finite() {
            self.hamiltonian(z)
        } else {
            f64::INFINITY
        }
    }
}
