//! Warm-up adaptation: dual-averaging step size and windowed metric.

use super::metric::Metric;

#[derive(Clone, Debug)]
pub(crate) struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(delta: f64) -> Self {
        DualAveraging { mu: 0.0, s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta, gamma: 0.05, t0: 10.0, kappa: 0.75 }
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    /// Returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance, with full covariance over the leading
/// `block` coordinates.
#[derive(Clone, Debug)]
pub(crate) struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    block: usize,
    comoment: Vec<f64>,
    delta: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize, block: usize) -> Self {
        let block = block.min(dim);
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            block,
            comoment: vec![0.0; block * block],
            delta: vec![0.0; block],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        let b = self.block;
        for i in 0..b {
            self.delta[i] = x[i] - self.mean[i];
        }
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
        for i in 0..b {
            for j in 0..b {
                self.comoment[i * b + j] += self.delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn reset(&mut self) {
        self.n = 0.0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
        self.comoment.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Block covariance regularized the same way as the variances.
    pub fn regularized_block(&self) -> Vec<f64> {
        let n = self.n;
        let b = self.block;
        let mut out: Vec<f64> = self.comoment.iter().map(|c| (n / (n + 5.0)) * c / (n - 1.0)).collect();
        for i in 0..b {
            out[i * b + i] += 1e-3 * (5.0 / (n + 5.0));
        }
        out
    }

    pub fn metric(&self) -> Metric {
        Metric::new(self.regularized_variance(), self.block, self.regularized_block())
    }

    /// Sample variance shrunk toward 1e-3, as Stan regularizes its metric.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Slow-window schedule for metric adaptation.
#[derive(Clone, Debug)]
pub(crate) struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window: usize,
    next_end: usize,
}

impl Windows {
    pub fn new(warmup: usize, init_buffer: usize, term_buffer: usize, base_window: usize) -> Self {
        let (init_buffer, term_buffer, window) = if warmup < 20 {
            (warmup, 0, 0)
        } else if init_buffer + term_buffer + base_window > warmup {
            let i = (0.15 * warmup as f64) as usize;
            let t = (0.1 * warmup as f64) as usize;
            (i, t, warmup - i - t)
        } else {
            (init_buffer, term_buffer, base_window)
        };
        let mut w = Windows { warmup, init_buffer, term_buffer, window, next_end: 0 };
        w.next_end = w.clamp_end(init_buffer + window);
        w
    }

    fn slow_end(&self) -> usize {
        self.warmup - self.term_buffer
    }

    fn clamp_end(&self, end: usize) -> usize {
        // A window too short to double before the terminal buffer absorbs the rest.
        if end + 2 * self.window > self.slow_end() {
            self.slow_end()
        } else {
            end
        }
    }

    /// Whether iteration `i` (0-based) collects samples for the metric.
    pub fn in_slow(&self, i: usize) -> bool {
        self.window > 0 && i >= self.init_buffer && i < self.slow_end()
    }

    /// Whether iteration `i` closes a slow window; advances the schedule.
    pub fn end_of_window(&mut self, i: usize) -> bool {
        if !self.in_slow(i) || i + 1 != self.next_end {
            return false;
        }
        self.window *= 2;
        self.next_end = self.clamp_end(i + 1 + self.window);
        true
    }
}
