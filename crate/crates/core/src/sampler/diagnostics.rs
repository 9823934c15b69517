//! Convergence diagnostics over per-chain draw vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rhat {
    pub value: f64,
    /// Set when some half-chain has zero variance; `value` is then +∞.
    pub degenerate: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split R̂ over the 2·m half-chains of `chains`.
pub fn split_rhat(chains: &[&[f64]]) -> Result<Rhat> {
    if chains.len() < 2 {
        return Err(Error::Usage("split R-hat needs at least 2 chains".into()));
    }
    let n_full = chains[0].len();
    if chains.iter().any(|c| c.len() != n_full) {
        return Err(Error::Usage("chains have unequal lengths".into()));
    }
    if n_full < 4 {
        return Err(Error::Usage(format!("split R-hat needs at least 4 draws per chain, got {n_full}")));
    }
    let n = n_full / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n_full - n..]])
        .collect();
    let vars: Vec<f64> = halves.iter().map(|h| variance(h)).collect();
    if vars.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Ok(Rhat { value: f64::INFINITY, degenerate: true });
    }
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let nf = n as f64;
    let w = mean(&vars);
    let b = nf * variance(&means);
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok(Rhat { value: (var_plus / w).sqrt(), degenerate: false })
}

/// Effective sample size with Geyer's initial monotone sequence, pooling
/// autocorrelations across chains.
pub fn effective_sample_size(chains: &[&[f64]]) -> Option<f64> {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min()?;
    if m == 0 || n < 4 {
        return None;
    }
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let m = mean(&c[..n]);
            c[..n].iter().map(|v| v - m).collect()
        })
        .collect();
    let nf = n as f64;
    // Mean over chains of the lag-t autocovariance, computed on demand since
    // the truncation usually stops after a few lags.
    let acov = |t: usize| {
        centered
            .iter()
            .map(|c| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / nf)
            .sum::<f64>()
            / m as f64
    };
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let w = acov(0) * nf / (nf - 1.0);
    if w <= 0.0 {
        return None;
    }
    let b = if m > 1 { variance(&chain_means) } else { 0.0 };
    let var_plus = w * (nf - 1.0) / nf + b;
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    let mut pairs = Vec::new();
    let mut t = 0;
    while t + 1 < n {
        let p = rho(t) + rho(t + 1);
        if p <= 0.0 {
            break;
        }
        pairs.push(p);
        t += 2;
    }
    for i in 1..pairs.len() {
        pairs[i] = pairs[i].min(pairs[i - 1]);
    }
    let tau = -1.0 + 2.0 * pairs.iter().sum::<f64>();
    let tau = tau.max(1.0 / (m as f64 * nf).log10().max(1.0));
    Some(m as f64 * nf / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normals(n: usize, mu: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn iid_chains_give_rhat_near_one() {
        let c: Vec<Vec<f64>> = (0..4).map(|s| normals(10_000, 0.0, s)).collect();
        let refs: Vec<&[f64]> = c.iter().map(|v| v.as_slice()).collect();
        let r = split_rhat(&refs).unwrap();
        assert!((0.999..=1.005).contains(&r.value), "{}", r.value);
        let ess = effective_sample_size(&refs).unwrap();
        assert!(ess > 30_000.0 && ess < 50_000.0, "{ess}");
    }

    #[test]
    fn offset_chains_give_large_rhat() {
        let a = normals(1000, 0.0, 1);
        let b = normals(1000, 5.0, 2);
        let r = split_rhat(&[&a, &b]).unwrap();
        assert!(r.value > 1.5);
    }

    #[test]
    fn rhat_matches_hand_formula() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let b = [2.0, 2.5, 4.0, 7.0];
        // Half-chains: [1,2] [3,5] [2,2.5] [4,7].
        let vars = [0.5, 2.0, 0.125, 4.5];
        let means = [1.5, 4.0, 2.25, 5.5];
        let w = vars.iter().sum::<f64>() / 4.0;
        let mm = means.iter().sum::<f64>() / 4.0;
        let b_var = 2.0 * means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / 3.0;
        let expected = ((0.5 * w + b_var / 2.0) / w).sqrt();
        let r = split_rhat(&[&a, &b]).unwrap();
        assert!((r.value - expected).abs() < 1e-14);
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let a = [2.0; 10];
        let r = split_rhat(&[&a, &a]).unwrap();
        assert!(r.degenerate && r.value.is_infinite());
    }

    #[test]
    fn too_few_chains_or_draws_error() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!(split_rhat(&[&a]).is_err());
        assert!(split_rhat(&[&a[..3], &a[..3]]).is_err());
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        let z = normals(20_000, 0.0, 9);
        let mut x = vec![0.0; z.len()];
        for i in 1..z.len() {
            x[i] = 0.9 * x[i - 1] + z[i];
        }
        // AR(1) with φ = 0.9 has τ = (1 + φ)/(1 − φ) = 19.
        let ess = effective_sample_size(&[&x]).unwrap();
        assert!(ess > 20_000.0 / 19.0 * 0.7 && ess < 20_000.0 / 19.0 * 1.3, "{ess}");
    }
}
