//! Euclidean metric: a dense block over the leading coordinates, diagonal
//! elsewhere.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Inverse mass matrix `M⁻¹`.
#[derive(Clone, Debug)]
pub(crate) struct Metric {
    /// Diagonal of `M⁻¹` for coordinates at and after `block`.
    diag: Vec<f64>,
    block: usize,
    /// Row-major `block × block` covariance and its lower Cholesky factor.
    cov: Vec<f64>,
    chol: Vec<f64>,
}

impl Metric {
    pub fn identity(dim: usize, block: usize) -> Self {
        let block = block.min(dim);
        let mut cov = vec![0.0; block * block];
        for i in 0..block {
            cov[i * block + i] = 1.0;
        }
        Metric { diag: vec![1.0; dim], block, chol: cov.clone(), cov }
    }

    /// Builds from a full diagonal and a block covariance. A block that is not
    /// positive definite is replaced by its diagonal.
    pub fn new(diag: Vec<f64>, block: usize, mut cov: Vec<f64>) -> Self {
        debug_assert_eq!(cov.len(), block * block);
        let chol = match cholesky(&cov, block) {
            Some(l) => l,
            None => {
                for i in 0..block {
                    for j in 0..block {
                        if i != j {
                            cov[i * block + j] = 0.0;
                        }
                    }
                }
                cholesky(&cov, block).unwrap_or_else(|| Metric::identity(block, block).chol)
            }
        };
        Metric { diag, block, cov, chol }
    }

    /// Diagonal of `M⁻¹` over all coordinates.
    pub fn variances(&self) -> Vec<f64> {
        let mut out = self.diag.clone();
        for i in 0..self.block {
            out[i] = self.cov[i * self.block + i];
        }
        out
    }

    /// `M⁻¹ p`.
    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        let b = self.block;
        let mut out: Vec<f64> = p.iter().zip(&self.diag).map(|(x, m)| x * m).collect();
        for i in 0..b {
            out[i] = (0..b).map(|j| self.cov[i * b + j] * p[j]).sum();
        }
        out
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(self.velocity(p)).map(|(a, v)| a * v).sum::<f64>()
    }

    /// Draws `p ~ N(0, M)`.
    pub fn sample_momentum<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        let b = self.block;
        for (i, (x, m)) in p.iter_mut().zip(&self.diag).enumerate() {
            let n: f64 = rng.sample(StandardNormal);
            *x = if i < b { n } else { n / m.sqrt() };
        }
        // With M⁻¹ = L Lᵀ, p = L⁻ᵀ z has covariance M.
        for i in (0..b).rev() {
            let mut s = p[i];
            for j in i + 1..b {
                s -= self.chol[j * b + i] * p[j];
            }
            p[i] = s / self.chol[i * b + i];
        }
    }
}

fn cholesky(cov: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 0 {
        return Some(Vec::new());
    }
    let m = DMatrix::from_row_slice(n, n, cov);
    let l = m.cholesky()?.l();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = l[(i, j)];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn momentum_has_the_inverse_block_covariance() {
        let cov = vec![2.0, 1.2, 1.2, 1.0];
        let m = Metric::new(vec![9.0, 0.1, 4.0], 2, cov);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut s = [0.0; 4];
        let mut s3 = 0.0;
        let mut p = vec![0.0; 3];
        for _ in 0..n {
            m.sample_momentum(&mut p, &mut rng);
            s[0] += p[0] * p[0];
            s[1] += p[0] * p[1];
            s[3] += p[1] * p[1];
            s3 += p[2] * p[2];
        }
        // Inverse of [[2, 1.2], [1.2, 1]] has determinant 0.56.
        let det = 0.56;
        assert!((s[0] / n as f64 - 1.0 / det).abs() < 0.03);
        assert!((s[1] / n as f64 + 1.2 / det).abs() < 0.03);
        assert!((s[3] / n as f64 - 2.0 / det).abs() < 0.05);
        assert!((s3 / n as f64 - 0.25).abs() < 0.005);
    }

    #[test]
    fn velocity_and_kinetic_use_the_block() {
        let m = Metric::new(vec![1.0, 1.0, 3.0], 2, vec![2.0, 0.5, 0.5, 1.0]);
        let v = m.velocity(&[1.0, 2.0, 1.0]);
        assert_eq!(v, vec![3.0, 2.5, 3.0]);
        assert!((m.kinetic(&[1.0, 2.0, 1.0]) - 0.5 * (3.0 + 5.0 + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn indefinite_block_falls_back_to_its_diagonal() {
        let m = Metric::new(vec![1.0; 2], 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert_eq!(m.velocity(&[1.0, 1.0]), vec![1.0, 1.0]);
    }
}
