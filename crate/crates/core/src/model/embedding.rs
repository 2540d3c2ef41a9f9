use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Diagonal Gaussian posterior: a mean vector and a log-variance vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_variance.len(), "mean and log-variance must have equal length");
        Self { mean, log_variance }
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_variance: vec![0.0; dim] }
    }

    pub fn random<R: Rng>(dim: usize, mean_scale: f64, log_variance: f64, rng: &mut R) -> Self {
        let mean = (0..dim).map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { mean, log_variance: vec![log_variance; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_variance).all(|v| v.is_finite())
    }

    /// Reparameterized draw `mean + exp(½·log_var) ⊙ eps`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        reparameterize(&self.mean, &self.log_variance, eps)
    }

    pub fn kl_to_standard_normal(&self) -> f64 {
        kl_to_standard_normal(&self.mean, &self.log_variance)
    }
}

pub fn reparameterize(mean: &[f64], log_variance: &[f64], eps: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_variance)
        .zip(eps)
        .map(|((m, lv), e)| if *e == 0.0 { *m } else { m + (0.5 * lv).exp() * e })
        .collect()
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = Σ ½(μ² + σ² − 1 − log σ²)`.
pub fn kl_to_standard_normal(mean: &[f64], log_variance: &[f64]) -> f64 {
    mean.iter().zip(log_variance).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(GaussianEmbedding::standard(3).kl_to_standard_normal(), 0.0);
        assert!((kl_to_standard_normal(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_to_standard_normal(&[0.0, 0.0], &[4f64.ln(), 0.0]) - expected).abs() < 1e-12);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_returns_mean_exactly() {
        let e = GaussianEmbedding::new(vec![0.3, -1.7], vec![2.0, -3.0]);
        assert_eq!(e.sample_with(&[0.0, 0.0]), e.mean);
    }
}
