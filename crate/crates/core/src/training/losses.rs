//! Auxiliary loss terms and their derivatives, as free functions over plain
//! vectors so each can be checked in isolation.

use super::TrainingError;

/// Floor applied to usage probabilities before taking logs.
pub const USAGE_SMOOTHING: f64 = 1e-8;
/// Added to the orthogonality denominator.
pub const ORTHOGONALITY_EPS: f64 = 1e-8;

pub use crate::model::kl_to_standard_normal;

/// Population standard deviation of `min(c_i / c̄, 1)`.
pub fn load_std_loss(counts: &[f64]) -> Result<f64, TrainingError> {
    Ok(load_std_with_grad(counts)?.0)
}

/// Loss value and `∂L/∂c_i`. Clipped ratios pass no gradient; at zero spread the
/// gradient is taken as zero.
pub fn load_std_with_grad(counts: &[f64]) -> Result<(f64, Vec<f64>), TrainingError> {
    let e = counts.len() as f64;
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || !(total > 0.0) {
        return Err(TrainingError::ZeroLoad);
    }
    let mean = total / e;
    let ratios: Vec<f64> = counts.iter().map(|c| (c / mean).min(1.0)).collect();
    let r_bar = ratios.iter().sum::<f64>() / e;
    let std = (ratios.iter().map(|r| (r - r_bar).powi(2)).sum::<f64>() / e).sqrt();
    let mut grad = vec![0.0; counts.len()];
    if std > 0.0 {
        // ∂std/∂r_j = (r_j − r̄) / (E·std); r_j = E c_j / C when unclipped
        let d_r: Vec<f64> = ratios.iter().map(|r| (r - r_bar) / (e * std)).collect();
        let unclipped: Vec<bool> = counts.iter().map(|c| c / mean < 1.0).collect();
        let cross: f64 = (0..counts.len()).filter(|&j| unclipped[j]).map(|j| d_r[j] * counts[j]).sum();
        for m in 0..counts.len() {
            let own = if unclipped[m] { d_r[m] * e / total } else { 0.0 };
            grad[m] = own - e * cross / (total * total);
        }
    }
    Ok((std, grad))
}

/// `Σ_i Σ_{j≠k} ⟨x_ij, x_ik⟩ / (⟨x_ik, x_ik⟩ + ε)` over samples and ordered
/// pairs of distinct selected experts.
pub fn orthogonality_loss(expert_outputs: &[Vec<Vec<f64>>]) -> f64 {
    expert_outputs.iter().map(|outs| orthogonality_sample(outs, None)).sum()
}

/// One sample's orthogonality term; accumulates `∂/∂x_ij` into `grads` when given.
pub fn orthogonality_sample(outs: &[Vec<f64>], mut grads: Option<&mut [Vec<f64>]>) -> f64 {
    let mut total = 0.0;
    for (j, a) in outs.iter().enumerate() {
        for (k, b) in outs.iter().enumerate() {
            if j == k {
                continue;
            }
            let ab = dot(a, b);
            let denom = dot(b, b) + ORTHOGONALITY_EPS;
            total += ab / denom;
            if let Some(g) = grads.as_deref_mut() {
                for i in 0..a.len() {
                    g[j][i] += b[i] / denom;
                    g[k][i] += a[i] / denom - 2.0 * ab * b[i] / (denom * denom);
                }
            }
        }
    }
    total
}

/// `−(1/BE) Σ_i Σ_j (s_ij − s̄_j)²` over a batch of gate score rows.
pub fn variance_loss(scores: &[Vec<f64>]) -> f64 {
    variance_with_grad(scores).0
}

pub fn variance_with_grad(scores: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let b = scores.len();
    if b == 0 {
        return (0.0, Vec::new());
    }
    let e = scores[0].len();
    let means: Vec<f64> = (0..e).map(|j| scores.iter().map(|row| row[j]).sum::<f64>() / b as f64).collect();
    let scale = 1.0 / (b * e) as f64;
    let mut total = 0.0;
    let mut grad = vec![vec![0.0; e]; b];
    for (i, row) in scores.iter().enumerate() {
        for j in 0..e {
            let dev = row[j] - means[j];
            total += dev * dev;
            grad[i][j] = -2.0 * scale * dev;
        }
    }
    (-scale * total, grad)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let (a, b) = (a.max(USAGE_SMOOTHING), b.max(USAGE_SMOOTHING));
            a * (a / b).ln()
        })
        .sum()
}

/// `½[KL(p‖q) + KL(q‖p)]` with entries floored at [`USAGE_SMOOTHING`].
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    0.5 * (kl_divergence(p, q) + kl_divergence(q, p))
}

/// Sum over categories of symmetric KL over unordered subgroup pairs.
/// `groups[d]` holds the usage distribution of each subgroup in category `d`.
pub fn demo_specialization_loss(groups: &[Vec<Vec<f64>>]) -> f64 {
    groups.iter().map(|dists| demo_category_with_grad(dists).0).sum()
}

/// One category's term and `∂/∂P_g` for every subgroup distribution.
pub fn demo_category_with_grad(dists: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let smoothed: Vec<Vec<f64>> = dists.iter().map(|p| p.iter().map(|v| v.max(USAGE_SMOOTHING)).collect()).collect();
    let mut total = 0.0;
    let mut grad: Vec<Vec<f64>> = dists.iter().map(|p| vec![0.0; p.len()]).collect();
    for g in 0..dists.len() {
        for h in (g + 1)..dists.len() {
            let (p, q) = (&smoothed[g], &smoothed[h]);
            for m in 0..p.len() {
                let log_ratio = (p[m] / q[m]).ln();
                total += 0.5 * (p[m] - q[m]) * log_ratio;
                if dists[g][m] >= USAGE_SMOOTHING {
                    grad[g][m] += 0.5 * (log_ratio + 1.0 - q[m] / p[m]);
                }
                if dists[h][m] >= USAGE_SMOOTHING {
                    grad[h][m] += 0.5 * (-log_ratio + 1.0 - p[m] / q[m]);
                }
            }
        }
    }
    (total, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_std_cases() {
        assert_eq!(load_std_loss(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((load_std_loss(&[0.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        // ratios (0.5, 0.5, 0.5, 1): mean 0.625, var = (3·0.015625 + 0.140625)/4
        let expected = ((3.0 * 0.125f64.powi(2) + 0.375f64.powi(2)) / 4.0).sqrt();
        assert!((load_std_loss(&[1.0, 1.0, 1.0, 5.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.2165).abs() < 1e-4);
        assert!(matches!(load_std_loss(&[0.0, 0.0]), Err(TrainingError::ZeroLoad)));
    }

    #[test]
    fn orthogonality_cases() {
        let orth = vec![vec![vec![1.0, 0.0], vec![0.0, 3.0]]];
        assert_eq!(orthogonality_loss(&orth), 0.0);
        let same = vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]];
        assert!((orthogonality_loss(&same) - 2.0).abs() < 1e-7);
        let mixed = vec![vec![vec![1.0, 0.0], vec![1.0, 1.0]]];
        let expected = 1.0 / (2.0 + ORTHOGONALITY_EPS) + 1.0 / (1.0 + ORTHOGONALITY_EPS);
        assert!((orthogonality_loss(&mixed) - expected).abs() < 1e-15);
        assert!((expected - 1.5).abs() < 1e-7);
        let single = vec![vec![vec![5.0, 1.0]]];
        assert_eq!(orthogonality_loss(&single), 0.0);
    }

    #[test]
    fn variance_cases() {
        assert_eq!(variance_loss(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
        assert!((variance_loss(&[vec![0.0], vec![2.0]]) + 1.0).abs() < 1e-15);
        assert!((variance_loss(&[vec![0.0, 0.0], vec![2.0, 4.0]]) + 2.5).abs() < 1e-15);
    }

    #[test]
    fn demo_specialization_cases() {
        let same = vec![vec![vec![0.3, 0.7], vec![0.3, 0.7], vec![0.3, 0.7]]];
        assert_eq!(demo_specialization_loss(&same), 0.0);
        let single = vec![vec![vec![0.9, 0.1]]];
        assert_eq!(demo_specialization_loss(&single), 0.0);
        let pair = vec![vec![vec![0.5, 0.5], vec![0.9, 0.1]]];
        let kl_pq = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl_qp = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let expected = 0.5 * (kl_pq + kl_qp);
        assert!((demo_specialization_loss(&pair) - expected).abs() < 1e-15);
        assert!((expected - 0.4395).abs() < 1e-4);
    }

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn load_gradient_matches_finite_differences() {
        for counts in [vec![1.0, 2.0, 4.0], vec![0.5, 3.0, 1.0, 2.2], vec![2.0, 1.0]] {
            let (_, g) = load_std_with_grad(&counts).unwrap();
            let n = fd(|c| load_std_loss(c).unwrap(), &counts);
            for (a, b) in g.iter().zip(&n) {
                assert!((a - b).abs() < 1e-6, "{g:?} vs {n:?}");
            }
        }
    }

    #[test]
    fn orthogonality_gradient_matches_finite_differences() {
        let outs = vec![vec![0.3, -1.2, 0.5], vec![1.1, 0.4, -0.7], vec![-0.2, 0.9, 0.6]];
        let mut g = vec![vec![0.0; 3]; 3];
        orthogonality_sample(&outs, Some(&mut g));
        let flat: Vec<f64> = outs.iter().flatten().copied().collect();
        let n = fd(|v| orthogonality_sample(&v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>(), None), &flat);
        for (a, b) in g.iter().flatten().zip(&n) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn demo_gradient_matches_finite_differences() {
        let dists = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]];
        let (_, g) = demo_category_with_grad(&dists);
        let flat: Vec<f64> = dists.iter().flatten().copied().collect();
        let n = fd(|v| demo_category_with_grad(&v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>()).0, &flat);
        for (a, b) in g.iter().flatten().zip(&n) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
