//! Seeded k-means (k-means++ seeding, Lloyd iterations) over dense rows.

use rand::Rng;

use crate::seed;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KMeansError {
    #[error("k must be in 1..={points}, got {k}")]
    InvalidK { k: usize, points: usize },
    #[error("rows have inconsistent dimension")]
    Ragged,
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    pub fn fit(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Self, KMeansError> {
        if k == 0 || k > points.len() {
            return Err(KMeansError::InvalidK { k, points: points.len() });
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(KMeansError::Ragged);
        }
        let mut rng = seed::rng(seed);

        // k-means++ seeding
        let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
        let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = nearest.iter().sum();
            let next = if total <= 0.0 {
                // all remaining points coincide with a centroid; take the first unused index
                (0..points.len()).find(|&i| !centroids.iter().any(|c| c == &points[i])).unwrap_or(0)
            } else {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = points.len() - 1;
                for (i, d) in nearest.iter().enumerate() {
                    if target < *d {
                        chosen = i;
                        break;
                    }
                    target -= d;
                }
                chosen
            };
            centroids.push(points[next].clone());
            for (i, p) in points.iter().enumerate() {
                nearest[i] = nearest[i].min(squared_distance(p, &points[next]));
            }
        }

        let mut assignments = vec![usize::MAX; points.len()];
        let mut iterations = 0;
        for _ in 0..max_iter.max(1) {
            iterations += 1;
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let best = nearest_centroid(&centroids, p);
                if assignments[i] != best {
                    assignments[i] = best;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &c) in points.iter().zip(&assignments) {
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                // empty clusters keep their previous centroid
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        Ok(Self { centroids, assignments, iterations })
    }

    pub fn predict(&self, point: &[f64]) -> usize {
        nearest_centroid(&self.centroids, point)
    }
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}
