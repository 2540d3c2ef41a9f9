use serde::{Deserialize, Serialize};

use super::{EvalError, PredictionRecord};

pub fn mae(predictions: &[PredictionRecord]) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    Ok(predictions.iter().map(PredictionRecord::abs_error).sum::<f64>() / predictions.len() as f64)
}

/// Correlation coefficient; `degenerate` marks a zero-variance series, for
/// which `r` is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<Correlation, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints { needed: 2, got: xs.len() });
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    Ok(Correlation { r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), degenerate: false })
}

/// Pearson r between predicted and actual ratings.
pub fn prediction_correlation(predictions: &[PredictionRecord]) -> Result<Correlation, EvalError> {
    let p: Vec<f64> = predictions.iter().map(|r| r.predicted).collect();
    let a: Vec<f64> = predictions.iter().map(|r| r.actual).collect();
    pearson_r(&p, &a)
}

/// Earth mover's distance between distributions on the same ordered,
/// unit-spaced support: `Σ |CDF_p − CDF_q|`.
pub fn emd_1d(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::LengthMismatch { left: p.len(), right: q.len() });
    }
    for d in [p, q] {
        let sum: f64 = d.iter().sum();
        if d.is_empty() || d.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(EvalError::NotADistribution);
        }
    }
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q).take(p.len() - 1) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total)
}

/// Normalized histogram of values binned onto `n_bins` points by `bin`.
pub fn histogram<F: Fn(f64) -> usize>(values: &[f64], n_bins: usize, bin: F) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    for v in values {
        h[bin(*v)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}
