//! Closed-form ridge regression used by the demographic-signal and
//! cross-group expert analyses.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum RidgeError {
    #[error("ridge penalty must be positive, got {0}")]
    NonPositivePenalty(f64),
    #[error("design has {rows} rows but target has {targets} entries")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("normal equations are not positive definite")]
    Singular,
}

/// Solves `(XᵀX + λI) β = Xᵀy` with no intercept and no rescaling.
pub fn solve(x: &DMatrix<f64>, y: &DVector<f64>, penalty: f64) -> Result<DVector<f64>, RidgeError> {
    if !(penalty > 0.0) {
        return Err(RidgeError::NonPositivePenalty(penalty));
    }
    if x.nrows() != y.len() {
        return Err(RidgeError::ShapeMismatch { rows: x.nrows(), targets: y.len() });
    }
    let xt = x.transpose();
    let mut gram = &xt * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += penalty;
    }
    let rhs = &xt * y;
    let chol = gram.cholesky().ok_or(RidgeError::Singular)?;
    Ok(chol.solve(&rhs))
}

/// Column means and (population) standard deviations.
pub fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        sds.push(var.sqrt());
    }
    (means, sds)
}

/// Centers and scales each column to unit variance. Constant columns become zero.
pub fn standardize_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (means, sds) = column_moments(x);
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        for v in col.iter_mut() {
            *v = if sds[j] > 1e-12 { (*v - means[j]) / sds[j] } else { 0.0 };
        }
    }
    out
}

/// Ridge fit on standardized features against a centered target. The
/// intercept is the target mean and is not penalized.
#[derive(Debug, Clone)]
pub struct StandardizedRidge {
    pub coefficients: DVector<f64>,
    pub intercept: f64,
}

impl StandardizedRidge {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, penalty: f64) -> Result<Self, RidgeError> {
        if x.nrows() != y.len() {
            return Err(RidgeError::ShapeMismatch { rows: x.nrows(), targets: y.len() });
        }
        let xs = standardize_columns(x);
        let intercept = if y.is_empty() { 0.0 } else { y.mean() };
        let yc = y.map(|v| v - intercept);
        let coefficients = solve(&xs, &yc, penalty)?;
        Ok(Self { coefficients, intercept })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_matches_hand_inverse() {
        // X = [[1,0],[0,1],[1,1]], y = [1,2,3], λ = 1
        // XᵀX + I = [[3,1],[1,3]], Xᵀy = [4,5]; inverse = 1/8 [[3,-1],[-1,3]]
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let beta = solve(&x, &y, 1.0).unwrap();
        assert!((beta[0] - (3.0 * 4.0 - 5.0) / 8.0).abs() < 1e-12);
        assert!((beta[1] - (-4.0 + 3.0 * 5.0) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_penalty_rejected() {
        let x = DMatrix::zeros(2, 2);
        let y = DVector::zeros(2);
        assert!(matches!(solve(&x, &y, 0.0), Err(RidgeError::NonPositivePenalty(_))));
    }

    #[test]
    fn constant_target_gives_zero_coefficients() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let y = DVector::from_element(4, 3.5);
        let fit = StandardizedRidge::fit(&x, &y, 1.0).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
        assert_eq!(fit.intercept, 3.5);
    }
}
