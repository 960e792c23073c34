//! Gaussian feature statistics and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::Array;

use super::MetricsError;

/// Mean and unbiased covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FidStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FidStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of `[N, d]` embeddings.
pub fn feature_stats(features: &Array) -> Result<FidStats, MetricsError> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(MetricsError::Invalid(format!("features must be [N, d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(MetricsError::Invalid(format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        for j in 0..d {
            row[j] -= mean[j];
        }
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    // Exact symmetry regardless of summation order.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(FidStats { mean, cov, count: n })
}

fn eig_tolerance(values: impl Iterator<Item = f64>) -> f64 {
    1e-10 * values.fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Principal square root of a symmetric positive-semidefinite matrix via its
/// eigendecomposition. Eigenvalues down to `-1e-10` (relative to the largest
/// magnitude, at least 1) are clamped to zero.
pub fn matrix_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    if !s.is_square() {
        return Err(MetricsError::Invalid(format!(
            "matrix_sqrt needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let asym = (s - s.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(MetricsError::Invalid(format!(
            "matrix_sqrt input is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = s.clone().symmetric_eigen();
    let tol = eig_tolerance(eig.eigenvalues.iter().copied());
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(MetricsError::Invalid(format!("matrix has negative eigenvalue {v:e}")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `Tr((A·B)^{1/2})` for symmetric PSD `A`, `B`, computed as the sum of the
/// singular values of `A^{1/2}·B^{1/2}`. Small but genuine eigenvalues keep
/// their contribution, and the result is symmetric in `A` and `B`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Invalid(format!(
            "covariance shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let product = matrix_sqrt(a)? * matrix_sqrt(b)?;
    Ok(product.singular_values().sum())
}

/// `Tr((A^{1/2}·B·A^{1/2})^{1/2})`, equal to [`trace_sqrt_product`] for PSD
/// inputs but computed only with symmetric decompositions.
pub fn trace_sqrt_product_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let ra = matrix_sqrt(a)?;
    let mut m = &ra * b * &ra;
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    Ok(matrix_sqrt(&m)?.trace())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at zero.
pub fn fid(a: &FidStats, b: &FidStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = &a.mean - &b.mean;
    let tr = trace_sqrt_product(&a.cov, &b.cov)?;
    let v = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr;
    Ok(v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: DMatrix<f64>) -> FidStats {
        FidStats {
            mean: DVector::from_row_slice(mean),
            cov,
            count: 100,
        }
    }

    #[test]
    fn hand_computed_stats() {
        let f = Array::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]);
        let s = feature_stats(&f).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let dup = Array::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]);
        assert!(feature_stats(&dup).unwrap().cov.iter().all(|&v| v == 0.0));
        assert!(feature_stats(&Array::new(vec![1, 3], vec![0.0; 3])).is_err());
    }

    #[test]
    fn closed_form_fixtures() {
        let a = stats(&[0.0], DMatrix::from_element(1, 1, 1.0));
        let b = stats(&[1.0], DMatrix::from_element(1, 1, 1.0));
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        let a = stats(&[0.0, 0.0], DMatrix::identity(2, 2));
        let b = stats(
            &[1.0, 0.0],
            DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0])),
        );
        assert!((fid(&a, &b).unwrap() - 2.0).abs() < 1e-8);
        assert_eq!(fid(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn tiny_eigenvalues_still_count() {
        let a = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1e-6]));
        let b = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 1e-6]));
        assert!((trace_sqrt_product(&a, &b).unwrap() - (2.0 + 1e-6)).abs() < 1e-14);
        let s = stats(&[0.5, -1.0], a);
        assert!(fid(&s, &s).unwrap() < 1e-14);
    }

    #[test]
    fn diagonal_and_identity_roots() {
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 9.0]));
        let r = matrix_sqrt(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 3.0]))).amax() < 1e-14);
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((matrix_sqrt(&i).unwrap() - &i).amax() < 1e-14);
    }

    #[test]
    fn negative_eigenvalue_rejected() {
        let m = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, -0.5]));
        assert!(matrix_sqrt(&m).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = stats(&[0.0], DMatrix::identity(1, 1));
        let b = stats(&[0.0, 0.0], DMatrix::identity(2, 2));
        assert!(fid(&a, &b).is_err());
    }
}
