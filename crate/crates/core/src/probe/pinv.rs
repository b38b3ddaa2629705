use nalgebra::{DMatrix, DVector};

use crate::error::{input_err, Error, Result};

/// Factorization of a matrix reused for pseudoinverse solves at many
/// truncation levels. Tall matrices are reduced with a thin QR first, so the
/// SVD only ever runs on a square factor.
pub struct PinvSolver {
    q: Option<DMatrix<f64>>,
    u: DMatrix<f64>,
    s: DVector<f64>,
    v_t: DMatrix<f64>,
    rows: usize,
}

fn svd(m: DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let svd = m
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = svd.u.ok_or_else(|| Error::Numeric("SVD returned no U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numeric("SVD returned no V".into()))?;
    Ok((u, svd.singular_values, v_t))
}

impl PinvSolver {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix has non-finite entries".into()));
        }
        let rows = m.nrows();
        if rows > m.ncols() {
            let qr = m.clone().qr();
            let (u, s, v_t) = svd(qr.r())?;
            Ok(Self { q: Some(qr.q()), u, s, v_t, rows })
        } else {
            let (u, s, v_t) = svd(m.clone())?;
            Ok(Self { q: None, u, s, v_t, rows })
        }
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.s
    }

    /// `U^T (Q^T rhs)`: the part of a solve that does not depend on `r`.
    pub fn project(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(rhs.nrows(), self.rows);
        match &self.q {
            Some(q) => self.u.tr_mul(&q.tr_mul(rhs)),
            None => self.u.tr_mul(rhs),
        }
    }

    /// `V S_r^+` applied to a projected right-hand side; singular values at or
    /// below `r * sigma_max` are dropped.
    pub fn solve_projected(&self, projected: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
        let smax = self.s.max();
        let mut scaled = projected.clone();
        for (i, &si) in self.s.iter().enumerate() {
            let f = if si > r * smax && si > 0.0 { 1.0 / si } else { 0.0 };
            scaled.row_mut(i).scale_mut(f);
        }
        self.v_t.tr_mul(&scaled)
    }

    pub fn solve(&self, rhs: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
        self.solve_projected(&self.project(rhs), r)
    }
}

/// Truncated pseudoinverse `V S_r^+ U^T` with relative threshold `r`.
pub fn svd_pinv(m: &DMatrix<f64>, r: f64) -> Result<DMatrix<f64>> {
    if !(r > 0.0) {
        return Err(input_err!("pseudoinverse threshold must be positive, got {r}"));
    }
    let solver = PinvSolver::new(m)?;
    Ok(solver.solve(&DMatrix::identity(m.nrows(), m.nrows()), r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_threshold() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((svd_pinv(&i, 0.5).unwrap() - &i).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-6]));
        let p = svd_pinv(&d, 1e-3).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((p - expect).amax() < 1e-15);
        let p = svd_pinv(&d, 1e-8).unwrap();
        assert!((p[(1, 1)] - 1e6).abs() < 1e-6);
        assert!(svd_pinv(&d, 0.0).is_err());
    }

    #[test]
    fn moore_penrose_tall_and_wide() {
        let tall = DMatrix::from_fn(9, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5 + 0.1 * (i as f64).sin());
        for m in [tall.clone(), tall.transpose()] {
            let p = svd_pinv(&m, 1e-12).unwrap();
            assert!((&m * &p * &m - &m).amax() < 1e-10);
            assert!((&p * &m * &p - &p).amax() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_solve_is_minimum_norm() {
        // Two identical columns: the minimum-norm solution splits weight equally.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let b = DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0]);
        let x = PinvSolver::new(&a).unwrap().solve(&b, 1e-10);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
