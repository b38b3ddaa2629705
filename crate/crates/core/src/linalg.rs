//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Singular values of `m` together with the right singular vector belonging
/// to the smallest one. Returns `(smallest, second_smallest, vector)`.
fn smallest_right_singular(m: &DMatrix<f64>) -> Result<(f64, f64, DVector<f64>)> {
    let n = m.ncols();
    let svd = m.clone().try_svd(false, true, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::Numeric("SVD failed to converge".into())
    })?;
    let v_t = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    // A square matrix has n singular values; the null direction is the row of
    // v_t paired with the smallest.
    let first = order[0];
    let second = order.get(1).map(|&i| svd.singular_values[i]).unwrap_or(f64::INFINITY);
    let v = DVector::from_iterator(n, v_t.row(first).iter().copied());
    Ok((svd.singular_values[first], second, v))
}

/// Unit-norm vector spanning the (numerically) one-dimensional null space of
/// `m`, or a model error if the null space is absent or degenerate.
pub fn null_vector(m: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>> {
    let scale = m.abs().max().max(1.0);
    let (s0, s1, v) = smallest_right_singular(m)?;
    if s0 > tol * scale {
        return Err(Error::Model(format!(
            "no null direction: smallest singular value {s0:e}"
        )));
    }
    if s1 <= tol * scale {
        return Err(Error::Model(format!(
            "degenerate null space: two singular values below tolerance ({s0:e}, {s1:e})"
        )));
    }
    Ok(v)
}

/// Right eigenvector of `t` for eigenvalue 1, scaled so its largest-magnitude
/// entry is +1.
pub fn right_unit_eigenvector(t: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = t.nrows();
    let shifted = t - DMatrix::<f64>::identity(n, n);
    let mut v = null_vector(&shifted, tol)?;
    let (imax, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("non-empty");
    let pivot = v[imax];
    v /= pivot;
    Ok(v)
}

/// Left eigenvector `pi` of `t` at eigenvalue 1 normalized so `pi · unit = 1`.
///
/// The null vector of `(T - I)^T` is taken from an SVD. When its residual
/// `||pi T - pi||_inf` exceeds `1e-10` the estimate is refined by normalized
/// power iteration.
pub fn stationary_left(t: &DMatrix<f64>, unit: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = t.nrows();
    let shifted_t = (t - DMatrix::<f64>::identity(n, n)).transpose();
    let v = null_vector(&shifted_t, tol)?;
    let norm = v.dot(unit);
    if norm.abs() < 1e-12 {
        return Err(Error::Model(
            "stationary vector is orthogonal to the unit vector".into(),
        ));
    }
    let mut pi = v / norm;
    let residual = |p: &DVector<f64>| (t.transpose() * p - p).amax();
    if residual(&pi) > 1e-10 {
        for _ in 0..10_000 {
            let next = t.transpose() * &pi;
            let z = next.dot(unit);
            pi = next / z;
            if residual(&pi) <= 1e-12 {
                break;
            }
        }
        if residual(&pi) > 1e-10 {
            return Err(Error::Model(format!(
                "stationary solve residual {:e} above 1e-10",
                residual(&pi)
            )));
        }
    }
    Ok(pi)
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues_real(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("Schur decomposition failed to converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Eigenvalues of a complex square matrix (diagonal of its Schur form).
pub fn eigenvalues_complex(m: &CMatrix) -> Result<Vec<Complex64>> {
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("Schur decomposition failed to converge".into()))?;
    let (_, tri) = schur.unpack();
    Ok(tri.diagonal().iter().copied().collect())
}

/// Greedy nearest-pair matching of two eigenvalue multisets. Returns the
/// largest matched distance, or `None` if the sizes differ.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for &x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, &y)| (j, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))?;
        used[j] = true;
        worst = worst.max(d);
    }
    Some(worst)
}

/// Kronecker product of two complex matrices.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Entry-wise infinity norm of a complex matrix.
pub fn cmax_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_of_two_state_chain() {
        let t = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7]);
        let unit = DVector::from_element(2, 1.0);
        let pi = stationary_left(&t, &unit, 1e-8).unwrap();
        assert!((pi[0] - 0.75).abs() < 1e-12);
        assert!((pi[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_unit_eigenvalue_is_rejected() {
        let t = DMatrix::<f64>::identity(3, 3);
        let unit = DVector::from_element(3, 1.0);
        assert!(matches!(stationary_left(&t, &unit, 1e-8), Err(Error::Model(_))));
    }

    #[test]
    fn missing_unit_eigenvalue_is_rejected() {
        let t = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25]);
        assert!(right_unit_eigenvector(&t, 1e-8).is_err());
    }

    #[test]
    fn multiset_matching_ignores_order() {
        let a = [c(1.0, 0.0), c(0.0, 1.0), c(-2.0, 0.0)];
        let b = [c(-2.0, 0.0), c(1.0, 0.0), c(0.0, 1.0 + 1e-12)];
        assert!(multiset_distance(&a, &b).unwrap() < 1e-11);
        assert!(multiset_distance(&a, &b[..2]).is_none());
    }

    #[test]
    fn complex_eigenvalues_of_rotation() {
        let r = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let ev = eigenvalues_real(&r).unwrap();
        assert!(multiset_distance(&ev, &[c(0.0, 1.0), c(0.0, -1.0)]).unwrap() < 1e-12);
        let ev = eigenvalues_complex(&to_complex(&r)).unwrap();
        assert!(multiset_distance(&ev, &[c(0.0, 1.0), c(0.0, -1.0)]).unwrap() < 1e-12);
    }
}
