//! Quantum memory: density matrices, Kraus instruments and their conversion
//! to real GHMMs.
//!
//! Complex entries are `num_complex::Complex64`; every adjoint is written
//! out explicitly.

mod bloch;
mod liouville;

pub use bloch::{
    bloch_decompose, bloch_ghmm, bloch_magnitude, bloch_reconstruct, gell_mann_basis,
    subchannel_bloch, subchannel_bloch_from_inputs, BlochBasis, ExtendedBlochVector,
};
pub use liouville::{liouville_ghmm, spectral_check, LiouvilleGenerator, SpectralCheck};

use num_complex::Complex64;

use crate::error::{input_err, Error, Result};
use crate::ghmm::ZERO_THRESHOLD;
use crate::linalg::{cmax_abs, CMatrix};

pub fn trace(m: &CMatrix) -> Complex64 {
    m.diagonal().iter().sum()
}

pub fn hermiticity_error(m: &CMatrix) -> f64 {
    cmax_abs(&(m - m.adjoint()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    entries: CMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity and unit trace (1e-12) and positivity (eigenvalues
    /// at least -1e-10).
    pub fn new(entries: CMatrix) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(input_err!("density matrix must be square and non-empty"));
        }
        let herm = hermiticity_error(&entries);
        if herm > 1e-12 {
            return Err(input_err!("density matrix is not Hermitian (error {herm:e})"));
        }
        let tr = trace(&entries);
        if (tr.re - 1.0).abs() > 1e-12 || tr.im.abs() > 1e-12 {
            return Err(input_err!("density matrix trace is {tr}, expected 1"));
        }
        let sym = symmetrized(&entries);
        let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numeric("Hermitian eigensolve failed".into()))?;
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-10 {
            return Err(input_err!("density matrix has negative eigenvalue {min:e}"));
        }
        Ok(Self { entries })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        let mut entries = CMatrix::identity(dim, dim);
        entries /= Complex64::new(dim as f64, 0.0);
        Self { entries }
    }

    /// `|psi><psi|` for a (not necessarily normalized) ket.
    pub fn pure(ket: &[Complex64]) -> Result<Self> {
        let v = nalgebra::DVector::from_column_slice(ket);
        let norm = v.norm();
        if norm == 0.0 {
            return Err(input_err!("zero ket"));
        }
        let v = v / Complex64::new(norm, 0.0);
        Self::new(&v * v.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn purity(&self) -> f64 {
        trace(&(&self.entries * &self.entries)).re
    }
}

fn symmetrized(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Token-indexed Kraus instrument. `operators[x]` holds the operators
/// `K_{x,y}` for every ancilla outcome `y` of token `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct KrausChannel {
    dim: usize,
    operators: Vec<Vec<CMatrix>>,
}

impl KrausChannel {
    pub fn new(operators: Vec<Vec<CMatrix>>) -> Result<Self> {
        let dim = operators
            .iter()
            .flatten()
            .next()
            .map(|k| k.nrows())
            .ok_or_else(|| input_err!("channel has no operators"))?;
        for (x, ks) in operators.iter().enumerate() {
            if ks.is_empty() {
                return Err(input_err!("token {x} has no Kraus operators"));
            }
            for k in ks {
                if k.nrows() != dim || k.ncols() != dim {
                    return Err(input_err!(
                        "Kraus operator for token {x} is {}x{}, expected {dim}x{dim}",
                        k.nrows(),
                        k.ncols()
                    ));
                }
            }
        }
        Ok(Self { dim, operators })
    }

    /// One Kraus operator per token.
    pub fn from_single(operators: Vec<CMatrix>) -> Result<Self> {
        Self::new(operators.into_iter().map(|k| vec![k]).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alphabet_size(&self) -> usize {
        self.operators.len()
    }

    pub fn operators(&self, x: usize) -> &[CMatrix] {
        &self.operators[x]
    }

    fn check_token(&self, x: usize) -> Result<()> {
        if x >= self.alphabet_size() {
            return Err(input_err!(
                "token {x} out of range for alphabet of size {}",
                self.alphabet_size()
            ));
        }
        Ok(())
    }

    /// Subchannel `A_x(M) = sum_y K M K^dagger` applied to any operator.
    pub fn apply_subchannel(&self, x: usize, m: &CMatrix) -> Result<CMatrix> {
        self.check_token(x)?;
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(input_err!("operator dimension differs from channel dimension"));
        }
        let mut out = CMatrix::zeros(self.dim, self.dim);
        for k in &self.operators[x] {
            out += k * m * k.adjoint();
        }
        Ok(out)
    }
}

/// `||sum K^dagger K - I||_inf` (largest entry magnitude).
pub fn validate_channel(ch: &KrausChannel) -> f64 {
    let d = ch.dim;
    let mut acc = CMatrix::zeros(d, d);
    for k in ch.operators.iter().flatten() {
        acc += k.adjoint() * k;
    }
    cmax_abs(&(acc - CMatrix::identity(d, d)))
}

/// Bayesian update of a density matrix on observing `x`. Returns the
/// normalized post-measurement state and the probability of `x`.
pub fn kraus_filter(
    ch: &KrausChannel,
    rho: &DensityMatrix,
    x: usize,
) -> Result<(DensityMatrix, f64)> {
    if rho.dim() != ch.dim {
        return Err(input_err!("state dimension {} differs from channel dimension {}", rho.dim(), ch.dim));
    }
    let out = ch.apply_subchannel(x, &rho.entries)?;
    let p = trace(&out).re;
    if p <= ZERO_THRESHOLD {
        return Err(Error::ImpossibleObservation { token: x, probability: p });
    }
    let entries = symmetrized(&(out / Complex64::new(p, 0.0)));
    Ok((DensityMatrix { entries }, p))
}

/// Word probability by direct density-matrix filtering.
pub fn kraus_word_probability(ch: &KrausChannel, rho: &DensityMatrix, word: &[usize]) -> Result<f64> {
    let mut m = rho.entries.clone();
    for &x in word {
        m = ch.apply_subchannel(x, &m)?;
    }
    Ok(trace(&m).re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;

    fn bloch_walk_ops(alpha: f64, beta: f64, gamma: f64) -> Vec<CMatrix> {
        let m = |a: f64, b: f64, cc: f64, d: f64| {
            CMatrix::from_row_slice(2, 2, &[c(a, 0.0), c(b, 0.0), c(cc, 0.0), c(d, 0.0)])
                * c(gamma, 0.0)
        };
        vec![
            m(alpha + beta, 0.0, 0.0, alpha - beta),
            m(alpha - beta, 0.0, 0.0, alpha + beta),
            m(alpha, beta, beta, alpha),
            m(alpha, -beta, -beta, alpha),
        ]
    }

    #[test]
    fn identity_channel_is_valid_and_trivial() {
        let ch = KrausChannel::from_single(vec![CMatrix::identity(3, 3)]).unwrap();
        assert_eq!(validate_channel(&ch), 0.0);
        let rho = DensityMatrix::pure(&[c(0.6, 0.0), c(0.0, 0.8), c(0.0, 0.0)]).unwrap();
        let (out, p) = kraus_filter(&ch, &rho, 0).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        assert!(cmax_abs(&(out.entries() - rho.entries())) < 1e-15);
    }

    #[test]
    fn scaled_beta_breaks_completeness() {
        let (alpha, beta) = (1.0, 51f64.sqrt());
        let gamma = 1.0 / (2.0 * (alpha * alpha + beta * beta).sqrt());
        let ok = KrausChannel::from_single(bloch_walk_ops(alpha, beta, gamma)).unwrap();
        assert!(validate_channel(&ok) <= 1e-12);
        let bad = KrausChannel::from_single(bloch_walk_ops(alpha, 2.0 * beta, gamma)).unwrap();
        assert!(validate_channel(&bad) > 0.1);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let r = KrausChannel::new(vec![vec![CMatrix::identity(2, 2)], vec![CMatrix::identity(3, 3)]]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn bloch_walk_filter_from_mixed_state() {
        let (alpha, beta) = (1.0, 51f64.sqrt());
        let gamma = 1.0 / (2.0 * (alpha * alpha + beta * beta).sqrt());
        let ch = KrausChannel::from_single(bloch_walk_ops(alpha, beta, gamma)).unwrap();
        let rho = DensityMatrix::maximally_mixed(2);
        let (state, p) = kraus_filter(&ch, &rho, 0).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
        let g2 = 2.0 * gamma * gamma;
        let expect = [g2 * (alpha + beta).powi(2), g2 * (alpha - beta).powi(2)];
        assert!((state.entries()[(0, 0)].re - expect[0]).abs() < 1e-14);
        assert!((state.entries()[(1, 1)].re - expect[1]).abs() < 1e-14);
        assert!(state.entries()[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn density_matrix_validation() {
        let bad = CMatrix::from_row_slice(2, 2, &[c(1.5, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-0.5, 0.0)]);
        assert!(DensityMatrix::new(bad).is_err());
        let non_herm = CMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(0.1, 0.0), c(0.0, 0.0), c(0.5, 0.0)]);
        assert!(DensityMatrix::new(non_herm).is_err());
        assert!(DensityMatrix::new(DensityMatrix::maximally_mixed(4).entries().clone()).is_ok());
    }
}
