//! Transposed Liouville-space generator of a Kraus instrument.
//!
//! A density matrix maps to the row vector of its entries in row-major order,
//! the subchannel of token `x` to `T(x) = sum_y K^T (x) K^dagger`, and the
//! trace functional to `|1>> = sum_i |i>* (x) |i>` in the computational basis.
//! This generator is used as an independent cross-check of the Kraus and
//! Bloch routes.

use nalgebra::DVector;
use num_complex::Complex64;

use super::{DensityMatrix, KrausChannel};
use crate::error::{input_err, Result};
use crate::linalg::{eigenvalues_complex, kron, multiset_distance, CMatrix};

#[derive(Clone, Debug)]
pub struct LiouvilleGenerator {
    pub transitions: Vec<CMatrix>,
    pub initial: DVector<Complex64>,
    pub unit: DVector<Complex64>,
}

impl LiouvilleGenerator {
    /// `<<rho0| T(w) |1>>`. The imaginary part is rounding noise for a valid
    /// channel; it is returned so callers can bound it.
    pub fn word_probability(&self, word: &[usize]) -> Result<Complex64> {
        let mut v = self.initial.clone();
        for &x in word {
            let t = self
                .transitions
                .get(x)
                .ok_or_else(|| input_err!("token {x} out of range"))?;
            v = t.transpose() * v;
        }
        Ok(v.dot(&self.unit))
    }
}

fn subchannel_liouville(ops: &[CMatrix]) -> CMatrix {
    let d = ops[0].nrows();
    let mut t = CMatrix::zeros(d * d, d * d);
    for k in ops {
        t += kron(&k.transpose(), &k.adjoint());
    }
    t
}

pub fn liouville_ghmm(ch: &KrausChannel, rho0: &DensityMatrix) -> LiouvilleGenerator {
    let d = ch.dim();
    let transitions = (0..ch.alphabet_size()).map(|x| subchannel_liouville(ch.operators(x))).collect();
    let rho = rho0.entries();
    let initial = DVector::from_iterator(d * d, (0..d).flat_map(|i| (0..d).map(move |j| rho[(i, j)])));
    let mut unit = DVector::zeros(d * d);
    for i in 0..d {
        unit[i * d + i] = Complex64::new(1.0, 0.0);
    }
    LiouvilleGenerator { transitions, initial, unit }
}

#[derive(Clone, Debug)]
pub enum SpectralCheck {
    /// Token `x` has more than one Kraus operator.
    NotApplicable { token: usize, operators: usize },
    Checked {
        token: usize,
        kraus_eigenvalues: Vec<Complex64>,
        transition_eigenvalues: Vec<Complex64>,
        /// Largest distance after greedy nearest-pair matching.
        max_mismatch: f64,
        passed: bool,
    },
}

impl SpectralCheck {
    pub fn passed(&self) -> bool {
        matches!(self, SpectralCheck::Checked { passed: true, .. })
    }
}

/// Compares the spectrum of the Liouville `T(x)` with all products
/// `conj(l) z` of eigenvalues of the single Kraus operator `K_x`.
pub fn spectral_check(ch: &KrausChannel, x: usize) -> Result<SpectralCheck> {
    if x >= ch.alphabet_size() {
        return Err(input_err!("token {x} out of range"));
    }
    let ops = ch.operators(x);
    if ops.len() != 1 {
        return Ok(SpectralCheck::NotApplicable { token: x, operators: ops.len() });
    }
    let kraus_eigenvalues = eigenvalues_complex(&ops[0])?;
    let transition_eigenvalues = eigenvalues_complex(&subchannel_liouville(ops))?;
    let products: Vec<Complex64> = kraus_eigenvalues
        .iter()
        .flat_map(|l| kraus_eigenvalues.iter().map(move |z| l.conj() * z))
        .collect();
    let max_mismatch = multiset_distance(&products, &transition_eigenvalues).unwrap_or(f64::INFINITY);
    Ok(SpectralCheck::Checked {
        token: x,
        kraus_eigenvalues,
        transition_eigenvalues,
        max_mismatch,
        passed: max_mismatch <= 1e-8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::quantum::{kraus_word_probability, DensityMatrix};

    #[test]
    fn identity_spectra_are_all_ones() {
        let ch = KrausChannel::from_single(vec![CMatrix::identity(2, 2)]).unwrap();
        match spectral_check(&ch, 0).unwrap() {
            SpectralCheck::Checked { transition_eigenvalues, passed, .. } => {
                assert!(passed);
                for z in transition_eigenvalues {
                    assert!((z - c(1.0, 0.0)).norm() < 1e-14);
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multiple_operators_not_applicable() {
        let half = CMatrix::identity(2, 2) * c(0.5f64.sqrt(), 0.0);
        let ch = KrausChannel::new(vec![vec![half.clone(), half]]).unwrap();
        assert!(matches!(
            spectral_check(&ch, 0).unwrap(),
            SpectralCheck::NotApplicable { operators: 2, .. }
        ));
    }

    #[test]
    fn empty_word_and_ancilla_channel_match_kraus() {
        // Amplitude damping split over two ancilla outcomes of one token,
        // plus a dephasing token.
        let g: f64 = 0.3;
        let k0 = CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c((1.0 - g).sqrt(), 0.)]);
        let k1 = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(g.sqrt(), 0.), c(0., 0.), c(0., 0.)]);
        let s = 0.5f64.sqrt();
        let ch = KrausChannel::new(vec![
            vec![k0 * c(s, 0.0), k1 * c(s, 0.0)],
            vec![CMatrix::identity(2, 2) * c(0.0, s)],
        ])
        .unwrap();
        let rho = DensityMatrix::pure(&[c(0.6, 0.0), c(0.0, 0.8)]).unwrap();
        let gen = liouville_ghmm(&ch, &rho);
        assert!((gen.word_probability(&[]).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        for w in [vec![0], vec![1, 0], vec![0, 0, 1], vec![1, 1, 0, 0]] {
            let a = gen.word_probability(&w).unwrap();
            let b = kraus_word_probability(&ch, &rho, &w).unwrap();
            assert!((a.re - b).abs() < 1e-14 && a.im.abs() < 1e-14);
        }
    }
}
