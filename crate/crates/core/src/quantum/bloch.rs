//! Generalized Bloch coordinates and the Bloch form of subchannels.
//!
//! The basis is the generalized Gell-Mann family (all symmetric, then all
//! antisymmetric, then diagonal members) rescaled so that
//! `tr(G_m G_n) = xi delta_mn` with `xi = (d - 1) / d`. For `d = 2` this is
//! `(sigma_x, sigma_y, sigma_z) / 2`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{hermiticity_error, trace, DensityMatrix, KrausChannel};
use crate::error::{input_err, Error, Result};
use crate::ghmm::Ghmm;
use crate::linalg::{c, CMatrix};

#[derive(Clone, Debug)]
pub struct BlochBasis {
    dim: usize,
    gammas: Vec<CMatrix>,
    xi: f64,
}

impl BlochBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gammas(&self) -> &[CMatrix] {
        &self.gammas
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `(I/d, G_1, ..., G_{d^2-1})`, the operators whose extended Bloch
    /// vectors are the standard basis rows.
    pub fn operator_basis(&self) -> Vec<CMatrix> {
        let d = self.dim;
        let mut ops = Vec::with_capacity(d * d);
        ops.push(CMatrix::identity(d, d) / c(d as f64, 0.0));
        ops.extend(self.gammas.iter().cloned());
        ops
    }
}

pub fn gell_mann_basis(d: usize) -> Result<BlochBasis> {
    if d < 2 {
        return Err(input_err!("Bloch basis needs dimension at least 2, got {d}"));
    }
    let xi = (d as f64 - 1.0) / d as f64;
    // Unscaled generalized Gell-Mann matrices satisfy tr(L_m L_n) = 2 delta_mn.
    let scale = c((xi / 2.0).sqrt(), 0.0);
    let mut gammas = Vec::with_capacity(d * d - 1);
    let unit = |j: usize, k: usize, z: Complex64| {
        let mut m = CMatrix::zeros(d, d);
        m[(j, k)] = z;
        m
    };
    for j in 0..d {
        for k in j + 1..d {
            gammas.push((unit(j, k, c(1.0, 0.0)) + unit(k, j, c(1.0, 0.0))) * scale);
        }
    }
    for j in 0..d {
        for k in j + 1..d {
            gammas.push((unit(j, k, c(0.0, -1.0)) + unit(k, j, c(0.0, 1.0))) * scale);
        }
    }
    for l in 1..d {
        let norm = (2.0 / (l * (l + 1)) as f64).sqrt();
        let mut m = CMatrix::zeros(d, d);
        for j in 0..l {
            m[(j, j)] = c(norm, 0.0);
        }
        m[(l, l)] = c(-(l as f64) * norm, 0.0);
        gammas.push(m * scale);
    }
    Ok(BlochBasis { dim: d, gammas, xi })
}

/// `[c, b]` with `c = tr(M)` and `b_n = tr(M G_n) / xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedBlochVector {
    pub c: f64,
    pub b: DVector<f64>,
}

impl ExtendedBlochVector {
    /// `[c, b_1, ..., b_{d^2-1}]` as one vector.
    pub fn to_row(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.b.len() + 1);
        v[0] = self.c;
        v.rows_mut(1, self.b.len()).copy_from(&self.b);
        v
    }

    pub fn from_row(row: &DVector<f64>) -> Self {
        Self { c: row[0], b: row.rows(1, row.len() - 1).into_owned() }
    }
}

pub fn bloch_decompose(m: &CMatrix, basis: &BlochBasis) -> Result<ExtendedBlochVector> {
    if m.nrows() != basis.dim || m.ncols() != basis.dim {
        return Err(input_err!("operator dimension differs from basis dimension {}", basis.dim));
    }
    let herm = hermiticity_error(m);
    if herm > 1e-10 {
        return Err(input_err!("operator is not Hermitian (error {herm:e})"));
    }
    let b = DVector::from_iterator(
        basis.gammas.len(),
        basis.gammas.iter().map(|g| trace(&(m * g)).re / basis.xi),
    );
    Ok(ExtendedBlochVector { c: trace(m).re, b })
}

/// `c I/d + b . G`.
pub fn bloch_reconstruct(v: &ExtendedBlochVector, basis: &BlochBasis) -> Result<CMatrix> {
    if v.b.len() != basis.gammas.len() {
        return Err(input_err!(
            "Bloch vector has {} components, basis has {}",
            v.b.len(),
            basis.gammas.len()
        ));
    }
    let d = basis.dim;
    let mut m = CMatrix::identity(d, d) * c(v.c / d as f64, 0.0);
    for (bn, g) in v.b.iter().zip(&basis.gammas) {
        m += g * c(*bn, 0.0);
    }
    Ok(m)
}

/// `sqrt((tr(rho^2) d - 1) / (d - 1))`.
pub fn bloch_magnitude(rho: &DensityMatrix) -> f64 {
    let d = rho.dim() as f64;
    ((rho.purity() * d - 1.0) / (d - 1.0)).max(0.0).sqrt()
}

/// Real `d^2 x d^2` matrix `G` with `[c b] G = [c' b']` for `A_x`, built
/// from the operator basis itself (so the input Bloch matrix is the identity).
pub fn subchannel_bloch(ch: &KrausChannel, x: usize, basis: &BlochBasis) -> Result<DMatrix<f64>> {
    subchannel_bloch_from_inputs(ch, x, basis, &basis.operator_basis())
}

/// `G = B^-1 B'` from `d^2` linearly independent Hermitian inputs: `B` stacks
/// the inputs' extended Bloch vectors and `B'` those of their images under
/// `A_x`.
pub fn subchannel_bloch_from_inputs(
    ch: &KrausChannel,
    x: usize,
    basis: &BlochBasis,
    inputs: &[CMatrix],
) -> Result<DMatrix<f64>> {
    let d = basis.dim;
    if ch.dim() != d {
        return Err(input_err!("channel dimension {} differs from basis dimension {d}", ch.dim()));
    }
    let n = d * d;
    if inputs.len() != n {
        return Err(input_err!("need {n} input operators, got {}", inputs.len()));
    }
    let mut b_in = DMatrix::zeros(n, n);
    let mut b_out = DMatrix::zeros(n, n);
    for (row, op) in inputs.iter().enumerate() {
        let before = bloch_decompose(op, basis)?.to_row();
        let image = ch.apply_subchannel(x, op)?;
        let after = bloch_decompose(&image, basis)?.to_row();
        b_in.set_row(row, &before.transpose());
        b_out.set_row(row, &after.transpose());
    }
    let lu = b_in.lu();
    if lu.determinant().abs() < 1e-12 {
        return Err(Error::Representation("input Bloch matrix is singular".into()));
    }
    lu.solve(&b_out)
        .ok_or_else(|| Error::Representation("input Bloch matrix is singular".into()))
}

/// Full `d^2`-dimensional Bloch GHMM of a channel started from `rho0`.
pub fn bloch_ghmm(ch: &KrausChannel, basis: &BlochBasis, rho0: &DensityMatrix) -> Result<Ghmm> {
    let transitions = (0..ch.alphabet_size())
        .map(|x| subchannel_bloch(ch, x, basis))
        .collect::<Result<Vec<_>>>()?;
    let initial = bloch_decompose(rho0.entries(), basis)?.to_row();
    let mut unit = DVector::zeros(initial.len());
    unit[0] = 1.0;
    Ghmm::new(transitions, initial, unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cmax_abs;

    #[test]
    fn qubit_basis_is_half_pauli() {
        let b = gell_mann_basis(2).unwrap();
        assert_eq!(b.xi(), 0.5);
        let sx = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]);
        let sy = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)]);
        let sz = CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)]);
        for (g, s) in b.gammas().iter().zip([sx, sy, sz]) {
            assert!(cmax_abs(&(g - s * c(0.5, 0.0))) < 1e-15);
        }
    }

    #[test]
    fn orthogonality_relations_hold() {
        for d in 2..=5 {
            let b = gell_mann_basis(d).unwrap();
            assert_eq!(b.gammas().len(), d * d - 1);
            for (m, gm) in b.gammas().iter().enumerate() {
                assert!(trace(gm).norm() < 1e-14);
                assert!(hermiticity_error(gm) == 0.0);
                for (n, gn) in b.gammas().iter().enumerate() {
                    let expect = if m == n { b.xi() } else { 0.0 };
                    assert!((trace(&(gm * gn)) - c(expect, 0.0)).norm() < 1e-12);
                }
            }
        }
        assert!(gell_mann_basis(1).is_err());
    }

    #[test]
    fn maximally_mixed_is_center() {
        for d in 2..=4 {
            let basis = gell_mann_basis(d).unwrap();
            let v = bloch_decompose(DensityMatrix::maximally_mixed(d).entries(), &basis).unwrap();
            assert!((v.c - 1.0).abs() < 1e-15);
            assert!(v.b.amax() < 1e-15);
            assert_eq!(bloch_magnitude(&DensityMatrix::maximally_mixed(d)), 0.0);
        }
    }

    #[test]
    fn ket_zero_points_up() {
        let basis = gell_mann_basis(2).unwrap();
        let rho = DensityMatrix::pure(&[c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let v = bloch_decompose(rho.entries(), &basis).unwrap();
        assert!((v.b - DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-15);
        let back = bloch_reconstruct(&ExtendedBlochVector { c: 1.0, b: DVector::from_vec(vec![0.0, 0.0, 1.0]) }, &basis).unwrap();
        assert!(cmax_abs(&(back - rho.entries())) < 1e-15);
    }

    #[test]
    fn magnitude_of_partially_mixed_qubit() {
        let m = CMatrix::from_row_slice(2, 2, &[c(0.75, 0.), c(0., 0.), c(0., 0.), c(0.25, 0.)]);
        let rho = DensityMatrix::new(m).unwrap();
        assert!((bloch_magnitude(&rho) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_bloch_vector_is_pure() {
        let basis = gell_mann_basis(2).unwrap();
        let b = DVector::from_vec(vec![0.36, 0.48, 0.8]);
        let m = bloch_reconstruct(&ExtendedBlochVector { c: 1.0, b }, &basis).unwrap();
        let rho = DensityMatrix::new(m).unwrap();
        assert!((rho.purity() - 1.0).abs() < 1e-12);
        assert!((bloch_magnitude(&rho) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_hermitian_and_wrong_length_rejected() {
        let basis = gell_mann_basis(2).unwrap();
        let m = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]);
        assert!(bloch_decompose(&m, &basis).is_err());
        let v = ExtendedBlochVector { c: 1.0, b: DVector::zeros(8) };
        assert!(bloch_reconstruct(&v, &basis).is_err());
    }

    #[test]
    fn identity_channel_has_identity_bloch_matrix() {
        for d in 2..=3 {
            let basis = gell_mann_basis(d).unwrap();
            let ch = KrausChannel::from_single(vec![CMatrix::identity(d, d)]).unwrap();
            let g = subchannel_bloch(&ch, 0, &basis).unwrap();
            assert!((g - DMatrix::<f64>::identity(d * d, d * d)).amax() < 1e-14);
        }
    }

    #[test]
    fn singular_inputs_are_a_representation_error() {
        let basis = gell_mann_basis(2).unwrap();
        let ch = KrausChannel::from_single(vec![CMatrix::identity(2, 2)]).unwrap();
        let same = vec![CMatrix::identity(2, 2); 4];
        assert!(matches!(
            subchannel_bloch_from_inputs(&ch, 0, &basis, &same),
            Err(Error::Representation(_))
        ));
    }
}
