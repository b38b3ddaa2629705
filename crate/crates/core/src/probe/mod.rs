//! Linear probes from network activations to belief states.
//!
//! The fitted map is affine, `eta_hat = [1, a] L`, estimated by
//! probability-weighted least squares through a truncated pseudoinverse whose
//! truncation level is chosen by k-fold cross-validation.

mod pinv;
mod similarity;
mod suite;

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{input_err, Result};
use crate::ghmm::{Ghmm, Word};
use crate::seqmodel::ActivationRecord;

pub use pinv::{svd_pinv, PinvSolver};
pub use similarity::{similarity_analysis, SimilarityReport};
pub use suite::{
    run_probe_suite, FitContext, GeometryRecord, ProbeRow, ProbeSettings, ProbeTarget, SuiteCheckpoint,
    PROBE_CSV_HEADER,
};

/// `{1e-15, 1e-10, 1e-5}` plus 50 log-spaced values in `[1e-8, 1e-3]`,
/// sorted ascending.
pub fn default_r_grid() -> Vec<f64> {
    let mut g = vec![1e-15, 1e-10, 1e-5];
    for i in 0..50 {
        g.push(10f64.powf(-8.0 + 5.0 * i as f64 / 49.0));
    }
    g.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub words: Vec<Word>,
    /// Rows `[1, a(w)]`.
    pub design: DMatrix<f64>,
    /// Rows `eta(w)`.
    pub targets: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl ProbeDataset {
    pub fn new(words: Vec<Word>, design: DMatrix<f64>, targets: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = words.len();
        if design.nrows() != n || targets.nrows() != n || weights.len() != n {
            return Err(input_err!("dataset row counts disagree"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(input_err!("dataset weights must be non-negative"));
        }
        Ok(Self { words, design, targets, weights })
    }

    /// Dataset from raw activation rows; prepends the constant column.
    pub fn from_activations(
        words: Vec<Word>,
        activations: &DMatrix<f64>,
        targets: DMatrix<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        Self::new(words, augment(activations), targets, weights)
    }

    pub fn rows(&self) -> usize {
        self.words.len()
    }
}

pub(crate) fn augment(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().insert_column(0, 1.0)
}

/// Anchor words of a process: all positive-probability words of length
/// `1..=depth`, weighted by `P(w) / depth` renormalized to sum 1.
pub(crate) struct Anchors {
    pub words: Vec<Word>,
    pub weights: Vec<f64>,
    pub beliefs: DMatrix<f64>,
}

impl Anchors {
    pub fn new(ghmm: &Ghmm, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(input_err!("probe depth must be at least 1"));
        }
        let states = ghmm.enumerate_words(depth);
        let raw: Vec<f64> = states.iter().map(|b| b.probability / depth as f64).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|p| p / total).collect();
        let beliefs = DMatrix::from_fn(states.len(), ghmm.latent_dim(), |i, j| states[i].vector[j]);
        Ok(Self { words: states.into_iter().map(|b| b.word).collect(), weights, beliefs })
    }

    /// Beliefs of another generator along the same anchor words.
    pub fn beliefs_under(&self, target: &Ghmm) -> Result<DMatrix<f64>> {
        let max = self.words.iter().map(|w| w.len()).max().unwrap_or(0);
        let index: HashMap<Word, nalgebra::DVector<f64>> =
            target.enumerate_words(max).into_iter().map(|b| (b.word, b.vector)).collect();
        let mut out = DMatrix::zeros(self.words.len(), target.latent_dim());
        for (i, w) in self.words.iter().enumerate() {
            let v = index
                .get(w)
                .ok_or_else(|| input_err!("word {w:?} has zero probability under the target generator"))?;
            out.row_mut(i).copy_from(&v.transpose());
        }
        Ok(out)
    }

    /// Activation matrix in anchor order; errors list anchors with no record.
    pub fn activations(&self, records: &[ActivationRecord]) -> Result<DMatrix<f64>> {
        let mut first: HashMap<&[usize], &ActivationRecord> = HashMap::new();
        for r in records {
            first.entry(r.word.as_slice()).or_insert(r);
        }
        let missing: Vec<&Word> = self.words.iter().filter(|w| !first.contains_key(w.as_slice())).collect();
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(20).map(|w| format!("{w:?}")).collect();
            return Err(input_err!(
                "{} anchor words have no activation record: {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > 20 { ", ..." } else { "" }
            ));
        }
        let dim = first[self.words[0].as_slice()].vector.len();
        let mut a = DMatrix::zeros(self.words.len(), dim);
        for (i, w) in self.words.iter().enumerate() {
            let v = &first[w.as_slice()].vector;
            if v.len() != dim {
                return Err(input_err!("activation vectors have inconsistent lengths"));
            }
            a.row_mut(i).copy_from(&v.transpose());
        }
        Ok(a)
    }
}

/// One row per anchor word of `ghmm` up to `depth`, with activations from
/// the first record of each word and the word's belief as target.
pub fn build_dataset(records: &[ActivationRecord], ghmm: &Ghmm, depth: usize) -> Result<ProbeDataset> {
    build_dataset_with_target(records, ghmm, ghmm, depth)
}

/// Like [`build_dataset`] but with targets taken from `target`'s beliefs on
/// the anchor words of `source`.
pub fn build_dataset_with_target(
    records: &[ActivationRecord],
    source: &Ghmm,
    target: &Ghmm,
    depth: usize,
) -> Result<ProbeDataset> {
    let anchors = Anchors::new(source, depth)?;
    let a = anchors.activations(records)?;
    let targets = if std::ptr::eq(source, target) { anchors.beliefs.clone() } else { anchors.beliefs_under(target)? };
    ProbeDataset::from_activations(anchors.words, &a, targets, anchors.weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    /// `(1 + d) x d_g`; row 0 is the bias.
    pub map: DMatrix<f64>,
    pub chosen_r: f64,
    /// `(r, mean fold error)` for every grid value, ascending in `r`.
    pub cv_curve: Vec<(f64, f64)>,
    pub rmse: f64,
    pub predictions: DMatrix<f64>,
}

/// `sqrt(sum_n p_n ||eta_n - eta_hat_n||^2)`.
pub fn weighted_rmse(targets: &DMatrix<f64>, predictions: &DMatrix<f64>, weights: &[f64]) -> f64 {
    let mse: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, &p)| p * (targets.row(i) - predictions.row(i)).norm_squared())
        .sum();
    mse.sqrt()
}

fn scale_rows(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row.scale_mut(s[i]);
    }
    out
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().sum::<f64>() <= 0.0 {
        return Err(input_err!("probe weights are all zero"));
    }
    Ok(())
}

/// Weighted least-squares affine map at truncation level `r`.
pub fn weighted_affine_fit(ds: &ProbeDataset, r: f64) -> Result<ProbeFit> {
    check_weights(&ds.weights)?;
    if !(r > 0.0) {
        return Err(input_err!("regularization must be positive, got {r}"));
    }
    let solver = weighted_solver(&ds.design, &ds.weights)?;
    Ok(fit_with_solver(&solver, &ds.design, &ds.targets, &ds.weights, r))
}

pub(crate) fn weighted_solver(design: &DMatrix<f64>, weights: &[f64]) -> Result<PinvSolver> {
    let sw: Vec<f64> = weights.iter().map(|p| p.sqrt()).collect();
    PinvSolver::new(&scale_rows(design, &sw))
}

pub(crate) fn fit_with_solver(
    solver: &PinvSolver,
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    weights: &[f64],
    r: f64,
) -> ProbeFit {
    let sw: Vec<f64> = weights.iter().map(|p| p.sqrt()).collect();
    let map = solver.solve(&scale_rows(targets, &sw), r);
    let predictions = design * &map;
    let rmse = weighted_rmse(targets, &predictions, weights);
    ProbeFit { map, chosen_r: r, cv_curve: Vec::new(), rmse, predictions }
}

/// Seeded permutation of `0..n` cut into `folds` contiguous blocks.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..folds).map(|k| perm[k * n / folds..(k + 1) * n / folds].to_vec()).collect()
}

/// Mean held-out error `sum_val p ||eta - eta_hat||` per grid value, for
/// several target matrices sharing one design. Fold factorizations are
/// computed once and reused for every target and every `r`.
pub(crate) fn cv_curves(
    design: &DMatrix<f64>,
    weights: &[f64],
    targets: &[&DMatrix<f64>],
    folds: usize,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let n = design.nrows();
    if folds < 2 {
        return Err(input_err!("cross-validation needs at least 2 folds"));
    }
    if n < folds {
        return Err(input_err!("{n} rows is fewer than {folds} folds"));
    }
    if grid.is_empty() || grid.iter().any(|&r| !(r > 0.0)) {
        return Err(input_err!("regularization grid must be non-empty and positive"));
    }
    check_weights(weights)?;
    let blocks = fold_assignment(n, folds, seed);
    let mut sums = vec![vec![0.0; grid.len()]; targets.len()];
    for held in &blocks {
        let held_set: HashSet<usize> = held.iter().copied().collect();
        let train: Vec<usize> = (0..n).filter(|i| !held_set.contains(i)).collect();
        let sw: Vec<f64> = train.iter().map(|&i| weights[i].sqrt()).collect();
        let solver = PinvSolver::new(&scale_rows(&design.select_rows(&train), &sw))?;
        let val_design = design.select_rows(held);
        for (t, tm) in targets.iter().enumerate() {
            let projected = solver.project(&scale_rows(&tm.select_rows(&train), &sw));
            let val_targets = tm.select_rows(held);
            for (k, &r) in grid.iter().enumerate() {
                let map = solver.solve_projected(&projected, r);
                let pred = &val_design * map;
                let err: f64 = held
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| weights[i] * (val_targets.row(j) - pred.row(j)).norm())
                    .sum();
                sums[t][k] += err;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| grid.iter().zip(s).map(|(&r, e)| (r, e / folds as f64)).collect())
        .collect())
}

/// Smallest `r` whose mean error is within `1e-15` of the minimum.
pub fn select_r(curve: &[(f64, f64)]) -> f64 {
    let min = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let mut sorted: Vec<(f64, f64)> = curve.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite r"));
    sorted.iter().find(|c| c.1 <= min + 1e-15).map(|c| c.0).unwrap_or(sorted[0].0)
}

/// Cross-validated choice of `r` and the fold-mean error curve.
pub fn cross_validate(ds: &ProbeDataset, folds: usize, grid: &[f64], seed: u64) -> Result<(f64, Vec<(f64, f64)>)> {
    let curve = cv_curves(&ds.design, &ds.weights, &[&ds.targets], folds, grid, seed)?.remove(0);
    Ok((select_r(&curve), curve))
}

/// Cross-validates `r`, then refits on every row.
pub fn fit_cross_validated(ds: &ProbeDataset, folds: usize, grid: &[f64], seed: u64) -> Result<ProbeFit> {
    let (best, curve) = cross_validate(ds, folds, grid, seed)?;
    let mut fit = weighted_affine_fit(ds, best)?;
    fit.cv_curve = curve;
    Ok(fit)
}
