//! Generalized hidden Markov models and exact Bayesian filtering over them.
//!
//! A [`Ghmm`] holds one real `d x d` matrix per token, an initial row vector
//! `eta` and a right vector `unit` with `T unit = unit` for the net transition
//! `T = sum_x T(x)`. The probability of a word `w = x1..xl` is
//! `eta T(x1) .. T(xl) unit`. Row vectors are stored as column `DVector`s and
//! multiplied from the left through `tr_mul`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::linalg;

/// Below this value an observation probability is treated as a structural zero.
pub const ZERO_THRESHOLD: f64 = 1e-13;

/// Default L-infinity distance under which two beliefs are merged.
pub const DEFAULT_DEDUP_TOLERANCE: f64 = 1e-9;

const UNIT_EIGEN_TOL: f64 = 1e-8;

pub type Word = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct Ghmm {
    transitions: Vec<DMatrix<f64>>,
    initial: DVector<f64>,
    unit: DVector<f64>,
    /// `T(x) unit` for every token, cached for next-token distributions.
    emit: Vec<DVector<f64>>,
}

impl Ghmm {
    /// Builds a GHMM after checking shapes, `||T unit - unit||_inf <= 1e-10`
    /// and `<eta|unit> = 1` within `1e-12`.
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        initial: DVector<f64>,
        unit: DVector<f64>,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(input_err!("GHMM needs at least one token"));
        }
        let d = initial.len();
        if d == 0 {
            return Err(input_err!("latent dimension must be positive"));
        }
        if unit.len() != d {
            return Err(input_err!("unit vector has length {}, expected {d}", unit.len()));
        }
        for (x, t) in transitions.iter().enumerate() {
            if t.nrows() != d || t.ncols() != d {
                return Err(input_err!(
                    "transition {x} is {}x{}, expected {d}x{d}",
                    t.nrows(),
                    t.ncols()
                ));
            }
        }
        let all_finite = transitions.iter().all(|t| t.iter().all(|v| v.is_finite()))
            && initial.iter().all(|v| v.is_finite())
            && unit.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(input_err!("GHMM contains non-finite entries"));
        }
        let emit: Vec<DVector<f64>> = transitions.iter().map(|t| t * &unit).collect();
        let net_unit = emit.iter().fold(DVector::zeros(d), |acc, e| acc + e);
        let residual = (&net_unit - &unit).amax();
        if residual > 1e-10 {
            return Err(Error::Model(format!(
                "net transition does not fix the unit vector (residual {residual:e})"
            )));
        }
        let norm = initial.dot(&unit);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Model(format!("<eta|1> = {norm}, expected 1")));
        }
        Ok(Self { transitions, initial, unit, emit })
    }

    pub fn alphabet_size(&self) -> usize {
        self.transitions.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.initial.len()
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    pub fn initial_vector(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn unit_right(&self) -> &DVector<f64> {
        &self.unit
    }

    pub fn net_transition(&self) -> DMatrix<f64> {
        let d = self.latent_dim();
        self.transitions.iter().fold(DMatrix::zeros(d, d), |acc, t| acc + t)
    }

    /// Same transitions and unit vector with a different initial vector.
    pub fn with_initial(&self, initial: DVector<f64>) -> Result<Self> {
        Self::new(self.transitions.clone(), initial, self.unit.clone())
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

    /// `eta T(w)` as a column vector.
    pub fn propagate(&self, start: &DVector<f64>, word: &[usize]) -> Result<DVector<f64>> {
        let mut v = start.clone();
        for &x in word {
            self.check_token(x)?;
            v = self.transitions[x].tr_mul(&v);
        }
        Ok(v)
    }

    /// `<eta| T(x1) .. T(xl) |1>`; the empty word has probability `<eta|1>`.
    pub fn word_probability(&self, word: &[usize]) -> Result<f64> {
        Ok(self.propagate(&self.initial, word)?.dot(&self.unit))
    }

    /// Left eigenvector of `T` at eigenvalue 1 normalized against the unit vector.
    pub fn stationary_vector(&self) -> Result<DVector<f64>> {
        linalg::stationary_left(&self.net_transition(), &self.unit, UNIT_EIGEN_TOL)
    }

    /// Entry `x` is `<eta|T(x)|1>`. Entries are returned unclamped.
    pub fn next_distribution(&self, belief: &DVector<f64>) -> Vec<f64> {
        self.emit.iter().map(|e| belief.dot(e)).collect()
    }

    /// Normalized update of a raw belief vector. Returns the new vector and the
    /// probability of `x` from `belief`.
    pub fn update_vector(&self, belief: &DVector<f64>, x: usize) -> Result<(DVector<f64>, f64)> {
        self.check_token(x)?;
        let next = self.transitions[x].tr_mul(belief);
        let p = next.dot(&self.unit);
        if p <= ZERO_THRESHOLD {
            return Err(Error::ImpossibleObservation { token: x, probability: p });
        }
        Ok((next / p, p))
    }

    pub fn initial_belief(&self) -> BeliefState {
        BeliefState { vector: self.initial.clone(), word: Vec::new(), probability: 1.0 }
    }

    /// Bayesian update `eta T(x) / <eta T(x)|1>`, tracking the word and its
    /// occurrence probability.
    pub fn update_belief(&self, belief: &BeliefState, x: usize) -> Result<BeliefState> {
        let (vector, p) = self.update_vector(&belief.vector, x)?;
        let mut word = belief.word.clone();
        word.push(x);
        Ok(BeliefState { vector, word, probability: belief.probability * p })
    }

    pub fn conditional_next_distribution(&self, belief: &BeliefState) -> Vec<f64> {
        self.next_distribution(&belief.vector)
    }

    /// Belief after filtering `word` from the initial vector.
    pub fn belief_after(&self, word: &[usize]) -> Result<BeliefState> {
        let mut b = self.initial_belief();
        for &x in word {
            b = self.update_belief(&b, x)?;
        }
        Ok(b)
    }

    /// Every positive-probability word of length `1..=max_len` with its
    /// belief, in lexicographic breadth-first order. Nothing is merged.
    pub fn enumerate_words(&self, max_len: usize) -> Vec<BeliefState> {
        let mut out = Vec::new();
        let mut frontier = vec![self.initial_belief()];
        for _ in 0..max_len {
            let mut next = Vec::with_capacity(frontier.len() * self.alphabet_size());
            for parent in &frontier {
                for x in 0..self.alphabet_size() {
                    if let Ok(child) = self.update_belief(parent, x) {
                        next.push(child);
                    }
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Breadth-first belief enumeration to `depth` with L-infinity merging.
    ///
    /// Each level is expanded from the merged frontier of the previous level.
    /// A retained belief's `probability` is its share of the uniform mixture
    /// over word lengths `1..=depth`, so the set's probabilities sum to 1.
    /// `depth = 0` yields only the initial vector.
    pub fn enumerate_beliefs(&self, depth: usize, dedup_tolerance: f64) -> BeliefSet {
        let mut set = BeliefIndex::new(self.latent_dim(), dedup_tolerance);
        if depth == 0 {
            set.insert(self.initial_belief());
            return set.into_set(0, vec![1.0]);
        }
        let share = 1.0 / depth as f64;
        let mut level_mass = Vec::with_capacity(depth);
        let mut frontier = vec![self.initial_belief()];
        for _ in 0..depth {
            let mut level = BeliefIndex::new(self.latent_dim(), dedup_tolerance);
            for parent in &frontier {
                for x in 0..self.alphabet_size() {
                    if let Ok(child) = self.update_belief(parent, x) {
                        level.insert(child);
                    }
                }
            }
            let level = level.into_beliefs();
            level_mass.push(level.iter().map(|b| b.probability).sum());
            for b in &level {
                set.insert(BeliefState { probability: b.probability * share, ..b.clone() });
            }
            frontier = level;
        }
        set.into_set(depth, level_mass)
    }

    /// Draws `count` sequences of `length` tokens from the initial vector with
    /// a ChaCha generator seeded by `seed`.
    pub fn sample_sequences(&self, count: usize, length: usize, seed: u64) -> Vec<Word> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_sequences_with(&mut rng, count, length)
    }

    pub fn sample_sequences_with<R: Rng>(&self, rng: &mut R, count: usize, length: usize) -> Vec<Word> {
        (0..count).map(|_| self.sample_one(rng, length)).collect()
    }

    fn sample_one<R: Rng>(&self, rng: &mut R, length: usize) -> Word {
        let mut belief = self.initial.clone();
        let mut word = Vec::with_capacity(length);
        for _ in 0..length {
            let dist = clamp_distribution(&self.next_distribution(&belief));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = dist.len() - 1;
            for (x, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    pick = x;
                    break;
                }
            }
            // The last positive entry absorbs rounding in the cumulative sum.
            if dist[pick] <= 0.0 {
                pick = dist.iter().rposition(|&p| p > 0.0).expect("some token is possible");
            }
            belief = match self.update_vector(&belief, pick) {
                Ok((v, _)) => v,
                Err(_) => break,
            };
            word.push(pick);
        }
        word
    }

    /// Expected next-token cross-entropy (nats) of the exact Bayesian
    /// predictor, averaged over history lengths `1..=context_length`.
    pub fn optimal_loss(&self, context_length: usize) -> Result<f64> {
        if context_length == 0 {
            return Err(input_err!("context length must be at least 1"));
        }
        let mut total = 0.0;
        let mut frontier = vec![self.initial_belief()];
        for _ in 0..context_length {
            let mut level = BeliefIndex::new(self.latent_dim(), DEFAULT_DEDUP_TOLERANCE);
            for parent in &frontier {
                for x in 0..self.alphabet_size() {
                    if let Ok(child) = self.update_belief(parent, x) {
                        level.insert(child);
                    }
                }
            }
            frontier = level.into_beliefs();
            for b in &frontier {
                let dist = clamp_distribution(&self.next_distribution(&b.vector));
                let entropy: f64 = dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                total += b.probability * entropy;
            }
        }
        Ok(total / context_length as f64)
    }

    /// Smallest word probability over all words of length `1..=depth`
    /// (exhaustive, no pruning) together with the largest deviation of a
    /// per-length sum from 1.
    pub fn validate_words(&self, depth: usize) -> WordValidation {
        let mut min_probability = f64::INFINITY;
        let mut max_sum_error = 0.0f64;
        let mut frontier = vec![self.initial.clone()];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(frontier.len() * self.alphabet_size());
            let mut sum = 0.0;
            for v in &frontier {
                for t in &self.transitions {
                    let w = t.tr_mul(v);
                    let p = w.dot(&self.unit);
                    min_probability = min_probability.min(p);
                    sum += p;
                    next.push(w);
                }
            }
            max_sum_error = max_sum_error.max((sum - 1.0).abs());
            frontier = next;
        }
        WordValidation { depth, min_probability, max_sum_error }
    }

    pub fn to_document(&self) -> GhmmDocument {
        GhmmDocument {
            name: None,
            parameters: None,
            alphabet_size: self.alphabet_size(),
            latent_dim: self.latent_dim(),
            transitions: self
                .transitions
                .iter()
                .map(|t| t.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            initial_vector: self.initial.iter().copied().collect(),
            unit_right: self.unit.iter().copied().collect(),
        }
    }

    pub fn from_document(doc: &GhmmDocument) -> Result<Self> {
        if doc.transitions.len() != doc.alphabet_size {
            return Err(input_err!(
                "alphabet_size {} but {} transition matrices",
                doc.alphabet_size,
                doc.transitions.len()
            ));
        }
        if doc.initial_vector.len() != doc.latent_dim {
            return Err(input_err!("initial_vector length differs from latent_dim"));
        }
        let d = doc.latent_dim;
        let mut transitions = Vec::with_capacity(doc.alphabet_size);
        for (x, rows) in doc.transitions.iter().enumerate() {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(input_err!("transition {x} is not {d}x{d}"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            transitions.push(DMatrix::from_row_slice(d, d, &flat));
        }
        Self::new(
            transitions,
            DVector::from_vec(doc.initial_vector.clone()),
            DVector::from_vec(doc.unit_right.clone()),
        )
    }
}

/// Clamps tiny negative probabilities to zero and renormalizes.
pub fn clamp_distribution(dist: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = dist.iter().map(|&p| p.max(0.0)).collect();
    let z: f64 = clamped.iter().sum();
    clamped.into_iter().map(|p| p / z).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct WordValidation {
    pub depth: usize,
    pub min_probability: f64,
    pub max_sum_error: f64,
}

/// JSON form of a GHMM. Matrices are token-indexed, row-major nested arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhmmDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<BTreeMap<String, f64>>,
    pub alphabet_size: usize,
    pub latent_dim: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub initial_vector: Vec<f64>,
    pub unit_right: Vec<f64>,
}

/// A predictive vector with the word that induced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState {
    pub vector: DVector<f64>,
    pub word: Word,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct BeliefSet {
    pub beliefs: Vec<BeliefState>,
    pub depth: usize,
    pub dedup_tolerance: f64,
    /// Summed word probability at each length `1..=depth` before merging
    /// (`[1.0]` for depth 0).
    pub level_mass: Vec<f64>,
}

/// Insertion-ordered belief collection with L-infinity merging.
///
/// Candidates are found through a sorted projection onto a fixed direction:
/// vectors within `tol` in L-infinity have projections within `tol * ||s||_1`.
struct BeliefIndex {
    beliefs: Vec<BeliefState>,
    direction: Vec<f64>,
    slack: f64,
    tol: f64,
    by_projection: BTreeMap<OrderedKey, Vec<usize>>,
}

#[derive(Clone, Copy)]
struct OrderedKey(f64);
impl PartialEq for OrderedKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}
impl Eq for OrderedKey {}
impl PartialOrd for OrderedKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrderedKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl BeliefIndex {
    fn new(dim: usize, tol: f64) -> Self {
        // Fractional parts of multiples of the golden ratio; never parallel to
        // the all-ones direction for dim > 1.
        let phi = 0.618_033_988_749_894_9_f64;
        let direction: Vec<f64> = (0..dim).map(|i| 0.5 + ((i + 1) as f64 * phi).fract()).collect();
        let slack = tol * direction.iter().sum::<f64>();
        Self { beliefs: Vec::new(), direction, slack, tol, by_projection: BTreeMap::new() }
    }

    fn project(&self, v: &DVector<f64>) -> f64 {
        v.iter().zip(&self.direction).map(|(a, b)| a * b).sum()
    }

    fn insert(&mut self, b: BeliefState) {
        let key = self.project(&b.vector);
        let lo = OrderedKey(key - self.slack);
        let hi = OrderedKey(key + self.slack);
        let mut hit = None;
        'search: for (_, ids) in self.by_projection.range(lo..=hi) {
            for &i in ids {
                if (&self.beliefs[i].vector - &b.vector).amax() <= self.tol {
                    hit = Some(i);
                    break 'search;
                }
            }
        }
        match hit {
            Some(i) => self.beliefs[i].probability += b.probability,
            None => {
                self.by_projection.entry(OrderedKey(key)).or_default().push(self.beliefs.len());
                self.beliefs.push(b);
            }
        }
    }

    fn into_beliefs(self) -> Vec<BeliefState> {
        self.beliefs
    }

    fn into_set(self, depth: usize, level_mass: Vec<f64>) -> BeliefSet {
        let dedup_tolerance = self.tol;
        BeliefSet { beliefs: self.beliefs, depth, dedup_tolerance, level_mass }
    }
}
