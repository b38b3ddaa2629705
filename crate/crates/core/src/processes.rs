//! Example processes with classical, quantum and post-quantum minimal
//! generators, and exact Markov-order-k approximations used as controls.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{input_err, Error, Result};
use crate::ghmm::{clamp_distribution, Ghmm, Word, ZERO_THRESHOLD};
use crate::linalg::{self, c, CMatrix};
use crate::quantum::{gell_mann_basis, subchannel_bloch, validate_channel, KrausChannel};

pub type Parameters = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProcessName {
    Mess3,
    BlochWalk,
    Frdn,
    Moon,
    MarkovApprox,
}

impl ProcessName {
    pub const BASE: [ProcessName; 4] =
        [ProcessName::Mess3, ProcessName::BlochWalk, ProcessName::Frdn, ProcessName::Moon];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcessName::Mess3 => "mess3",
            ProcessName::BlochWalk => "bloch_walk",
            ProcessName::Frdn => "frdn",
            ProcessName::Moon => "moon",
            ProcessName::MarkovApprox => "markov_approx",
        }
    }

    /// Default parameter values (the experimental settings).
    pub fn default_parameters(self) -> Parameters {
        let pairs: &[(&str, f64)] = match self {
            ProcessName::Mess3 => &[("x", 0.05), ("a", 0.85)],
            ProcessName::BlochWalk => &[("alpha", 1.0), ("beta", 51f64.sqrt())],
            ProcessName::Frdn => &[("alpha", 2000.0), ("lambda", 0.49)],
            ProcessName::Moon => &[("alpha", std::f64::consts::E), ("beta", 0.5)],
            ProcessName::MarkovApprox => &[],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

impl fmt::Display for ProcessName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProcessName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mess3" => Ok(ProcessName::Mess3),
            "bloch_walk" => Ok(ProcessName::BlochWalk),
            "frdn" => Ok(ProcessName::Frdn),
            "moon" => Ok(ProcessName::Moon),
            "markov_approx" => Ok(ProcessName::MarkovApprox),
            other => Err(input_err!(
                "unknown process '{other}' (expected mess3, bloch_walk, frdn or moon)"
            )),
        }
    }
}

/// A constructed process together with the parameter values used.
#[derive(Clone, Debug)]
pub struct ProcessSpec {
    pub name: ProcessName,
    pub parameters: Parameters,
    pub ghmm: Ghmm,
    pub channel: Option<KrausChannel>,
}

impl ProcessSpec {
    /// Builds one of the four base processes. `overrides` replaces defaults;
    /// unknown parameter names are rejected.
    pub fn build(name: ProcessName, overrides: &Parameters) -> Result<Self> {
        let mut parameters = name.default_parameters();
        for (k, v) in overrides {
            if !parameters.contains_key(k) {
                return Err(input_err!("process {name} has no parameter '{k}'"));
            }
            parameters.insert(k.clone(), *v);
        }
        let p = |k: &str| parameters[k];
        let (ghmm, channel) = match name {
            ProcessName::Mess3 => (mess3(p("x"), p("a"))?, None),
            ProcessName::BlochWalk => {
                let (ch, g) = bloch_walk(p("alpha"), p("beta"))?;
                (g, Some(ch))
            }
            ProcessName::Frdn => (frdn(p("alpha"), p("lambda"))?, None),
            ProcessName::Moon => (moon(p("alpha"), p("beta"))?, None),
            ProcessName::MarkovApprox => {
                return Err(input_err!("markov_approx is derived from a source process"))
            }
        };
        Ok(Self { name, parameters, ghmm, channel })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::build(name.parse()?, &Parameters::new())
    }

    /// Markov-order-`k` approximation of this process, with the source
    /// parameters and the order recorded in `parameters`.
    pub fn markov_approx(&self, k: usize) -> Result<Self> {
        let ghmm = markov_approx(&self.ghmm, k)?;
        let mut parameters: Parameters =
            self.parameters.iter().map(|(n, v)| (format!("source.{n}"), *v)).collect();
        parameters.insert("order".into(), k as f64);
        Ok(Self { name: ProcessName::MarkovApprox, parameters, ghmm, channel: None })
    }
}

fn with_stationary_start(transitions: Vec<DMatrix<f64>>, unit: DVector<f64>) -> Result<Ghmm> {
    let d = unit.len();
    // Any vector with <v|1> = 1 will do as a placeholder start.
    let mut placeholder = DVector::zeros(d);
    let (i, _) = unit
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("non-empty");
    placeholder[i] = 1.0 / unit[i];
    let g = Ghmm::new(transitions, placeholder, unit)?;
    let pi = g.stationary_vector()?;
    g.with_initial(pi)
}

/// Three-state, three-token HMM.
pub fn mess3(x: f64, a: f64) -> Result<Ghmm> {
    if !(x > 0.0 && x < 0.5) {
        return Err(input_err!("mess3 needs 0 < x < 1/2, got {x}"));
    }
    if !(a > 0.0 && a < 1.0) {
        return Err(input_err!("mess3 needs 0 < a < 1, got {a}"));
    }
    let b = (1.0 - a) / 2.0;
    let y = 1.0 - 2.0 * x;
    let ta = DMatrix::from_row_slice(3, 3, &[a * y, b * x, b * x, a * x, b * y, b * x, a * x, b * x, b * y]);
    let tb = DMatrix::from_row_slice(3, 3, &[b * y, a * x, b * x, b * x, a * y, b * x, b * x, a * x, b * y]);
    let tc = DMatrix::from_row_slice(3, 3, &[b * y, b * x, a * x, b * x, b * y, a * x, b * x, b * x, a * y]);
    with_stationary_start(vec![ta, tb, tc], DVector::from_element(3, 1.0))
}

/// Kraus operators `K_0..K_3` of the Bloch Walk with
/// `gamma = 1 / (2 sqrt(alpha^2 + beta^2))`.
pub fn bloch_walk_channel(alpha: f64, beta: f64) -> Result<KrausChannel> {
    if !(alpha > 0.0) || !beta.is_finite() {
        return Err(input_err!("bloch_walk needs alpha > 0 and finite beta"));
    }
    let gamma = 1.0 / (2.0 * (alpha * alpha + beta * beta).sqrt());
    let m = |e: [f64; 4]| {
        CMatrix::from_row_slice(2, 2, &[c(e[0], 0.), c(e[1], 0.), c(e[2], 0.), c(e[3], 0.)])
            * c(gamma, 0.0)
    };
    KrausChannel::from_single(vec![
        m([alpha + beta, 0.0, 0.0, alpha - beta]),
        m([alpha - beta, 0.0, 0.0, alpha + beta]),
        m([alpha, beta, beta, alpha]),
        m([alpha, -beta, -beta, alpha]),
    ])
}

/// Index of the sigma_y coordinate in the qubit extended Bloch vector
/// `(c, b_x, b_y, b_z)`.
const SIGMA_Y: usize = 2;

/// The Bloch Walk channel and its three-dimensional GHMM acting on the
/// coefficients of `(I/2, sigma_x/2, sigma_z/2)`. The GHMM is the qubit Bloch
/// representation with the sigma_y row and column removed.
pub fn bloch_walk(alpha: f64, beta: f64) -> Result<(KrausChannel, Ghmm)> {
    let ch = bloch_walk_channel(alpha, beta)?;
    let residual = validate_channel(&ch);
    if residual > 1e-12 {
        return Err(Error::Model(format!("Bloch Walk channel residual {residual:e}")));
    }
    let basis = gell_mann_basis(2)?;
    let transitions = (0..4)
        .map(|x| Ok(subchannel_bloch(&ch, x, &basis)?.remove_row(SIGMA_Y).remove_column(SIGMA_Y)))
        .collect::<Result<Vec<_>>>()?;
    let e0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let g = Ghmm::new(transitions, e0.clone(), e0)?;
    Ok((ch, g))
}

/// Four-dimensional GHMM over tokens {a, b}.
pub fn frdn(alpha: f64, lambda: f64) -> Result<Ghmm> {
    if !(lambda > 0.0 && lambda <= 0.5) {
        return Err(input_err!("frdn needs 0 < lambda <= 1/2, got {lambda}"));
    }
    if !alpha.is_finite() {
        return Err(input_err!("frdn needs finite alpha"));
    }
    let (s, co) = alpha.sin_cos();
    let omega = DVector::from_vec(vec![
        1.0,
        1.0 - lambda,
        1.0 + lambda * (s - co),
        1.0 - lambda * (s + co),
    ]);
    let denom = (1.0 - lambda * co).powi(2) + lambda * lambda * s * s;
    let c_plus = (1.0 - lambda * co + lambda * s) / denom;
    let c_minus = (1.0 - lambda * co - lambda * s) / denom;
    let pi0 = DVector::from_vec(vec![
        1.0 - 1.0 / (2.0 * (1.0 - lambda)) + (c_plus + c_minus) / 4.0,
        1.0 / (2.0 * (1.0 - lambda)),
        -c_plus / 4.0,
        -c_minus / 4.0,
    ]);
    let ta = &omega * pi0.transpose();
    #[rustfmt::skip]
    let tb = DMatrix::from_row_slice(4, 4, &[
        0.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, co, -s,
        0.0, 0.0, s, co,
    ]) * lambda;
    let net = &ta + &tb;
    let unit = linalg::right_unit_eigenvector(&net, 1e-8)?;
    with_stationary_start(vec![ta, tb], unit)
}

/// Three-dimensional post-quantum GHMM over tokens {a, b, c}, scaled by
/// `nu = 1 / rho(T)` so the net transition has spectral radius one.
pub fn moon(alpha: f64, beta: f64) -> Result<Ghmm> {
    if !(alpha > 1.0 && 1.0 > beta && beta > 0.0) {
        return Err(input_err!("moon needs alpha > 1 > beta > 0, got alpha={alpha}, beta={beta}"));
    }
    if (alpha + beta - 2.0).abs() < 1e-12 {
        return Err(input_err!("moon needs alpha + beta != 2"));
    }
    let m0 = DVector::from_vec(vec![1.0, 1.0, 0.0]);
    let mu0 = DVector::from_vec(vec![1.0, -1.0, -1.0]);
    let ta = &m0 * mu0.transpose();
    let diag = |v: f64| DMatrix::from_row_slice(3, 3, &[v, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, v.ln(), 1.0]);
    let (tb, tc) = (diag(alpha), diag(beta));
    let nu = 1.0 / moon_spectral_radius(&(&ta + &tb + &tc))?;
    let transitions: Vec<DMatrix<f64>> = [ta, tb, tc].into_iter().map(|t| t * nu).collect();
    let net = transitions.iter().fold(DMatrix::zeros(3, 3), |acc, t| acc + t);
    let unit = linalg::right_unit_eigenvector(&net, 1e-8)?;
    with_stationary_start(transitions, unit)
}

/// Largest-modulus eigenvalue, required to be real and simple within 1e-10.
fn moon_spectral_radius(t: &DMatrix<f64>) -> Result<f64> {
    let mut ev = linalg::eigenvalues_real(t)?;
    ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let top = ev[0];
    if top.im.abs() > 1e-10 || top.re <= 0.0 {
        return Err(Error::Model(format!("leading eigenvalue {top} is not real and positive")));
    }
    if ev.len() > 1 && (ev[1].norm() - top.norm()).abs() <= 1e-10 {
        return Err(Error::Model("leading eigenvalue is not simple".into()));
    }
    Ok(top.re)
}

/// Spectral radius of the net transition operator.
pub fn spectral_radius(g: &Ghmm) -> Result<f64> {
    Ok(linalg::eigenvalues_real(&g.net_transition())?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// HMM over the positive-probability length-`k` histories of a stationary
/// source. On token `x`, history `h` moves to `h[1..] x` with the exact
/// conditional probability `P(x | h)`; the start vector is the stationary
/// distribution over histories. The result reproduces every `(k+1)`-gram of
/// the source.
pub fn markov_approx(source: &Ghmm, k: usize) -> Result<Ghmm> {
    if k == 0 {
        return Err(input_err!("Markov order must be at least 1"));
    }
    let eta = source.initial_vector();
    let drift = (source.net_transition().tr_mul(eta) - eta).amax();
    if drift > 1e-10 {
        return Err(input_err!("source process is not stationary (drift {drift:e})"));
    }
    let histories: Vec<_> = source.enumerate_words(k).into_iter().filter(|b| b.word.len() == k).collect();
    if histories.is_empty() {
        return Err(input_err!("no positive-probability histories of length {k}"));
    }
    let index: HashMap<&Word, usize> = histories.iter().enumerate().map(|(i, h)| (&h.word, i)).collect();
    let n = histories.len();
    let alphabet = source.alphabet_size();
    let mut transitions = vec![DMatrix::zeros(n, n); alphabet];
    for (s, h) in histories.iter().enumerate() {
        let dist = clamp_distribution(&source.next_distribution(&h.vector));
        for (x, &p) in dist.iter().enumerate() {
            if p <= ZERO_THRESHOLD {
                continue;
            }
            let mut next: Word = h.word[1..].to_vec();
            next.push(x);
            let &t = index.get(&next).ok_or_else(|| {
                Error::Model(format!("history {next:?} reachable but has zero probability"))
            })?;
            transitions[x][(s, t)] = p;
        }
    }
    // Renormalize rows after dropping sub-threshold branches.
    for s in 0..n {
        let total: f64 = transitions.iter().map(|t| t.row(s).sum()).sum();
        for t in transitions.iter_mut() {
            let mut row = t.row_mut(s);
            row /= total;
        }
    }
    let mass: f64 = histories.iter().map(|h| h.probability).sum();
    let initial = DVector::from_iterator(n, histories.iter().map(|h| h.probability / mass));
    Ghmm::new(transitions, initial, DVector::from_element(n, 1.0))
}
