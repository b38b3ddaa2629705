//! Belief-geometry toolkit.
//!
//! Builds generative models of token sequences as generalized hidden Markov
//! models (GHMMs), filters exact Bayesian beliefs over them, trains small
//! recurrent sequence models on sampled data, and fits probability-weighted
//! affine probes from network activations to the ground-truth beliefs.
//!
//! Module map:
//!
//! - [`ghmm`]: GHMM type, word probabilities, belief updates, enumeration,
//!   sampling, optimal loss.
//! - [`quantum`]: Kraus channels, density matrices, generalized Bloch
//!   coordinates, Liouville generators, spectral checks.
//! - [`processes`]: Mess3, Bloch Walk, FRDN, Moon and Markov-order-k
//!   approximations.
//! - [`seqmodel`]: vanilla RNN / GRU with hand-written backprop, Adam,
//!   training loop and checkpoints.
//! - [`probe`]: weighted affine regression, regularized pseudoinverse,
//!   cross-validation, cosine-similarity analysis and the probe suite.
//! - [`pipeline`]: config-driven train / probe runs that write artifacts.

pub mod error;
pub mod ghmm;
pub mod linalg;
pub mod pipeline;
pub mod probe;
pub mod processes;
pub mod quantum;
pub mod seqmodel;

pub use error::{Error, Result};
pub use ghmm::{BeliefSet, BeliefState, Ghmm};
