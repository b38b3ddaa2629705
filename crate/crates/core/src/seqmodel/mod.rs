//! Small recurrent next-token models with hand-written backpropagation.
//!
//! Inputs are one-hot tokens fed straight into the first recurrent layer; the
//! top layer's hidden state goes through a linear projection to logits.
//! Everything is `f64` and batched as `batch x features` matrices.

mod adam;
mod checkpoint;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::ghmm::Word;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_FORMAT};
pub use model::{ForwardOutput, ParamLayout, SequenceModel, TensorSpec};
pub use train::{
    train, validation_loss, Schedule, TrainOutcome, TrainReport, TrainRow, TrainStatus,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// `h' = tanh(x W_in + h W_hid + b)`.
    Rnn,
    /// Reset/update-gated cell with `h' = (1 - z) h + z n`.
    Gru,
}

impl Architecture {
    /// Number of stacked pre-activation blocks per layer.
    pub(crate) fn gates(self) -> usize {
        match self {
            Architecture::Rnn => 1,
            Architecture::Gru => 3,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Rnn => "rnn",
            Architecture::Gru => "gru",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(Architecture::Rnn),
            "gru" => Ok(Architecture::Gru),
            other => Err(input_err!("unknown architecture '{other}' (expected rnn or gru)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden: usize,
    pub alphabet_size: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("model.layers must be at least 1".into()));
        }
        if self.hidden < 2 {
            return Err(Error::Config("model.hidden must be at least 2".into()));
        }
        if self.context_length < 2 {
            return Err(Error::Config("model.context_length must be at least 2".into()));
        }
        if self.alphabet_size < 1 {
            return Err(Error::Config("model.alphabet_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which layers' final-position hidden states form an activation vector.
/// Layer indices are zero-based; the textual form is one-based
/// (`all`, `2`, `1+2`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LayerSelection {
    All,
    Single(usize),
    Subset(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        let idx = match self {
            LayerSelection::All => (0..layers).collect(),
            LayerSelection::Single(l) => vec![*l],
            LayerSelection::Subset(ls) => ls.clone(),
        };
        if idx.is_empty() {
            return Err(input_err!("empty layer selection"));
        }
        if let Some(bad) = idx.iter().find(|&&l| l >= layers) {
            return Err(input_err!("layer {} does not exist in a {layers}-layer model", bad + 1));
        }
        Ok(idx)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Single(l) => write!(f, "{}", l + 1),
            LayerSelection::Subset(ls) => {
                let parts: Vec<String> = ls.iter().map(|l| (l + 1).to_string()).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        let parse_one = |p: &str| -> Result<usize> {
            let v: usize = p.trim().parse().map_err(|_| input_err!("bad layer index '{p}'"))?;
            if v == 0 {
                return Err(input_err!("layer indices start at 1"));
            }
            Ok(v - 1)
        };
        if s.contains('+') {
            let ls = s.split('+').map(parse_one).collect::<Result<Vec<_>>>()?;
            Ok(LayerSelection::Subset(ls))
        } else {
            Ok(LayerSelection::Single(parse_one(s)?))
        }
    }
}

/// Final-position hidden state of the selected layers, concatenated in
/// layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub word: Word,
    pub layers: Vec<usize>,
    pub vector: DVector<f64>,
}
