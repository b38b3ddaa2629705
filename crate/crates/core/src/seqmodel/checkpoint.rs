//! Checkpoint file layout: one line of JSON header terminated by `\n`,
//! followed by little-endian `f64` values: parameters, then Adam first
//! moments, then Adam second moments, each in tensor layout order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::model::{SequenceModel, TensorSpec};
use super::train::TrainRow;
use super::ModelConfig;
use crate::error::{input_err, Result};

pub const CHECKPOINT_FORMAT: &str = "beliefgeo-checkpoint/1";

const SECTIONS: [&str; 3] = ["parameters", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    /// Initialization seed (same as `config.seed`).
    pub seed: u64,
    /// Seed of the per-step training batch streams.
    pub data_seed: u64,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub epoch: usize,
    pub adam: AdamConfig,
    pub metadata: BTreeMap<String, String>,
    /// Tensors in payload order; each is stored column-major.
    pub tensors: Vec<TensorSpec>,
    pub payload_sections: Vec<String>,
    pub payload_doubles: usize,
    /// Training report rows up to and including `epoch`.
    pub history: Vec<TrainRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: SequenceModel,
}

impl Checkpoint {
    pub fn new(model: &SequenceModel, data_seed: u64, epoch: usize, history: Vec<TrainRow>) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("init_scheme".into(), "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero".into());
        metadata.insert("tensor_order".into(), "column-major".into());
        metadata.insert("loss".into(), "mean per-token next-token cross-entropy (nats)".into());
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: model.config().clone(),
            seed: model.config().seed,
            data_seed,
            step: model.adam.step,
            epoch,
            adam: model.adam_config,
            metadata,
            tensors: model.layout().tensors.clone(),
            payload_sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
            payload_doubles: 3 * model.params().len(),
            history,
        };
        Self { header, model: model.clone() }
    }

    pub fn step(&self) -> u64 {
        self.header.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        let m = &self.model;
        for section in [m.params(), &m.adam.m, &m.adam.v] {
            for v in section {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| input_err!("checkpoint has no header line"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(input_err!("unsupported checkpoint format '{}'", header.format));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != 8 * header.payload_doubles || !header.payload_doubles.is_multiple_of(3) {
            return Err(input_err!(
                "checkpoint payload is {} bytes, header declares {} doubles",
                payload.len(),
                header.payload_doubles
            ));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let n = values.len() / 3;
        let adam = AdamState { m: values[n..2 * n].to_vec(), v: values[2 * n..].to_vec(), step: header.step };
        let mut model = SequenceModel::from_parts(&header.config, values[..n].to_vec(), adam)?;
        if model.layout().tensors != header.tensors {
            return Err(input_err!("checkpoint tensor layout does not match its config"));
        }
        model.adam_config = header.adam;
        Ok(Self { header, model })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
