use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{neg_log_softmax, SequenceModel};
use crate::error::{input_err, Error, Result};
use crate::ghmm::{clamp_distribution, Ghmm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Checkpoint every this many epochs; epoch 0 and the final epoch are
    /// always saved.
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { epochs: 300, batches_per_epoch: 50, batch_size: 64, learning_rate: 1e-3, checkpoint_every: 10 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "schedule.batches_per_epoch, batch_size and checkpoint_every must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("schedule.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub normalized_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub optimal_loss: f64,
    /// Optimizer step of every checkpoint emitted during this call.
    pub checkpoints: Vec<u64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,normalized_val_loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.normalized_val_loss));
        }
        s
    }

    pub fn final_normalized_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.normalized_val_loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped; the last emitted checkpoint is the last good state.
    Diverged { epoch: usize, reason: String },
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: SequenceModel,
    pub status: TrainStatus,
}

/// Exact validation loss: expected mean per-token cross-entropy of the model
/// against the process's true next-token distribution, over histories of
/// length `1..=context_length` (every positive-probability prefix enumerated).
pub fn validation_loss(model: &SequenceModel, ghmm: &Ghmm, context_length: usize) -> Result<f64> {
    if ghmm.alphabet_size() != model.config().alphabet_size {
        return Err(input_err!(
            "process alphabet {} differs from model alphabet {}",
            ghmm.alphabet_size(),
            model.config().alphabet_size
        ));
    }
    if context_length == 0 || context_length > model.config().context_length {
        return Err(input_err!("validation context {context_length} outside 1..={}", model.config().context_length));
    }
    let top = model.config().layers - 1;
    let mut beliefs = vec![ghmm.initial_vector().clone()];
    let mut probs = vec![1.0];
    let mut state = model.zero_state(1);
    let mut total = 0.0;
    for _ in 0..context_length {
        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        let mut next_beliefs = Vec::new();
        let mut next_probs = Vec::new();
        for (i, b) in beliefs.iter().enumerate() {
            for x in 0..ghmm.alphabet_size() {
                if let Ok((nb, p)) = ghmm.update_vector(b, x) {
                    parents.push(i);
                    tokens.push(x);
                    next_beliefs.push(nb);
                    next_probs.push(probs[i] * p);
                }
            }
        }
        let prev: Vec<_> = state.iter().map(|m| m.select_rows(&parents)).collect();
        state = model.step(&prev, &tokens)?;
        let logits = model.output_logits(&state[top]);
        for (j, nb) in next_beliefs.iter().enumerate() {
            let dist = clamp_distribution(&ghmm.next_distribution(nb));
            let ce: f64 = dist
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(x, &p)| p * neg_log_softmax(&logits, j, x))
                .sum();
            total += next_probs[j] * ce;
        }
        beliefs = next_beliefs;
        probs = next_probs;
    }
    Ok(total / context_length as f64)
}

/// Batch of training sequences for one optimizer step. The stream depends
/// only on `data_seed` and the global step, so resumed runs see the same data.
pub(crate) fn step_batch(ghmm: &Ghmm, data_seed: u64, step: u64, batch_size: usize, length: usize) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(step);
    let batch = ghmm.sample_sequences_with(&mut rng, batch_size, length);
    if batch.iter().any(|s| s.len() != length) {
        return Err(Error::Numeric("sampler hit an impossible observation".into()));
    }
    Ok(batch)
}

/// Trains from the model's current optimizer step to `schedule.epochs`.
///
/// `history` holds report rows of epochs already completed (empty for a fresh
/// model). Every checkpoint is handed to `sink` as soon as it exists; a fresh
/// run starts with the untrained epoch-0 checkpoint.
pub fn train<F>(
    mut model: SequenceModel,
    ghmm: &Ghmm,
    schedule: &Schedule,
    data_seed: u64,
    history: Vec<TrainRow>,
    mut sink: F,
) -> Result<TrainOutcome>
where
    F: FnMut(Checkpoint) -> Result<()>,
{
    schedule.validate()?;
    let ctx = model.config().context_length;
    let bpe = schedule.batches_per_epoch as u64;
    if !model.adam.step.is_multiple_of(bpe) {
        return Err(input_err!("model step {} is not on an epoch boundary", model.adam.step));
    }
    let start_epoch = (model.adam.step / bpe) as usize;
    if history.len() != start_epoch {
        return Err(input_err!("history has {} rows but model is at epoch {start_epoch}", history.len()));
    }
    let optimal_loss = ghmm.optimal_loss(ctx)?;
    let mut report = TrainReport { rows: history, optimal_loss, checkpoints: Vec::new() };

    if start_epoch == 0 {
        report.checkpoints.push(0);
        sink(Checkpoint::new(&model, data_seed, 0, Vec::new()))?;
    }

    for epoch in start_epoch + 1..=schedule.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..bpe {
            let batch = step_batch(ghmm, data_seed, model.adam.step, schedule.batch_size, ctx + 1)?;
            let step = model.loss_and_grad(&batch).and_then(|(loss, grad)| {
                model.adam_step(&grad, schedule.learning_rate)?;
                Ok(loss)
            });
            match step {
                Ok(loss) if model.is_finite() => loss_sum += loss,
                Ok(_) => return Ok(diverged(report, model, epoch, "non-finite parameters after update".into())),
                Err(Error::Numeric(msg)) => return Ok(diverged(report, model, epoch, msg)),
                Err(e) => return Err(e),
            }
        }
        let val_loss = validation_loss(&model, ghmm, ctx)?;
        if !val_loss.is_finite() {
            return Ok(diverged(report, model, epoch, format!("validation loss {val_loss}")));
        }
        let row = TrainRow {
            epoch,
            train_loss: loss_sum / bpe as f64,
            val_loss,
            normalized_val_loss: val_loss / optimal_loss,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6} normalized {:.6}",
            row.train_loss,
            row.val_loss,
            row.normalized_val_loss
        );
        report.rows.push(row);
        if epoch % schedule.checkpoint_every == 0 || epoch == schedule.epochs {
            report.checkpoints.push(model.adam.step);
            sink(Checkpoint::new(&model, data_seed, epoch, report.rows.clone()))?;
        }
    }
    Ok(TrainOutcome { report, model, status: TrainStatus::Completed })
}

fn diverged(report: TrainReport, model: SequenceModel, epoch: usize, reason: String) -> TrainOutcome {
    log::error!("training diverged at epoch {epoch}: {reason}");
    TrainOutcome { report, model, status: TrainStatus::Diverged { epoch, reason } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::mess3;
    use crate::seqmodel::{Architecture, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig { architecture: Architecture::Gru, layers: 1, hidden: 4, alphabet_size: 3, context_length: 4, seed: 3 }
    }

    #[test]
    fn validation_loss_bounded_by_optimum_and_uniform() {
        let g = mess3(0.05, 0.85).unwrap();
        let mut m = SequenceModel::init(&small()).unwrap();
        let opt = g.optimal_loss(4).unwrap();
        let v = validation_loss(&m, &g, 4).unwrap();
        assert!(v >= opt);
        m.tensor_mut("out.w").unwrap().fill(0.0);
        assert!((validation_loss(&m, &g, 4).unwrap() - 3f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn epoch_zero_checkpoint_is_init_and_resume_matches() {
        let g = mess3(0.05, 0.85).unwrap();
        let sched = Schedule { epochs: 4, batches_per_epoch: 3, batch_size: 8, learning_rate: 1e-2, checkpoint_every: 2 };
        let init = SequenceModel::init(&small()).unwrap();
        let mut full = Vec::new();
        let out = train(init.clone(), &g, &sched, 11, Vec::new(), |c| {
            full.push(c);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.status, TrainStatus::Completed);
        assert_eq!(full.len(), 3);
        assert_eq!(full[0].model, init);
        assert!(out.report.rows.iter().all(|r| r.train_loss.is_finite() && r.normalized_val_loss >= 1.0 - 1e-6));

        let mid = Checkpoint::from_bytes(&full[1].to_bytes().unwrap()).unwrap();
        let mut resumed = Vec::new();
        train(mid.model, &g, &sched, 11, mid.header.history, |c| {
            resumed.push(c);
            Ok(())
        })
        .unwrap();
        assert_eq!(resumed.len(), 1);
        assert_eq!(resumed[0].to_bytes().unwrap(), full[2].to_bytes().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let g = mess3(0.05, 0.85).unwrap();
        let sched = Schedule { epochs: 2, batches_per_epoch: 1, batch_size: 4, learning_rate: 1e-3, checkpoint_every: 1 };
        let mut m = SequenceModel::init(&small()).unwrap();
        m.tensor_mut("out.b").unwrap()[0] = f64::NAN;
        let mut seen = 0;
        let out = train(m, &g, &sched, 1, Vec::new(), |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert!(matches!(out.status, TrainStatus::Diverged { .. }), "{:?}", out.status);
        assert_eq!(seen, 1);
        assert!(out.report.rows.is_empty());
    }
}
