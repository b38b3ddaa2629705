use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{augment, cv_curves, fit_with_solver, select_r, similarity_analysis, weighted_solver, Anchors, ProbeFit};
use crate::error::{input_err, Result};
use crate::ghmm::{Ghmm, Word};
use crate::seqmodel::{LayerSelection, SequenceModel};

pub const PROBE_CSV_HEADER: &str =
    "checkpoint_step,target_name,layer_selection,best_r,rmse,rmse_normalized,similarity_r2,n_rows";

#[derive(Clone, Debug)]
pub struct ProbeTarget {
    pub name: String,
    pub ghmm: Ghmm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSettings {
    /// Longest anchor word.
    pub depth: usize,
    pub folds: usize,
    pub r_grid: Vec<f64>,
    pub seed: u64,
    /// Cap on the number of anchors entering the pairwise similarity
    /// comparison (seeded uniform subsample when exceeded).
    pub similarity_points: usize,
}

#[derive(Clone, Copy)]
pub struct SuiteCheckpoint<'a> {
    pub step: u64,
    pub model: &'a SequenceModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub checkpoint_step: u64,
    pub target_name: String,
    pub layer_selection: String,
    pub best_r: f64,
    pub rmse: f64,
    pub rmse_normalized: f64,
    pub similarity_r2: f64,
    pub n_rows: usize,
}

impl ProbeRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{},{},{},{}",
            self.checkpoint_step,
            self.target_name,
            self.layer_selection,
            self.best_r,
            self.rmse,
            self.rmse_normalized,
            self.similarity_r2,
            self.n_rows
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryRecord {
    pub word: Word,
    pub probability: f64,
    pub true_belief: Vec<f64>,
    pub predicted_belief: Vec<f64>,
}

/// Everything needed to export one fit's geometry.
pub struct FitContext<'a> {
    pub row: &'a ProbeRow,
    pub words: &'a [Word],
    pub weights: &'a [f64],
    pub targets: &'a DMatrix<f64>,
    pub fit: &'a ProbeFit,
}

impl FitContext<'_> {
    pub fn geometry(&self) -> impl Iterator<Item = GeometryRecord> + '_ {
        (0..self.words.len()).map(move |i| GeometryRecord {
            word: self.words[i].clone(),
            probability: self.weights[i],
            true_belief: self.targets.row(i).iter().copied().collect(),
            predicted_belief: self.fit.predictions.row(i).iter().copied().collect(),
        })
    }
}

struct LayerResult {
    fits: Vec<ProbeFit>,
    r2: Vec<f64>,
}

struct Suite<'a> {
    anchors: Anchors,
    targets: Vec<DMatrix<f64>>,
    sim_rows: Vec<usize>,
    settings: &'a ProbeSettings,
}

impl Suite<'_> {
    fn probe(&self, model: &SequenceModel, layer: &LayerSelection) -> Result<LayerResult> {
        let records = model.capture_activations(&self.anchors.words, layer)?;
        let design = augment(&self.anchors.activations(&records)?);
        let w = &self.anchors.weights;
        let refs: Vec<&DMatrix<f64>> = self.targets.iter().collect();
        let s = self.settings;
        let curves = cv_curves(&design, w, &refs, s.folds, &s.r_grid, s.seed)?;
        let solver = weighted_solver(&design, w)?;
        let mut fits = Vec::with_capacity(self.targets.len());
        let mut r2 = Vec::with_capacity(self.targets.len());
        for (t, curve) in self.targets.iter().zip(curves) {
            let mut fit = fit_with_solver(&solver, &design, t, w, select_r(&curve));
            fit.cv_curve = curve;
            let sim = similarity_analysis(&t.select_rows(&self.sim_rows), &fit.predictions.select_rows(&self.sim_rows))?;
            r2.push(sim.r_squared);
            fits.push(fit);
        }
        Ok(LayerResult { fits, r2 })
    }
}

/// Probes every `(checkpoint, target, layer selection)` combination.
///
/// Anchors are the positive-probability words of `source` up to
/// `settings.depth`; each target supplies beliefs along those words. RMSE is
/// normalized by the cross-validated RMSE of `baseline` (the untrained model)
/// for the same target and layers. Rows come out ordered by checkpoint,
/// then target, then layer selection; `on_fit` sees each fit in that order.
pub fn run_probe_suite<F>(
    checkpoints: &[SuiteCheckpoint<'_>],
    baseline: &SequenceModel,
    source: &Ghmm,
    targets: &[ProbeTarget],
    layers: &[LayerSelection],
    settings: &ProbeSettings,
    mut on_fit: F,
) -> Result<Vec<ProbeRow>>
where
    F: FnMut(&FitContext<'_>) -> Result<()>,
{
    if targets.is_empty() || layers.is_empty() {
        return Err(input_err!("probe suite needs at least one target and one layer selection"));
    }
    for c in checkpoints.iter().map(|c| c.model).chain(std::iter::once(baseline)) {
        if c.config().context_length < settings.depth {
            return Err(input_err!(
                "probe depth {} exceeds model context length {}",
                settings.depth,
                c.config().context_length
            ));
        }
        for l in layers {
            l.resolve(c.config().layers)?;
        }
    }
    let anchors = Anchors::new(source, settings.depth)?;
    let target_mats = targets
        .iter()
        .map(|t| if t.ghmm == *source { Ok(anchors.beliefs.clone()) } else { anchors.beliefs_under(&t.ghmm) })
        .collect::<Result<Vec<_>>>()?;
    let n = anchors.words.len();
    let sim_rows = if n > settings.similarity_points {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(0x5157));
        let mut idx = rand::seq::index::sample(&mut rng, n, settings.similarity_points).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let suite = Suite { anchors, targets: target_mats, sim_rows, settings };

    let baseline_results = layers.iter().map(|l| suite.probe(baseline, l)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for ck in checkpoints {
        let fresh;
        let per_layer: &[LayerResult] = if ck.model.params() == baseline.params() {
            &baseline_results
        } else {
            fresh = layers.iter().map(|l| suite.probe(ck.model, l)).collect::<Result<Vec<_>>>()?;
            &fresh
        };
        for (t, target) in targets.iter().enumerate() {
            for (li, layer) in layers.iter().enumerate() {
                let res = &per_layer[li];
                let fit = &res.fits[t];
                let base = baseline_results[li].fits[t].rmse;
                let row = ProbeRow {
                    checkpoint_step: ck.step,
                    target_name: target.name.clone(),
                    layer_selection: layer.to_string(),
                    best_r: fit.chosen_r,
                    rmse: fit.rmse,
                    rmse_normalized: fit.rmse / base,
                    similarity_r2: res.r2[t],
                    n_rows: n,
                };
                on_fit(&FitContext {
                    row: &row,
                    words: &suite.anchors.words,
                    weights: &suite.anchors.weights,
                    targets: &suite.targets[t],
                    fit,
                })?;
                log::info!("{}", row.csv_line());
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::default_r_grid;
    use crate::processes::mess3;
    use crate::seqmodel::{Architecture, ModelConfig};

    #[test]
    fn step_zero_normalizes_to_one_and_rows_expand() {
        let g = mess3(0.05, 0.85).unwrap();
        let cfg = ModelConfig { architecture: Architecture::Gru, layers: 2, hidden: 6, alphabet_size: 3, context_length: 4, seed: 1 };
        let m0 = SequenceModel::init(&cfg).unwrap();
        let m1 = SequenceModel::init(&ModelConfig { seed: 2, ..cfg }).unwrap();
        let settings = ProbeSettings { depth: 3, folds: 5, r_grid: default_r_grid(), seed: 7, similarity_points: 20 };
        let targets = vec![
            ProbeTarget { name: "minimal".into(), ghmm: g.clone() },
            ProbeTarget { name: "copy".into(), ghmm: g.clone() },
        ];
        let layers = vec![LayerSelection::All, LayerSelection::Single(0), LayerSelection::Single(1)];
        let cks = [SuiteCheckpoint { step: 0, model: &m0 }, SuiteCheckpoint { step: 5, model: &m1 }];
        let mut seen = 0;
        let rows = run_probe_suite(&cks, &m0, &g, &targets, &layers, &settings, |ctx| {
            seen += 1;
            assert_eq!(ctx.geometry().count(), 39);
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(seen, 12);
        for r in &rows[..6] {
            assert_eq!(r.rmse_normalized, 1.0);
            assert_eq!(r.n_rows, 3 + 9 + 27);
        }
        assert_eq!(rows[0].layer_selection, "all");
        assert_eq!(rows[1].layer_selection, "1");
        assert_eq!(rows[3].target_name, "copy");
        let again = run_probe_suite(&cks, &m0, &g, &targets, &layers, &settings, |_| Ok(())).unwrap();
        assert_eq!(rows, again);
    }
}
