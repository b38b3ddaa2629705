//! Config-driven training and probing runs that write artifacts to disk.
//!
//! Every seed is derived from the master seed, and every emitted file carries
//! the config digest (SHA-256 of the canonical config JSON with the output
//! directory left out), so repeating a run reproduces its bytes exactly.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::probe::{default_r_grid, run_probe_suite, ProbeRow, ProbeSettings, ProbeTarget, SuiteCheckpoint, PROBE_CSV_HEADER};
use crate::processes::{Parameters, ProcessName, ProcessSpec};
use crate::seqmodel::{
    train, Architecture, Checkpoint, LayerSelection, ModelConfig, Schedule, SequenceModel, TrainReport, TrainStatus,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessConfig {
    pub name: String,
    #[serde(default)]
    pub parameters: Parameters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden: usize,
    pub context_length: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { architecture: Architecture::Gru, layers: 2, hidden: 32, context_length: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryPolicy {
    /// No geometry files.
    None,
    /// Geometry for the last selected checkpoint only.
    Last,
    /// Geometry for every selected checkpoint.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Longest anchor word; defaults to the model context length.
    pub depth: Option<usize>,
    pub folds: usize,
    /// Defaults to the standard 53-value grid.
    pub r_grid: Option<Vec<f64>>,
    /// `all`, a one-based layer index, or `i+j` subsets.
    pub layers: Vec<String>,
    /// `minimal` (the process's own generator) or `markov<k>`.
    pub targets: Vec<String>,
    pub similarity_points: usize,
    pub geometry: GeometryPolicy,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            depth: None,
            folds: 10,
            r_grid: None,
            layers: vec!["all".into()],
            targets: vec!["minimal".into()],
            similarity_points: 2000,
            geometry: GeometryPolicy::Last,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub process: ProcessConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

/// Seed for one consumer, `SHA-256(master || label)` truncated to 64 bits.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let name: ProcessName = self.process.name.parse().map_err(|e: Error| config_err(format!("process.name: {e}")))?;
        if name == ProcessName::MarkovApprox {
            return Err(config_err("process.name: markov_approx is only available as a probe target"));
        }
        let m = &self.model;
        if m.layers < 1 {
            return Err(config_err("model.layers must be at least 1"));
        }
        if m.hidden < 2 {
            return Err(config_err("model.hidden must be at least 2"));
        }
        if m.context_length < 2 {
            return Err(config_err("model.context_length must be at least 2"));
        }
        self.schedule.validate()?;
        let depth = self.probe_depth();
        if depth == 0 || depth > m.context_length {
            return Err(config_err(format!("probe.depth must be in 1..={}", m.context_length)));
        }
        if self.probe.folds < 2 {
            return Err(config_err("probe.folds must be at least 2"));
        }
        if self.probe.similarity_points < 2 {
            return Err(config_err("probe.similarity_points must be at least 2"));
        }
        if let Some(g) = &self.probe.r_grid {
            if g.is_empty() || g.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return Err(config_err("probe.r_grid must be non-empty and positive"));
            }
        }
        if self.probe.targets.is_empty() || self.probe.layers.is_empty() {
            return Err(config_err("probe.targets and probe.layers must be non-empty"));
        }
        for t in &self.probe.targets {
            parse_target(t)?;
        }
        self.layer_selections()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, independent of `output_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn probe_depth(&self) -> usize {
        self.probe.depth.unwrap_or(self.model.context_length)
    }

    pub fn process_spec(&self) -> Result<ProcessSpec> {
        ProcessSpec::build(self.process.name.parse()?, &self.process.parameters)
            .map_err(|e| config_err(format!("process: {e}")))
    }

    pub fn model_config(&self, alphabet_size: usize) -> ModelConfig {
        ModelConfig {
            architecture: self.model.architecture,
            layers: self.model.layers,
            hidden: self.model.hidden,
            alphabet_size,
            context_length: self.model.context_length,
            seed: derive_seed(self.seed, "model"),
        }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn layer_selections(&self) -> Result<Vec<LayerSelection>> {
        self.probe
            .layers
            .iter()
            .map(|s| {
                let sel: LayerSelection = s.parse().map_err(|e: Error| config_err(format!("probe.layers: {e}")))?;
                sel.resolve(self.model.layers).map_err(|e| config_err(format!("probe.layers: {e}")))?;
                Ok(sel)
            })
            .collect()
    }

    pub fn probe_targets(&self, spec: &ProcessSpec) -> Result<Vec<ProbeTarget>> {
        self.probe
            .targets
            .iter()
            .map(|t| {
                let ghmm = match parse_target(t)? {
                    None => spec.ghmm.clone(),
                    Some(k) => spec.markov_approx(k)?.ghmm,
                };
                Ok(ProbeTarget { name: t.clone(), ghmm })
            })
            .collect()
    }

    pub fn probe_settings(&self) -> ProbeSettings {
        ProbeSettings {
            depth: self.probe_depth(),
            folds: self.probe.folds,
            r_grid: self.probe.r_grid.clone().unwrap_or_else(default_r_grid),
            seed: derive_seed(self.seed, "probe"),
            similarity_points: self.probe.similarity_points,
        }
    }
}

/// `minimal` -> `None`, `markov<k>` -> `Some(k)`.
fn parse_target(t: &str) -> Result<Option<usize>> {
    if t == "minimal" {
        return Ok(None);
    }
    t.strip_prefix("markov")
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k >= 1)
        .map(Some)
        .ok_or_else(|| config_err(format!("unknown probe target '{t}' (expected minimal or markov<k>)")))
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

fn parse_checkpoint_name(name: &str) -> Option<u64> {
    name.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse().ok()
}

/// Checkpoint files of a run, sorted by step.
pub fn list_checkpoints(out: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = checkpoint_dir(out);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if let Some(step) = path.file_name().and_then(|n| n.to_str()).and_then(parse_checkpoint_name) {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}

fn digest_line(digest: &str) -> String {
    format!("# config_digest={digest}\n")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_config_copy(cfg: &RunConfig, out: &Path, digest: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Copy<'a> {
        config_digest: &'a str,
        config: &'a RunConfig,
    }
    let mut text = serde_json::to_string_pretty(&Copy { config_digest: digest, config: cfg })?;
    text.push('\n');
    write_atomic(&out.join("config.json"), text.as_bytes())
}

#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub report: TrainReport,
    pub report_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains per `cfg`, writing checkpoints, `config.json` and
/// `train_report.csv` under `cfg.output_dir`. With `resume`, training
/// continues from the latest checkpoint present.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let spec = cfg.process_spec()?;
    let digest = cfg.digest();
    let out = cfg.output_dir.clone();
    let ck_dir = checkpoint_dir(&out);
    fs::create_dir_all(&ck_dir)?;
    write_config_copy(cfg, &out, &digest)?;
    let model_cfg = cfg.model_config(spec.ghmm.alphabet_size());
    let data_seed = cfg.data_seed();

    let existing = list_checkpoints(&out)?;
    let (model, history) = match (resume, existing.last()) {
        (true, Some((_, path))) => {
            let ck = Checkpoint::read(path)?;
            if ck.header.config != model_cfg || ck.header.data_seed != data_seed {
                return Err(config_err(format!("{} was written by a different config", path.display())));
            }
            log::info!("resuming from {}", path.display());
            (ck.model, ck.header.history)
        }
        _ => {
            for (_, path) in &existing {
                fs::remove_file(path)?;
            }
            (SequenceModel::init(&model_cfg)?, Vec::new())
        }
    };

    let mut written = Vec::new();
    let outcome = train(model, &spec.ghmm, &cfg.schedule, data_seed, history, |mut ck| {
        ck.header.metadata.insert("config_digest".into(), digest.clone());
        ck.header.metadata.insert("process".into(), spec.name.to_string());
        let path = ck_dir.join(checkpoint_file_name(ck.step()));
        write_atomic(&path, &ck.to_bytes()?)?;
        written.push(path);
        Ok(())
    })?;

    let report_path = out.join("train_report.csv");
    let mut csv = digest_line(&digest);
    csv.push_str(&outcome.report.to_csv());
    write_atomic(&report_path, csv.as_bytes())?;

    if let TrainStatus::Diverged { epoch, reason } = outcome.status {
        let last = list_checkpoints(&out)?.last().map(|(_, p)| p.display().to_string()).unwrap_or_default();
        return Err(Error::Numeric(format!(
            "training diverged at epoch {epoch}: {reason}; last good checkpoint {last}"
        )));
    }
    Ok(TrainSummary { out_dir: out, report: outcome.report, report_path, checkpoints: written })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckpointSelector {
    All,
    Last,
    /// Pattern matched against checkpoint file names, or against full paths
    /// when it contains a `/`.
    Glob(String),
}

impl FromStr for CheckpointSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            "" => Err(config_err("empty checkpoint selector")),
            p => {
                glob::Pattern::new(p).map_err(|e| config_err(format!("bad checkpoint pattern '{p}': {e}")))?;
                Ok(Self::Glob(p.to_string()))
            }
        }
    }
}

impl fmt::Display for CheckpointSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Last => f.write_str("last"),
            Self::Glob(p) => f.write_str(p),
        }
    }
}

pub fn select_checkpoints(out: &Path, selector: &CheckpointSelector) -> Result<Vec<(u64, PathBuf)>> {
    let all = list_checkpoints(out)?;
    let chosen: Vec<(u64, PathBuf)> = match selector {
        CheckpointSelector::All => all,
        CheckpointSelector::Last => all.last().cloned().into_iter().collect(),
        CheckpointSelector::Glob(p) => {
            let pat = glob::Pattern::new(p).map_err(|e| config_err(format!("bad checkpoint pattern: {e}")))?;
            all.into_iter()
                .filter(|(_, path)| {
                    if p.contains('/') {
                        pat.matches_path(path)
                    } else {
                        path.file_name().and_then(|n| n.to_str()).is_some_and(|n| pat.matches(n))
                    }
                })
                .collect()
        }
    };
    if chosen.is_empty() {
        return Err(config_err(format!(
            "no checkpoints in {} match '{selector}'",
            checkpoint_dir(out).display()
        )));
    }
    Ok(chosen)
}

#[derive(Debug)]
pub struct ProbeSummary {
    pub report_path: PathBuf,
    pub rows: Vec<ProbeRow>,
    pub geometry_files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct GeometryLine<'a> {
    config_digest: &'a str,
    checkpoint_step: u64,
    target_name: &'a str,
    layer_selection: &'a str,
    #[serde(flatten)]
    record: crate::probe::GeometryRecord,
}

pub fn probe_report_csv(rows: &[ProbeRow], digest: &str) -> String {
    let mut s = digest_line(digest);
    s.push_str(PROBE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Probes the selected checkpoints of the run in `cfg.output_dir`, writing
/// `probe/probe_report.csv` and geometry JSONL under `probe/geometry/`.
pub fn run_probe(cfg: &RunConfig, selector: &CheckpointSelector) -> Result<ProbeSummary> {
    cfg.validate()?;
    let spec = cfg.process_spec()?;
    let digest = cfg.digest();
    let out = &cfg.output_dir;
    let model_cfg = cfg.model_config(spec.ghmm.alphabet_size());
    let chosen = select_checkpoints(out, selector)?;
    let baseline_path = checkpoint_dir(out).join(checkpoint_file_name(0));
    if !baseline_path.is_file() {
        return Err(config_err(format!("missing untrained checkpoint {}", baseline_path.display())));
    }
    let load = |path: &Path| -> Result<SequenceModel> {
        let ck = Checkpoint::read(path)?;
        if ck.header.config != model_cfg {
            return Err(config_err(format!("{} was written by a different model config", path.display())));
        }
        Ok(ck.model)
    };
    let baseline = load(&baseline_path)?;
    let models = chosen.iter().map(|(_, p)| load(p)).collect::<Result<Vec<_>>>()?;
    let series: Vec<SuiteCheckpoint<'_>> =
        chosen.iter().zip(&models).map(|((step, _), m)| SuiteCheckpoint { step: *step, model: m }).collect();
    let targets = cfg.probe_targets(&spec)?;
    let layers = cfg.layer_selections()?;

    let probe_dir = out.join("probe");
    let geo_dir = probe_dir.join("geometry");
    fs::create_dir_all(&probe_dir)?;
    let last_step = chosen.last().map(|c| c.0);
    let mut geometry_files = Vec::new();
    let rows = run_probe_suite(&series, &baseline, &spec.ghmm, &targets, &layers, &cfg.probe_settings(), |ctx| {
        let export = match cfg.probe.geometry {
            GeometryPolicy::None => false,
            GeometryPolicy::Last => Some(ctx.row.checkpoint_step) == last_step,
            GeometryPolicy::All => true,
        };
        if !export {
            return Ok(());
        }
        fs::create_dir_all(&geo_dir)?;
        let name = format!(
            "step-{:08}_{}_{}.jsonl",
            ctx.row.checkpoint_step, ctx.row.target_name, ctx.row.layer_selection
        );
        let path = geo_dir.join(name);
        let mut buf = Vec::new();
        for record in ctx.geometry() {
            let line = GeometryLine {
                config_digest: &digest,
                checkpoint_step: ctx.row.checkpoint_step,
                target_name: &ctx.row.target_name,
                layer_selection: &ctx.row.layer_selection,
                record,
            };
            serde_json::to_writer(&mut buf, &line)?;
            buf.write_all(b"\n")?;
        }
        write_atomic(&path, &buf)?;
        geometry_files.push(path);
        Ok(())
    })?;
    let report_path = probe_dir.join("probe_report.csv");
    write_atomic(&report_path, probe_report_csv(&rows, &digest).as_bytes())?;
    Ok(ProbeSummary { report_path, rows, geometry_files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{"process": {"name": "mess3"}, "output_dir": "x", "seed": 1}"#
    }

    #[test]
    fn defaults_and_digest() {
        let cfg = RunConfig::from_json(minimal_json()).unwrap();
        assert_eq!(cfg.model, ModelSpec::default());
        assert_eq!(cfg.schedule, Schedule::default());
        assert_eq!(cfg.probe_depth(), 8);
        let mut moved = cfg.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        assert_eq!(cfg.digest(), moved.digest());
        let mut reseeded = cfg.clone();
        reseeded.seed = 2;
        assert_ne!(cfg.digest(), reseeded.digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn schema_errors_are_config_errors() {
        for bad in [
            r#"{"process": {"name": "mess3"}, "output_dir": "x", "seed": 1, "extra": 0}"#,
            r#"{"process": {"name": "mess3"}, "model": {"layers": 0}, "output_dir": "x", "seed": 1}"#,
            r#"{"process": {"name": "nosuch"}, "output_dir": "x", "seed": 1}"#,
            r#"{"process": {"name": "mess3"}, "probe": {"targets": ["markov"]}, "output_dir": "x", "seed": 1}"#,
            r#"{"process": {"name": "mess3"}, "probe": {"layers": ["3"]}, "output_dir": "x", "seed": 1}"#,
            r#"{"process": {"name": "mess3"}, "model": {"hidden": 32, "width": 3}, "output_dir": "x", "seed": 1}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, "model"), derive_seed(7, "model"));
        assert_ne!(derive_seed(7, "model"), derive_seed(7, "data"));
        assert_ne!(derive_seed(7, "model"), derive_seed(8, "model"));
    }

    #[test]
    fn targets_parse() {
        assert_eq!(parse_target("minimal").unwrap(), None);
        assert_eq!(parse_target("markov3").unwrap(), Some(3));
        assert!(parse_target("markov0").is_err());
        assert!("last".parse::<CheckpointSelector>().unwrap() == CheckpointSelector::Last);
        assert_eq!(parse_checkpoint_name("step-00000150.ckpt"), Some(150));
        assert_eq!(parse_checkpoint_name("step-1.tmp"), None);
    }
}
