use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use uamflow::evalkit::{evaluate, sort_rows, write_metrics_csv, MetricRow, DEFAULT_EVAL_SAMPLES};
use uamflow::geo::GeoPoint;
use uamflow::model::{ModelDims, ModelKind, TrajectoryModel};
use uamflow::predictor::{FlowPredictor, Predictor, TruthInSamples};
use uamflow::sim::{
    build_traffic, report, run_all, truth_tracks, PredictorKind, ReportConfig, ScenarioConfig, SimMode, SimResult,
    BUNDLE_FILES,
};
use uamflow::synthetic::{generate, SyntheticConfig, SyntheticTask, GIMPO};
use uamflow::train::{batch_loss, fit, Checkpoint, TrainConfig};
use uamflow::trajdata::{
    read_trajectories_csv, write_trajectories_csv, InputConfig, WindowSpec, WindowedDataset, HISTORY_LEN, HORIZON_LEN,
};

use crate::output::{json_bytes, FileDigest, RunManifest, Staging};

/// Error classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    MissingFile,
    InvalidConfig,
    InvalidData,
}

impl FailureKind {
    pub fn exit_code(self) -> u8 {
        match self {
            Self::MissingFile => 3,
            Self::InvalidConfig => 4,
            Self::InvalidData => 5,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn fail(kind: FailureKind, message: String) -> anyhow::Error {
    Failure { kind, message }.into()
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => fail(
            FailureKind::MissingFile,
            format!("{what} not found: {}", path.display()),
        ),
        _ => anyhow::Error::new(e).context(format!("cannot read {what} {}", path.display())),
    })
}

fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path, kind: FailureKind, what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| fail(kind, format!("invalid {what} {}: {e}", path.display())))
}

/// A parsed config file with the directory its relative paths resolve
/// against.
struct Config<T> {
    value: T,
    digest: FileDigest,
    dir: PathBuf,
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<Config<T>> {
    let bytes = read_file(path, "config file")?;
    let value = parse_json(&bytes, path, FailureKind::InvalidConfig, "config")?;
    Ok(Config {
        value,
        digest: FileDigest::of(path.display().to_string(), &bytes),
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        dir.join(p)
    } else {
        p.to_path_buf()
    }
}

fn config_error(e: impl fmt::Display) -> anyhow::Error {
    fail(FailureKind::InvalidConfig, format!("invalid config: {e}"))
}

fn data_error(e: impl fmt::Display) -> anyhow::Error {
    fail(FailureKind::InvalidData, format!("invalid data: {e}"))
}

struct Input {
    path: PathBuf,
    bytes: Vec<u8>,
}

impl Input {
    fn read(path: PathBuf, what: &str) -> Result<Self> {
        let bytes = read_file(&path, what)?;
        Ok(Self { path, bytes })
    }

    fn digest(&self) -> FileDigest {
        FileDigest::of(self.path.display().to_string(), &self.bytes)
    }
}

fn manifest<T>(command: &str, cfg: &Config<T>, seed: u64) -> RunManifest {
    let mut m = RunManifest::new(command);
    m.config = Some(cfg.digest.clone());
    m.seed = Some(seed);
    m
}

fn default_history() -> usize {
    HISTORY_LEN
}

fn default_horizon() -> usize {
    HORIZON_LEN
}

fn default_origin() -> GeoPoint {
    GIMPO
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub task: SyntheticTask,
    pub count: usize,
    #[serde(default = "default_history")]
    pub history: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

pub fn synth(config: &Path, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg: Config<SynthFile> = load_config(config)?;
    let f = &cfg.value;
    if f.count == 0 || f.history == 0 || f.horizon == 0 {
        return Err(config_error("count, history and horizon must be positive"));
    }
    let trajs = generate(&SyntheticConfig::new(f.task, f.count, f.history, f.horizon, seed)).map_err(data_error)?;
    let mut csv = Vec::new();
    write_trajectories_csv(&mut csv, &trajs)?;
    let mut stage = Staging::new(out, manifest("synth", &cfg, seed))?;
    stage.write("trajectories.csv", &csv)?;
    stage.commit()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestFile {
    pub input: PathBuf,
    #[serde(default = "default_history")]
    pub history: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_origin")]
    pub origin: GeoPoint,
}

pub fn ingest(config: &Path, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg: Config<IngestFile> = load_config(config)?;
    let f = &cfg.value;
    f.origin.validate().map_err(config_error)?;
    let input = Input::read(resolve(&cfg.dir, &f.input), "trajectory file")?;
    let trajs = read_trajectories_csv(&input.bytes[..]).map_err(data_error)?;
    let spec = WindowSpec {
        history: f.history,
        horizon: f.horizon,
    };
    let dataset = WindowedDataset::build(trajs, spec, f.origin, seed).map_err(data_error)?;
    let mut stage = Staging::new(out, manifest("ingest", &cfg, seed))?;
    stage.manifest.inputs.push(input.digest());
    stage.write("dataset.json", &json_bytes(&dataset)?)?;
    stage.write("split.json", &json_bytes(&dataset.split)?)?;
    stage.commit()
}

fn load_dataset(path: PathBuf) -> Result<(WindowedDataset, Input)> {
    let input = Input::read(path, "dataset")?;
    let ds: WindowedDataset = parse_json(&input.bytes, &input.path, FailureKind::InvalidData, "dataset")?;
    ds.stats.validate().map_err(data_error)?;
    Ok((ds, input))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSizes {
    pub hidden: Option<usize>,
    pub flow_layers: Option<usize>,
    pub flow_width: Option<usize>,
    pub mlp_width: Option<usize>,
    pub scale_clamp: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Zero writes the freshly initialised model.
    pub epochs: Option<usize>,
    pub clip_norm: Option<f64>,
    pub momentum: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub dataset: PathBuf,
    pub model: ModelKind,
    #[serde(default = "default_input")]
    pub input: InputConfig,
    #[serde(default)]
    pub layers: LayerSizes,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_input() -> InputConfig {
    InputConfig::AbsDev
}

pub fn train(config: &Path, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg: Config<TrainFile> = load_config(config)?;
    let f = &cfg.value;
    let (ds, input) = load_dataset(resolve(&cfg.dir, &f.dataset))?;
    let base = ModelDims::default();
    let dims = ModelDims {
        history: ds.spec.history,
        horizon: ds.spec.horizon,
        input: f.input,
        hidden: f.layers.hidden.unwrap_or(base.hidden),
        flow_layers: f.layers.flow_layers.unwrap_or(base.flow_layers),
        flow_width: f.layers.flow_width.unwrap_or(base.flow_width),
        mlp_width: f.layers.mlp_width.unwrap_or(base.mlp_width),
        scale_clamp: f.layers.scale_clamp.or(base.scale_clamp),
    };
    let defaults = TrainConfig::for_kind(f.model);
    let tc = TrainConfig {
        batch_size: f.schedule.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: f.schedule.learning_rate.unwrap_or(defaults.learning_rate),
        epochs: f.schedule.epochs.unwrap_or(defaults.epochs),
        clip_norm: f.schedule.clip_norm.unwrap_or(defaults.clip_norm),
        momentum: f.schedule.momentum.unwrap_or(defaults.momentum),
        seed,
        ..defaults
    };
    let model = TrajectoryModel::new(f.model, dims, seed).map_err(config_error)?;
    let data = ds.examples(f.input).map_err(data_error)?;
    if data.val.is_empty() {
        return Err(data_error("dataset has no validation windows"));
    }

    let (checkpoint, history) = if tc.epochs == 0 {
        let score = batch_loss(&model, &data.val)?;
        (
            Checkpoint::new(&model, data.stats, score, None, vec![score]),
            vec![(score, f64::NAN)],
        )
    } else {
        tc.validate(f.model).map_err(config_error)?;
        let r = fit(model, &data.train, &data.val, &tc)?;
        let hist = r
            .val_history
            .iter()
            .copied()
            .zip(r.train_history.iter().copied())
            .collect();
        (Checkpoint::from_fit(&r, data.stats, &tc), hist)
    };
    let mut csv = String::from("epoch,val_loss,train_loss\n");
    for (i, (v, t)) in history.iter().enumerate() {
        let t = if t.is_finite() { t.to_string() } else { String::new() };
        csv.push_str(&format!("{i},{v},{t}\n"));
    }
    let mut ck = Vec::new();
    checkpoint.write_json(&mut ck)?;
    let mut stage = Staging::new(out, manifest("train", &cfg, seed))?;
    stage.manifest.inputs.push(input.digest());
    stage.write("checkpoint.json", &ck)?;
    stage.write("history.csv", csv.as_bytes())?;
    stage.commit()
}

fn load_checkpoint(path: PathBuf) -> Result<(Checkpoint, TrajectoryModel, Input)> {
    let input = Input::read(path, "checkpoint")?;
    let ck: Checkpoint = parse_json(&input.bytes, &input.path, FailureKind::InvalidData, "checkpoint")?;
    let model = ck.model().map_err(data_error)?;
    Ok((ck, model, input))
}

fn default_samples() -> usize {
    DEFAULT_EVAL_SAMPLES
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub dataset: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

pub fn eval(config: &Path, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg: Config<EvalFile> = load_config(config)?;
    let f = &cfg.value;
    if f.checkpoints.is_empty() || f.samples == 0 {
        return Err(config_error("need at least one checkpoint and a positive sample count"));
    }
    let (ds, ds_input) = load_dataset(resolve(&cfg.dir, &f.dataset))?;
    let mut inputs = vec![ds_input.digest()];
    let mut rows: Vec<MetricRow> = Vec::new();
    for p in &f.checkpoints {
        let (ck, model, input) = load_checkpoint(resolve(&cfg.dir, p))?;
        if (ck.dims.history, ck.dims.horizon) != (ds.spec.history, ds.spec.horizon) {
            return Err(data_error(format!(
                "checkpoint {} expects {}+{} s windows, dataset has {}+{}",
                p.display(),
                ck.dims.history,
                ck.dims.horizon,
                ds.spec.history,
                ds.spec.horizon
            )));
        }
        // the checkpoint's own statistics define its input scaling
        let pairs = WindowedDataset {
            stats: ck.norm_stats,
            ..ds.clone()
        };
        let data = pairs.examples(ck.dims.input).map_err(data_error)?;
        rows.push(evaluate(&model, &ck.norm_stats, &data.test, f.samples, seed).map_err(data_error)?);
        inputs.push(input.digest());
    }
    sort_rows(&mut rows);
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &rows)?;
    let mut stage = Staging::new(out, manifest("eval", &cfg, seed))?;
    stage.manifest.inputs = inputs;
    stage.write("metrics.csv", &csv)?;
    stage.commit()
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    lane: &'a str,
    altitude_ft: f64,
    mode: SimMode,
    spawned: u64,
    completed: u64,
    active: u64,
    los_events: u64,
    flights_with_los: usize,
}

pub fn simulate(
    config: &Path,
    seed: u64,
    out: &Path,
    mode: SimMode,
    checkpoint: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let cfg: Config<ScenarioConfig> = load_config(config)?;
    let mut scenario = cfg.value.clone();
    scenario.seed = seed;
    scenario.validate().map_err(config_error)?;
    let traffic = build_traffic(&scenario, Some(&cfg.dir)).map_err(|e| match e {
        uamflow::sim::SimError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            fail(FailureKind::MissingFile, format!("traffic file not found: {io}"))
        }
        other => data_error(other),
    })?;
    let mut inputs = Vec::new();
    let p = &scenario.prediction;
    let predictor: Option<Box<dyn Predictor>> = match (mode, p.predictor) {
        (SimMode::Baseline, _) => None,
        (SimMode::Adjusted, PredictorKind::TruthInSamples) => {
            let mut stub = TruthInSamples::new(truth_tracks(&traffic), p.samples, p.history, p.horizon);
            stub.spread_m = p.stub_spread_m;
            stub.vertical_spread_m = p.stub_vertical_spread_m;
            Some(Box::new(stub))
        }
        (SimMode::Adjusted, PredictorKind::Model) => {
            let path =
                checkpoint.ok_or_else(|| config_error("adjusted mode with a model predictor needs --checkpoint"))?;
            let (ck, model, input) = load_checkpoint(path.to_path_buf())?;
            inputs.push(input.digest());
            Some(Box::new(
                FlowPredictor::new(model, ck.norm_stats, p.samples).map_err(data_error)?,
            ))
        }
    };
    let results = run_all(&scenario, mode, &traffic, predictor.as_deref(), seed).map_err(|e| match e {
        uamflow::sim::SimError::Config(m) => config_error(m),
        other => anyhow::Error::new(other),
    })?;

    let mut summary = csv::Writer::from_writer(Vec::new());
    for r in &results {
        summary.serialize(SummaryRow {
            lane: &r.lane_id,
            altitude_ft: r.altitude_ft,
            mode: r.mode,
            spawned: r.spawned,
            completed: r.completed,
            active: r.active,
            los_events: r.los_events,
            flights_with_los: r.flights_with_los(),
        })?;
    }
    let summary = summary.into_inner().context("cannot finish summary table")?;
    let mut m = manifest("simulate", &cfg, seed);
    m.mode = Some(mode.to_string());
    m.inputs = inputs;
    let mut stage = Staging::new(out, m)?;
    stage.write("results.json", &json_bytes(&results)?)?;
    stage.write("summary.csv", &summary)?;
    stage.commit()
}

pub fn report_cmd(config: Option<&Path>, results: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let (rc, mut m) = match config {
        Some(path) => {
            let cfg: Config<ReportConfig> = load_config(path)?;
            let mut m = RunManifest::new("report");
            m.config = Some(cfg.digest.clone());
            (cfg.value, m)
        }
        None => (ReportConfig::default(), RunManifest::new("report")),
    };
    let mut all: Vec<SimResult> = Vec::new();
    for p in results {
        let input = Input::read(p.clone(), "results file")?;
        let rs: Vec<SimResult> = parse_json(&input.bytes, p, FailureKind::InvalidData, "results file")?;
        all.extend(rs);
        m.inputs.push(input.digest());
    }
    let bundle = report(&all, &rc).map_err(|e| match e {
        uamflow::sim::SimError::Config(msg) => config_error(msg),
        other => data_error(other),
    })?;
    let tables = [
        csv_bytes(&bundle.cdf)?,
        csv_bytes(&bundle.histogram)?,
        csv_bytes(&bundle.delays)?,
        csv_bytes(&bundle.cpa_polar)?,
    ];
    let mut stage = Staging::new(out, m)?;
    for (name, bytes) in BUNDLE_FILES.iter().zip(&tables) {
        stage.write(name, bytes)?;
    }
    stage.commit()
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().context("cannot finish table")
}
