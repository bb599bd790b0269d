//! Trajectory ingestion and dataset preparation: CSV reading, 1 Hz
//! resampling, sliding windows, altitude filtering, seeded 7:1:2 splits,
//! encoder feature construction and z-score normalisation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EnuPoint, GeoError, GeoPoint, LocalFrame};

/// Observation length in seconds (points at 1 Hz).
pub const HISTORY_LEN: usize = 60;
/// Prediction horizon in seconds.
pub const HORIZON_LEN: usize = 60;
/// Altitude a point must exceed to count as airborne.
pub const AIRBORNE_ALTITUDE_M: f64 = 150.0;
/// Minimum airborne fraction for a window to be kept (inclusive).
pub const AIRBORNE_FRACTION: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("degenerate normalization: channel {0} has zero standard deviation")]
    DegenerateNormalization(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Arrival,
    Departure,
    Uam,
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Arrival => "arrival",
            Self::Departure => "departure",
            Self::Uam => "uam",
        })
    }
}

impl FromStr for TrajectoryKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arrival" => Ok(Self::Arrival),
            "departure" => Ok(Self::Departure),
            "uam" => Ok(Self::Uam),
            other => Err(DataError::Malformed(format!("unknown trajectory kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    /// Epoch seconds.
    pub t: f64,
    pub pos: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub kind: TrajectoryKind,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Linearly interpolates `raw` onto the integer-second grid spanning its
/// time range.
pub fn resample_1hz(id: impl Into<String>, kind: TrajectoryKind, raw: &[TrackPoint]) -> Result<Trajectory, DataError> {
    let id = id.into();
    if raw.len() < 2 {
        return Err(DataError::Malformed(format!(
            "trajectory '{id}' has {} point(s); at least 2 are required",
            raw.len()
        )));
    }
    for p in raw {
        if !p.t.is_finite() {
            return Err(DataError::Malformed(format!("trajectory '{id}' has a non-finite time")));
        }
        p.pos.validate()?;
    }
    for w in raw.windows(2) {
        if w[1].t <= w[0].t {
            return Err(DataError::Malformed(format!(
                "trajectory '{id}' times not strictly increasing at t={}",
                w[1].t
            )));
        }
    }
    let start = raw[0].t.ceil();
    let end = raw[raw.len() - 1].t.floor();
    if end - start < 1.0 {
        return Err(DataError::Malformed(format!(
            "trajectory '{id}' spans less than two whole seconds"
        )));
    }
    let n = (end - start) as usize + 1;
    let mut points = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let t = start + i as f64;
        while seg + 2 < raw.len() && raw[seg + 1].t < t {
            seg += 1;
        }
        let (a, b) = (&raw[seg], &raw[seg + 1]);
        let u = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let lerp = |x: f64, y: f64| x + (y - x) * u;
        points.push(TrackPoint {
            t,
            pos: GeoPoint {
                lon: lerp(a.pos.lon, b.pos.lon),
                lat: lerp(a.pos.lat, b.pos.lat),
                alt: lerp(a.pos.alt, b.pos.alt),
            },
        });
    }
    Ok(Trajectory { id, kind, points })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    kind: String,
    t: f64,
    lon: f64,
    lat: f64,
    alt_m: f64,
}

/// Reads `id,kind,t,lon,lat,alt_m` rows and returns one resampled
/// trajectory per id, ordered by id.
pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "kind", "t", "lon", "lat", "alt_m"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Malformed(format!(
            "expected header '{}', found '{}'",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut groups: BTreeMap<String, (TrajectoryKind, Vec<TrackPoint>)> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        let kind: TrajectoryKind = row.kind.parse()?;
        let pos = GeoPoint::new(row.lon, row.lat, row.alt_m)
            .map_err(|e| DataError::Malformed(format!("row {}: {e}", line + 2)))?;
        let entry = groups.entry(row.id.clone()).or_insert((kind, Vec::new()));
        if entry.0 != kind {
            return Err(DataError::Malformed(format!(
                "trajectory '{}' mixes kinds {} and {}",
                row.id, entry.0, kind
            )));
        }
        entry.1.push(TrackPoint { t: row.t, pos });
    }
    groups
        .into_iter()
        .map(|(id, (kind, mut pts))| {
            pts.sort_by(|a, b| a.t.total_cmp(&b.t));
            resample_1hz(id, kind, &pts)
        })
        .collect()
}

pub fn write_trajectories_csv<W: Write>(writer: W, trajs: &[Trajectory]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for tr in trajs {
        for p in &tr.points {
            wtr.serialize(CsvRow {
                id: tr.id.clone(),
                kind: tr.kind.to_string(),
                t: p.t,
                lon: p.pos.lon,
                lat: p.pos.lat,
                alt_m: p.pos.alt,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            history: HISTORY_LEN,
            horizon: HORIZON_LEN,
        }
    }
}

impl WindowSpec {
    pub fn total(&self) -> usize {
        self.history + self.horizon
    }
}

/// One observation/future pair cut from a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPair {
    pub trajectory_id: String,
    pub observation: Vec<TrackPoint>,
    pub future: Vec<TrackPoint>,
}

impl WindowPair {
    pub fn points(&self) -> impl Iterator<Item = &TrackPoint> {
        self.observation.iter().chain(self.future.iter())
    }
}

/// Stride-1 sliding windows; `len - (H + T) + 1` of them, or none for a
/// short trajectory.
pub fn make_windows(traj: &Trajectory, spec: WindowSpec) -> Vec<WindowPair> {
    let total = spec.total();
    if traj.points.len() < total {
        return Vec::new();
    }
    traj.points
        .windows(total)
        .map(|w| WindowPair {
            trajectory_id: traj.id.clone(),
            observation: w[..spec.history].to_vec(),
            future: w[spec.history..].to_vec(),
        })
        .collect()
}

/// Keeps pairs where at least 90% of points are above 150 m.
pub fn altitude_filter(pairs: Vec<WindowPair>) -> Vec<WindowPair> {
    pairs
        .into_iter()
        .filter(|p| airborne_fraction(p) >= AIRBORNE_FRACTION)
        .collect()
}

fn airborne_fraction(p: &WindowPair) -> f64 {
    let n = p.observation.len() + p.future.len();
    if n == 0 {
        return 0.0;
    }
    let high = p.points().filter(|q| q.pos.alt > AIRBORNE_ALTITUDE_M).count();
    high as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Trajectory ids per split, persisted next to the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self, seed: u64) -> SplitIds {
        let ids = |v: &[Trajectory]| v.iter().map(|t| t.id.clone()).collect();
        SplitIds {
            seed,
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }
}

/// Split sizes for `n` trajectories at 7:1:2.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Shuffles (after ordering by id) with a seeded generator and partitions
/// 7:1:2.
pub fn split_dataset(mut trajs: Vec<Trajectory>, seed: u64) -> DatasetSplit {
    trajs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trajs.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(trajs.len());
    let test = trajs.split_off(n_train + n_val);
    let val = trajs.split_off(n_train);
    DatasetSplit {
        train: trajs,
        val,
        test,
    }
}

/// Encoder input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputConfig {
    Abs,
    Dev,
    #[serde(alias = "abs+dev")]
    AbsDev,
}

impl InputConfig {
    pub const ALL: [InputConfig; 3] = [Self::Abs, Self::Dev, Self::AbsDev];

    pub fn width(&self) -> usize {
        match self {
            Self::Abs | Self::Dev => 3,
            Self::AbsDev => 6,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Abs => "abs",
            Self::Dev => "dev",
            Self::AbsDev => "abs+dev",
        }
    }
}

impl fmt::Display for InputConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for InputConfig {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abs" => Ok(Self::Abs),
            "dev" => Ok(Self::Dev),
            "abs+dev" | "abs_dev" => Ok(Self::AbsDev),
            other => Err(DataError::Malformed(format!("unknown input config '{other}'"))),
        }
    }
}

/// Per-axis mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    fn fit(values: impl Iterator<Item = [f64; 3]>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for v in values {
            n += 1;
            for k in 0..3 {
                sum[k] += v[k];
                sq[k] += v[k] * v[k];
            }
        }
        let n = n.max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for k in 0..3 {
            mean[k] = sum[k] / n;
            std[k] = (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt().max(MIN_FITTED_STD);
        }
        Self { mean, std }
    }

    fn check(&self, name: &str) -> Result<(), DataError> {
        for (k, s) in self.std.iter().enumerate() {
            if !s.is_finite() || *s <= 0.0 {
                return Err(DataError::DegenerateNormalization(format!("{name}[{k}]")));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, v: [f64; 3]) -> [f64; 3] {
        [
            (v[0] - self.mean[0]) / self.std[0],
            (v[1] - self.mean[1]) / self.std[1],
            (v[2] - self.mean[2]) / self.std[2],
        ]
    }

    pub fn denormalize(&self, v: [f64; 3]) -> [f64; 3] {
        [
            v[0] * self.std[0] + self.mean[0],
            v[1] * self.std[1] + self.mean[1],
            v[2] * self.std[2] + self.mean[2],
        ]
    }
}

/// Floor applied when fitting, so a channel that never varies in the
/// training data (e.g. level flight) stays usable.
pub const MIN_FITTED_STD: f64 = 1e-3;

/// Normalisation statistics, fitted on the training split only.
///
/// Positions are expressed in the local frame anchored at `origin`.
/// Targets are future positions relative to the last observed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub origin: GeoPoint,
    pub position: ChannelStats,
    pub displacement: ChannelStats,
    pub target: ChannelStats,
}

impl NormStats {
    pub fn identity(origin: GeoPoint) -> Self {
        Self {
            origin,
            position: ChannelStats::IDENTITY,
            displacement: ChannelStats::IDENTITY,
            target: ChannelStats::IDENTITY,
        }
    }

    pub fn frame(&self) -> Result<LocalFrame, GeoError> {
        LocalFrame::new(self.origin)
    }

    pub fn fit(pairs: &[LocalPair], origin: GeoPoint) -> Self {
        let position = ChannelStats::fit(pairs.iter().flat_map(|p| p.observation.iter().map(|q| q.to_array())));
        let displacement = ChannelStats::fit(pairs.iter().flat_map(|p| displacements(&p.observation).into_iter()));
        let target = ChannelStats::fit(pairs.iter().flat_map(|p| {
            let anchor = p.anchor();
            p.future.iter().map(move |q| (*q - anchor).to_array())
        }));
        Self {
            origin,
            position,
            displacement,
            target,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.origin.validate()?;
        self.position.check("position")?;
        self.displacement.check("displacement")?;
        self.target.check("target")
    }
}

/// A window converted into the local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPair {
    pub trajectory_id: String,
    pub observation: Vec<EnuPoint>,
    pub future: Vec<EnuPoint>,
}

impl LocalPair {
    pub fn from_window(pair: &WindowPair, frame: &LocalFrame) -> Result<Self, DataError> {
        let conv = |pts: &[TrackPoint]| -> Result<Vec<EnuPoint>, DataError> {
            pts.iter().map(|p| Ok(frame.to_enu(&p.pos)?)).collect()
        };
        Ok(Self {
            trajectory_id: pair.trajectory_id.clone(),
            observation: conv(&pair.observation)?,
            future: conv(&pair.future)?,
        })
    }

    /// Last observed position.
    pub fn anchor(&self) -> EnuPoint {
        *self.observation.last().expect("non-empty observation")
    }
}

/// `p_t - p_{t-1}` with the first row set to zero.
pub fn displacements(obs: &[EnuPoint]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(obs.len());
    for (i, p) in obs.iter().enumerate() {
        if i == 0 {
            out.push([0.0; 3]);
        } else {
            out.push((*p - obs[i - 1]).to_array());
        }
    }
    out
}

/// Builds the `H x F` encoder input for the observation (local-frame
/// positions).
pub fn build_inputs(obs: &[EnuPoint], cfg: InputConfig, stats: &NormStats) -> Result<Vec<Vec<f64>>, DataError> {
    if obs.is_empty() {
        return Err(DataError::Shape("empty observation".into()));
    }
    let need_abs = matches!(cfg, InputConfig::Abs | InputConfig::AbsDev);
    let need_dev = matches!(cfg, InputConfig::Dev | InputConfig::AbsDev);
    if need_abs {
        stats.position.check("position")?;
    }
    if need_dev {
        stats.displacement.check("displacement")?;
    }
    let dev = displacements(obs);
    Ok(obs
        .iter()
        .zip(dev)
        .map(|(p, d)| {
            let mut row = Vec::with_capacity(cfg.width());
            if need_abs {
                row.extend_from_slice(&stats.position.normalize(p.to_array()));
            }
            if need_dev {
                row.extend_from_slice(&stats.displacement.normalize(d));
            }
            row
        })
        .collect())
}

/// Recovers local positions from the absolute channel of `features`.
pub fn positions_from_features(
    features: &[Vec<f64>],
    cfg: InputConfig,
    stats: &NormStats,
) -> Result<Vec<EnuPoint>, DataError> {
    if cfg == InputConfig::Dev {
        return Err(DataError::Shape("dev features carry no absolute channel".into()));
    }
    features
        .iter()
        .map(|row| {
            if row.len() != cfg.width() {
                return Err(DataError::Shape(format!(
                    "feature row width {} != {}",
                    row.len(),
                    cfg.width()
                )));
            }
            Ok(EnuPoint::from_array(
                stats.position.denormalize([row[0], row[1], row[2]]),
            ))
        })
        .collect()
}

/// Flattens the future (time-major) relative to `anchor` and z-scores it.
pub fn normalize_target(future: &[EnuPoint], anchor: EnuPoint, stats: &NormStats) -> Vec<f64> {
    future
        .iter()
        .flat_map(|p| stats.target.normalize((*p - anchor).to_array()))
        .collect()
}

pub fn denormalize_target(flat: &[f64], anchor: EnuPoint, stats: &NormStats) -> Result<Vec<EnuPoint>, DataError> {
    if !flat.len().is_multiple_of(3) {
        return Err(DataError::Shape(format!(
            "flattened target length {} is not a multiple of 3",
            flat.len()
        )));
    }
    Ok(flat
        .chunks_exact(3)
        .map(|c| anchor + EnuPoint::from_array(stats.target.denormalize([c[0], c[1], c[2]])))
        .collect())
}

/// Model-ready training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub anchor: EnuPoint,
    pub future: Vec<EnuPoint>,
}

pub fn prepare_examples(pairs: &[LocalPair], cfg: InputConfig, stats: &NormStats) -> Result<Vec<Example>, DataError> {
    pairs
        .iter()
        .map(|p| {
            let anchor = p.anchor();
            Ok(Example {
                features: build_inputs(&p.observation, cfg, stats)?,
                target: normalize_target(&p.future, anchor, stats),
                anchor,
                future: p.future.clone(),
            })
        })
        .collect()
}

/// Windows, altitude filter and local conversion for a set of trajectories.
pub fn local_pairs(trajs: &[Trajectory], spec: WindowSpec, frame: &LocalFrame) -> Result<Vec<LocalPair>, DataError> {
    let mut out = Vec::new();
    for t in trajs {
        for w in altitude_filter(make_windows(t, spec)) {
            out.push(LocalPair::from_window(&w, frame)?);
        }
    }
    Ok(out)
}

/// Split windows in the local frame with normalisation statistics fitted on
/// the training split only. Independent of the encoder input choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub spec: WindowSpec,
    pub stats: NormStats,
    pub split: SplitIds,
    pub train: Vec<LocalPair>,
    pub val: Vec<LocalPair>,
    pub test: Vec<LocalPair>,
}

impl WindowedDataset {
    pub fn build(trajs: Vec<Trajectory>, spec: WindowSpec, origin: GeoPoint, seed: u64) -> Result<Self, DataError> {
        if spec.history == 0 || spec.horizon == 0 {
            return Err(DataError::Shape("history and horizon must be positive".into()));
        }
        let split = split_dataset(trajs, seed);
        let frame = LocalFrame::new(origin)?;
        let train = local_pairs(&split.train, spec, &frame)?;
        if train.is_empty() {
            return Err(DataError::Shape("no training windows".into()));
        }
        Ok(Self {
            spec,
            stats: NormStats::fit(&train, origin),
            val: local_pairs(&split.val, spec, &frame)?,
            test: local_pairs(&split.test, spec, &frame)?,
            split: split.ids(seed),
            train,
        })
    }

    pub fn examples(&self, cfg: InputConfig) -> Result<PreparedDataset, DataError> {
        self.stats.validate()?;
        Ok(PreparedDataset {
            stats: self.stats,
            split: self.split.clone(),
            train: prepare_examples(&self.train, cfg, &self.stats)?,
            val: prepare_examples(&self.val, cfg, &self.stats)?,
            test: prepare_examples(&self.test, cfg, &self.stats)?,
        })
    }
}

/// Normalised train/validation/test examples for one input choice.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub stats: NormStats,
    pub split: SplitIds,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn prepare_dataset(
    trajs: Vec<Trajectory>,
    spec: WindowSpec,
    cfg: InputConfig,
    origin: GeoPoint,
    seed: u64,
) -> Result<PreparedDataset, DataError> {
    WindowedDataset::build(trajs, spec, origin, seed)?.examples(cfg)
}
