//! Online prediction service: weighted sampled futures for each
//! conventional aircraft with enough track history.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::evalkit::DEFAULT_EVAL_SAMPLES;
use crate::geo::{EnuPoint, GeoError, LocalFrame};
use crate::model::{ModelError, TrajectoryModel};
use crate::trajdata::{build_inputs, denormalize_target, DataError, NormStats};

pub const DEFAULT_SAMPLES: usize = DEFAULT_EVAL_SAMPLES;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("insufficient history for '{id}': {have} of {need} points")]
    InsufficientHistory { id: String, have: usize, need: usize },
    #[error("no truth track for aircraft '{0}'")]
    UnknownAircraft(String),
    #[error("prediction weights do not sum to one (sum = {0})")]
    WeightSum(f64),
    #[error("prediction model is not probabilistic")]
    NotProbabilistic,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// `k` weighted futures for one aircraft, issued at one tick. `paths[i][j]`
/// is the predicted position `j + 1` seconds after issue.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub aircraft_id: String,
    pub issued_at: i64,
    pub paths: Vec<Vec<EnuPoint>>,
    pub weights: Vec<f64>,
    /// Samples that had at least one point clamped to the sanity box.
    pub clamped_samples: usize,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn validate(&self) -> Result<(), PredictError> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.len() != self.paths.len() || (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(PredictError::WeightSum(sum));
        }
        Ok(())
    }
}

/// Softmax of log-densities, shifted by their maximum for stability.
pub fn normalized_weights(log_probs: &[f64]) -> Vec<f64> {
    let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_probs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Seed for one aircraft at one tick, derived from the master seed.
pub fn stream_seed(master: u64, aircraft_id: &str, tick: i64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in master
        .to_le_bytes()
        .iter()
        .chain(aircraft_id.as_bytes())
        .chain(&tick.to_le_bytes())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Axis-aligned sanity box in the simulation frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SanityBox {
    pub min: EnuPoint,
    pub max: EnuPoint,
}

impl SanityBox {
    /// Clamps every point into the box; returns whether anything moved.
    pub fn clamp_path(&self, path: &mut [EnuPoint]) -> bool {
        let mut moved = false;
        for p in path {
            let c = EnuPoint::new(
                clamp_or_edge(p.east, self.min.east, self.max.east),
                clamp_or_edge(p.north, self.min.north, self.max.north),
                clamp_or_edge(p.up, self.min.up, self.max.up),
            );
            if c != *p {
                moved = true;
                *p = c;
            }
        }
        moved
    }
}

fn clamp_or_edge(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

pub struct PredictionRequest<'a> {
    pub aircraft_id: &'a str,
    pub issued_at: i64,
    /// Track history at 1 Hz in the simulation frame, oldest first, ending
    /// at the issue tick.
    pub history: &'a [EnuPoint],
    pub frame: &'a LocalFrame,
    pub seed: u64,
}

pub trait Predictor: Send + Sync {
    fn history_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn predict(&self, req: &PredictionRequest<'_>) -> Result<PredictionSet, PredictError>;
}

fn check_history(req: &PredictionRequest<'_>, need: usize) -> Result<(), PredictError> {
    if req.history.len() < need {
        return Err(PredictError::InsufficientHistory {
            id: req.aircraft_id.to_string(),
            have: req.history.len(),
            need,
        });
    }
    Ok(())
}

/// Samples futures from a trained flow model.
#[derive(Debug, Clone)]
pub struct FlowPredictor {
    pub model: TrajectoryModel,
    pub stats: NormStats,
    pub samples: usize,
    pub sanity: Option<SanityBox>,
    model_frame: LocalFrame,
}

impl FlowPredictor {
    pub fn new(model: TrajectoryModel, stats: NormStats, samples: usize) -> Result<Self, PredictError> {
        if !model.kind.is_probabilistic() {
            return Err(PredictError::NotProbabilistic);
        }
        stats.validate()?;
        Ok(Self {
            model_frame: stats.frame()?,
            model,
            stats,
            samples,
            sanity: None,
        })
    }

    pub fn with_sanity_box(mut self, sanity: SanityBox) -> Self {
        self.sanity = Some(sanity);
        self
    }
}

impl Predictor for FlowPredictor {
    fn history_len(&self) -> usize {
        self.model.dims.history
    }

    fn horizon(&self) -> usize {
        self.model.dims.horizon
    }

    fn predict(&self, req: &PredictionRequest<'_>) -> Result<PredictionSet, PredictError> {
        let h = self.history_len();
        check_history(req, h)?;
        let same_frame = req.frame.origin() == self.model_frame.origin();
        let to_model = |p: &EnuPoint| -> Result<EnuPoint, GeoError> {
            if same_frame {
                Ok(*p)
            } else {
                self.model_frame.to_enu(&req.frame.from_enu(p))
            }
        };
        let obs: Vec<EnuPoint> = req.history[req.history.len() - h..]
            .iter()
            .map(to_model)
            .collect::<Result<_, _>>()?;
        let features = build_inputs(&obs, self.model.dims.input, &self.stats)?;
        let anchor = *obs.last().expect("non-empty history");
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(req.seed, req.aircraft_id, req.issued_at));
        let samples = self.model.sample(&features, self.samples, &mut rng)?;
        let log_probs: Vec<f64> = samples.iter().map(|s| s.log_prob).collect();
        let mut clamped = 0;
        let mut paths = Vec::with_capacity(samples.len());
        for s in &samples {
            let mut path = denormalize_target(&s.value, anchor, &self.stats)?;
            if !same_frame {
                for p in &mut path {
                    *p = req.frame.to_enu(&self.model_frame.from_enu(p))?;
                }
            }
            if let Some(b) = &self.sanity {
                if b.clamp_path(&mut path) {
                    clamped += 1;
                }
            }
            paths.push(path);
        }
        let set = PredictionSet {
            aircraft_id: req.aircraft_id.to_string(),
            issued_at: req.issued_at,
            paths,
            weights: normalized_weights(&log_probs),
            clamped_samples: clamped,
        };
        set.validate()?;
        Ok(set)
    }
}

/// A recorded 1 Hz track: `points[i]` is the position at tick `start + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrack {
    pub start: i64,
    pub points: Vec<EnuPoint>,
}

impl TruthTrack {
    /// Position at `tick`, holding the last point after the track ends.
    pub fn at_or_last(&self, tick: i64) -> Option<EnuPoint> {
        if tick < self.start || self.points.is_empty() {
            return None;
        }
        let i = ((tick - self.start) as usize).min(self.points.len() - 1);
        Some(self.points[i])
    }
}

/// Oracle predictor that returns the true future as sample 0 and
/// perturbed copies as the remaining samples, all with equal weight.
/// Perturbations grow linearly over the horizon.
#[derive(Debug, Clone)]
pub struct TruthInSamples {
    pub tracks: HashMap<String, TruthTrack>,
    pub samples: usize,
    pub history: usize,
    pub horizon: usize,
    /// Horizontal perturbation scale at the end of the horizon, metres.
    pub spread_m: f64,
    /// Vertical perturbation scale at the end of the horizon, metres.
    pub vertical_spread_m: f64,
}

impl TruthInSamples {
    pub fn new(tracks: HashMap<String, TruthTrack>, samples: usize, history: usize, horizon: usize) -> Self {
        Self {
            tracks,
            samples,
            history,
            horizon,
            spread_m: 200.0,
            vertical_spread_m: 30.0,
        }
    }
}

impl Predictor for TruthInSamples {
    fn history_len(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, req: &PredictionRequest<'_>) -> Result<PredictionSet, PredictError> {
        check_history(req, self.history)?;
        let track = self
            .tracks
            .get(req.aircraft_id)
            .ok_or_else(|| PredictError::UnknownAircraft(req.aircraft_id.to_string()))?;
        let truth: Vec<EnuPoint> = (1..=self.horizon as i64)
            .map(|tau| track.at_or_last(req.issued_at + tau))
            .collect::<Option<_>>()
            .ok_or_else(|| PredictError::UnknownAircraft(req.aircraft_id.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(req.seed, req.aircraft_id, req.issued_at));
        let k = self.samples.max(1);
        let mut paths = Vec::with_capacity(k);
        paths.push(truth.clone());
        for _ in 1..k {
            let dir: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            paths.push(
                truth
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let f = (j + 1) as f64 / self.horizon as f64;
                        EnuPoint::new(
                            p.east + f * self.spread_m * dir[0],
                            p.north + f * self.spread_m * dir[1],
                            p.up + f * self.vertical_spread_m * dir[2],
                        )
                    })
                    .collect(),
            );
        }
        Ok(PredictionSet {
            aircraft_id: req.aircraft_id.to_string(),
            issued_at: req.issued_at,
            paths,
            weights: vec![1.0 / k as f64; k],
            clamped_samples: 0,
        })
    }
}
