use serde::{Deserialize, Serialize};

use super::SimError;
use crate::controller::{LaneGeometry, SeparationStandard, DECELERATION_STEPS, PLAN_HORIZON};
use crate::geo::{units, EnuPoint, GeoPoint, LocalFrame};
use crate::predictor::DEFAULT_SAMPLES;
use crate::synthetic::GIMPO;
use crate::trajdata::{TrajectoryKind, HISTORY_LEN};

/// Proximity that triggers conflict analysis. Both comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncounterCriteria {
    pub horizontal_m: f64,
    pub vertical_m: f64,
}

impl Default for EncounterCriteria {
    fn default() -> Self {
        Self {
            horizontal_m: units::nautical_miles(2.0),
            vertical_m: units::feet(1200.0),
        }
    }
}

impl EncounterCriteria {
    pub fn contains(&self, horizontal: f64, vertical: f64) -> bool {
        horizontal < self.horizontal_m && vertical < self.vertical_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneConfig {
    pub id: String,
    pub start: GeoPoint,
    pub end: GeoPoint,
}

impl LaneConfig {
    pub fn geometry(&self, frame: &LocalFrame, altitude_m: f64) -> Result<LaneGeometry, SimError> {
        let a = frame.to_enu(&self.start)?;
        let b = frame.to_enu(&self.end)?;
        if a.horizontal_distance(&b) < 1.0 {
            return Err(SimError::Config(format!("lane '{}' has no length", self.id)));
        }
        Ok(LaneGeometry::new(a, b, altitude_m))
    }
}

/// Piecewise-linear speed over distance flown: ramps from `start` to
/// `cruise` over the first `ramp_m`, then to `end` over the last `ramp_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub start: f64,
    pub cruise: f64,
    pub end: f64,
    pub ramp_m: f64,
}

impl SpeedProfile {
    pub fn speed_at(&self, along: f64, total: f64) -> f64 {
        let ramp = self.ramp_m.max(1.0);
        let up = self.start + (self.cruise - self.start) * (along / ramp).min(1.0);
        let remaining = (total - along).max(0.0);
        let down = self.end + (self.cruise - self.end) * (remaining / ramp).min(1.0);
        up.min(down).max(1.0)
    }
}

/// A published route flown by conventional traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Procedure {
    pub name: String,
    pub kind: TrajectoryKind,
    /// Centreline waypoints in the scenario frame (east, north, up), metres.
    pub waypoints: Vec<EnuPoint>,
    pub flights_per_hour: f64,
    pub speed: SpeedProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub procedures: Vec<Procedure>,
    pub lateral_sigma_m: f64,
    pub vertical_sigma_m: f64,
    /// Offsets fade in over this height above the lowest waypoint so
    /// tracks still meet the runway.
    pub offset_taper_m: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            procedures: vec![
                Procedure {
                    name: "ARR".into(),
                    kind: TrajectoryKind::Arrival,
                    waypoints: vec![
                        EnuPoint::new(-32_000.0, 3_000.0, 1_400.0),
                        EnuPoint::new(-14_000.0, 0.0, 914.0),
                        EnuPoint::new(0.0, 0.0, 15.0),
                    ],
                    flights_per_hour: 12.0,
                    speed: SpeedProfile {
                        start: 115.0,
                        cruise: 95.0,
                        end: 70.0,
                        ramp_m: 9_000.0,
                    },
                },
                Procedure {
                    name: "DEP".into(),
                    kind: TrajectoryKind::Departure,
                    waypoints: vec![
                        EnuPoint::new(0.0, 0.0, 15.0),
                        EnuPoint::new(-6_000.0, 0.0, 600.0),
                        EnuPoint::new(-12_000.0, -3_000.0, 1_100.0),
                        EnuPoint::new(-30_000.0, -12_000.0, 2_000.0),
                    ],
                    flights_per_hour: 12.0,
                    speed: SpeedProfile {
                        start: 75.0,
                        cruise: 130.0,
                        end: 140.0,
                        ramp_m: 8_000.0,
                    },
                },
            ],
            lateral_sigma_m: 300.0,
            vertical_sigma_m: 50.0,
            offset_taper_m: 300.0,
        }
    }
}

/// A straight, constant-velocity intruder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedIntruder {
    pub start_tick: i64,
    pub start: EnuPoint,
    /// Metres per second along (east, north, up).
    pub velocity: EnuPoint,
    pub duration_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TrafficSource {
    None,
    Synthetic(GeneratorConfig),
    /// Trajectory CSV; ticks count seconds from `start_epoch` (defaults to
    /// the earliest timestamp in the file).
    Replay {
        path: String,
        #[serde(default)]
        start_epoch: Option<f64>,
    },
    Scripted {
        intruders: Vec<ScriptedIntruder>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Trained flow checkpoint.
    Model,
    /// The recorded truth plus perturbed copies.
    TruthInSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub predictor: PredictorKind,
    pub samples: usize,
    pub history: usize,
    pub horizon: usize,
    /// End-of-horizon perturbation of the truth-in-samples predictor.
    pub stub_spread_m: f64,
    pub stub_vertical_spread_m: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::Model,
            samples: DEFAULT_SAMPLES,
            history: HISTORY_LEN,
            horizon: PLAN_HORIZON,
            stub_spread_m: 200.0,
            stub_vertical_spread_m: 30.0,
        }
    }
}

fn default_duration() -> u64 {
    2 * 24 * 3600
}

fn default_interval() -> u64 {
    10
}

fn default_altitudes() -> Vec<f64> {
    vec![1500.0, 2000.0, 2500.0, 3000.0]
}

fn default_rate_steps() -> usize {
    DECELERATION_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub origin: GeoPoint,
    #[serde(default = "default_duration")]
    pub duration_s: u64,
    #[serde(default = "default_interval")]
    pub uam_interval_s: u64,
    pub lanes: Vec<LaneConfig>,
    #[serde(default = "default_altitudes")]
    pub altitudes_ft: Vec<f64>,
    pub traffic: TrafficSource,
    #[serde(default)]
    pub separation: SeparationStandard,
    #[serde(default)]
    pub encounter: EncounterCriteria,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default = "default_rate_steps")]
    pub rate_steps: usize,
    /// Accepted range of median delay proportions, for plausibility checks.
    #[serde(default)]
    pub delay_band: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// A 14 km north-south lane 12 km west of the airport, crossed by
    /// arrival and departure procedures.
    pub fn reference() -> Self {
        let frame = LocalFrame::new(GIMPO).expect("valid origin");
        Self {
            name: "reference".into(),
            origin: GIMPO,
            duration_s: default_duration(),
            uam_interval_s: default_interval(),
            lanes: vec![LaneConfig {
                id: "W1".into(),
                start: frame.from_enu(&EnuPoint::new(-12_000.0, -7_000.0, 0.0)),
                end: frame.from_enu(&EnuPoint::new(-12_000.0, 7_000.0, 0.0)),
            }],
            altitudes_ft: default_altitudes(),
            traffic: TrafficSource::Synthetic(GeneratorConfig::default()),
            separation: SeparationStandard::default(),
            encounter: EncounterCriteria::default(),
            prediction: PredictionConfig::default(),
            rate_steps: default_rate_steps(),
            delay_band: Some([0.0, 0.15]),
            seed: 0,
        }
    }

    pub fn frame(&self) -> Result<LocalFrame, SimError> {
        Ok(LocalFrame::new(self.origin)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let frame = self.frame()?;
        if self.duration_s == 0 || self.uam_interval_s == 0 {
            return bad("duration and UAM interval must be positive".into());
        }
        if self.lanes.is_empty() {
            return bad("at least one lane is required".into());
        }
        for lane in &self.lanes {
            lane.geometry(&frame, 0.0)?;
        }
        if self.altitudes_ft.is_empty() || self.altitudes_ft.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("altitudes must be positive".into());
        }
        let s = &self.separation;
        let e = &self.encounter;
        if !(s.horizontal_m > 0.0 && s.vertical_m > 0.0 && e.horizontal_m > 0.0 && e.vertical_m > 0.0) {
            return bad("separation and encounter thresholds must be positive".into());
        }
        let p = &self.prediction;
        if p.samples == 0 || p.history == 0 || p.horizon == 0 {
            return bad("prediction samples, history and horizon must be positive".into());
        }
        if self.rate_steps == 0 {
            return bad("rate grid needs at least one deceleration step".into());
        }
        match &self.traffic {
            TrafficSource::Synthetic(g) => {
                if g.lateral_sigma_m < 0.0 || g.vertical_sigma_m < 0.0 {
                    return bad("noise scales must be non-negative".into());
                }
                for pr in &g.procedures {
                    if pr.waypoints.len() < 2 {
                        return bad(format!("procedure '{}' needs two waypoints", pr.name));
                    }
                    if pr.flights_per_hour.is_nan() || pr.flights_per_hour <= 0.0 {
                        return bad(format!("procedure '{}' needs a positive flow rate", pr.name));
                    }
                    let sp = pr.speed;
                    if !(sp.start > 0.0 && sp.cruise > 0.0 && sp.end > 0.0) {
                        return bad(format!("procedure '{}' needs positive speeds", pr.name));
                    }
                }
            }
            TrafficSource::Scripted { intruders } => {
                if intruders.iter().any(|i| i.duration_s == 0) {
                    return bad("scripted intruders need a positive duration".into());
                }
            }
            TrafficSource::Replay { path, .. } if path.is_empty() => {
                return bad("replay source needs a path".into());
            }
            _ => {}
        }
        if let Some([lo, hi]) = self.delay_band {
            if lo > hi {
                return bad("delay band is reversed".into());
            }
        }
        Ok(())
    }
}
