use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{EncounterCriteria, ScenarioConfig};
use super::traffic::TrafficTrack;
use super::SimError;
use crate::controller::{
    cpa, distance_after, select_rate, speed_after, time_to_cover, DecisionRule, RateDecision, RateSet, UamState, V_MAX,
};
use crate::geo::{units, EnuPoint, LocalFrame};
use crate::predictor::{PredictError, PredictionRequest, PredictionSet, Predictor};
use crate::trajdata::TrajectoryKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// No speed adjustments.
    Baseline,
    /// Speed adjusted by the controller every tick.
    Adjusted,
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Adjusted => "adjusted",
        })
    }
}

impl FromStr for SimMode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "adjusted" | "speed-adjusted" => Ok(Self::Adjusted),
            other => Err(SimError::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Closest approach over the 60 s following the start of an encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpaRecord {
    pub intruder_id: String,
    pub intruder_kind: TrajectoryKind,
    pub start_tick: i64,
    /// Seconds after `start_tick`.
    pub offset_s: usize,
    pub range_m: f64,
    pub vertical_m: f64,
    pub bearing_deg: Option<f64>,
    pub vertical_clear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightRecord {
    pub id: String,
    pub spawn_tick: i64,
    pub planned_time_s: f64,
    pub actual_time_s: Option<f64>,
    pub delay_proportion: Option<f64>,
    /// Closest horizontal distance to any intruder while vertically closer
    /// than the separation standard; `None` if that never happened.
    pub min_separation_m: Option<f64>,
    pub los_ticks: u64,
    pub encounter_ticks: u64,
    pub cpa: Vec<CpaRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub decisions: u64,
    pub predictions: u64,
    pub missing_predictions: u64,
    pub clamped_samples: u64,
    pub minimise: u64,
    pub recover: u64,
    pub keep: u64,
    pub no_prediction: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: String,
    pub lane_id: String,
    pub altitude_ft: f64,
    pub mode: SimMode,
    pub seed: u64,
    pub duration_s: u64,
    pub spawned: u64,
    pub completed: u64,
    pub active: u64,
    /// UAM-intruder pair ticks in loss of separation.
    pub los_events: u64,
    pub flights: Vec<FlightRecord>,
    pub diagnostics: Diagnostics,
}

impl SimResult {
    pub fn flights_with_los(&self) -> usize {
        self.flights.iter().filter(|f| f.los_ticks > 0).count()
    }
}

/// Positions at one tick.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub uams: Vec<EnuPoint>,
    pub intruders: Vec<EnuPoint>,
}

/// `(uam index, intruder index, horizontal m, vertical m)` for every pair
/// inside the encounter envelope.
pub fn encounter_pairs(
    frame: &LocalFrame,
    snapshot: &Snapshot,
    criteria: &EncounterCriteria,
) -> Vec<(usize, usize, f64, f64)> {
    let mut out = Vec::new();
    for (i, u) in snapshot.uams.iter().enumerate() {
        for (j, p) in snapshot.intruders.iter().enumerate() {
            let v = (u.up - p.up).abs();
            if v >= criteria.vertical_m {
                continue;
            }
            let h = frame.geodesic_horizontal(u, p);
            if criteria.contains(h, v) {
                out.push((i, j, h, v));
            }
        }
    }
    out
}

struct Flight {
    record: FlightRecord,
    state: UamState,
    /// Distance behind the cruise schedule.
    lag: f64,
    /// Position at each tick from spawn.
    path: Vec<EnuPoint>,
    /// Encounter episodes in progress, keyed by track index.
    open: BTreeMap<usize, i64>,
    episodes: Vec<(usize, i64)>,
    encountered: Vec<usize>,
}

/// Runs one lane at one altitude. `traffic` must be sorted by start tick.
#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &ScenarioConfig,
    lane_index: usize,
    altitude_ft: f64,
    mode: SimMode,
    traffic: &[TrafficTrack],
    predictor: Option<&dyn Predictor>,
    seed: u64,
) -> Result<SimResult, SimError> {
    cfg.validate()?;
    let lane_cfg = cfg
        .lanes
        .get(lane_index)
        .ok_or_else(|| SimError::Config(format!("no lane {lane_index}")))?;
    let frame = cfg.frame()?;
    let lane = lane_cfg.geometry(&frame, units::feet(altitude_ft))?;
    if mode == SimMode::Adjusted && predictor.is_none() {
        return Err(SimError::Config("adjusted mode needs a predictor".into()));
    }
    if let Some(p) = predictor {
        if p.horizon() < cfg.prediction.horizon {
            return Err(SimError::Config(format!(
                "predictor horizon {} shorter than planning horizon {}",
                p.horizon(),
                cfg.prediction.horizon
            )));
        }
    }
    let horizon = cfg.prediction.horizon;
    let rates = RateSet::with_steps(cfg.rate_steps);
    let std = cfg.separation;
    let planned = lane.length_m / V_MAX;
    let duration = cfg.duration_s as i64;

    let mut flights: Vec<Flight> = Vec::new();
    let mut finished: Vec<Flight> = Vec::new();
    let mut diag = Diagnostics::default();
    let mut los_events = 0u64;
    let mut next_track = 0usize;
    let mut live: Vec<usize> = Vec::new();
    let mut spawned = 0u64;

    for t in 0..duration {
        if t % cfg.uam_interval_s as i64 == 0 {
            flights.push(Flight {
                record: FlightRecord {
                    id: format!("{}-{}-{spawned:05}", lane_cfg.id, altitude_ft),
                    spawn_tick: t,
                    planned_time_s: planned,
                    actual_time_s: None,
                    delay_proportion: None,
                    min_separation_m: None,
                    los_ticks: 0,
                    encounter_ticks: 0,
                    cpa: Vec::new(),
                },
                state: UamState {
                    lane,
                    along: 0.0,
                    speed: V_MAX,
                    rate: 0.0,
                },
                lag: 0.0,
                path: Vec::new(),
                open: BTreeMap::new(),
                episodes: Vec::new(),
                encountered: Vec::new(),
            });
            spawned += 1;
        }
        while next_track < traffic.len() && traffic[next_track].start <= t {
            live.push(next_track);
            next_track += 1;
        }
        live.retain(|&j| traffic[j].end() > t);

        let positions: Vec<EnuPoint> = live.iter().map(|&j| traffic[j].at(t).expect("live track")).collect();
        for f in &mut flights {
            let u = f.state.position();
            f.path.push(u);
            f.encountered.clear();
            for (slot, &j) in live.iter().enumerate() {
                let p = positions[slot];
                let v = (u.up - p.up).abs();
                if v >= cfg.encounter.vertical_m && v >= std.vertical_m {
                    f.open.remove(&j);
                    continue;
                }
                let h = frame.geodesic_horizontal(&u, &p);
                if v < std.vertical_m {
                    let m = f.record.min_separation_m.get_or_insert(h);
                    *m = m.min(h);
                }
                if std.violated(h, v) {
                    f.record.los_ticks += 1;
                    los_events += 1;
                }
                if cfg.encounter.contains(h, v) {
                    f.encountered.push(j);
                    if let Entry::Vacant(e) = f.open.entry(j) {
                        e.insert(t);
                        f.episodes.push((j, t));
                    }
                } else {
                    f.open.remove(&j);
                }
            }
            if !f.encountered.is_empty() {
                f.record.encounter_ticks += 1;
            }
            f.open.retain(|j, _| live.contains(j));
        }

        if mode == SimMode::Adjusted {
            let predictor = predictor.expect("checked above");
            let mut needed: Vec<usize> = flights.iter().flat_map(|f| f.encountered.iter().copied()).collect();
            needed.sort_unstable();
            needed.dedup();
            let preds: Vec<Result<Option<PredictionSet>, PredictError>> = needed
                .par_iter()
                .map(|&j| {
                    let track = &traffic[j];
                    let history = track.history(t, predictor.history_len());
                    let req = PredictionRequest {
                        aircraft_id: &track.id,
                        issued_at: t,
                        history,
                        frame: &frame,
                        seed,
                    };
                    match predictor.predict(&req) {
                        Ok(p) => Ok(Some(p)),
                        Err(PredictError::InsufficientHistory { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect();
            let mut by_track: BTreeMap<usize, Option<PredictionSet>> = BTreeMap::new();
            for (j, p) in needed.iter().zip(preds) {
                let p = p?;
                diag.predictions += 1;
                match &p {
                    Some(set) => diag.clamped_samples += set.clamped_samples as u64,
                    None => diag.missing_predictions += 1,
                }
                by_track.insert(*j, p);
            }
            let decisions: Vec<Result<RateDecision, SimError>> = flights
                .par_iter()
                .map(|f| {
                    let intruders: Vec<Option<&PredictionSet>> =
                        f.encountered.iter().map(|j| by_track[j].as_ref()).collect();
                    Ok(select_rate(&frame, &f.state, &intruders, &rates, &std, horizon)?)
                })
                .collect();
            for (f, d) in flights.iter_mut().zip(decisions) {
                let d = d?;
                diag.decisions += 1;
                match d.rule {
                    DecisionRule::Minimise => diag.minimise += 1,
                    DecisionRule::Recover => diag.recover += 1,
                    DecisionRule::Keep => diag.keep += 1,
                    DecisionRule::NoPrediction => diag.no_prediction += 1,
                }
                f.state.rate = d.rate;
            }
        }

        let mut i = 0;
        while i < flights.len() {
            let f = &mut flights[i];
            let s = f.state;
            let step = distance_after(s.speed, s.rate, 1.0);
            let cruising = s.speed == V_MAX && s.rate >= 0.0;
            if s.along + step >= lane.length_m {
                let remaining = lane.length_m - s.along;
                let dt = time_to_cover(s.speed, s.rate, remaining).unwrap_or(1.0);
                let lag = if cruising {
                    f.lag
                } else {
                    f.lag + (V_MAX * dt - remaining).max(0.0)
                };
                let delay = lag / V_MAX;
                f.record.actual_time_s = Some(planned + delay);
                f.record.delay_proportion = Some(delay / planned);
                finished.push(flights.swap_remove(i));
            } else {
                if !cruising {
                    f.lag += V_MAX - step;
                }
                f.state.along += step;
                f.state.speed = speed_after(s.speed, s.rate, 1.0);
                i += 1;
            }
        }
    }

    let active = flights.len() as u64;
    let completed = finished.len() as u64;
    let mut all: Vec<Flight> = finished.into_iter().chain(flights).collect();
    all.sort_by_key(|f| f.record.spawn_tick);
    let course = lane.course_deg();
    let records = all
        .into_iter()
        .map(|mut f| {
            for &(j, t0) in &f.episodes {
                let track = &traffic[j];
                let mut u = Vec::new();
                let mut p = Vec::new();
                for tick in t0..t0 + horizon as i64 {
                    let k = (tick - f.record.spawn_tick) as usize;
                    match (f.path.get(k), track.at(tick)) {
                        (Some(a), Some(b)) => {
                            u.push(*a);
                            p.push(b);
                        }
                        _ => break,
                    }
                }
                let c = cpa(&frame, &u, &p, course, &std)?;
                f.record.cpa.push(CpaRecord {
                    intruder_id: track.id.clone(),
                    intruder_kind: track.kind,
                    start_tick: t0,
                    offset_s: c.step,
                    range_m: c.horizontal_m,
                    vertical_m: c.vertical_m,
                    bearing_deg: c.bearing_deg,
                    vertical_clear: c.vertical_clear,
                });
            }
            Ok(f.record)
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    Ok(SimResult {
        scenario: cfg.name.clone(),
        lane_id: lane_cfg.id.clone(),
        altitude_ft,
        mode,
        seed,
        duration_s: cfg.duration_s,
        spawned,
        completed,
        active,
        los_events,
        flights: records,
        diagnostics: diag,
    })
}

/// Every lane at every configured altitude.
pub fn run_all(
    cfg: &ScenarioConfig,
    mode: SimMode,
    traffic: &[TrafficTrack],
    predictor: Option<&dyn Predictor>,
    seed: u64,
) -> Result<Vec<SimResult>, SimError> {
    let mut out = Vec::new();
    for lane in 0..cfg.lanes.len() {
        for &alt in &cfg.altitudes_ft {
            out.push(run(cfg, lane, alt, mode, traffic, predictor, seed)?);
        }
    }
    Ok(out)
}
