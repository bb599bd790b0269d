//! Speed-adjustment controller for UAM flights on straight lanes: planned
//! kinematics per candidate rate, loss-of-separation probability against
//! sampled intruder futures, closest point of approach, and rate selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{relative_bearing, units, EnuPoint, LocalFrame};
use crate::predictor::PredictionSet;

/// Cruise speed and speed ceiling, 210 km/h.
pub const V_MAX: f64 = 210.0 * units::KMH;
pub const MAX_ACCELERATION: f64 = 0.2 * units::G0;
/// Largest deceleration magnitude, as a negative rate.
pub const MAX_DECELERATION: f64 = -0.3 * units::G0;
pub const DECELERATION_STEPS: usize = 31;
/// Planning horizon in seconds.
pub const PLAN_HORIZON: usize = 60;

const WEIGHT_TOLERANCE: f64 = 1e-9;
/// Only pairs whose planar distance is within this factor of the
/// threshold (plus a margin) get the geodesic check.
const PREFILTER_FACTOR: f64 = 1.02;
const PREFILTER_MARGIN_M: f64 = 25.0;
/// Extra distance kept by the stop-short rate beyond the horizontal standard.
pub const STOP_SHORT_MARGIN_M: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("prediction weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("prediction horizon {prediction} shorter than plan {plan}")]
    Horizon { plan: usize, prediction: usize },
    #[error("empty path")]
    EmptyPath,
    #[error("path lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationStandard {
    pub horizontal_m: f64,
    pub vertical_m: f64,
}

impl Default for SeparationStandard {
    fn default() -> Self {
        Self {
            horizontal_m: units::feet(2500.0),
            vertical_m: units::feet(1000.0),
        }
    }
}

impl SeparationStandard {
    pub fn violated(&self, horizontal: f64, vertical: f64) -> bool {
        horizontal <= self.horizontal_m && vertical <= self.vertical_m
    }
}

/// Candidate acceleration rates, m/s^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub rates: Vec<f64>,
}

impl Default for RateSet {
    fn default() -> Self {
        Self::with_steps(DECELERATION_STEPS)
    }
}

impl RateSet {
    /// `+0.2g`, `0`, and `steps` evenly spaced decelerations ending at `-0.3g`.
    pub fn with_steps(steps: usize) -> Self {
        let mut rates = vec![MAX_ACCELERATION, 0.0];
        rates.extend((1..=steps).map(|i| MAX_DECELERATION * (i as f64 / steps as f64)));
        Self { rates }
    }
}

/// Straight lane in the simulation frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub start: EnuPoint,
    /// Horizontal unit vector along the lane (east, north).
    pub direction: [f64; 2],
    pub length_m: f64,
    pub altitude_m: f64,
}

impl LaneGeometry {
    pub fn new(start: EnuPoint, end: EnuPoint, altitude_m: f64) -> Self {
        let de = end.east - start.east;
        let dn = end.north - start.north;
        let length_m = de.hypot(dn);
        Self {
            start: EnuPoint::new(start.east, start.north, altitude_m),
            direction: [de / length_m, dn / length_m],
            length_m,
            altitude_m,
        }
    }

    pub fn point_at(&self, along: f64) -> EnuPoint {
        EnuPoint::new(
            self.start.east + along * self.direction[0],
            self.start.north + along * self.direction[1],
            self.altitude_m,
        )
    }

    /// Along-lane coordinate of the projection of `p`.
    pub fn project(&self, p: &EnuPoint) -> f64 {
        (p.east - self.start.east) * self.direction[0] + (p.north - self.start.north) * self.direction[1]
    }

    /// Course in compass degrees.
    pub fn course_deg(&self) -> f64 {
        crate::geo::wrap_degrees(self.direction[0].atan2(self.direction[1]).to_degrees())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UamState {
    pub lane: LaneGeometry,
    /// Distance flown along the lane.
    pub along: f64,
    pub speed: f64,
    pub rate: f64,
}

impl UamState {
    pub fn position(&self) -> EnuPoint {
        self.lane.point_at(self.along)
    }

    /// Whole planned steps before the flight reaches the lane end.
    fn steps_on_lane(&self, rate: f64, horizon: usize) -> usize {
        (1..=horizon)
            .take_while(|&tau| self.along + distance_after(self.speed, rate, tau as f64) <= self.lane.length_m)
            .count()
    }
}

/// Speed after `t` seconds at rate `a`, clamped to `[0, V_MAX]`.
pub fn speed_after(v: f64, a: f64, t: f64) -> f64 {
    (v + a * t).clamp(0.0, V_MAX)
}

/// Distance covered in `t` seconds from speed `v` at rate `a` with the speed
/// clamped to `[0, V_MAX]`.
pub fn distance_after(v: f64, a: f64, t: f64) -> f64 {
    if a > 0.0 {
        let ramp = ((V_MAX - v) / a).max(0.0);
        if t <= ramp {
            v * t + 0.5 * a * t * t
        } else {
            v * ramp + 0.5 * a * ramp * ramp + V_MAX * (t - ramp)
        }
    } else if a < 0.0 {
        let stop = v / -a;
        if t <= stop {
            v * t + 0.5 * a * t * t
        } else {
            v * v / (2.0 * -a)
        }
    } else {
        v * t
    }
}

/// Time to cover `d` metres from speed `v` at rate `a`, if it is ever covered.
pub fn time_to_cover(v: f64, a: f64, d: f64) -> Option<f64> {
    if d <= 0.0 {
        return Some(0.0);
    }
    if a > 0.0 {
        let ramp = ((V_MAX - v) / a).max(0.0);
        let ramp_dist = v * ramp + 0.5 * a * ramp * ramp;
        if d <= ramp_dist {
            Some((-v + (v * v + 2.0 * a * d).sqrt()) / a)
        } else {
            Some(ramp + (d - ramp_dist) / V_MAX)
        }
    } else if a < 0.0 {
        let disc = v * v + 2.0 * a * d;
        if disc < 0.0 {
            None
        } else {
            Some((v - disc.sqrt()) / -a)
        }
    } else if v > 0.0 {
        Some(d / v)
    } else {
        None
    }
}

/// Planned positions at `tau = 1..=horizon` seconds under rate `a`.
pub fn plan_uam_trajectory(state: &UamState, a: f64, horizon: usize) -> Vec<EnuPoint> {
    (1..=horizon)
        .map(|tau| {
            state
                .lane
                .point_at(state.along + distance_after(state.speed, a, tau as f64))
        })
        .collect()
}

fn horizontal(frame: &LocalFrame, a: &EnuPoint, b: &EnuPoint) -> f64 {
    frame.geodesic_horizontal(a, b)
}

/// Geodesic horizontal distance, or `None` when the planar distance already
/// rules out `threshold`.
fn horizontal_within(frame: &LocalFrame, a: &EnuPoint, b: &EnuPoint, threshold: f64) -> Option<f64> {
    if a.horizontal_distance(b) > threshold * PREFILTER_FACTOR + PREFILTER_MARGIN_M {
        return None;
    }
    let d = horizontal(frame, a, b);
    (d <= threshold).then_some(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cpa {
    /// Index into the paths of the closest point.
    pub step: usize,
    pub horizontal_m: f64,
    pub vertical_m: f64,
    /// Intruder bearing relative to the ownship course, when defined.
    pub bearing_deg: Option<f64>,
    /// No step had vertical separation below the standard.
    pub vertical_clear: bool,
}

/// Closest point of approach over aligned 1 s paths. Steps with vertical
/// separation below the standard take precedence; earliest step wins ties.
pub fn cpa(
    frame: &LocalFrame,
    uam_path: &[EnuPoint],
    intruder_path: &[EnuPoint],
    course_deg: f64,
    std: &SeparationStandard,
) -> Result<Cpa, ControllerError> {
    if uam_path.is_empty() || intruder_path.is_empty() {
        return Err(ControllerError::EmptyPath);
    }
    if uam_path.len() != intruder_path.len() {
        return Err(ControllerError::LengthMismatch(uam_path.len(), intruder_path.len()));
    }
    let mut best_close: Option<(usize, f64)> = None;
    let mut best_any: Option<(usize, f64)> = None;
    for (i, (u, p)) in uam_path.iter().zip(intruder_path).enumerate() {
        let d = horizontal(frame, u, p);
        if best_any.is_none_or(|(_, b)| d < b) {
            best_any = Some((i, d));
        }
        if (u.up - p.up).abs() < std.vertical_m && best_close.is_none_or(|(_, b)| d < b) {
            best_close = Some((i, d));
        }
    }
    let vertical_clear = best_close.is_none();
    let (step, horizontal_m) = best_close.or(best_any).expect("non-empty paths");
    let (u, p) = (uam_path[step], intruder_path[step]);
    Ok(Cpa {
        step,
        horizontal_m,
        vertical_m: (u.up - p.up).abs(),
        bearing_deg: relative_bearing(&u, course_deg, &p).ok(),
        vertical_clear,
    })
}

/// Per-rate loss-of-separation outcome against one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleHits {
    pub probability: f64,
    /// First violating step per sample, if any.
    pub first_hit: Vec<Option<usize>>,
}

/// Weighted fraction of sampled futures that come within both thresholds
/// of the planned path at some aligned step.
pub fn los_probability(
    frame: &LocalFrame,
    uam_path: &[EnuPoint],
    preds: &PredictionSet,
    std: &SeparationStandard,
) -> Result<SampleHits, ControllerError> {
    let sum: f64 = preds.weights.iter().sum();
    if preds.weights.len() != preds.paths.len() || (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(ControllerError::WeightSum(sum));
    }
    let mut probability = 0.0;
    let mut first_hit = Vec::with_capacity(preds.paths.len());
    for (path, w) in preds.paths.iter().zip(&preds.weights) {
        if path.len() < uam_path.len() {
            return Err(ControllerError::Horizon {
                plan: uam_path.len(),
                prediction: path.len(),
            });
        }
        let hit = uam_path.iter().zip(path).position(|(u, p)| {
            (u.up - p.up).abs() <= std.vertical_m && horizontal_within(frame, u, p, std.horizontal_m).is_some()
        });
        if hit.is_some() {
            probability += w;
        }
        first_hit.push(hit);
    }
    Ok(SampleHits {
        probability: probability.clamp(0.0, 1.0),
        first_hit,
    })
}

/// Intruder input to rate selection; `None` marks an intruder inside the
/// encounter envelope without a prediction.
pub type IntruderPrediction<'a> = Option<&'a PredictionSet>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Current rate carries risk: minimise over the whole set.
    Minimise,
    /// Current rate is risk-free and not accelerating: minimise over rates at
    /// or above it.
    Recover,
    /// Current rate is risk-free and accelerating: keep it.
    Keep,
    /// An intruder has no prediction: brake at the maximum rate.
    NoPrediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateDecision {
    pub rate: f64,
    pub rule: DecisionRule,
    /// `(rate, aggregated probability)` for every evaluated candidate.
    pub assessment: Vec<(f64, f64)>,
    pub stop_short: Option<f64>,
}

/// Aggregated (max over intruders) probability for one rate.
pub fn aggregate_probability(
    frame: &LocalFrame,
    state: &UamState,
    rate: f64,
    intruders: &[&PredictionSet],
    std: &SeparationStandard,
    horizon: usize,
) -> Result<(f64, Vec<SampleHits>), ControllerError> {
    let path = plan_uam_trajectory(state, rate, horizon);
    let active = &path[..state.steps_on_lane(rate, horizon)];
    let mut worst = 0.0f64;
    let mut hits = Vec::with_capacity(intruders.len());
    for p in intruders {
        let h = los_probability(frame, active, p, std)?;
        worst = worst.max(h.probability);
        hits.push(h);
    }
    Ok((worst, hits))
}

/// Deceleration that stops the flight short of the earliest predicted
/// violation by the horizontal standard plus a margin, when it lies strictly inside
/// `(MAX_DECELERATION, 0)`.
pub fn stop_short_rate(
    state: &UamState,
    intruders: &[&PredictionSet],
    hits: &[SampleHits],
    std: &SeparationStandard,
) -> Option<f64> {
    let (pred, sample, step) = intruders
        .iter()
        .zip(hits)
        .flat_map(|(p, h)| {
            h.first_hit
                .iter()
                .enumerate()
                .filter_map(move |(k, s)| s.map(|s| (*p, k, s)))
        })
        .min_by_key(|&(_, _, s)| s)?;
    let s_int = state.lane.project(&pred.paths[sample][step]);
    let gap = s_int - state.along - std.horizontal_m - STOP_SHORT_MARGIN_M;
    if gap <= 0.0 || state.speed <= 0.0 {
        return None;
    }
    let a = -state.speed * state.speed / (2.0 * gap);
    (a > MAX_DECELERATION && a < 0.0).then_some(a)
}

/// Picks the rate with the lowest probability among `candidates`, breaking
/// ties toward the largest rate.
fn argmin(candidates: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    candidates.fold(None, |best, (a, p)| match best {
        Some((ba, bp)) if bp < p || (bp == p && ba >= a) => Some((ba, bp)),
        _ => Some((a, p)),
    })
}

/// One speed-adjustment decision for a UAM flight.
pub fn select_rate(
    frame: &LocalFrame,
    state: &UamState,
    intruders: &[IntruderPrediction<'_>],
    rates: &RateSet,
    std: &SeparationStandard,
    horizon: usize,
) -> Result<RateDecision, ControllerError> {
    if intruders.iter().any(|p| p.is_none()) {
        return Ok(RateDecision {
            rate: MAX_DECELERATION,
            rule: DecisionRule::NoPrediction,
            assessment: Vec::new(),
            stop_short: None,
        });
    }
    let preds: Vec<&PredictionSet> = intruders.iter().flatten().copied().collect();
    let (current_p, current_hits) = aggregate_probability(frame, state, state.rate, &preds, std, horizon)?;
    if current_p == 0.0 && state.rate > 0.0 {
        return Ok(RateDecision {
            rate: state.rate,
            rule: DecisionRule::Keep,
            assessment: vec![(state.rate, 0.0)],
            stop_short: None,
        });
    }
    let stop_short = stop_short_rate(state, &preds, &current_hits, std);
    let mut candidates: Vec<f64> = rates.rates.clone();
    candidates.extend(stop_short);
    let rule = if current_p > 0.0 {
        DecisionRule::Minimise
    } else {
        candidates.retain(|&a| a >= state.rate);
        DecisionRule::Recover
    };
    let mut assessment = Vec::with_capacity(candidates.len() + 1);
    for &a in &candidates {
        let p = if a == state.rate {
            current_p
        } else {
            aggregate_probability(frame, state, a, &preds, std, horizon)?.0
        };
        assessment.push((a, p));
    }
    if rule == DecisionRule::Recover && !candidates.contains(&state.rate) {
        assessment.push((state.rate, current_p));
    }
    let (rate, _) = argmin(assessment.iter().copied()).expect("rate set is never empty");
    Ok(RateDecision {
        rate,
        rule,
        assessment,
        stop_short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn frame() -> LocalFrame {
        LocalFrame::new(GeoPoint::new(126.79, 37.56, 0.0).unwrap()).unwrap()
    }

    fn lane() -> LaneGeometry {
        LaneGeometry::new(EnuPoint::new(0.0, 0.0, 0.0), EnuPoint::new(0.0, 14_000.0, 0.0), 600.0)
    }

    fn state(speed: f64, rate: f64) -> UamState {
        UamState {
            lane: lane(),
            along: 0.0,
            speed,
            rate,
        }
    }

    #[test]
    fn cruise_covers_3500_m() {
        let p = plan_uam_trajectory(&state(V_MAX, 0.0), 0.0, 60);
        assert_eq!(p.len(), 60);
        assert!((p[59].north - 3500.0).abs() < 1e-9);
    }

    #[test]
    fn full_braking_stops_after_578_m() {
        let stop = V_MAX / -MAX_DECELERATION;
        assert!((stop - 19.83).abs() < 0.005);
        let p = plan_uam_trajectory(&state(V_MAX, MAX_DECELERATION), MAX_DECELERATION, 60);
        assert!((p[59].north - 578.3).abs() < 0.05);
        assert_eq!(p[30].north, p[59].north);
    }

    #[test]
    fn acceleration_is_clamped_at_ceiling() {
        assert_eq!(speed_after(V_MAX, MAX_ACCELERATION, 30.0), V_MAX);
        assert!((distance_after(V_MAX, MAX_ACCELERATION, 10.0) - 10.0 * V_MAX).abs() < 1e-9);
    }

    #[test]
    fn time_to_cover_inverts_distance() {
        for &a in &[0.0, MAX_ACCELERATION, MAX_DECELERATION, -0.5] {
            for &v in &[10.0, 40.0, V_MAX] {
                for &t in &[0.3, 1.0, 5.0] {
                    let d = distance_after(v, a, t);
                    if d > 0.0 && speed_after(v, a, t) > 0.0 {
                        assert!((time_to_cover(v, a, d).unwrap() - t).abs() < 1e-9);
                    }
                }
            }
        }
        assert_eq!(time_to_cover(10.0, -1.0, 100.0), None);
    }

    #[test]
    fn rate_grid() {
        let r = RateSet::default();
        assert_eq!(r.rates.len(), 33);
        assert_eq!(r.rates[0], 0.2 * units::G0);
        assert_eq!(r.rates[1], 0.0);
        assert!((r.rates[32] - MAX_DECELERATION).abs() < 1e-15);
        assert!(r
            .rates
            .iter()
            .all(|a| (MAX_DECELERATION..=MAX_ACCELERATION).contains(a)));
    }

    #[test]
    fn head_on_cpa() {
        let f = frame();
        let u: Vec<EnuPoint> = (0..30).map(|t| EnuPoint::new(50.0 * t as f64, 0.0, 500.0)).collect();
        let i: Vec<EnuPoint> = (0..30)
            .map(|t| EnuPoint::new(1000.0 - 50.0 * t as f64, 0.0, 500.0))
            .collect();
        let c = cpa(&f, &u, &i, 90.0, &SeparationStandard::default()).unwrap();
        assert_eq!(c.step, 10);
        assert!(c.horizontal_m < 1e-6);
        assert!(!c.vertical_clear);
        assert_eq!(c.bearing_deg, None);
    }

    #[test]
    fn parallel_cpa_takes_first_step() {
        let f = frame();
        let u: Vec<EnuPoint> = (0..10).map(|t| EnuPoint::new(40.0 * t as f64, 0.0, 500.0)).collect();
        let i: Vec<EnuPoint> = u.iter().map(|p| EnuPoint::new(p.east, 5000.0, 500.0)).collect();
        let c = cpa(&f, &u, &i, 90.0, &SeparationStandard::default()).unwrap();
        assert_eq!(c.step, 0);
        assert!((c.horizontal_m - 5000.0).abs() < 1e-6);
        assert!((c.bearing_deg.unwrap() - 270.0).abs() < 1e-9);
    }

    #[test]
    fn vertical_offset_sets_clear_flag() {
        let f = frame();
        let u = vec![EnuPoint::new(0.0, 0.0, 500.0); 5];
        let i = vec![EnuPoint::new(100.0, 0.0, 900.0); 5];
        assert!(
            cpa(&f, &u, &i, 0.0, &SeparationStandard::default())
                .unwrap()
                .vertical_clear
        );
        assert_eq!(
            cpa(&f, &[], &[], 0.0, &SeparationStandard::default()),
            Err(ControllerError::EmptyPath)
        );
    }

    fn set(paths: Vec<Vec<EnuPoint>>) -> PredictionSet {
        let k = paths.len();
        PredictionSet {
            aircraft_id: "X".into(),
            issued_at: 0,
            paths,
            weights: vec![1.0 / k as f64; k],
            clamped_samples: 0,
        }
    }

    #[test]
    fn probability_counts_weighted_hits() {
        let f = frame();
        let uam = vec![EnuPoint::new(0.0, 0.0, 600.0); 60];
        let near = vec![EnuPoint::new(500.0, 0.0, 600.0); 60];
        let far = vec![EnuPoint::new(5000.0, 0.0, 600.0); 60];
        let std = SeparationStandard::default();
        let none = set(vec![far.clone(); 100]);
        assert_eq!(los_probability(&f, &uam, &none, &std).unwrap().probability, 0.0);
        let all = set(vec![near.clone(); 100]);
        assert!((los_probability(&f, &uam, &all, &std).unwrap().probability - 1.0).abs() < 1e-12);
        let mixed = set((0..100)
            .map(|i| if i < 37 { near.clone() } else { far.clone() })
            .collect());
        assert!((los_probability(&f, &uam, &mixed, &std).unwrap().probability - 0.37).abs() < 1e-12);
        let mut bad = mixed;
        bad.weights[0] = 0.5;
        assert!(matches!(
            los_probability(&f, &uam, &bad, &std),
            Err(ControllerError::WeightSum(_))
        ));
    }

    #[test]
    fn no_intruders_accelerates() {
        let d = select_rate(
            &frame(),
            &state(40.0, 0.0),
            &[],
            &RateSet::default(),
            &SeparationStandard::default(),
            60,
        )
        .unwrap();
        assert_eq!(d.rate, MAX_ACCELERATION);
        assert_eq!(d.rule, DecisionRule::Recover);
    }

    #[test]
    fn accelerating_without_risk_keeps_rate() {
        let d = select_rate(
            &frame(),
            &state(V_MAX, MAX_ACCELERATION),
            &[],
            &RateSet::default(),
            &SeparationStandard::default(),
            60,
        )
        .unwrap();
        assert_eq!(d.rate, MAX_ACCELERATION);
        assert_eq!(d.rule, DecisionRule::Keep);
        assert_eq!(speed_after(V_MAX, d.rate, 1.0), V_MAX);
    }

    #[test]
    fn missing_prediction_brakes() {
        let d = select_rate(
            &frame(),
            &state(V_MAX, 0.0),
            &[None],
            &RateSet::default(),
            &SeparationStandard::default(),
            60,
        )
        .unwrap();
        assert_eq!(d.rate, MAX_DECELERATION);
    }

    #[test]
    fn parked_intruder_ahead_forces_stop_short() {
        let f = frame();
        let std = SeparationStandard::default();
        let intruder = set(vec![vec![EnuPoint::new(0.0, 2000.0, 600.0); 60]]);
        let s = state(V_MAX, 0.0);
        let d = select_rate(&f, &s, &[Some(&intruder)], &RateSet::default(), &std, 60).unwrap();
        assert_eq!(d.rule, DecisionRule::Minimise);
        let chosen = plan_uam_trajectory(&s, d.rate, 60);
        assert!(chosen.iter().all(|p| (2000.0 - p.north) > std.horizontal_m));
        // the stop-short rate stops just outside the standard
        let a = d.stop_short.unwrap();
        assert!((distance_after(V_MAX, a, 60.0) - (2000.0 - std.horizontal_m - STOP_SHORT_MARGIN_M)).abs() < 1e-6);
        assert_eq!(d.rate, a);
    }
}
