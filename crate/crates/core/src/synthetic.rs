//! Seeded synthetic trajectory sets for training and evaluation checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geo::{EnuPoint, GeoError, GeoPoint, LocalFrame};
use crate::trajdata::{TrackPoint, Trajectory, TrajectoryKind};

/// Reference point near Gimpo International Airport.
pub const GIMPO: GeoPoint = GeoPoint {
    lon: 126.7906,
    lat: 37.5583,
    alt: 0.0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Straight flight at constant speed throughout.
    ConstantVelocity,
    /// Straight observation, then a left or right turn with equal odds.
    BimodalTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub task: SyntheticTask,
    pub count: usize,
    pub history: usize,
    pub horizon: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Mean course in degrees clockwise from north.
    pub course_deg: f64,
    pub course_jitter_deg: f64,
    pub min_turn_rate_deg: f64,
    pub max_turn_rate_deg: f64,
    pub altitude_m: f64,
    /// Half-width of the square in which start points are drawn.
    pub start_spread_m: f64,
    pub noise_m: f64,
    pub origin: GeoPoint,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(task: SyntheticTask, count: usize, history: usize, horizon: usize, seed: u64) -> Self {
        Self {
            task,
            count,
            history,
            horizon,
            min_speed: 60.0,
            max_speed: 80.0,
            course_deg: 90.0,
            course_jitter_deg: 3.0,
            min_turn_rate_deg: 2.5,
            max_turn_rate_deg: 3.5,
            altitude_m: 600.0,
            start_spread_m: 2000.0,
            noise_m: 3.0,
            origin: GIMPO,
            seed,
        }
    }
}

/// Generates `count` trajectories of exactly `history + horizon` points
/// at 1 Hz, so each yields a single window pair.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Trajectory>, GeoError> {
    let frame = LocalFrame::new(cfg.origin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_m.max(0.0)).expect("finite noise");
    let n = cfg.history + cfg.horizon;
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
        let mut course =
            (cfg.course_deg + rng.random_range(-cfg.course_jitter_deg..=cfg.course_jitter_deg)).to_radians();
        let turn = match cfg.task {
            SyntheticTask::ConstantVelocity => 0.0,
            SyntheticTask::BimodalTurn => {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                side * rng
                    .random_range(cfg.min_turn_rate_deg..=cfg.max_turn_rate_deg)
                    .to_radians()
            }
        };
        let mut pos = EnuPoint::new(
            rng.random_range(-cfg.start_spread_m..=cfg.start_spread_m),
            rng.random_range(-cfg.start_spread_m..=cfg.start_spread_m),
            cfg.altitude_m,
        );
        let mut points = Vec::with_capacity(n);
        for step in 0..n {
            let noisy = EnuPoint::new(
                pos.east + noise.sample(&mut rng),
                pos.north + noise.sample(&mut rng),
                pos.up + noise.sample(&mut rng),
            );
            points.push(TrackPoint {
                t: step as f64,
                pos: frame.from_enu(&noisy),
            });
            let rate = if step + 1 >= cfg.history { turn } else { 0.0 };
            let mid = course + 0.5 * rate;
            pos.east += speed * mid.sin();
            pos.north += speed * mid.cos();
            course += rate;
        }
        out.push(Trajectory {
            id: format!("syn-{i:05}"),
            kind: TrajectoryKind::Arrival,
            points,
        });
    }
    Ok(out)
}
