use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use super::scenario::{GeneratorConfig, Procedure, ScenarioConfig, ScriptedIntruder, TrafficSource};
use super::SimError;
use crate::geo::{EnuPoint, LocalFrame};
use crate::predictor::TruthTrack;
use crate::trajdata::{read_trajectories_csv, resample_1hz, TrajectoryKind};

/// Conventional aircraft track at 1 Hz: `points[i]` is the position at
/// tick `start + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTrack {
    pub id: String,
    pub kind: TrajectoryKind,
    pub start: i64,
    pub points: Vec<EnuPoint>,
}

impl TrafficTrack {
    /// One past the last tick.
    pub fn end(&self) -> i64 {
        self.start + self.points.len() as i64
    }

    pub fn at(&self, tick: i64) -> Option<EnuPoint> {
        if tick < self.start || tick >= self.end() {
            return None;
        }
        Some(self.points[(tick - self.start) as usize])
    }

    /// Up to `len` points ending at `tick`, oldest first.
    pub fn history(&self, tick: i64, len: usize) -> &[EnuPoint] {
        if tick < self.start || tick >= self.end() {
            return &[];
        }
        let i = (tick - self.start) as usize;
        &self.points[(i + 1).saturating_sub(len)..=i]
    }
}

/// Truth lookup for the truth-in-samples predictor.
pub fn truth_tracks(traffic: &[TrafficTrack]) -> HashMap<String, TruthTrack> {
    traffic
        .iter()
        .map(|t| {
            (
                t.id.clone(),
                TruthTrack {
                    start: t.start,
                    points: t.points.clone(),
                },
            )
        })
        .collect()
}

/// Conventional traffic for the whole scenario, sorted by start tick.
/// Relative replay paths resolve against `base_dir`.
pub fn build_traffic(cfg: &ScenarioConfig, base_dir: Option<&Path>) -> Result<Vec<TrafficTrack>, SimError> {
    let frame = cfg.frame()?;
    let mut tracks = match &cfg.traffic {
        TrafficSource::None => Vec::new(),
        TrafficSource::Synthetic(g) => {
            let lead = (cfg.prediction.history + 600) as i64;
            generate(g, -lead, cfg.duration_s as i64, cfg.seed)
        }
        TrafficSource::Scripted { intruders } => intruders.iter().enumerate().map(|(i, s)| scripted(i, s)).collect(),
        TrafficSource::Replay { path, start_epoch } => {
            let p = Path::new(path);
            let full = match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.to_path_buf(),
            };
            replay(&full, *start_epoch, &frame)?
        }
    };
    tracks.retain(|t| !t.points.is_empty() && t.end() > 0 && t.start < cfg.duration_s as i64);
    tracks.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.id.cmp(&b.id)));
    Ok(tracks)
}

fn scripted(i: usize, s: &ScriptedIntruder) -> TrafficTrack {
    TrafficTrack {
        id: format!("SCR-{i:04}"),
        kind: TrajectoryKind::Arrival,
        start: s.start_tick,
        points: (0..s.duration_s)
            .map(|t| {
                let t = t as f64;
                EnuPoint::new(
                    s.start.east + s.velocity.east * t,
                    s.start.north + s.velocity.north * t,
                    s.start.up + s.velocity.up * t,
                )
            })
            .collect(),
    }
}

fn replay(path: &Path, start_epoch: Option<f64>, frame: &LocalFrame) -> Result<Vec<TrafficTrack>, SimError> {
    let trajs = read_trajectories_csv(File::open(path)?)?;
    let t0 = match start_epoch {
        Some(t) => t,
        None => trajs
            .iter()
            .flat_map(|t| t.points.first())
            .map(|p| p.t)
            .fold(f64::INFINITY, f64::min),
    };
    let mut out = Vec::with_capacity(trajs.len());
    for t in trajs {
        let r = resample_1hz(&t.id, t.kind, &t.points)?;
        let Some(first) = r.points.first() else { continue };
        out.push(TrafficTrack {
            id: r.id.clone(),
            kind: r.kind,
            start: (first.t - t0).round() as i64,
            points: r
                .points
                .iter()
                .map(|p| frame.to_enu(&p.pos))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

struct Polyline {
    points: Vec<EnuPoint>,
    cumulative: Vec<f64>,
}

impl Polyline {
    fn new(points: &[EnuPoint]) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().expect("non-empty");
            cumulative.push(last + w[0].horizontal_distance(&w[1]));
        }
        Self {
            points: points.to_vec(),
            cumulative,
        }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    /// Centreline point and horizontal unit normal (left of travel) at `s`.
    fn at(&self, s: f64) -> (EnuPoint, [f64; 2]) {
        let s = s.clamp(0.0, self.length());
        let seg = self
            .cumulative
            .windows(2)
            .position(|w| s <= w[1])
            .unwrap_or(self.points.len() - 2);
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let u = if len > 0.0 {
            (s - self.cumulative[seg]) / len
        } else {
            0.0
        };
        let p = EnuPoint::new(
            a.east + u * (b.east - a.east),
            a.north + u * (b.north - a.north),
            a.up + u * (b.up - a.up),
        );
        let (de, dn) = (b.east - a.east, b.north - a.north);
        let norm = de.hypot(dn).max(f64::MIN_POSITIVE);
        (p, [-dn / norm, de / norm])
    }
}

fn fly(proc: &Procedure, line: &Polyline, lateral: f64, vertical: f64, taper: f64) -> Vec<EnuPoint> {
    let total = line.length();
    let floor = proc.waypoints.iter().map(|w| w.up).fold(f64::INFINITY, f64::min);
    let mut s = 0.0;
    let mut out = Vec::new();
    loop {
        let (c, n) = line.at(s);
        let fade = if taper > 0.0 {
            ((c.up - floor) / taper).clamp(0.0, 1.0)
        } else {
            1.0
        };
        out.push(EnuPoint::new(
            c.east + fade * lateral * n[0],
            c.north + fade * lateral * n[1],
            c.up + fade * vertical,
        ));
        if s >= total {
            break;
        }
        s = (s + proc.speed.speed_at(s, total)).min(total);
    }
    out
}

/// Flights on every procedure with exponential inter-arrival times and
/// per-flight Gaussian lateral and vertical offsets from the centreline.
fn generate(g: &GeneratorConfig, from: i64, to: i64, seed: u64) -> Vec<TrafficTrack> {
    let mut out = Vec::new();
    for (pi, proc) in g.procedures.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pi as u64 + 1);
        let line = Polyline::new(&proc.waypoints);
        let gap = Exp::new(proc.flights_per_hour / 3600.0).expect("positive rate");
        let lat = Normal::new(0.0, g.lateral_sigma_m).expect("finite sigma");
        let vert = Normal::new(0.0, g.vertical_sigma_m).expect("finite sigma");
        let mut t = from as f64 + rng.random_range(0.0..1.0) * 60.0;
        let mut n = 0usize;
        while t < to as f64 {
            let points = fly(
                proc,
                &line,
                lat.sample(&mut rng),
                vert.sample(&mut rng),
                g.offset_taper_m,
            );
            out.push(TrafficTrack {
                id: format!("{}-{n:05}", proc.name),
                kind: proc.kind,
                start: t.round() as i64,
                points,
            });
            n += 1;
            t += gap.sample(&mut rng);
        }
    }
    out
}
