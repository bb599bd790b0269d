use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{SimMode, SimResult};
use super::SimError;

pub const BUNDLE_FILES: [&str; 4] = ["cdf.csv", "histogram.csv", "delays.csv", "cpa_polar.csv"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub histogram_bin_m: f64,
    pub histogram_max_m: f64,
    pub bearing_bin_deg: f64,
    pub range_bin_m: f64,
    pub range_max_m: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            histogram_bin_m: 250.0,
            histogram_max_m: 5000.0,
            bearing_bin_deg: 30.0,
            range_bin_m: 500.0,
            range_max_m: 4000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub lane: String,
    pub altitude_ft: f64,
    pub mode: SimMode,
    pub min_separation_m: f64,
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub lane: String,
    pub altitude_ft: f64,
    pub mode: SimMode,
    pub bin_start_m: f64,
    /// Empty for the open-ended last bin.
    pub bin_end_m: Option<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub lane: String,
    pub altitude_ft: f64,
    pub mode: SimMode,
    pub flights: u64,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarRow {
    pub mode: SimMode,
    pub bearing_start_deg: f64,
    pub range_start_m: f64,
    pub range_end_m: Option<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub cdf: Vec<CdfRow>,
    pub histogram: Vec<HistogramRow>,
    pub delays: Vec<DelayRow>,
    pub cpa_polar: Vec<PolarRow>,
}

/// Linearly interpolated quantile of sorted values.
pub fn quantile_linear(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Smallest value whose empirical CDF reaches `p`; `None` entries count as
/// infinitely far.
pub fn empirical_quantile(values: &[Option<f64>], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((p.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Whether the `shifted` distribution lies at or right of `reference` at
/// every probability in `probs`.
pub fn cdf_dominates(shifted: &[Option<f64>], reference: &[Option<f64>], probs: &[f64]) -> bool {
    probs
        .iter()
        .all(|&p| empirical_quantile(shifted, p) >= empirical_quantile(reference, p))
}

type GroupKey = (String, u64, SimMode);

fn key(r: &SimResult) -> GroupKey {
    (r.lane_id.clone(), r.altitude_ft.to_bits(), r.mode)
}

/// Tables for a set of simulation results, grouped by lane, altitude and
/// mode in a stable order.
pub fn report(results: &[SimResult], cfg: &ReportConfig) -> Result<ReportBundle, SimError> {
    if results.is_empty() {
        return Err(SimError::NoResults);
    }
    let sizes = [
        cfg.histogram_bin_m,
        cfg.histogram_max_m,
        cfg.bearing_bin_deg,
        cfg.range_bin_m,
        cfg.range_max_m,
    ];
    if !sizes.iter().all(|v| *v > 0.0 && v.is_finite()) || cfg.bearing_bin_deg > 360.0 {
        return Err(SimError::Config("report bin sizes must be positive".into()));
    }
    let mut groups: BTreeMap<GroupKey, Vec<&SimResult>> = BTreeMap::new();
    for r in results {
        groups.entry(key(r)).or_default().push(r);
    }
    let mut out = ReportBundle::default();
    for ((lane, alt_bits, mode), rs) in &groups {
        let altitude_ft = f64::from_bits(*alt_bits);
        let mut seps: Vec<f64> = rs
            .iter()
            .flat_map(|r| r.flights.iter().filter_map(|f| f.min_separation_m))
            .collect();
        seps.sort_by(f64::total_cmp);
        let n = seps.len();
        for (i, s) in seps.iter().enumerate() {
            if i + 1 < n && seps[i + 1] == *s {
                continue;
            }
            out.cdf.push(CdfRow {
                lane: lane.clone(),
                altitude_ft,
                mode: *mode,
                min_separation_m: *s,
                cumulative_fraction: (i + 1) as f64 / n as f64,
            });
        }
        let bins = (cfg.histogram_max_m / cfg.histogram_bin_m).ceil() as usize;
        let mut counts = vec![0u64; bins + 1];
        for s in &seps {
            counts[((s / cfg.histogram_bin_m) as usize).min(bins)] += 1;
        }
        for (b, c) in counts.into_iter().enumerate() {
            out.histogram.push(HistogramRow {
                lane: lane.clone(),
                altitude_ft,
                mode: *mode,
                bin_start_m: b as f64 * cfg.histogram_bin_m,
                bin_end_m: (b < bins).then(|| (b + 1) as f64 * cfg.histogram_bin_m),
                count: c,
            });
        }
        let mut delays: Vec<f64> = rs
            .iter()
            .flat_map(|r| r.flights.iter().filter_map(|f| f.delay_proportion))
            .collect();
        delays.sort_by(f64::total_cmp);
        out.delays.push(DelayRow {
            lane: lane.clone(),
            altitude_ft,
            mode: *mode,
            flights: delays.len() as u64,
            min: delays.first().copied(),
            q1: quantile_linear(&delays, 0.25),
            median: quantile_linear(&delays, 0.5),
            q3: quantile_linear(&delays, 0.75),
            max: delays.last().copied(),
        });
    }

    let bearing_bins = (360.0 / cfg.bearing_bin_deg).ceil() as usize;
    let range_bins = (cfg.range_max_m / cfg.range_bin_m).ceil() as usize;
    let mut polar: BTreeMap<SimMode, Vec<u64>> = BTreeMap::new();
    for r in results {
        let cells = polar
            .entry(r.mode)
            .or_insert_with(|| vec![0; bearing_bins * (range_bins + 1)]);
        for c in r.flights.iter().flat_map(|f| &f.cpa) {
            let Some(b) = c.bearing_deg else { continue };
            let bi = ((b / cfg.bearing_bin_deg) as usize).min(bearing_bins - 1);
            let ri = ((c.range_m / cfg.range_bin_m) as usize).min(range_bins);
            cells[bi * (range_bins + 1) + ri] += 1;
        }
    }
    for (mode, cells) in polar {
        for bi in 0..bearing_bins {
            for ri in 0..=range_bins {
                out.cpa_polar.push(PolarRow {
                    mode,
                    bearing_start_deg: bi as f64 * cfg.bearing_bin_deg,
                    range_start_m: ri as f64 * cfg.range_bin_m,
                    range_end_m: (ri < range_bins).then(|| (ri + 1) as f64 * cfg.range_bin_m),
                    count: cells[bi * (range_bins + 1) + ri],
                });
            }
        }
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the bundle's CSV tables into `dir`; returns the written paths.
pub fn write_bundle(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let paths: Vec<PathBuf> = BUNDLE_FILES.iter().map(|f| dir.join(f)).collect();
    write_csv(&paths[0], &bundle.cdf)?;
    write_csv(&paths[1], &bundle.histogram)?;
    write_csv(&paths[2], &bundle.delays)?;
    write_csv(&paths[3], &bundle.cpa_polar)?;
    Ok(paths)
}
