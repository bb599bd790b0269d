//! Displacement metrics and the evaluation harness comparing the flow
//! model against the deterministic baselines.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::EnuPoint;
use crate::model::{ModelError, ModelKind, TrajectoryModel};
use crate::trajdata::{denormalize_target, DataError, Example, InputConfig, NormStats};

/// Samples drawn from the flow per test window.
pub const DEFAULT_EVAL_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("length mismatch: sample has {sample} points, truth has {truth}")]
    LengthMismatch { sample: usize, truth: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn check(samples: &[Vec<EnuPoint>], truth: &[EnuPoint]) -> Result<(), EvalError> {
    if samples.is_empty() || truth.is_empty() {
        return Err(EvalError::NoSamples);
    }
    for s in samples {
        if s.len() != truth.len() {
            return Err(EvalError::LengthMismatch {
                sample: s.len(),
                truth: truth.len(),
            });
        }
    }
    Ok(())
}

/// Mean per-step Euclidean error of one path.
pub fn ade(sample: &[EnuPoint], truth: &[EnuPoint]) -> Result<f64, EvalError> {
    min_ade(std::slice::from_ref(&sample.to_vec()), truth)
}

/// Smallest mean per-step Euclidean error over the samples.
pub fn min_ade(samples: &[Vec<EnuPoint>], truth: &[EnuPoint]) -> Result<f64, EvalError> {
    check(samples, truth)?;
    Ok(samples
        .iter()
        .map(|s| s.iter().zip(truth).map(|(a, b)| a.distance(b)).sum::<f64>() / truth.len() as f64)
        .fold(f64::INFINITY, f64::min))
}

/// Smallest endpoint error over the samples.
pub fn min_fde(samples: &[Vec<EnuPoint>], truth: &[EnuPoint]) -> Result<f64, EvalError> {
    check(samples, truth)?;
    let end = truth.last().expect("non-empty truth");
    Ok(samples
        .iter()
        .map(|s| s.last().expect("checked length").distance(end))
        .fold(f64::INFINITY, f64::min))
}

/// Predicted local-frame paths for one window: `k` flow samples, or the
/// single output of a deterministic model.
pub fn predict_paths(
    model: &TrajectoryModel,
    example: &Example,
    stats: &NormStats,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<EnuPoint>>, EvalError> {
    if model.kind.is_probabilistic() {
        model
            .sample(&example.features, k, rng)?
            .into_iter()
            .map(|s| Ok(denormalize_target(&s.value, example.anchor, stats)?))
            .collect()
    } else {
        let flat = model.predict_deterministic(&example.features)?;
        Ok(vec![denormalize_target(&flat, example.anchor, stats)?])
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub input_config: String,
    #[serde(rename = "minADE_m")]
    pub min_ade_m: f64,
    #[serde(rename = "minFDE_m")]
    pub min_fde_m: f64,
}

/// Per-window RNG stream, independent of evaluation order.
fn window_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Mean minADE/minFDE over the test windows. The flow is scored over `k`
/// samples per window; deterministic models always use their one output.
pub fn evaluate(
    model: &TrajectoryModel,
    stats: &NormStats,
    test: &[Example],
    k: usize,
    seed: u64,
) -> Result<MetricRow, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if k == 0 {
        return Err(EvalError::NoSamples);
    }
    let per: Vec<Result<(f64, f64), EvalError>> = test
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = window_rng(seed, i);
            let paths = predict_paths(model, ex, stats, k, &mut rng)?;
            Ok((min_ade(&paths, &ex.future)?, min_fde(&paths, &ex.future)?))
        })
        .collect();
    let (mut sa, mut sf) = (0.0, 0.0);
    for r in per {
        let (a, f) = r?;
        sa += a;
        sf += f;
    }
    let n = test.len() as f64;
    Ok(MetricRow {
        model: model.kind.label().to_string(),
        input_config: model.dims.input.label().to_string(),
        min_ade_m: sa / n,
        min_fde_m: sf / n,
    })
}

/// Sample count used for a model kind at report time.
pub fn samples_for(kind: ModelKind, k: usize) -> usize {
    if kind.is_probabilistic() {
        k
    } else {
        1
    }
}

/// Report rows ordered by input configuration, then model, as in the
/// comparison table.
pub fn sort_rows(rows: &mut [MetricRow]) {
    let cfg_rank = |s: &str| InputConfig::ALL.iter().position(|c| c.label() == s);
    let model_rank = |s: &str| ModelKind::ALL.iter().position(|m| m.label() == s);
    rows.sort_by_key(|r| (cfg_rank(&r.input_config), model_rank(&r.model)));
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
