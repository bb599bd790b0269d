//! Joint training of encoder and decoder: losses, gradients, SGD with
//! momentum and global-norm clipping, validation-based model selection, and
//! checkpoint persistence.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamGrads, Tape};
use crate::model::{ModelDims, ModelError, ModelKind, NamedTensor, TrajectoryModel};
use crate::trajdata::{Example, NormStats};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Examples per parallel gradient chunk; fixed so the reduction order does
/// not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch})")]
    Diverged { epoch: usize, last_finite_epoch: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nll,
    Mse,
}

impl Objective {
    pub fn for_kind(kind: ModelKind) -> Self {
        if kind.is_probabilistic() {
            Self::Nll
        } else {
            Self::Mse
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub momentum: f64,
    pub objective: Objective,
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 100,
            seed: 0,
            clip_norm: 5.0,
            momentum: 0.9,
            objective: Objective::for_kind(kind),
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return bad("learning rate and clip norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.objective != Objective::for_kind(kind) {
            return bad(format!("{kind} models train with {:?}", Objective::for_kind(kind)));
        }
        Ok(())
    }
}

fn batch_loss_and_grads(
    model: &TrajectoryModel,
    batch: &[&Example],
    with_grads: bool,
) -> Result<(f64, Option<ParamGrads>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<Result<(f64, Option<ParamGrads>), ModelError>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = with_grads.then(|| model.params.zero_grads());
            let mut loss = 0.0;
            for ex in chunk {
                let mut tape = Tape::new(&model.params);
                let l = model.loss_on_tape(&mut tape, &ex.features, &ex.target)?;
                loss += tape.scalar(l);
                if let Some(g) = grads.as_mut() {
                    tape.backward(l, scale, g);
                }
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<ParamGrads> = None;
    for p in partials {
        let (l, g) = p?;
        total += l;
        match (&mut acc, g) {
            (None, g) => acc = g,
            (Some(a), Some(g)) => a.add_assign(&g),
            (Some(_), None) => {}
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok((loss, acc))
}

/// Mean `-log p(y | g(x))` over the batch.
pub fn nll_loss(model: &TrajectoryModel, batch: &[Example]) -> Result<f64, TrainError> {
    if !model.kind.is_probabilistic() {
        return Err(ModelError::Unsupported(model.kind).into());
    }
    let refs: Vec<&Example> = batch.iter().collect();
    Ok(batch_loss_and_grads(model, &refs, false)?.0)
}

/// Mean squared error over all normalised `T x 3` outputs.
pub fn mse_loss(model: &TrajectoryModel, batch: &[Example]) -> Result<f64, TrainError> {
    if model.kind.is_probabilistic() {
        return Err(ModelError::Unsupported(model.kind).into());
    }
    let refs: Vec<&Example> = batch.iter().collect();
    Ok(batch_loss_and_grads(model, &refs, false)?.0)
}

/// Loss under the model's own objective.
pub fn batch_loss(model: &TrajectoryModel, batch: &[Example]) -> Result<f64, TrainError> {
    let refs: Vec<&Example> = batch.iter().collect();
    Ok(batch_loss_and_grads(model, &refs, false)?.0)
}

/// Mean loss over the batch and its gradient for every parameter tensor.
pub fn compute_gradients(model: &TrajectoryModel, batch: &[Example]) -> Result<(f64, ParamGrads), TrainError> {
    let refs: Vec<&Example> = batch.iter().collect();
    let (loss, grads) = batch_loss_and_grads(model, &refs, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// SGD with momentum and global-norm clipping.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: ParamGrads,
}

impl MomentumSgd {
    pub fn new(model: &TrajectoryModel, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            clip_norm: cfg.clip_norm,
            velocity: model.params.zero_grads(),
        }
    }

    pub fn step(&mut self, model: &mut TrajectoryModel, grads: &mut ParamGrads) {
        let norm = grads.global_norm();
        if norm > self.clip_norm {
            grads.scale(self.clip_norm / norm);
        }
        for ((p, v), g) in model
            .params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.velocity.tensors)
            .zip(&grads.tensors)
        {
            for ((pi, vi), gi) in p.data.iter_mut().zip(&mut v.data).zip(&g.data) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
    }
}

/// Index of the smallest finite score; ties resolve to the earliest.
pub fn best_epoch(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if b <= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: TrajectoryModel,
    /// Validation score before training (index 0) and after every epoch.
    pub val_history: Vec<f64>,
    /// Mean training loss per epoch (index 0 unused and set to NaN).
    pub train_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_score: f64,
}

/// Trains on `train`, scores `val` after every epoch, and returns the
/// parameters of the best-scoring epoch (epoch 0 is the initial model).
pub fn fit(
    mut model: TrajectoryModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<FitReport, TrainError> {
    cfg.validate(model.kind)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = MomentumSgd::new(&model, cfg);
    let initial = batch_loss(&model, val).map_err(|_| TrainError::Diverged {
        epoch: 0,
        last_finite_epoch: 0,
    })?;
    let mut val_history = vec![initial];
    let mut train_history = vec![f64::NAN];
    let mut best = (0usize, initial, model.params.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let diverged = TrainError::Diverged {
            epoch,
            last_finite_epoch: epoch - 1,
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = match batch_loss_and_grads(&model, &batch, true) {
                Ok(r) => r,
                Err(TrainError::NonFiniteLoss) => return Err(diverged),
                Err(e) => return Err(e),
            };
            let mut grads = grads.expect("gradients requested");
            if !grads.global_norm().is_finite() {
                return Err(diverged);
            }
            opt.step(&mut model, &mut grads);
            epoch_loss += loss * batch.len() as f64;
        }
        if !model.params.all_finite() {
            return Err(diverged);
        }
        let score = match batch_loss(&model, val) {
            Ok(s) => s,
            Err(TrainError::NonFiniteLoss) => return Err(diverged),
            Err(e) => return Err(e),
        };
        val_history.push(score);
        train_history.push(epoch_loss / train.len() as f64);
        if score < best.1 {
            best = (epoch, score, model.params.clone());
        }
    }
    model.params = best.2;
    Ok(FitReport {
        model,
        val_history,
        train_history,
        best_epoch: best.0,
        best_score: best.1,
    })
}

/// Persisted model: layout, parameters, normalisation and training echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub tensors: Vec<NamedTensor>,
    pub norm_stats: NormStats,
    pub val_score: f64,
    pub train_config: Option<TrainConfig>,
    pub val_history: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        model: &TrajectoryModel,
        norm_stats: NormStats,
        val_score: f64,
        train_config: Option<TrainConfig>,
        val_history: Vec<f64>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: model.kind,
            dims: model.dims,
            tensors: model.named_tensors(),
            norm_stats,
            val_score,
            train_config,
            val_history,
        }
    }

    pub fn from_fit(report: &FitReport, norm_stats: NormStats, cfg: &TrainConfig) -> Self {
        Self::new(
            &report.model,
            norm_stats,
            report.best_score,
            Some(*cfg),
            report.val_history.clone(),
        )
    }

    pub fn model(&self) -> Result<TrajectoryModel, TrainError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        self.norm_stats
            .validate()
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(TrajectoryModel::from_tensors(self.kind, self.dims, &self.tensors)?)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), TrainError> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, TrainError> {
        let ck: Self = serde_json::from_reader(r)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
