//! Encoder/decoder model assemblies: the flow model and the two
//! deterministic baselines share the recurrent condition encoder.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::cnf::{CnfError, FlowSample, FlowStack};
use crate::nn::{GruCell, Linear, Mlp};
use crate::seqenc::{ConditionEncoder, ShapeError};
use crate::trajdata::InputConfig;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Flow(#[from] CnfError),
    #[error("{0} models do not support this operation")]
    Unsupported(ModelKind),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("non-finite model output")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Flow,
    GruDecoder,
    MlpDecoder,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [Self::GruDecoder, Self::MlpDecoder, Self::Flow];

    /// Row label in metric reports.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Flow => "GRU+CNF",
            Self::GruDecoder => "GRU+GRU",
            Self::MlpDecoder => "GRU+MLP",
        }
    }

    pub fn is_probabilistic(&self) -> bool {
        matches!(self, Self::Flow)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub history: usize,
    pub horizon: usize,
    pub input: InputConfig,
    pub hidden: usize,
    pub flow_layers: usize,
    pub flow_width: usize,
    pub mlp_width: usize,
    pub scale_clamp: Option<f64>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            history: crate::trajdata::HISTORY_LEN,
            horizon: crate::trajdata::HORIZON_LEN,
            input: InputConfig::AbsDev,
            hidden: crate::seqenc::DEFAULT_HIDDEN,
            flow_layers: crate::cnf::DEFAULT_FLOW_LAYERS,
            flow_width: crate::cnf::DEFAULT_FLOW_WIDTH,
            mlp_width: 128,
            scale_clamp: Some(crate::cnf::DEFAULT_SCALE_CLAMP),
        }
    }
}

impl ModelDims {
    /// Flattened target dimension `3T`.
    pub fn target_dim(&self) -> usize {
        3 * self.horizon
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Layout(m.to_string()));
        if self.history == 0 || self.horizon == 0 {
            return bad("history and horizon must be positive");
        }
        if self.hidden == 0 || self.flow_layers == 0 || self.flow_width == 0 || self.mlp_width == 0 {
            return bad("layer sizes must be positive");
        }
        if let Some(c) = self.scale_clamp {
            if !(c > 0.0 && c.is_finite()) {
                return bad("scale clamp must be positive");
            }
        }
        Ok(())
    }
}

/// Recurrent baseline decoder: starts from the condition vector and feeds
/// each predicted point back as the next input.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDecoder {
    pub cell: GruCell,
    pub output: Linear,
    pub horizon: usize,
}

impl GruDecoder {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, horizon: usize, rng: &mut R) -> Self {
        let cell = GruCell::init(store, "decoder.gru", 3, hidden, rng);
        let output = Linear::init_default(store, "decoder.output", hidden, 3, rng);
        Self { cell, output, horizon }
    }

    fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let mut state = h;
        let mut x = tape.input(vec![0.0; 3]);
        let mut outputs = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            state = self.cell.step(tape, x, state);
            x = self.output.forward(tape, state);
            outputs.push(x);
        }
        tape.concat(&outputs)
    }
}

/// Three fully connected layers from the condition vector to `T x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDecoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Flow(FlowStack),
    Gru(GruDecoder),
    Mlp(MlpDecoder),
}

/// Tensor with its registered name, as persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub params: ParamStore,
    pub encoder: ConditionEncoder,
    pub decoder: Decoder,
}

impl TrajectoryModel {
    pub fn new(kind: ModelKind, dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = ConditionEncoder::init(&mut params, dims.input.width(), dims.hidden, &mut rng);
        let decoder = match kind {
            ModelKind::Flow => Decoder::Flow(FlowStack::init(
                &mut params,
                dims.target_dim(),
                dims.hidden,
                dims.flow_layers,
                dims.flow_width,
                dims.scale_clamp,
                &mut rng,
            )),
            ModelKind::GruDecoder => Decoder::Gru(GruDecoder::init(&mut params, dims.hidden, dims.horizon, &mut rng)),
            ModelKind::MlpDecoder => Decoder::Mlp(MlpDecoder {
                mlp: Mlp::init(
                    &mut params,
                    "decoder.mlp",
                    &[dims.hidden, dims.mlp_width, dims.mlp_width, dims.target_dim()],
                    1.0,
                    &mut rng,
                ),
            }),
        };
        Ok(Self {
            kind,
            dims,
            params,
            encoder,
            decoder,
        })
    }

    /// Rebuilds a model from persisted tensors; names and shapes must match
    /// the layout implied by `kind` and `dims` exactly.
    pub fn from_tensors(kind: ModelKind, dims: ModelDims, tensors: &[NamedTensor]) -> Result<Self, ModelError> {
        let mut model = Self::new(kind, dims, 0)?;
        if tensors.len() != model.params.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        let names = model.params.names().to_vec();
        for ((name, slot), nt) in names.iter().zip(model.params.tensors_mut()).zip(tensors) {
            if *name != nt.name || slot.rows != nt.rows || slot.cols != nt.cols || nt.data.len() != nt.rows * nt.cols {
                return Err(ModelError::Layout(format!(
                    "tensor '{}' ({}x{}) does not match expected '{}' ({}x{})",
                    nt.name, nt.rows, nt.cols, name, slot.rows, slot.cols
                )));
            }
            slot.data.clone_from(&nt.data);
        }
        Ok(model)
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|(name, t): (&str, &Tensor)| NamedTensor {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
                data: t.data.clone(),
            })
            .collect()
    }

    fn check_example(&self, features: &[Vec<f64>]) -> Result<(), ModelError> {
        if features.len() != self.dims.history {
            return Err(ShapeError::Mismatch {
                what: "observation steps",
                expected: self.dims.history,
                actual: features.len(),
            }
            .into());
        }
        self.encoder.check_features(features)?;
        Ok(())
    }

    fn check_target(&self, target: &[f64]) -> Result<(), ModelError> {
        if target.len() != self.dims.target_dim() {
            return Err(ShapeError::Mismatch {
                what: "target entries",
                expected: self.dims.target_dim(),
                actual: target.len(),
            }
            .into());
        }
        Ok(())
    }

    /// Per-example training loss as a tape node: `-log p(y | h)` for the
    /// flow, mean squared error over all `T x 3` outputs for the baselines.
    pub fn loss_on_tape(&self, tape: &mut Tape<'_>, features: &[Vec<f64>], target: &[f64]) -> Result<Var, ModelError> {
        self.check_example(features)?;
        self.check_target(target)?;
        let (_, h) = self.encoder.encode_on_tape(tape, features)?;
        let y = tape.input(target.to_vec());
        Ok(match &self.decoder {
            Decoder::Flow(flow) => {
                let lp = flow.log_density_on_tape(tape, y, h);
                tape.scale(lp, -1.0)
            }
            Decoder::Gru(dec) => {
                let pred = dec.forward(tape, h);
                mse_on_tape(tape, pred, y)
            }
            Decoder::Mlp(dec) => {
                let pred = dec.mlp.forward(tape, h);
                mse_on_tape(tape, pred, y)
            }
        })
    }

    pub fn condition(&self, features: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        self.check_example(features)?;
        Ok(self.encoder.encode(&self.params, features)?)
    }

    /// Single normalised `T x 3` prediction (flattened) from a baseline.
    pub fn predict_deterministic(&self, features: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        self.check_example(features)?;
        let mut tape = Tape::new(&self.params);
        let (_, h) = self.encoder.encode_on_tape(&mut tape, features)?;
        let out = match &self.decoder {
            Decoder::Flow(_) => return Err(ModelError::Unsupported(self.kind)),
            Decoder::Gru(dec) => dec.forward(&mut tape, h),
            Decoder::Mlp(dec) => dec.mlp.forward(&mut tape, h),
        };
        let v = tape.value(out).to_vec();
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(ModelError::NonFinite)
        }
    }

    pub fn flow(&self) -> Option<&FlowStack> {
        match &self.decoder {
            Decoder::Flow(f) => Some(f),
            _ => None,
        }
    }

    /// `k` normalised samples from the flow decoder.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        features: &[Vec<f64>],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<FlowSample>, ModelError> {
        let flow = self.flow().ok_or(ModelError::Unsupported(self.kind))?;
        let h = self.condition(features)?;
        Ok(flow.sample(&self.params, &h, k, rng)?)
    }

    /// `log p(target | features)` under the flow decoder.
    pub fn log_density(&self, features: &[Vec<f64>], target: &[f64]) -> Result<f64, ModelError> {
        let flow = self.flow().ok_or(ModelError::Unsupported(self.kind))?;
        self.check_target(target)?;
        let h = self.condition(features)?;
        Ok(flow.log_density(&self.params, target, &h)?)
    }
}

fn mse_on_tape(tape: &mut Tape<'_>, pred: Var, target: Var) -> Var {
    let n = tape.value(pred).len() as f64;
    let diff = tape.sub(pred, target);
    let sq = tape.sum_squares(diff);
    tape.scale(sq, 1.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(input: InputConfig) -> ModelDims {
        ModelDims {
            history: 5,
            horizon: 3,
            input,
            hidden: 8,
            flow_layers: 2,
            flow_width: 8,
            mlp_width: 8,
            scale_clamp: Some(3.0),
        }
    }

    #[test]
    fn tensors_round_trip_through_layout() {
        for kind in ModelKind::ALL {
            let m = TrajectoryModel::new(kind, tiny(InputConfig::AbsDev), 3).unwrap();
            let back = TrajectoryModel::from_tensors(kind, m.dims, &m.named_tensors()).unwrap();
            assert_eq!(back.params, m.params);
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let m = TrajectoryModel::new(ModelKind::Flow, tiny(InputConfig::Abs), 3).unwrap();
        let err = TrajectoryModel::from_tensors(ModelKind::MlpDecoder, m.dims, &m.named_tensors());
        assert!(matches!(err, Err(ModelError::Layout(_))));
    }

    #[test]
    fn deterministic_prediction_shape() {
        let dims = tiny(InputConfig::Dev);
        let feats = vec![vec![0.1, 0.2, 0.3]; 5];
        for kind in [ModelKind::GruDecoder, ModelKind::MlpDecoder] {
            let m = TrajectoryModel::new(kind, dims, 1).unwrap();
            let a = m.predict_deterministic(&feats).unwrap();
            assert_eq!(a.len(), 9);
            assert_eq!(a, m.predict_deterministic(&feats).unwrap());
        }
        let f = TrajectoryModel::new(ModelKind::Flow, dims, 1).unwrap();
        assert!(matches!(
            f.predict_deterministic(&feats),
            Err(ModelError::Unsupported(_))
        ));
        assert!(matches!(
            f.predict_deterministic(&feats[..4]),
            Err(ModelError::Shape(_))
        ));
    }
}
