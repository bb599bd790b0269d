//! Condition encoder: three stacked gated recurrent layers that summarise
//! the observation feature sequence into the condition vector.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::nn::GruCell;

pub const ENCODER_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("expected {expected} {what}, got {actual}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder {
    pub layers: Vec<GruCell>,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl ConditionEncoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let layers = (0..ENCODER_LAYERS)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden_dim };
                GruCell::init(store, &format!("encoder.gru{l}"), in_dim, hidden_dim, rng)
            })
            .collect();
        Self {
            layers,
            input_dim,
            hidden_dim,
        }
    }

    pub fn check_features(&self, features: &[Vec<f64>]) -> Result<(), ShapeError> {
        if features.is_empty() {
            return Err(ShapeError::Empty("feature sequence"));
        }
        for row in features {
            if row.len() != self.input_dim {
                return Err(ShapeError::Mismatch {
                    what: "feature columns",
                    expected: self.input_dim,
                    actual: row.len(),
                });
            }
        }
        Ok(())
    }

    /// Runs the recurrence over `inputs` (one node per time step) from a
    /// zero initial state and returns the top layer's final hidden state.
    pub fn encode_vars(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Var {
        let mut hidden: Vec<Var> = (0..self.layers.len())
            .map(|_| tape.input(vec![0.0; self.hidden_dim]))
            .collect();
        for &x in inputs {
            let mut below = x;
            for (cell, h) in self.layers.iter().zip(hidden.iter_mut()) {
                *h = cell.step(tape, below, *h);
                below = *h;
            }
        }
        *hidden.last().expect("encoder has layers")
    }

    /// Pushes `features` onto the tape and encodes them. Returns the input
    /// nodes alongside the condition vector.
    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, features: &[Vec<f64>]) -> Result<(Vec<Var>, Var), ShapeError> {
        self.check_features(features)?;
        let inputs: Vec<Var> = features.iter().map(|r| tape.input(r.clone())).collect();
        let h = self.encode_vars(tape, &inputs);
        Ok((inputs, h))
    }

    /// Condition vector for an `H x F` feature sequence.
    pub fn encode(&self, params: &ParamStore, features: &[Vec<f64>]) -> Result<Vec<f64>, ShapeError> {
        let mut tape = Tape::new(params);
        let (_, h) = self.encode_on_tape(&mut tape, features)?;
        Ok(tape.value(h).to_vec())
    }
}
