//! Layer building blocks on top of the tape: fully connected layers,
//! multi-layer perceptrons, and a gated recurrent cell.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};

fn uniform_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        })
        .collect();
    Tensor { rows, cols, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    /// Weights and biases uniform in `±bound`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            uniform_tensor(output_dim, input_dim, bound, rng),
        );
        let bias = store.register(format!("{name}.bias"), uniform_tensor(output_dim, 1, bound, rng));
        Self {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    /// Default fan-in scaled initialisation.
    pub fn init_default<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        Self::init(store, name, input_dim, output_dim, bound, rng)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.affine(self.weight, Some(self.bias), x)
    }
}

/// Fully connected stack with `tanh` between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer boundary, e.g. `[in, hidden, hidden, out]`
    /// gives three fully connected layers. The last layer is initialised
    /// with its bound multiplied by `output_gain`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let bound = 1.0 / (widths[i].max(1) as f64).sqrt();
                let bound = if i + 1 == n { bound * output_gain } else { bound };
                Linear::init(store, &format!("{name}.{i}"), widths[i], widths[i + 1], bound, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").output_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(Wz [x, h] + bz)
/// r  = sigmoid(Wr [x, h] + br)
/// n  = tanh(Wn [x, r * h] + bn)
/// h' = z * h + (1 - z) * n
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    /// Parameters uniform in `±1/sqrt(hidden)`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let width = input_dim + hidden_dim;
        let update = Linear::init(store, &format!("{name}.update"), width, hidden_dim, bound, rng);
        let reset = Linear::init(store, &format!("{name}.reset"), width, hidden_dim, bound, rng);
        let candidate = Linear::init(store, &format!("{name}.candidate"), width, hidden_dim, bound, rng);
        Self {
            update,
            reset,
            candidate,
            input_dim,
            hidden_dim,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Var {
        let xh = tape.concat(&[x, h]);
        let z_pre = self.update.forward(tape, xh);
        let z = tape.sigmoid(z_pre);
        let r_pre = self.reset.forward(tape, xh);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let xrh = tape.concat(&[x, rh]);
        let n_pre = self.candidate.forward(tape, xrh);
        let n = tape.tanh(n_pre);
        // z * h + (1 - z) * n == n + z * (h - n)
        let diff = tape.sub(h, n);
        let gated = tape.mul(z, diff);
        tape.add(n, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_registration_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, "m", &[4, 8, 8, 3], 1.0, &mut rng);
        assert_eq!(store.len(), 6);
        assert_eq!(store.names()[0], "m.0.weight");
        assert_eq!(mlp.output_dim(), 3);
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.1, 0.2, 0.3, 0.4]);
        let y = mlp.forward(&mut tape, x);
        assert_eq!(tape.value(y).len(), 3);
    }

    #[test]
    fn gru_zero_parameters_blend_to_half_previous_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cell = GruCell::init(&mut store, "g", 2, 3, &mut rng);
        for t in store.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![1.0, -1.0]);
        let h = tape.input(vec![0.4, -0.2, 0.0]);
        let h1 = cell.step(&mut tape, x, h);
        // z = 0.5, n = tanh(0) = 0  =>  h' = 0.5 h
        assert_eq!(tape.value(h1), &[0.2, -0.1, 0.0]);
    }
}
