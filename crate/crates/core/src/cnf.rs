//! Conditional normalizing flow built from affine coupling layers.
//!
//! A coupling layer passes the first `d` coordinates through and maps the
//! rest as `y_b = x_b * exp(s(x_a, h)) + t(x_a, h)`. Its Jacobian is
//! triangular, so `log|det J| = sum(s)`. Layers are separated by a fixed
//! rotation of the coordinates so every coordinate gets transformed.
//!
//! The stack maps base samples `z ~ N(0, I)` to data (`forward`); density
//! evaluation runs the inverse from data to base and subtracts the forward
//! log-determinants.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::nn::Mlp;

pub const DEFAULT_FLOW_LAYERS: usize = 8;
pub const DEFAULT_FLOW_WIDTH: usize = 128;
pub const DEFAULT_SCALE_CLAMP: f64 = 3.0;
/// Initial weight gain of the last layer of the scale and shift nets; keeps
/// a freshly initialised flow close to the identity.
pub const OUTPUT_LAYER_GAIN: f64 = 0.1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CnfError {
    #[error("numeric overflow in flow evaluation")]
    NumericOverflow,
    #[error("dimension mismatch: expected {expected} {what}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("sample count must be at least 1")]
    NoSamples,
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), CnfError> {
    if expected != actual {
        return Err(CnfError::Dimension { what, expected, actual });
    }
    Ok(())
}

/// Standard normal log-density of `z`.
pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub dim: usize,
    /// Size of the pass-through block.
    pub split: usize,
    pub cond_dim: usize,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    /// `s` is squashed to `c * tanh(s / c)` when set.
    pub scale_clamp: Option<f64>,
}

impl CouplingLayer {
    /// Pass-through block of `dim / 2`. A one-dimensional layer has an empty
    /// pass-through block and is conditioned on `h` alone.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cond_dim: usize,
        width: usize,
        scale_clamp: Option<f64>,
        rng: &mut R,
    ) -> Self {
        assert!(dim >= 1);
        let split = dim / 2;
        let widths = [split + cond_dim, width, width, dim - split];
        let scale_net = Mlp::init(store, &format!("{name}.scale"), &widths, OUTPUT_LAYER_GAIN, rng);
        let shift_net = Mlp::init(store, &format!("{name}.shift"), &widths, OUTPUT_LAYER_GAIN, rng);
        Self {
            dim,
            split,
            cond_dim,
            scale_net,
            shift_net,
            scale_clamp,
        }
    }

    fn scale_and_shift(&self, tape: &mut Tape<'_>, pass: Var, h: Var) -> (Var, Var) {
        let inp = tape.concat(&[pass, h]);
        let raw = self.scale_net.forward(tape, inp);
        let s = match self.scale_clamp {
            Some(c) => {
                let scaled = tape.scale(raw, 1.0 / c);
                let squashed = tape.tanh(scaled);
                tape.scale(squashed, c)
            }
            None => raw,
        };
        let t = self.shift_net.forward(tape, inp);
        (s, t)
    }

    /// Returns `(y, log|det dy/dx|)`.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> (Var, Var) {
        let d = self.split;
        let pass = tape.slice(x, 0, d);
        let moved = tape.slice(x, d, self.dim - d);
        let (s, t) = self.scale_and_shift(tape, pass, h);
        let es = tape.exp(s);
        let scaled = tape.mul(moved, es);
        let yb = tape.add(scaled, t);
        let y = tape.concat(&[pass, yb]);
        let logdet = tape.sum(s);
        (y, logdet)
    }

    /// Returns `(x, log|det dy/dx|)` evaluated at the recovered `x`, i.e.
    /// the forward log-determinant (the inverse contributes its negation).
    pub fn inverse_on_tape(&self, tape: &mut Tape<'_>, y: Var, h: Var) -> (Var, Var) {
        let d = self.split;
        let pass = tape.slice(y, 0, d);
        let moved = tape.slice(y, d, self.dim - d);
        let (s, t) = self.scale_and_shift(tape, pass, h);
        let centered = tape.sub(moved, t);
        let neg_s = tape.scale(s, -1.0);
        let inv_scale = tape.exp(neg_s);
        let xb = tape.mul(centered, inv_scale);
        let x = tape.concat(&[pass, xb]);
        let logdet = tape.sum(s);
        (x, logdet)
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<(), CnfError> {
        check_len("flow coordinates", self.dim, x.len())?;
        check_len("condition entries", self.cond_dim, h.len())
    }
}

fn finite(v: &[f64]) -> Result<(), CnfError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CnfError::NumericOverflow)
    }
}

/// One coupling layer applied in the generative direction.
pub fn coupling_forward(
    params: &ParamStore,
    layer: &CouplingLayer,
    x: &[f64],
    h: &[f64],
) -> Result<(Vec<f64>, f64), CnfError> {
    layer.check(x, h)?;
    let mut tape = Tape::new(params);
    let xv = tape.input(x.to_vec());
    let hv = tape.input(h.to_vec());
    let (y, ld) = layer.forward_on_tape(&mut tape, xv, hv);
    let y = tape.value(y).to_vec();
    let ld = tape.scalar(ld);
    finite(&y)?;
    finite(&[ld])?;
    Ok((y, ld))
}

pub fn coupling_inverse(
    params: &ParamStore,
    layer: &CouplingLayer,
    y: &[f64],
    h: &[f64],
) -> Result<Vec<f64>, CnfError> {
    layer.check(y, h)?;
    let mut tape = Tape::new(params);
    let yv = tape.input(y.to_vec());
    let hv = tape.input(h.to_vec());
    let (x, _) = layer.inverse_on_tape(&mut tape, yv, hv);
    let x = tape.value(x).to_vec();
    finite(&x)?;
    Ok(x)
}

/// A sample drawn from the flow with its exact log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub value: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub dim: usize,
    pub cond_dim: usize,
    pub layers: Vec<CouplingLayer>,
    /// Applied between consecutive layers in the generative direction:
    /// `out[i] = in[permutation[i]]`.
    pub permutation: Vec<usize>,
    pub inverse_permutation: Vec<usize>,
}

/// Rotation that moves the first `split` coordinates to the back; for an
/// even dimension this swaps the two halves.
pub fn swap_halves(dim: usize, split: usize) -> Vec<usize> {
    (0..dim).map(|i| (i + split) % dim.max(1)).collect()
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

impl FlowStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        cond_dim: usize,
        num_layers: usize,
        width: usize,
        scale_clamp: Option<f64>,
        rng: &mut R,
    ) -> Self {
        assert!(num_layers >= 1);
        let layers: Vec<_> = (0..num_layers)
            .map(|i| {
                CouplingLayer::init(
                    store,
                    &format!("flow.coupling{i}"),
                    dim,
                    cond_dim,
                    width,
                    scale_clamp,
                    rng,
                )
            })
            .collect();
        let permutation = swap_halves(dim, layers[0].split);
        let inverse_permutation = invert_permutation(&permutation);
        Self {
            dim,
            cond_dim,
            layers,
            permutation,
            inverse_permutation,
        }
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<(), CnfError> {
        check_len("flow coordinates", self.dim, x.len())?;
        check_len("condition entries", self.cond_dim, h.len())
    }

    /// Base to data. Returns `(x, sum of forward log-determinants)`.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, z: Var, h: Var) -> (Var, Var) {
        let mut x = z;
        let mut logdets = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward_on_tape(tape, x, h);
            logdets.push(ld);
            x = if i + 1 < self.layers.len() {
                tape.gather(y, &self.permutation)
            } else {
                y
            };
        }
        let all = tape.concat(&logdets);
        let total = tape.sum(all);
        (x, total)
    }

    /// Data to base. Returns `(z, sum of forward log-determinants)`.
    pub fn inverse_on_tape(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> (Var, Var) {
        let mut y = x;
        let mut logdets = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                y = tape.gather(y, &self.inverse_permutation);
            }
            let (prev, ld) = layer.inverse_on_tape(tape, y, h);
            logdets.push(ld);
            y = prev;
        }
        let all = tape.concat(&logdets);
        let total = tape.sum(all);
        (y, total)
    }

    /// `log p(x | h)` as a tape node.
    pub fn log_density_on_tape(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Var {
        let (z, logdet) = self.inverse_on_tape(tape, x, h);
        let sq = tape.sum_squares(z);
        let base = tape.scale(sq, -0.5);
        let neg_ld = tape.scale(logdet, -1.0);
        let lp = tape.add(base, neg_ld);
        let c = tape.input(vec![-0.5 * self.dim as f64 * LN_2PI]);
        tape.add(lp, c)
    }

    pub fn forward(&self, params: &ParamStore, z: &[f64], h: &[f64]) -> Result<(Vec<f64>, f64), CnfError> {
        self.check(z, h)?;
        let mut tape = Tape::new(params);
        let zv = tape.input(z.to_vec());
        let hv = tape.input(h.to_vec());
        let (x, ld) = self.forward_on_tape(&mut tape, zv, hv);
        let x = tape.value(x).to_vec();
        let ld = tape.scalar(ld);
        finite(&x)?;
        finite(&[ld])?;
        Ok((x, ld))
    }

    pub fn inverse(&self, params: &ParamStore, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, f64), CnfError> {
        self.check(x, h)?;
        let mut tape = Tape::new(params);
        let xv = tape.input(x.to_vec());
        let hv = tape.input(h.to_vec());
        let (z, ld) = self.inverse_on_tape(&mut tape, xv, hv);
        let z = tape.value(z).to_vec();
        let ld = tape.scalar(ld);
        finite(&z)?;
        finite(&[ld])?;
        Ok((z, ld))
    }

    /// Exact conditional log-density `log p(y | h)`.
    pub fn log_density(&self, params: &ParamStore, y: &[f64], h: &[f64]) -> Result<f64, CnfError> {
        let (z, logdet) = self.inverse(params, y, h)?;
        let lp = standard_normal_log_pdf(&z) - logdet;
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(CnfError::NumericOverflow)
        }
    }

    /// Draws `n` samples conditioned on `h`, each with its log-density.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        h: &[f64],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<FlowSample>, CnfError> {
        if n == 0 {
            return Err(CnfError::NoSamples);
        }
        check_len("condition entries", self.cond_dim, h.len())?;
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let (x, logdet) = self.forward(params, &z, h)?;
                let log_prob = standard_normal_log_pdf(&z) - logdet;
                if !log_prob.is_finite() {
                    return Err(CnfError::NumericOverflow);
                }
                Ok(FlowSample { value: x, log_prob })
            })
            .collect()
    }
}
