//! Tape-based reverse-mode differentiation over vector-valued nodes.
//!
//! Every learned component in the crate (recurrent encoder, coupling nets,
//! baseline decoders) is expressed as a sequence of [`Tape`] operations on
//! `Vec<f64>` values. Trainable matrices live in a [`ParamStore`] that the
//! tape borrows immutably; [`Tape::backward`] accumulates parameter
//! gradients into a [`ParamGrads`] buffer of matching shape and returns the
//! adjoints of every node so callers can also read input gradients.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix. Vectors are stored as `rows x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors, registered in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Zero-filled gradient buffer with one tensor per parameter.
    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine { w: ParamId, b: Option<ParamId>, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation so that it can be differentiated.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// `W x + b` with `W` of shape `out x in`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = self.params.get(w);
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            wt.cols,
            xv.len(),
            "affine input width {} does not match weight columns {}",
            xv.len(),
            wt.cols
        );
        let mut out = match b {
            Some(b) => self.params.get(b).data.clone(),
            None => vec![0.0; wt.rows],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wt.data[i * wt.cols..(i + 1) * wt.cols];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(out, Op::Affine { w, b, x })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "elementwise length mismatch");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|p| self.nodes[p.0].value.len()).sum();
        let mut v = Vec::with_capacity(total);
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Elements `start..start + len` of `a`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(v, Op::Slice(a, start))
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let v = index.iter().map(|&i| av[i]).collect();
        self.push(v, Op::Gather(a, index.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        self.push(vec![s], Op::SumSquares(a))
    }

    /// Back-propagates from the scalar `out`, seeding its adjoint with
    /// `seed`. Parameter gradients are added into `grads`.
    pub fn backward(&self, out: Var, seed: f64, grads: &mut ParamGrads) -> Adjoints {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(vec![seed]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Affine { w, b, x } => {
                    let wt = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    {
                        let gw = &mut grads.tensors[w.0].data;
                        for (i, gi) in g.iter().enumerate() {
                            if *gi == 0.0 {
                                continue;
                            }
                            let row = &mut gw[i * wt.cols..(i + 1) * wt.cols];
                            for (r, xj) in row.iter_mut().zip(xv) {
                                *r += gi * xj;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (r, gi) in grads.tensors[b.0].data.iter_mut().zip(&g) {
                            *r += gi;
                        }
                    }
                    let gx = acc(&mut adj, *x, xv.len());
                    for (i, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        let row = &wt.data[i * wt.cols..(i + 1) * wt.cols];
                        for (r, wij) in gx.iter_mut().zip(row) {
                            *r += gi * wij;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let ga = acc(&mut adj, v, g.len());
                        for (r, gi) in ga.iter_mut().zip(&g) {
                            *r += gi;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (r, gi) in ga.iter_mut().zip(&g) {
                        *r += gi;
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for (r, gi) in gb.iter_mut().zip(&g) {
                        *r -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = acc(&mut adj, *a, g.len());
                    for ((r, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *r += gi * bi;
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for ((r, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *r += gi * ai;
                    }
                }
                Op::Scale(a, k) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (r, gi) in ga.iter_mut().zip(&g) {
                        *r += gi * k;
                    }
                }
                Op::OneMinus(a) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (r, gi) in ga.iter_mut().zip(&g) {
                        *r -= gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((r, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *r += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((r, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *r += gi * (1.0 - yi * yi);
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let ga = acc(&mut adj, *a, g.len());
                    for ((r, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *r += gi * yi;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let gp = acc(&mut adj, *p, n);
                        for (r, gi) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *r += gi;
                        }
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut adj, *a, n);
                    for (r, gi) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                        *r += gi;
                    }
                }
                Op::Gather(a, index) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut adj, *a, n);
                    for (&i, gi) in index.iter().zip(&g) {
                        ga[i] += gi;
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut adj, *a, n);
                    for r in ga.iter_mut() {
                        *r += g[0];
                    }
                }
                Op::SumSquares(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut adj, *a, av.len());
                    for (r, ai) in ga.iter_mut().zip(av) {
                        *r += 2.0 * g[0] * ai;
                    }
                }
            }
            // keep input adjoints readable after the sweep
            if matches!(node.op, Op::Input) {
                adj[idx] = Some(g);
            }
        }
        Adjoints { adj }
    }
}

/// Node adjoints produced by [`Tape::backward`]. Only input nodes retain
/// their adjoint after the sweep.
pub struct Adjoints {
    adj: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    /// Gradient with respect to an input node, or `None` if the output does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }
}
