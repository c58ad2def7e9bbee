use alloc::vec;
use alloc::vec::Vec;

use super::{Gradients, NnError, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { w: ParamId, b: Option<ParamId>, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Sum(Var),
    LogSoftmax(Var),
    Index(Var, usize),
}

/// Records a forward pass over vectors for reverse-mode differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, values: Vec::new(), ops: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0][0]
    }

    /// Constant input; gradients stop here.
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.input(vec![x])
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.input(value)
    }

    /// Flattened view of a parameter tensor.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data.clone();
        self.push(value, Op::Param(id))
    }

    /// `W x (+ b)` with `W` stored row-major as `[out, in]`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Result<Var, NnError> {
        let wt = self.params.get(w);
        let (rows, cols) = (wt.rows(), wt.cols());
        let xv = &self.values[x.0];
        if xv.len() != cols {
            return Err(NnError::ShapeMismatch { op: "affine", expected: cols, got: xv.len() });
        }
        let mut out = match b {
            Some(b) => {
                let bt = self.params.get(b);
                if bt.len() != rows {
                    return Err(NnError::ShapeMismatch { op: "affine bias", expected: rows, got: bt.len() });
                }
                bt.data.clone()
            }
            None => vec![0.0; rows],
        };
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wt.data[r * cols..(r + 1) * cols];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(out, Op::Affine { w, b, x }))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        debug_assert_eq!(va.len(), vb.len(), "elementwise length mismatch");
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.values[a.0].iter().map(|x| f(*x)).collect()
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, libm::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, libm::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().flat_map(|p| self.values[p.0].iter().copied()).collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let n = self.values[parts[0].0].len();
        let k = parts.len() as f64;
        let mut v = vec![0.0; n];
        for p in parts {
            debug_assert_eq!(self.values[p.0].len(), n, "mean length mismatch");
            for (o, x) in v.iter_mut().zip(&self.values[p.0]) {
                *o += x / k;
            }
        }
        self.push(v, Op::Mean(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax(&self.values[a.0]);
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let x = self.values[a.0][i];
        self.push(vec![x], Op::Index(a, i))
    }

    /// Reverse pass from a scalar `loss`; returns one gradient per parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if loss.0 >= self.values.len() {
            return Err(NnError::UnrecordedVar(loss.0));
        }
        if self.values[loss.0].len() != 1 {
            return Err(NnError::NonScalarLoss(self.values[loss.0].len()));
        }
        let mut pgrads = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (d, gi) in pgrads.tensors[id.0].data.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Affine { w, b, x } => {
                    let wt = self.params.get(*w);
                    let cols = wt.cols();
                    let xv = &self.values[x.0];
                    {
                        let gw = &mut pgrads.tensors[w.0].data;
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (d, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *d += gr * xc;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (d, gi) in pgrads.tensors[b.0].data.iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                    let mut dx = vec![0.0; cols];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (d, wv) in dx.iter_mut().zip(&wt.data[r * cols..(r + 1) * cols]) {
                            *d += gr * wv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    let da = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.iter().map(|x| x * c).collect()),
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.iter().map(|x| -x).collect()),
                Op::Tanh(a) => {
                    let y = &self.values[i];
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Sigmoid(a) => {
                    let y = &self.values[i];
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Relu(a) => {
                    let x = &self.values[a.0];
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Exp(a) => {
                    let y = &self.values[i];
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::Square(a) => {
                    let x = &self.values[a.0];
                    accumulate(&mut grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.values[p.0].len();
                        accumulate(&mut grads, *p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Mean(parts) => {
                    let k = parts.len() as f64;
                    for p in parts {
                        accumulate(&mut grads, *p, g.iter().map(|x| x / k).collect());
                    }
                }
                Op::Sum(a) => {
                    let n = self.values[a.0].len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::LogSoftmax(a) => {
                    let y = &self.values[i];
                    let gsum: f64 = g.iter().sum();
                    let dx = g.iter().zip(y).map(|(g, y)| g - libm::exp(*y) * gsum).collect();
                    accumulate(&mut grads, *a, dx);
                }
                Op::Index(a, k) => {
                    let mut dx = vec![0.0; self.values[a.0].len()];
                    dx[*k] = g[0];
                    accumulate(&mut grads, *a, dx);
                }
            }
        }
        Ok(pgrads)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(x.iter().map(|v| libm::exp(v - m)).sum::<f64>());
    x.iter().map(|v| v - lse).collect()
}
