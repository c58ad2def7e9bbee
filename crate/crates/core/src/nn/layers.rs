use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Stack of affine layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
}

fn init_matrix(rows: usize, cols: usize, gain: f64, rng: &mut SimRng) -> Tensor {
    let std = gain / libm::sqrt(cols.max(1) as f64);
    let data = (0..rows * cols).map(|_| std * rng::normal(rng)).collect();
    Tensor { shape: alloc::vec![rows, cols], data }
}

impl DenseBlock {
    /// `dims = [in, h1, .., out]`; hidden layers use `hidden`, the last one `output`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut SimRng,
    ) -> Self {
        assert!(dims.len() >= 2, "a dense block needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (in_dim, out_dim) = (dims[i], dims[i + 1]);
                let activation = if i + 1 == n { output } else { hidden };
                let gain = if activation == Activation::Relu { core::f64::consts::SQRT_2 } else { 1.0 };
                let weight = store.add(format!("{name}.{i}.weight"), init_matrix(out_dim, in_dim, gain, rng));
                let bias = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[out_dim]));
                DenseLayer { weight, bias, in_dim, out_dim, activation }
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var, NnError> {
        let got = tape.value(input).len();
        if got != self.in_dim() {
            return Err(NnError::ShapeMismatch { op: "dense", expected: self.in_dim(), got });
        }
        let mut x = input;
        for layer in &self.layers {
            let z = tape.affine(layer.weight, Some(layer.bias), x)?;
            x = layer.activation.apply(tape, z);
        }
        Ok(x)
    }
}

pub fn forward_dense(tape: &mut Tape<'_>, block: &DenseBlock, input: Var) -> Result<Var, NnError> {
    block.forward(tape, input)
}

/// Gated recurrent unit:
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `ĥ = tanh(Wh x + Uh (r ⊙ h) + bh)`, `h' = (1 - z) ⊙ h + z ⊙ ĥ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut SimRng) -> Self {
        let mut w = |gate: &str, rows, cols, rng: &mut SimRng| {
            store.add(format!("{name}.{gate}"), init_matrix(rows, cols, 1.0, rng))
        };
        let wz = w("wz", hidden_dim, input_dim, rng);
        let uz = w("uz", hidden_dim, hidden_dim, rng);
        let wr = w("wr", hidden_dim, input_dim, rng);
        let ur = w("ur", hidden_dim, hidden_dim, rng);
        let wh = w("wh", hidden_dim, input_dim, rng);
        let uh = w("uh", hidden_dim, hidden_dim, rng);
        let bz = store.add(format!("{name}.bz"), Tensor::zeros(&[hidden_dim]));
        let br = store.add(format!("{name}.br"), Tensor::zeros(&[hidden_dim]));
        let bh = store.add(format!("{name}.bh"), Tensor::zeros(&[hidden_dim]));
        Self { input_dim, hidden_dim, wz, uz, bz, wr, ur, br, wh, uh, bh }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wh, self.uh, self.bh]
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var, NnError> {
        let (xl, hl) = (tape.value(x).len(), tape.value(h).len());
        if xl != self.input_dim {
            return Err(NnError::ShapeMismatch { op: "gru input", expected: self.input_dim, got: xl });
        }
        if hl != self.hidden_dim {
            return Err(NnError::ShapeMismatch { op: "gru hidden", expected: self.hidden_dim, got: hl });
        }
        let zx = tape.affine(self.wz, Some(self.bz), x)?;
        let zh = tape.affine(self.uz, None, h)?;
        let z_pre = tape.add(zx, zh);
        let z = tape.sigmoid(z_pre);

        let rx = tape.affine(self.wr, Some(self.br), x)?;
        let rh = tape.affine(self.ur, None, h)?;
        let r_pre = tape.add(rx, rh);
        let r = tape.sigmoid(r_pre);

        let rh = tape.mul(r, h);
        let cx = tape.affine(self.wh, Some(self.bh), x)?;
        let ch = tape.affine(self.uh, None, rh)?;
        let c_pre = tape.add(cx, ch);
        let cand = tape.tanh(c_pre);

        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h);
        let new = tape.mul(z, cand);
        Ok(tape.add(old, new))
    }
}

pub fn gru_step(tape: &mut Tape<'_>, cell: &GruCell, input: Var, hidden: Var) -> Result<Var, NnError> {
    cell.forward(tape, input, hidden)
}
