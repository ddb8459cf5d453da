use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Tensor, Var};
use crate::{Error, Result};

/// Index of a tensor inside [`Parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors of a model, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Gradients for bound parameters, zero where the loss is independent.
    pub fn collect_grads(&self, grads: &Gradients, bound: &[Var]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    /// Flat copy of every value, in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Inverse of [`Parameters::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::invalid("flat parameter length mismatch"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor { shape, data }
}

/// Affine map `x @ w + b` over the last dimension.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Inverted dropout. In training mode each entry is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; with no
/// generator (inference) it is the identity.
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul_const(x, mask)
}

/// Bound LSTM parameters. Gate blocks are laid out `[input, forget, output,
/// candidate]` along the last axis of `w (in, 4H)`, `v (H, 4H)` and `b (4H)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub v: Var,
    pub b: Var,
    pub hidden: usize,
}

/// One LSTM step. `None` state means the zero initial state.
pub fn lstm_step(
    g: &mut Graph,
    u: Var,
    state: Option<(Var, Var)>,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let h = p.hidden;
    let mut z = g.matmul(u, p.w)?;
    if let Some((h_prev, _)) = state {
        let zh = g.matmul(h_prev, p.v)?;
        z = g.add(z, zh)?;
    }
    let z = g.add_bias(z, p.b)?;
    let zi = g.slice_last(z, 0, h)?;
    let zf = g.slice_last(z, h, h)?;
    let zo = g.slice_last(z, 2 * h, h)?;
    let zc = g.slice_last(z, 3 * h, h)?;
    let gi = g.sigmoid(zi);
    let gf = g.sigmoid(zf);
    let go = g.sigmoid(zo);
    let cand = g.tanh(zc);
    let mut c = g.mul(gi, cand)?;
    if let Some((_, c_prev)) = state {
        let keep = g.mul(gf, c_prev)?;
        c = g.add(c, keep)?;
    }
    let tc = g.tanh(c);
    let h_new = g.mul(go, tc)?;
    Ok((h_new, c))
}
