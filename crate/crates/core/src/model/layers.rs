//! Trainable building blocks. Each layer stores only [`ParamId`] handles;
//! values live in the detector's [`ParamStore`].

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// `y = x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: store.add_uniform(format!("{name}.weight"), &[input, output], input, rng)?,
            bias: store.add_uniform(format!("{name}.bias"), &[output], input, rng)?,
        })
    }

    /// Weights and bias start at zero, so the layer initially outputs 0.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[input, output]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels cannot split into {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `query` is `Lq x C`; `key` and `value` are `Lk x C`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let (o, _) = self.attend(tape, q, k, v)?;
        self.out.forward(tape, store, o)
    }

    /// Same as [`forward`](Self::forward) but also returns the per-head
    /// attention weight nodes (`Lq x Lk` each).
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let (o, w) = self.attend(tape, q, k, v)?;
        Ok((self.out.forward(tape, store, o)?, w))
    }

    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd)?,
                    tape.slice_cols(k, h * hd, hd)?,
                    tape.slice_cols(v, h * hd, hd)?,
                )
            };
            let logits = tape.matmul_nt(qh, kh, scale)?;
            let attn = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((o, weights))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Post-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn, dim], rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.forward(tape, store, x, x, x)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, store, x)
    }
}

/// Post-norm decoder block: query self-attention, cross-attention to the
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn, dim], rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
        })
    }

    /// `tgt` and `pos` are `X x C`; `memory` is `N x C`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tgt: Var, pos: Var, memory: Var) -> Result<Var> {
        let q = tape.add(tgt, pos)?;
        let a = self.self_attn.forward(tape, store, q, q, tgt)?;
        let tgt = tape.add(tgt, a)?;
        let tgt = self.norm1.forward(tape, store, tgt)?;
        let q = tape.add(tgt, pos)?;
        let c = self.cross_attn.forward(tape, store, q, memory, memory)?;
        let tgt = tape.add(tgt, c)?;
        let tgt = self.norm2.forward(tape, store, tgt)?;
        let f = self.ffn.forward(tape, store, tgt)?;
        let tgt = tape.add(tgt, f)?;
        self.norm3.forward(tape, store, tgt)
    }
}
