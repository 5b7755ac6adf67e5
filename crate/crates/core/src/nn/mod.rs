//! Transformer building blocks over graph variables.
//!
//! Weights are stored `out x in` and applied to row-major inputs as
//! `x · Wᵀ`. Per-head projections `W_Q^n, W_K^n, W_Z^n` are the row blocks
//! of one stacked matrix, so head `n` owns output columns
//! `n·d/N .. (n+1)·d/N`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Result, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_z: Var,
    pub w_o: Var,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub token: Var,
    pub position: Var,
    pub segment: Var,
}

/// Inverted dropout. Without an rng it is the identity.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn new(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let shape = g.value(x).shape().to_vec();
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..g.value(x).numel())
            .map(|_| if rng.gen_bool(rate) { T::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

fn check_heads<T: Scalar>(g: &Graph<T>, w: Var, heads: usize) -> Result<usize> {
    let d = g.value(w).rows();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Contract {
            op: "multi_head_attention",
            msg: format!("{heads} heads do not divide dimension {d}"),
        });
    }
    Ok(d / heads)
}

/// `MultiHead(Q, K, Z)`: per-head scaled dot-product attention over rows of
/// `k`/`z`, heads concatenated and projected by `W_O`.
///
/// `key_mask[j] == false` excludes key `j`. Dropout is applied to the
/// attention weights.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    z: Var,
    p: &MultiHeadParams,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if g.value(k).rows() != g.value(z).rows() {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            lhs: g.value(k).shape().to_vec(),
            rhs: g.value(z).shape().to_vec(),
        });
    }
    let dh = check_heads(g, p.w_q, p.heads)?;
    let dz = check_heads(g, p.w_z, p.heads)?;
    let qh = g.linear(q, p.w_q, None)?;
    let kh = g.linear(k, p.w_k, None)?;
    let zh = g.linear(z, p.w_z, None)?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(p.heads);
    for n in 0..p.heads {
        let qn = g.slice_cols(qh, n * dh, dh)?;
        let kn = g.slice_cols(kh, n * dh, dh)?;
        let zn = g.slice_cols(zh, n * dz, dz)?;
        let e = g.matmul_t(qn, kn, false, true)?;
        let e = g.scale(e, scale);
        let tau = match key_mask {
            Some(m) => g.masked_softmax_rows(e, m)?,
            None => g.softmax(e, 1)?,
        };
        let tau = dropout.apply(g, tau)?;
        outs.push(g.matmul(tau, zn)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    g.linear(cat, p.w_o, None)
}

/// `W₂ ReLU(W₁ y + b₁) + b₂`, row-wise.
pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, y: Var, p: &FeedForwardParams) -> Result<Var> {
    let h = g.linear(y, p.w1, Some(p.b1))?;
    let h = g.relu(h);
    g.linear(h, p.w2, Some(p.b2))
}

pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &LayerNormParams,
    eps: f64,
) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias, T::from_f64_lossy(eps))
}

/// Token + position + segment embeddings, one row per position.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    tables: &EmbeddingTables,
    ids: &[usize],
    positions: &[usize],
    segments: &[usize],
) -> Result<Var> {
    let tok = g.gather_rows(tables.token, ids)?;
    let pos = g.gather_rows(tables.position, positions)?;
    let seg = g.gather_rows(tables.segment, segments)?;
    let s = g.add(tok, pos)?;
    g.add(s, seg)
}
