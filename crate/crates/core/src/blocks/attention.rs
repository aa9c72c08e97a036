use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{softmax_last_dim, LayerNorm, Linear, ParamBuilder};

/// `softmax(Q·Kᵀ / √d_k)·V` over `B×L×d` inputs; returns the output and the
/// attention weights `B×L_q×L_k`.
pub fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, dq) = q.dims3()?;
    let (_, lk, dk) = k.dims3()?;
    let (_, lv, _) = v.dims3()?;
    if dq != dk || lk != lv {
        return Err(Error::shape(format!(
            "attention with q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let logits = (q.matmul(&k.t()?)? / (dk as f64).sqrt())?;
    let weights = softmax_last_dim(&logits)?;
    Ok((weights.matmul(&v.contiguous()?)?, weights))
}

/// Multi-head cross-attention `Φ_o(softmax(Φ_q(x)·Φ_k(c)ᵀ/√d)·Φ_v(c))` with a
/// zero-initialized output projection, so a fresh block contributes nothing.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    query_dim: usize,
    context_dim: usize,
}

impl CrossAttention {
    pub fn new(pb: &ParamBuilder, query_dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || query_dim % heads != 0 {
            return Err(Error::config(format!(
                "query dim {query_dim} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            to_q: Linear::no_bias(&pb.pp("to_q"), query_dim, query_dim)?,
            to_k: Linear::no_bias(&pb.pp("to_k"), context_dim, query_dim)?,
            to_v: Linear::no_bias(&pb.pp("to_v"), context_dim, query_dim)?,
            to_out: Linear::zeroed(&pb.pp("to_out"), query_dim, query_dim)?,
            heads,
            query_dim,
            context_dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        Ok(x
            .reshape((b, l, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * self.heads, l, hd))?)
    }

    fn merge_heads(&self, x: &Tensor, b: usize) -> Result<Tensor> {
        let (_, l, hd) = x.dims3()?;
        Ok(x
            .reshape((b, self.heads, l, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, self.heads * hd))?)
    }

    /// `x`: `B×L_q×query_dim` queries; `context`: `B×L_k×context_dim` keys/values.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, _, dq) = x.dims3()?;
        let (bc, _, dc) = context.dims3()?;
        if dq != self.query_dim || dc != self.context_dim || b != bc {
            return Err(Error::shape(format!(
                "cross-attention expects B×L×{} queries and B×L×{} context, got {:?} and {:?}",
                self.query_dim,
                self.context_dim,
                x.dims(),
                context.dims()
            )));
        }
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let (attn, _) = scaled_dot_product(&q, &k, &v)?;
        self.to_out.forward(&self.merge_heads(&attn, b)?)
    }
}

/// Pre-norm cross-attention with a residual: `x + attn(LN(x), c)`.
#[derive(Clone, Debug)]
pub struct StyleAttention {
    norm: LayerNorm,
    attn: CrossAttention,
}

impl StyleAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), dim)?,
            attn: CrossAttention::new(&pb.pp("attn"), dim, context_dim, heads)?,
        })
    }

    /// Applies to an `N×C×H×W` map whose flattened positions act as queries.
    pub fn forward_map(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = crate::nn::to_tokens(x)?;
        let out = (&tokens + self.attn.forward(&self.norm.forward(&tokens)?, context)?)?;
        crate::nn::from_tokens(&out, h, w)
    }
}
