use super::heads::{attend_heads, attend_heads_backward, HeadsCache};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Projections of one standard multi-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights<T> {
    /// `d × D`
    pub w_q: Tensor<T>,
    /// `d_c × D`
    pub w_k: Tensor<T>,
    /// `d_c × D`
    pub w_v: Tensor<T>,
    /// `D × d`
    pub w_proj: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> MhaWeights<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Tensor::zeros(self.w_q.shape()),
            w_k: Tensor::zeros(self.w_k.shape()),
            w_v: Tensor::zeros(self.w_v.shape()),
            w_proj: Tensor::zeros(self.w_proj.shape()),
            heads: self.heads,
        }
    }

    pub fn fields(&self) -> [(&'static str, &Tensor<T>); 4] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_proj", &self.w_proj)]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_proj", &mut self.w_proj),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: HeadsCache<T>,
}

/// Gradients of one attention layer.
#[derive(Debug, Clone)]
pub struct MhaGrads<T> {
    pub weights: Option<MhaWeights<T>>,
    pub d_x: Tensor<T>,
    pub d_ctx: Tensor<T>,
}

/// `Projection(MultiHeadAttention(x W_Q, ctx W_K, ctx W_V))`.
pub fn multi_head_attention<T: Scalar>(x: &Tensor<T>, ctx: &Tensor<T>, w: &MhaWeights<T>) -> Result<Tensor<T>> {
    Ok(mha_forward(x, ctx, w)?.0)
}

pub(crate) fn mha_forward<T: Scalar>(
    x: &Tensor<T>,
    ctx: &Tensor<T>,
    w: &MhaWeights<T>,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    if w.w_q.rows() != x.cols() || w.w_k.rows() != ctx.cols() || w.w_v.rows() != ctx.cols() {
        return Err(Error::dim("multi_head_attention", x.shape(), ctx.shape()));
    }
    let q = x.matmul(&w.w_q)?;
    let k = ctx.matmul(&w.w_k)?;
    let v = ctx.matmul(&w.w_v)?;
    let attn = attend_heads(&q, &k, &v, w.heads)?;
    let y = attn.out.matmul(&w.w_proj)?;
    Ok((y, MhaCache { q, k, v, attn }))
}

pub(crate) fn mha_backward<T: Scalar>(
    x: &Tensor<T>,
    ctx: &Tensor<T>,
    w: &MhaWeights<T>,
    cache: &MhaCache<T>,
    d_y: &Tensor<T>,
    weight_grads: bool,
) -> Result<MhaGrads<T>> {
    let d_o = d_y.matmul_nt(&w.w_proj)?;
    let (dq, dk, dv) = attend_heads_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &d_o);
    let d_x = dq.matmul_nt(&w.w_q)?;
    let mut d_ctx = dk.matmul_nt(&w.w_k)?;
    d_ctx.add_assign(&dv.matmul_nt(&w.w_v)?)?;
    let weights = if weight_grads {
        Some(MhaWeights {
            w_q: x.matmul_tn(&dq)?,
            w_k: ctx.matmul_tn(&dk)?,
            w_v: ctx.matmul_tn(&dv)?,
            w_proj: cache.attn.out.matmul_tn(d_y)?,
            heads: w.heads,
        })
    } else {
        None
    };
    Ok(MhaGrads { weights, d_x, d_ctx })
}
