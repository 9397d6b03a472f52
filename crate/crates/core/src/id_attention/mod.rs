//! Decomposed ID cross-attention: independent Q/K/V paths, noise-query compensation,
//! two-stage injection into the generation stream, and offline weight fusion.
//!
//! Stage 1 lets the ID tokens query the generation tokens and produces `n_id` summary
//! tokens. Stage 2 lets every generation token attend over those summaries (re-using
//! `w_k`/`w_v` on them, with `w_qnoise` as the generation-side query projection) and the
//! result is added back through `w_out`. A zero `w_out` therefore leaves the stream
//! untouched.

mod fusion;
mod heads;
mod mha;

pub use fusion::{fuse_weights, FusionSpec};
pub use heads::{attend_heads, attend_heads_backward, HeadsCache};
pub use mha::{multi_head_attention, MhaGrads, MhaWeights};
pub(crate) use mha::{mha_backward, mha_forward, MhaCache};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// The trainable ID-integration parameter set; also the unit of offline fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// `d_id × d`
    pub w_q: Tensor<T>,
    /// `d_gen × d`
    pub w_k: Tensor<T>,
    /// `d_gen × d`
    pub w_v: Tensor<T>,
    /// `d_gen × d`, projects noisy-latent tokens into query space.
    pub w_qnoise: Tensor<T>,
    /// `d × d_gen`
    pub w_out: Tensor<T>,
    pub head_count: usize,
}

pub const ATTENTION_FIELDS: [&str; 5] = ["w_q", "w_k", "w_v", "w_qnoise", "w_out"];

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(
        w_q: Tensor<T>,
        w_k: Tensor<T>,
        w_v: Tensor<T>,
        w_qnoise: Tensor<T>,
        w_out: Tensor<T>,
        head_count: usize,
    ) -> Result<Self> {
        let w = Self {
            w_q,
            w_k,
            w_v,
            w_qnoise,
            w_out,
            head_count,
        };
        w.validate()?;
        Ok(w)
    }

    /// Inner width `d` of the query/key/value space.
    pub fn inner_dim(&self) -> usize {
        self.w_k.cols()
    }

    pub fn id_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn gen_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.inner_dim();
        let d_gen = self.gen_dim();
        for (name, t) in self.fields() {
            if t.shape().len() != 2 {
                return Err(Error::Config(format!("id_attn.{name} must be a matrix, got {:?}", t.shape())));
            }
        }
        let expect = |t: &Tensor<T>, r: usize, c: usize| t.shape() == [r, c];
        if self.w_q.cols() != d
            || !expect(&self.w_v, d_gen, d)
            || !expect(&self.w_qnoise, d_gen, d)
            || !expect(&self.w_out, d, d_gen)
        {
            return Err(Error::dim("AttentionWeights", self.w_k.shape(), self.w_out.shape()));
        }
        if d != d_gen {
            return Err(Error::Config(format!(
                "summary tokens re-use w_k/w_v, so the inner width ({d}) must equal the generation width ({d_gen})"
            )));
        }
        if self.head_count == 0 || d % self.head_count != 0 {
            return Err(Error::Config(format!("head count {} does not divide {d}", self.head_count)));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Tensor::zeros(self.w_q.shape()),
            w_k: Tensor::zeros(self.w_k.shape()),
            w_v: Tensor::zeros(self.w_v.shape()),
            w_qnoise: Tensor::zeros(self.w_qnoise.shape()),
            w_out: Tensor::zeros(self.w_out.shape()),
            head_count: self.head_count,
        }
    }

    pub fn fields(&self) -> [(&'static str, &Tensor<T>); 5] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_qnoise", &self.w_qnoise),
            ("w_out", &self.w_out),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 5] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_qnoise", &mut self.w_qnoise),
            ("w_out", &mut self.w_out),
        ]
    }
}

/// `(Q, K, V) = (x_id W_Q, x_gen W_K, x_gen W_V)`, each from its own product.
pub fn decompose_qkv<T: Scalar>(
    x_id: &Tensor<T>,
    x_gen: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((x_id.matmul(&w.w_q)?, x_gen.matmul(&w.w_k)?, x_gen.matmul(&w.w_v)?))
}

/// Token-mean of `x_t_tokens · w_qnoise`, shape `1 × d`.
pub fn noise_query<T: Scalar>(x_t_tokens: &Tensor<T>, w: &AttentionWeights<T>) -> Result<Tensor<T>> {
    x_t_tokens.matmul(&w.w_qnoise)?.mean_rows()
}

/// `Q' = α Q + (1 - α) Q_noise`, with `Q_noise` broadcast over the ID rows.
pub fn compensate_query<T: Scalar>(
    q: &Tensor<T>,
    x_t_tokens: &Tensor<T>,
    w: &AttentionWeights<T>,
    alpha: T,
) -> Result<Tensor<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Domain {
            what: "alpha",
            value: alpha.as_f64(),
            domain: "[0, 1]",
        });
    }
    let qn = noise_query(x_t_tokens, w)?;
    if qn.numel() != q.cols() {
        return Err(Error::dim("compensate_query", q.shape(), qn.shape()));
    }
    let one_minus = T::one() - alpha;
    let mut out = q.clone();
    let d = q.cols();
    for i in 0..q.rows() {
        for (o, &n) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(qn.data()) {
            *o = alpha * *o + one_minus * n;
        }
    }
    Ok(out)
}

/// Everything the injection backward pass needs.
#[derive(Debug, Clone)]
pub struct PerceiverTrace<T> {
    alpha: T,
    q_prime: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    stage1: HeadsCache<T>,
    q2: Tensor<T>,
    k2: Tensor<T>,
    v2: Tensor<T>,
    stage2: HeadsCache<T>,
}

impl<T: Scalar> PerceiverTrace<T> {
    /// Stage-1 probabilities of one head, `n_id × n_gen`.
    pub fn stage1_probs(&self, head: usize) -> Tensor<T> {
        self.stage1.head_probs(head, self.q_prime.rows(), self.k.rows())
    }

    /// ID-conditioned summary tokens, `n_id × d`.
    pub fn summary(&self) -> &Tensor<T> {
        &self.stage1.out
    }
}

/// Gradients of the injection with respect to its weights and all three inputs.
#[derive(Debug, Clone)]
pub struct PerceiverGrads<T> {
    pub weights: Option<AttentionWeights<T>>,
    pub d_x_id: Tensor<T>,
    pub d_x_gen: Tensor<T>,
    pub d_x_noise: Tensor<T>,
}

fn check_inputs<T: Scalar>(
    x_id: &Tensor<T>,
    x_gen: &Tensor<T>,
    x_t_tokens: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<()> {
    w.validate()?;
    if x_id.shape().len() != 2 || x_id.cols() != w.id_dim() {
        return Err(Error::dim("perceiver_attend (x_id)", x_id.shape(), w.w_q.shape()));
    }
    if x_gen.shape().len() != 2 || x_gen.cols() != w.gen_dim() {
        return Err(Error::dim("perceiver_attend (x_gen)", x_gen.shape(), w.w_k.shape()));
    }
    if x_t_tokens.shape().len() != 2 || x_t_tokens.cols() != w.gen_dim() {
        return Err(Error::dim("perceiver_attend (x_t)", x_t_tokens.shape(), w.w_qnoise.shape()));
    }
    Ok(())
}

/// The injected update `attend(x_gen → summary) · w_out`, shape of `x_gen`.
pub fn perceiver_inject<T: Scalar>(
    x_id: &Tensor<T>,
    x_gen: &Tensor<T>,
    x_t_tokens: &Tensor<T>,
    w: &AttentionWeights<T>,
    alpha: T,
) -> Result<(Tensor<T>, PerceiverTrace<T>)> {
    check_inputs(x_id, x_gen, x_t_tokens, w)?;
    let (q, k, v) = decompose_qkv(x_id, x_gen, w)?;
    let q_prime = compensate_query(&q, x_t_tokens, w, alpha)?;
    let stage1 = attend_heads(&q_prime, &k, &v, w.head_count)?;
    let q2 = x_gen.matmul(&w.w_qnoise)?;
    let k2 = stage1.out.matmul(&w.w_k)?;
    let v2 = stage1.out.matmul(&w.w_v)?;
    let stage2 = attend_heads(&q2, &k2, &v2, w.head_count)?;
    let delta = stage2.out.matmul(&w.w_out)?;
    Ok((
        delta,
        PerceiverTrace {
            alpha,
            q_prime,
            k,
            v,
            stage1,
            q2,
            k2,
            v2,
            stage2,
        },
    ))
}

/// `x_gen + perceiver_inject(..)`.
pub fn perceiver_attend<T: Scalar>(
    x_id: &Tensor<T>,
    x_gen: &Tensor<T>,
    x_t_tokens: &Tensor<T>,
    w: &AttentionWeights<T>,
    alpha: T,
) -> Result<Tensor<T>> {
    let (delta, _) = perceiver_inject(x_id, x_gen, x_t_tokens, w, alpha)?;
    x_gen.add(&delta)
}

/// Backward pass of [`perceiver_inject`] given the gradient of the injected update.
pub fn perceiver_inject_backward<T: Scalar>(
    x_id: &Tensor<T>,
    x_gen: &Tensor<T>,
    x_t_tokens: &Tensor<T>,
    w: &AttentionWeights<T>,
    trace: &PerceiverTrace<T>,
    d_delta: &Tensor<T>,
    weight_grads: bool,
) -> Result<PerceiverGrads<T>> {
    let summary = &trace.stage1.out;
    let d_a = d_delta.matmul_nt(&w.w_out)?;
    let (dq2, dk2, dv2) = attend_heads_backward(&trace.q2, &trace.k2, &trace.v2, &trace.stage2, &d_a);
    let mut d_summary = dk2.matmul_nt(&w.w_k)?;
    d_summary.add_assign(&dv2.matmul_nt(&w.w_v)?)?;
    let (dq_prime, dk, dv) = attend_heads_backward(&trace.q_prime, &trace.k, &trace.v, &trace.stage1, &d_summary);

    let dq = dq_prime.scale(trace.alpha);
    let n_gen = x_t_tokens.rows();
    // Q_noise is a token mean broadcast to every ID row.
    let d_qn = dq_prime.sum_rows()?.scale((T::one() - trace.alpha) / T::of_usize(n_gen));
    let d_noise_proj = Tensor::broadcast_rows(&d_qn, n_gen);

    let d_x_id = dq.matmul_nt(&w.w_q)?;
    let mut d_x_gen = dq2.matmul_nt(&w.w_qnoise)?;
    d_x_gen.add_assign(&dk.matmul_nt(&w.w_k)?)?;
    d_x_gen.add_assign(&dv.matmul_nt(&w.w_v)?)?;
    let d_x_noise = d_noise_proj.matmul_nt(&w.w_qnoise)?;

    let weights = if weight_grads {
        let mut w_k = x_gen.matmul_tn(&dk)?;
        w_k.add_assign(&summary.matmul_tn(&dk2)?)?;
        let mut w_v = x_gen.matmul_tn(&dv)?;
        w_v.add_assign(&summary.matmul_tn(&dv2)?)?;
        let mut w_qnoise = x_gen.matmul_tn(&dq2)?;
        w_qnoise.add_assign(&x_t_tokens.matmul_tn(&d_noise_proj)?)?;
        Some(AttentionWeights {
            w_q: x_id.matmul_tn(&dq)?,
            w_k,
            w_v,
            w_qnoise,
            w_out: trace.stage2.out.matmul_tn(d_delta)?,
            head_count: w.head_count,
        })
    } else {
        None
    };
    Ok(PerceiverGrads {
        weights,
        d_x_id,
        d_x_gen,
        d_x_noise,
    })
}
