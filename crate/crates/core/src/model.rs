//! Toy diffusion transformer predicting the flow-matching velocity, with a hand-derived backward pass.
//!
//! Each block applies pre-norm residual sub-layers in the configured order
//! (default: self-attention, text cross-attention, ID injection, feed-forward).

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id_attention::{
    mha_backward, mha_forward, perceiver_inject, perceiver_inject_backward, AttentionWeights, MhaCache,
    MhaWeights, PerceiverTrace,
};
use crate::numerics::{Scalar, Tensor};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubLayer {
    SelfAttn,
    TextCross,
    IdInject,
    Ffn,
}

/// Where the compensating query `Q_noise` is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryNoiseSource {
    /// The current noisy latent `x_t`, recomputed at every step.
    #[default]
    CurrentLatent,
    /// The initial noise `x_1` the trajectory started from.
    InitialNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDiTConfig {
    pub token_count: usize,
    pub dim: usize,
    pub id_token_count: usize,
    pub id_dim: usize,
    pub cond_token_count: usize,
    pub cond_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    /// Intervals of the learned time-embedding grid over `[0, 1]`.
    pub time_grid: usize,
    pub ffn_mult: usize,
    pub block_order: Vec<SubLayer>,
    /// Blocks that receive ID injection; empty means every block.
    pub id_blocks: Vec<usize>,
    pub query_noise: QueryNoiseSource,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        Self {
            token_count: 16,
            dim: 32,
            id_token_count: 4,
            id_dim: 16,
            cond_token_count: 4,
            cond_dim: 8,
            heads: 4,
            blocks: 2,
            time_embed_dim: 8,
            time_grid: 20,
            ffn_mult: 2,
            block_order: vec![SubLayer::SelfAttn, SubLayer::TextCross, SubLayer::IdInject, SubLayer::Ffn],
            id_blocks: Vec::new(),
            query_noise: QueryNoiseSource::CurrentLatent,
        }
    }
}

impl ToyDiTConfig {
    /// Two-block configuration small enough for exhaustive finite-difference checks.
    pub fn minimal() -> Self {
        Self {
            token_count: 4,
            dim: 8,
            id_token_count: 2,
            id_dim: 4,
            cond_token_count: 2,
            cond_dim: 4,
            heads: 2,
            blocks: 2,
            time_embed_dim: 4,
            time_grid: 4,
            ffn_mult: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.token_count,
            self.dim,
            self.id_token_count,
            self.id_dim,
            self.cond_token_count,
            self.cond_dim,
            self.heads,
            self.blocks,
            self.time_embed_dim,
            self.time_grid,
            self.ffn_mult,
        ];
        if extents.contains(&0) {
            return Err(Error::Config("all model extents must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if let Some(b) = self.id_blocks.iter().find(|&&b| b >= self.blocks) {
            return Err(Error::Config(format!("id block {b} out of range")));
        }
        Ok(())
    }

    pub fn injects_id(&self, block: usize) -> bool {
        self.id_blocks.is_empty() || self.id_blocks.contains(&block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm_self: Tensor<T>,
    pub self_attn: MhaWeights<T>,
    pub norm_text: Tensor<T>,
    pub text: MhaWeights<T>,
    pub norm_id: Tensor<T>,
    pub id_attn: AttentionWeights<T>,
    pub norm_ffn: Tensor<T>,
    pub ffn: FfnWeights<T>,
}

/// All model parameters plus the freeze mask (`true` = trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ToyDiTConfig,
    pub pos_embed: Tensor<T>,
    pub time_table: Tensor<T>,
    pub time_proj: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub freeze_mask: BTreeMap<String, bool>,
}

/// True for parameters belonging to an ID-integration unit.
pub fn is_id_attention_param(name: &str) -> bool {
    name.contains(".id_attn.")
}

macro_rules! block_fields {
    ($b:expr, $out:ident, $i:expr, $($amp:tt)*) => {{
        let p = format!("block{}", $i);
        $out.push((format!("{p}.norm.self"), $($amp)* $b.norm_self));
        $out.push((format!("{p}.self.w_q"), $($amp)* $b.self_attn.w_q));
        $out.push((format!("{p}.self.w_k"), $($amp)* $b.self_attn.w_k));
        $out.push((format!("{p}.self.w_v"), $($amp)* $b.self_attn.w_v));
        $out.push((format!("{p}.self.w_proj"), $($amp)* $b.self_attn.w_proj));
        $out.push((format!("{p}.norm.text"), $($amp)* $b.norm_text));
        $out.push((format!("{p}.text.w_q"), $($amp)* $b.text.w_q));
        $out.push((format!("{p}.text.w_k"), $($amp)* $b.text.w_k));
        $out.push((format!("{p}.text.w_v"), $($amp)* $b.text.w_v));
        $out.push((format!("{p}.text.w_proj"), $($amp)* $b.text.w_proj));
        $out.push((format!("{p}.norm.id"), $($amp)* $b.norm_id));
        $out.push((format!("{p}.id_attn.w_q"), $($amp)* $b.id_attn.w_q));
        $out.push((format!("{p}.id_attn.w_k"), $($amp)* $b.id_attn.w_k));
        $out.push((format!("{p}.id_attn.w_v"), $($amp)* $b.id_attn.w_v));
        $out.push((format!("{p}.id_attn.w_qnoise"), $($amp)* $b.id_attn.w_qnoise));
        $out.push((format!("{p}.id_attn.w_out"), $($amp)* $b.id_attn.w_out));
        $out.push((format!("{p}.norm.ffn"), $($amp)* $b.norm_ffn));
        $out.push((format!("{p}.ffn.w1"), $($amp)* $b.ffn.w1));
        $out.push((format!("{p}.ffn.b1"), $($amp)* $b.ffn.b1));
        $out.push((format!("{p}.ffn.w2"), $($amp)* $b.ffn.w2));
        $out.push((format!("{p}.ffn.b2"), $($amp)* $b.ffn.b2));
    }};
}

impl<T: Scalar> ModelParams<T> {
    /// Every parameter tensor under its stable checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("pos_embed".into(), &self.pos_embed),
            ("time_embed.table".into(), &self.time_table),
            ("time_embed.proj".into(), &self.time_proj),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            block_fields!(b, out, i, &);
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("pos_embed".into(), &mut self.pos_embed),
            ("time_embed.table".into(), &mut self.time_table),
            ("time_embed.proj".into(), &mut self.time_proj),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            block_fields!(b, out, i, &mut);
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.freeze_mask.get(name).copied().unwrap_or(false)
    }

    /// Marks exactly the ID-integration weights trainable.
    pub fn freeze_all_but_id_attention(&mut self) {
        self.freeze_mask = self.param_names().into_iter().map(|n| {
            let t = is_id_attention_param(&n);
            (n, t)
        }).collect();
    }

    /// Marks everything except the ID-integration weights trainable (base pretraining).
    pub fn train_all_but_id_attention(&mut self) {
        self.freeze_mask = self.param_names().into_iter().map(|n| {
            let t = !is_id_attention_param(&n);
            (n, t)
        }).collect();
    }

    pub fn validate_mask(&self) -> Result<()> {
        let names: BTreeSet<String> = self.param_names().into_iter().collect();
        let keys: BTreeSet<String> = self.freeze_mask.keys().cloned().collect();
        if names != keys {
            let missing: Vec<_> = names.difference(&keys).collect();
            let extra: Vec<_> = keys.difference(&names).collect();
            return Err(Error::Config(format!("freeze mask mismatch: missing {missing:?}, unknown {extra:?}")));
        }
        Ok(())
    }

    /// Rebuilds parameters from named tensors, checking every shape against a fresh init.
    pub fn from_named(
        config: ToyDiTConfig,
        tensors: &BTreeMap<String, Tensor<T>>,
        freeze_mask: BTreeMap<String, bool>,
    ) -> Result<Self> {
        let mut params = init_params::<T>(&config, 0)?;
        for (name, slot) in params.named_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("load parameter", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        params.freeze_mask = freeze_mask;
        params.validate_mask()?;
        Ok(params)
    }

    /// The ID-integration weights of every block, in block order.
    pub fn id_attention(&self) -> Vec<&AttentionWeights<T>> {
        self.blocks.iter().map(|b| &b.id_attn).collect()
    }
}

/// Scaled-normal initialisation (std `1/√fan_in`), unit norm gains, zero biases and zero `w_out`.
pub fn init_params<T: Scalar>(config: &ToyDiTConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |rows: usize, cols: usize| Tensor::<T>::randn(&[rows, cols], T::one() / T::of_usize(rows).sqrt(), &mut rng);
    let (d, h) = (config.dim, config.dim * config.ffn_mult);
    let ones = || Tensor::full(&[1, d], T::one());
    let pos_embed = mat(config.token_count, d).scale(T::one() / T::of_usize(d).sqrt() * T::of_usize(config.token_count).sqrt());
    let time_table = mat(config.time_grid + 1, config.time_embed_dim)
        .scale(T::one() / T::of_usize(config.time_embed_dim).sqrt() * T::of_usize(config.time_grid + 1).sqrt());
    let time_proj = mat(config.time_embed_dim, d);
    let mut blocks = Vec::with_capacity(config.blocks);
    for _ in 0..config.blocks {
        let self_attn = MhaWeights {
            w_q: mat(d, d),
            w_k: mat(d, d),
            w_v: mat(d, d),
            w_proj: mat(d, d),
            heads: config.heads,
        };
        let text = MhaWeights {
            w_q: mat(d, d),
            w_k: mat(config.cond_dim, d),
            w_v: mat(config.cond_dim, d),
            w_proj: mat(d, d),
            heads: config.heads,
        };
        let id_attn = AttentionWeights::new(
            mat(config.id_dim, d),
            mat(d, d),
            mat(d, d),
            mat(d, d),
            Tensor::zeros(&[d, d]),
            config.heads,
        )?;
        let ffn = FfnWeights {
            w1: mat(d, h),
            b1: Tensor::zeros(&[1, h]),
            w2: mat(h, d),
            b2: Tensor::zeros(&[1, d]),
        };
        blocks.push(BlockParams {
            norm_self: ones(),
            self_attn,
            norm_text: ones(),
            text,
            norm_id: ones(),
            id_attn,
            norm_ffn: ones(),
            ffn,
        });
    }
    let head_w = mat(d, d);
    let mut params = ModelParams {
        config: config.clone(),
        pos_embed,
        time_table,
        time_proj,
        blocks,
        head_w,
        head_b: Tensor::zeros(&[1, d]),
        freeze_mask: BTreeMap::new(),
    };
    params.freeze_all_but_id_attention();
    Ok(params)
}

/// One forward evaluation's inputs.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    /// Noisy latent tokens, `n_gen × d_gen`.
    pub x_t: &'a Tensor<T>,
    /// Flow time in `[0, 1]` (1 = noise).
    pub t: T,
    /// Condition ("prompt") tokens, `m × d_c`.
    pub cond: &'a Tensor<T>,
    /// ID feature tokens, `n_id × d_id`.
    pub id_tokens: &'a Tensor<T>,
    /// ID strength fed to query compensation.
    pub alpha: T,
    /// Tokens `Q_noise` is extracted from; `None` means `x_t`.
    pub noise_tokens: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> ModelInput<'a, T> {
    pub fn new(x_t: &'a Tensor<T>, t: T, cond: &'a Tensor<T>, id_tokens: &'a Tensor<T>, alpha: T) -> Self {
        Self {
            x_t,
            t,
            cond,
            id_tokens,
            alpha,
            noise_tokens: None,
        }
    }

    pub fn with_noise_tokens(mut self, noise: Option<&'a Tensor<T>>) -> Self {
        self.noise_tokens = noise;
        self
    }

    fn noise(&self) -> &'a Tensor<T> {
        self.noise_tokens.unwrap_or(self.x_t)
    }
}

fn check_input<T: Scalar>(c: &ToyDiTConfig, input: &ModelInput<'_, T>) -> Result<()> {
    let want = |t: &Tensor<T>, r: usize, k: usize, what: &'static str| {
        if t.shape() == [r, k] {
            Ok(())
        } else {
            Err(Error::dim(what, t.shape(), &[r, k]))
        }
    };
    want(input.x_t, c.token_count, c.dim, "predict_velocity (x_t)")?;
    want(input.cond, c.cond_token_count, c.cond_dim, "predict_velocity (c)")?;
    want(input.id_tokens, c.id_token_count, c.id_dim, "predict_velocity (id_tokens)")?;
    want(input.noise(), c.token_count, c.dim, "predict_velocity (noise tokens)")?;
    if !(input.t >= T::zero() && input.t <= T::one()) {
        return Err(Error::Domain {
            what: "t",
            value: input.t.as_f64(),
            domain: "[0, 1]",
        });
    }
    Ok(())
}

fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = x.cols();
    let eps = T::of(NORM_EPS);
    let mut out = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / T::of_usize(d);
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * inv * g;
        }
        inv_rms.push(inv);
    }
    (out, inv_rms)
}

/// Returns `(d_x, d_gain)`.
fn rms_norm_backward<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, inv_rms: &[T], d_y: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let d = x.cols();
    let mut d_x = Tensor::zeros(x.shape());
    let mut d_gain = Tensor::zeros(gain.shape());
    for i in 0..x.rows() {
        let inv = inv_rms[i];
        let (xr, gr) = (x.row(i), d_y.row(i));
        let mut proj = T::zero();
        for j in 0..d {
            let xhat = xr[j] * inv;
            let dxhat = gr[j] * gain.data()[j];
            d_gain.data_mut()[j] += gr[j] * xhat;
            proj += dxhat * xhat;
        }
        proj = proj / T::of_usize(d);
        let out = d_x.row_mut(i);
        for j in 0..d {
            let xhat = xr[j] * inv;
            let dxhat = gr[j] * gain.data()[j];
            out[j] = (dxhat - xhat * proj) * inv;
        }
    }
    (d_x, d_gain)
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Linear interpolation weights `(index, frac)` on the time grid.
fn time_position<T: Scalar>(t: T, grid: usize) -> (usize, T) {
    let u = t * T::of_usize(grid);
    let i = u.floor().to_usize().unwrap_or(0).min(grid - 1);
    (i, u - T::of_usize(i))
}

enum SubCache<T> {
    SelfAttn(MhaCache<T>),
    Text(MhaCache<T>),
    Id(Option<Box<PerceiverTrace<T>>>),
    Ffn { z: Tensor<T>, a: Tensor<T> },
}

struct SubTrace<T> {
    block: usize,
    kind: SubLayer,
    pre: Tensor<T>,
    normed: Tensor<T>,
    inv_rms: Vec<T>,
    cache: SubCache<T>,
}

/// Forward state kept for [`backward_traced`].
pub struct ForwardTrace<T> {
    time_index: usize,
    time_frac: T,
    time_vec: Tensor<T>,
    subs: Vec<SubTrace<T>>,
    final_stream: Tensor<T>,
}

fn norm_gain<T>(b: &BlockParams<T>, kind: SubLayer) -> &Tensor<T> {
    match kind {
        SubLayer::SelfAttn => &b.norm_self,
        SubLayer::TextCross => &b.norm_text,
        SubLayer::IdInject => &b.norm_id,
        SubLayer::Ffn => &b.norm_ffn,
    }
}

/// Velocity prediction `f_θ(x_t, t, c)` with ID tokens injected at strength `alpha`.
pub fn predict_velocity<T: Scalar>(params: &ModelParams<T>, input: &ModelInput<'_, T>) -> Result<Tensor<T>> {
    Ok(forward_traced(params, input)?.0)
}

pub fn forward_traced<T: Scalar>(
    params: &ModelParams<T>,
    input: &ModelInput<'_, T>,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let cfg = &params.config;
    check_input(cfg, input)?;
    let (ti, tf) = time_position(input.t, cfg.time_grid);
    let te = cfg.time_embed_dim;
    let time_vec = Tensor::from_fn(&[1, te], |j| {
        (T::one() - tf) * params.time_table.data()[ti * te + j] + tf * params.time_table.data()[(ti + 1) * te + j]
    });
    let temb = time_vec.matmul(&params.time_proj)?;
    let mut stream = input.x_t.add(&params.pos_embed)?.add_row_broadcast(&temb)?;

    let mut subs = Vec::with_capacity(cfg.blocks * cfg.block_order.len());
    for (bi, block) in params.blocks.iter().enumerate() {
        for &kind in &cfg.block_order {
            let (normed, inv_rms) = rms_norm(&stream, norm_gain(block, kind));
            let (delta, cache) = match kind {
                SubLayer::SelfAttn => {
                    let (y, c) = mha_forward(&normed, &normed, &block.self_attn)?;
                    (Some(y), SubCache::SelfAttn(c))
                }
                SubLayer::TextCross => {
                    let (y, c) = mha_forward(&normed, input.cond, &block.text)?;
                    (Some(y), SubCache::Text(c))
                }
                SubLayer::IdInject => {
                    if cfg.injects_id(bi) {
                        let (y, tr) = perceiver_inject(input.id_tokens, &normed, input.noise(), &block.id_attn, input.alpha)?;
                        (Some(y), SubCache::Id(Some(Box::new(tr))))
                    } else {
                        (None, SubCache::Id(None))
                    }
                }
                SubLayer::Ffn => {
                    let z = normed.matmul(&block.ffn.w1)?.add_row_broadcast(&block.ffn.b1)?;
                    let a = z.map(|v| v * sigmoid(v));
                    let y = a.matmul(&block.ffn.w2)?.add_row_broadcast(&block.ffn.b2)?;
                    (Some(y), SubCache::Ffn { z, a })
                }
            };
            let pre = stream.clone();
            if let Some(delta) = delta {
                stream.add_assign(&delta)?;
            }
            subs.push(SubTrace {
                block: bi,
                kind,
                pre,
                normed,
                inv_rms,
                cache,
            });
        }
    }
    let v = stream.matmul(&params.head_w)?.add_row_broadcast(&params.head_b)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("predict_velocity".into()));
    }
    Ok((
        v,
        ForwardTrace {
            time_index: ti,
            time_frac: tf,
            time_vec,
            subs,
            final_stream: stream,
        },
    ))
}

/// Which parameter gradients to materialise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every parameter, frozen ones included (flagged in [`Gradients::frozen`]).
    All,
    /// Trainable parameters only; frozen entries are left out of the map.
    Trainable,
    /// No parameter gradients, only the input gradient.
    InputOnly,
}

/// Gradients of a scalar objective with respect to parameters and `x_t`.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    /// Names in `params` that are frozen under the model's mask.
    pub frozen: BTreeSet<String>,
    pub x_t: Tensor<T>,
}

pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    input: &ModelInput<'_, T>,
    upstream: &Tensor<T>,
    scope: GradScope,
) -> Result<Gradients<T>> {
    let (_, trace) = forward_traced(params, input)?;
    backward_traced(params, input, &trace, upstream, scope)
}

pub fn backward_traced<T: Scalar>(
    params: &ModelParams<T>,
    input: &ModelInput<'_, T>,
    trace: &ForwardTrace<T>,
    upstream: &Tensor<T>,
    scope: GradScope,
) -> Result<Gradients<T>> {
    let cfg = &params.config;
    if upstream.shape() != input.x_t.shape() {
        return Err(Error::dim("backward (upstream)", upstream.shape(), input.x_t.shape()));
    }
    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let wanted = |name: &str| match scope {
        GradScope::All => true,
        GradScope::Trainable => params.is_trainable(name),
        GradScope::InputOnly => false,
    };
    let mut put = |name: String, g: Tensor<T>| {
        grads.insert(name, g);
    };

    if wanted("head.w") {
        put("head.w".into(), trace.final_stream.matmul_tn(upstream)?);
    }
    if wanted("head.b") {
        put("head.b".into(), upstream.sum_rows()?);
    }
    let mut d_stream = upstream.matmul_nt(&params.head_w)?;
    let mut d_noise: Option<Tensor<T>> = None;

    for sub in trace.subs.iter().rev() {
        let block = &params.blocks[sub.block];
        let p = format!("block{}", sub.block);
        let (d_normed, norm_name) = match (&sub.kind, &sub.cache) {
            (SubLayer::SelfAttn, SubCache::SelfAttn(cache)) => {
                let want_w = ["w_q", "w_k", "w_v", "w_proj"].iter().any(|f| wanted(&format!("{p}.self.{f}")));
                let g = mha_backward(&sub.normed, &sub.normed, &block.self_attn, cache, &d_stream, want_w)?;
                if let Some(w) = g.weights {
                    for (f, t) in w.fields() {
                        let n = format!("{p}.self.{f}");
                        if wanted(&n) {
                            put(n, t.clone());
                        }
                    }
                }
                (g.d_x.add(&g.d_ctx)?, "self")
            }
            (SubLayer::TextCross, SubCache::Text(cache)) => {
                let want_w = ["w_q", "w_k", "w_v", "w_proj"].iter().any(|f| wanted(&format!("{p}.text.{f}")));
                let g = mha_backward(&sub.normed, input.cond, &block.text, cache, &d_stream, want_w)?;
                if let Some(w) = g.weights {
                    for (f, t) in w.fields() {
                        let n = format!("{p}.text.{f}");
                        if wanted(&n) {
                            put(n, t.clone());
                        }
                    }
                }
                (g.d_x, "text")
            }
            (SubLayer::IdInject, SubCache::Id(trace)) => {
                let Some(tr) = trace else {
                    continue;
                };
                let want_w = crate::id_attention::ATTENTION_FIELDS
                    .iter()
                    .any(|f| wanted(&format!("{p}.id_attn.{f}")));
                let g = perceiver_inject_backward(
                    input.id_tokens,
                    &sub.normed,
                    input.noise(),
                    &block.id_attn,
                    tr,
                    &d_stream,
                    want_w,
                )?;
                if let Some(w) = g.weights {
                    for (f, t) in w.fields() {
                        let n = format!("{p}.id_attn.{f}");
                        if wanted(&n) {
                            put(n, t.clone());
                        }
                    }
                }
                match d_noise.as_mut() {
                    Some(acc) => acc.add_assign(&g.d_x_noise)?,
                    None => d_noise = Some(g.d_x_noise),
                }
                (g.d_x_gen, "id")
            }
            (SubLayer::Ffn, SubCache::Ffn { z, a }) => {
                let ffn = &block.ffn;
                let d_a = d_stream.matmul_nt(&ffn.w2)?;
                let d_z = d_a.zip_with(z, "silu backward", |g, zv| {
                    let s = sigmoid(zv);
                    g * s * (T::one() + zv * (T::one() - s))
                })?;
                if wanted(&format!("{p}.ffn.w2")) {
                    put(format!("{p}.ffn.w2"), a.matmul_tn(&d_stream)?);
                }
                if wanted(&format!("{p}.ffn.b2")) {
                    put(format!("{p}.ffn.b2"), d_stream.sum_rows()?);
                }
                if wanted(&format!("{p}.ffn.w1")) {
                    put(format!("{p}.ffn.w1"), sub.normed.matmul_tn(&d_z)?);
                }
                if wanted(&format!("{p}.ffn.b1")) {
                    put(format!("{p}.ffn.b1"), d_z.sum_rows()?);
                }
                (d_z.matmul_nt(&ffn.w1)?, "ffn")
            }
            _ => unreachable!("sub-layer kind and cache always agree"),
        };
        let gain = norm_gain(block, sub.kind);
        let (d_pre, d_gain) = rms_norm_backward(&sub.pre, gain, &sub.inv_rms, &d_normed);
        let n = format!("{p}.norm.{norm_name}");
        if wanted(&n) {
            put(n, d_gain);
        }
        d_stream.add_assign(&d_pre)?;
    }

    // stream₀ = x_t + pos_embed + time_embed(t)
    if wanted("pos_embed") {
        put("pos_embed".into(), d_stream.clone());
    }
    let d_temb = d_stream.sum_rows()?;
    if wanted("time_embed.proj") {
        put("time_embed.proj".into(), trace.time_vec.matmul_tn(&d_temb)?);
    }
    if wanted("time_embed.table") {
        let d_vec = d_temb.matmul_nt(&params.time_proj)?;
        let te = cfg.time_embed_dim;
        let mut d_table = Tensor::zeros(params.time_table.shape());
        let (i, f) = (trace.time_index, trace.time_frac);
        for j in 0..te {
            d_table.data_mut()[i * te + j] += (T::one() - f) * d_vec.data()[j];
            d_table.data_mut()[(i + 1) * te + j] += f * d_vec.data()[j];
        }
        put("time_embed.table".into(), d_table);
    }

    // Blocks without ID injection contribute nothing to their id_attn weights.
    for (name, t) in params.named() {
        if wanted(&name) && !grads.contains_key(&name) {
            grads.insert(name, Tensor::zeros(t.shape()));
        }
    }

    let mut d_x_t = d_stream;
    if input.noise_tokens.is_none() {
        if let Some(dn) = &d_noise {
            d_x_t.add_assign(dn)?;
        }
    }
    let frozen = grads.keys().filter(|n| !params.is_trainable(n)).cloned().collect();
    Ok(Gradients {
        params: grads,
        frozen,
        x_t: d_x_t,
    })
}
