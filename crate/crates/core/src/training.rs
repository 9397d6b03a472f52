//! Joint flow/ID training of the injection weights, checkpoints, and the
//! validation-driven fusion-coefficient search.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Generation, World};
use crate::error::{Error, Result};
use crate::flow::{estimate_x0, id_loss_grad, interpolate_path, sample_euler, total_loss, velocity_mse, IdEncoder, SamplerConfig};
use crate::id_attention::{fuse_weights, FusionSpec};
use crate::io::Archive;
use crate::model::{backward_traced, forward_traced, GradScope, ModelInput, ModelParams, ToyDiTConfig};
use crate::numerics::{cosine, Scalar, Tensor};
use crate::schedules::{id_strength_at, lr_cosine, ScheduleParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub alpha0: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub adamw: AdamWParams,
    pub seed: u64,
    pub variant_tag: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 16,
            lambda: 0.5,
            alpha0: 0.8,
            lr0: 1e-3,
            lr_min: 0.0,
            adamw: AdamWParams::default(),
            seed: 0,
            variant_tag: "default".into(),
        }
    }
}

impl TrainConfig {
    /// Variant presets: `A` favours identity consistency, `B` favours editability.
    pub fn preset(tag: &str) -> Result<Self> {
        let base = Self::default();
        match tag {
            "A" => Ok(Self {
                lambda: 1.0,
                variant_tag: "A".into(),
                ..base
            }),
            "B" => Ok(Self {
                lambda: 0.25,
                alpha0: 0.4,
                variant_tag: "B".into(),
                ..base
            }),
            "default" => Ok(base),
            other => Err(Error::Usage(format!("unknown variant preset {other:?} (expected A or B)"))),
        }
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            alpha0: self.alpha0,
            lambda: self.lambda,
            lr0: self.lr0,
            lr_min: self.lr_min,
            total_steps: self.total_steps.max(1),
            ..ScheduleParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW hyper-parameters {a:?}")));
        }
        self.schedule().validate()
    }
}

/// First and second moments for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: usize,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let moments = params
            .named()
            .into_iter()
            .filter(|(n, _)| params.is_trainable(n))
            .map(|(n, t)| (n, (Tensor::zeros(t.shape()), Tensor::zeros(t.shape()))))
            .collect();
        Self { step: 0, moments }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay; `step` counts from 1.
pub fn adamw_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: usize,
    lr: f64,
    hyper: &AdamWParams,
) -> Result<()> {
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(Error::dim("adamw_update", param.shape(), other));
        }
    }
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let c1 = T::one() - T::of(hyper.beta1.powi(step as i32));
    let c2 = T::one() - T::of(hyper.beta2.powi(step as i32));
    let (lr, eps, wd) = (T::of(lr), T::of(hyper.eps), T::of(hyper.weight_decay));
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        let mi = b1 * m.data()[i] + (T::one() - b1) * g;
        let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let update = (mi / c1) / ((vi / c2).sqrt() + eps) + wd * p[i];
        p[i] -= lr * update;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_diff: f64,
    pub l_id: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,l_diff,l_id,l_total,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_diff, self.l_id, self.l_total, self.lr)
    }
}

pub fn losses_csv(history: &[LossRecord]) -> String {
    let mut out = format!("{}\n", LossRecord::CSV_HEADER);
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Per-sample `(l_diff, l_id, d l_total / d v)` for a predicted velocity `v` at `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_grad<T: Scalar, E: IdEncoder<T>>(
    v: &Tensor<T>,
    x_t: &Tensor<T>,
    t: T,
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    e_ref: &Tensor<T>,
    encoder: &E,
    lambda: T,
) -> Result<(T, T, Tensor<T>)> {
    let l_diff = velocity_mse(v, x0, x1)?;
    let x0_hat = estimate_x0(x_t, t, v)?;
    let l_id = T::one() - cosine(&encoder.embed(&x0_hat)?, e_ref)?;
    // d l_diff / d v = 2 (v - (x1 - x0)) / n ;  d l_id / d v = -t · d l_id / d x̂0
    let two_over_n = (T::one() + T::one()) / T::of_usize(v.numel());
    let mut grad = Tensor::from_fn(v.shape(), |i| two_over_n * (v.data()[i] - (x1.data()[i] - x0.data()[i])));
    if lambda != T::zero() {
        grad.axpy(-lambda * t, &id_loss_grad(&x0_hat, e_ref, encoder)?)?;
    }
    Ok((l_diff, l_id, grad))
}

/// Deterministic stream for one optimizer step.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Batch indices (into `dataset.train`) for a step.
pub fn draw_batch(seed: u64, step: usize, pool: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = step_rng(seed ^ 0xBA7C_0000, step);
    (0..batch_size).map(|_| rng.random_range(0..pool)).collect()
}

/// One optimizer step on the given samples. Gradients are accumulated in sample order.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    batch: &[usize],
    dataset: &Dataset<T>,
    world: &World<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let sched = cfg.schedule();
    let lambda = T::of(cfg.lambda);
    let inv_b = T::one() / T::of_usize(batch.len());
    let mut rng = step_rng(cfg.seed, step);
    let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let (mut sum_diff, mut sum_id) = (0.0, 0.0);
    for (k, &idx) in batch.iter().enumerate() {
        let sample = dataset
            .samples
            .get(idx)
            .ok_or_else(|| Error::Usage(format!("sample index {idx} out of range")))?;
        let rec = dataset.identity(sample.identity)?;
        let t = T::of(rng.random::<f64>());
        let x1 = Tensor::randn(sample.x0.shape(), T::one(), &mut rng);
        let x_t = interpolate_path(&sample.x0, &x1, t)?;
        let alpha = id_strength_at(T::one() - t, &sched)?;
        let input = ModelInput::new(&x_t, t, &sample.c, &rec.id_tokens, alpha);
        let (v, trace) = forward_traced(params, &input).map_err(|e| match e {
            Error::NonFinite(what) => Error::Divergence {
                step,
                sample: Some(k),
                detail: format!("non-finite output from {what}"),
            },
            other => other,
        })?;
        let (l_diff, l_id, upstream) = joint_loss_grad(&v, &x_t, t, &sample.x0, &x1, &rec.e_ref, world, lambda)?;
        let l_total = total_loss(l_diff, l_id, lambda);
        if !l_total.is_finite() {
            return Err(Error::Divergence {
                step,
                sample: Some(k),
                detail: format!("loss is {l_total}"),
            });
        }
        sum_diff += l_diff.as_f64();
        sum_id += l_id.as_f64();
        let upstream = upstream.scale(inv_b);
        let grads = backward_traced(params, &input, &trace, &upstream, GradScope::Trainable)?;
        for (name, g) in grads.params {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&g)?,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let lr = lr_cosine(step, cfg.total_steps.max(step + 1), &sched)?;
    opt.step += 1;
    for (name, p) in params.named_mut() {
        let Some(g) = acc.get(&name) else { continue };
        let (m, v) = opt
            .moments
            .get_mut(&name)
            .ok_or_else(|| Error::Config(format!("optimizer has no state for trainable `{name}`")))?;
        adamw_update(p, g, m, v, opt.step, lr, &cfg.adamw)?;
    }
    let b = batch.len() as f64;
    let (l_diff, l_id) = (sum_diff / b, sum_id / b);
    Ok(LossRecord {
        step,
        l_diff,
        l_id,
        l_total: total_loss(l_diff, l_id, cfg.lambda),
        lr,
    })
}

/// Runs `cfg.total_steps` steps from `start`, calling `on_record` after each.
pub fn train<T: Scalar>(
    start: &ModelParams<T>,
    dataset: &Dataset<T>,
    world: &World<T>,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<(ModelParams<T>, Vec<LossRecord>)> {
    cfg.validate()?;
    start.validate_mask()?;
    dataset.world.check_model(&start.config)?;
    if dataset.train.is_empty() {
        return Err(Error::Usage("dataset has no training samples".into()));
    }
    let mut params = start.clone();
    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let picks = draw_batch(cfg.seed, step, dataset.train.len(), cfg.batch_size);
        let batch: Vec<usize> = picks.into_iter().map(|i| dataset.train[i]).collect();
        let rec = train_step(&mut params, &mut opt, &batch, dataset, world, cfg, step)?;
        on_record(&rec);
        history.push(rec);
    }
    Ok((params, history))
}

/// Means of `(l_diff, l_id)` over the first and last `window` records.
pub fn loss_windows(history: &[LossRecord], window: usize) -> ((f64, f64), (f64, f64)) {
    let w = window.clamp(1, history.len().max(1));
    let mean = |rs: &[LossRecord]| {
        let n = rs.len().max(1) as f64;
        (
            rs.iter().map(|r| r.l_diff).sum::<f64>() / n,
            rs.iter().map(|r| r.l_id).sum::<f64>() / n,
        )
    };
    (mean(&history[..w.min(history.len())]), mean(&history[history.len().saturating_sub(w)..]))
}

/// Window used for "initial" and "final" loss summaries: 1% of the run.
pub fn summary_window(total_steps: usize) -> usize {
    (total_steps / 100).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub window: usize,
    pub initial_l_diff: f64,
    pub initial_l_id: f64,
    pub final_l_diff: f64,
    pub final_l_id: f64,
}

impl LossSummary {
    pub fn from_history(history: &[LossRecord]) -> Self {
        let window = summary_window(history.len());
        let ((a, b), (c, d)) = loss_windows(history, window);
        Self {
            window,
            initial_l_diff: a,
            initial_l_id: b,
            final_l_diff: c,
            final_l_id: d,
        }
    }
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `base`, `variant` or `fused`.
    pub stage: String,
    pub variant_tag: String,
    /// Initial ID strength to sample with; blended across sources for fused checkpoints.
    pub alpha0: f64,
    pub train: Option<TrainConfig>,
    pub dataset_seed: Option<u64>,
    pub rng: String,
    pub losses: Option<LossSummary>,
    pub fusion_sources: Vec<String>,
    pub fusion: Option<FusionSpec>,
}

impl CheckpointMeta {
    pub fn new(stage: &str, variant_tag: &str) -> Self {
        Self {
            stage: stage.into(),
            variant_tag: variant_tag.into(),
            alpha0: SamplerConfig::default().alpha0,
            train: None,
            dataset_seed: None,
            rng: "chacha8".into(),
            losses: None,
            fusion_sources: Vec::new(),
            fusion: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("checkpoint");
        a.set("meta", &self.meta).unwrap();
        a.set("model", &self.params.config).unwrap();
        a.set("freeze_mask", &self.params.freeze_mask).unwrap();
        for (name, t) in self.params.named() {
            a.push(name, t);
        }
        a
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        a.expect_kind("checkpoint", path)?;
        let bad = |e: Error| Error::format(path, e.to_string());
        let meta: CheckpointMeta = a.get("meta").map_err(bad)?;
        let config: ToyDiTConfig = a.get("model").map_err(bad)?;
        let mask: BTreeMap<String, bool> = a.get("freeze_mask").map_err(bad)?;
        let mut tensors = BTreeMap::new();
        for name in a.names() {
            tensors.insert(name.to_string(), a.tensor::<T>(name).map_err(bad)?);
        }
        let params = ModelParams::from_named(config, &tensors, mask).map_err(bad)?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}

/// Fine-tunes the injection weights of `base` on `dataset`.
pub fn train_variant<T: Scalar>(
    dataset: &Dataset<T>,
    world: &World<T>,
    base: &ModelParams<T>,
    cfg: &TrainConfig,
    on_record: impl FnMut(&LossRecord),
) -> Result<(Checkpoint<T>, Vec<LossRecord>)> {
    let mut start = base.clone();
    start.freeze_all_but_id_attention();
    let (params, history) = train(&start, dataset, world, cfg, on_record)?;
    let mut meta = CheckpointMeta::new("variant", &cfg.variant_tag);
    meta.alpha0 = cfg.alpha0;
    meta.train = Some(cfg.clone());
    meta.dataset_seed = Some(dataset.seed);
    meta.losses = Some(LossSummary::from_history(&history));
    Ok((Checkpoint { meta, params }, history))
}

/// Per-parameter content hashes, for checking that frozen tensors never move.
pub fn param_fingerprints<T: Scalar>(params: &ModelParams<T>) -> BTreeMap<String, u64> {
    params
        .named()
        .into_iter()
        .map(|(name, t)| {
            let mut h = DefaultHasher::new();
            t.shape().hash(&mut h);
            for x in t.data() {
                x.as_f64().to_bits().hash(&mut h);
            }
            (name, h.finish())
        })
        .collect()
}

/// Replaces every block's injection weights by the fusion of the variants' weights.
/// All other tensors must agree across variants and are taken from the first.
pub fn fuse_models<T: Scalar>(variants: &[&ModelParams<T>], spec: &FusionSpec) -> Result<ModelParams<T>> {
    spec.validate()?;
    let first = *variants
        .first()
        .ok_or_else(|| Error::Usage("no checkpoints to fuse".into()))?;
    if variants.len() != spec.coefficients.len() {
        return Err(Error::Fusion(format!(
            "{} checkpoints for {} coefficients",
            variants.len(),
            spec.coefficients.len()
        )));
    }
    for (i, v) in variants.iter().enumerate().skip(1) {
        if v.config != first.config {
            return Err(Error::Fusion(format!("checkpoint {i} has a different model configuration")));
        }
        for ((name, a), (_, b)) in v.named().into_iter().zip(first.named()) {
            if !crate::model::is_id_attention_param(&name) && a != b {
                return Err(Error::Fusion(format!("checkpoint {i} differs from checkpoint 0 outside the injection weights ({name})")));
            }
        }
    }
    let mut out = first.clone();
    for b in 0..out.blocks.len() {
        let ws: Vec<_> = variants.iter().map(|v| &v.blocks[b].id_attn).collect();
        out.blocks[b].id_attn = fuse_weights(&ws, spec)?;
    }
    Ok(out)
}

/// Fuses checkpoints into a new one whose header records the sources and coefficients.
pub fn fuse_checkpoints<T: Scalar>(variants: &[&Checkpoint<T>], sources: &[String], spec: &FusionSpec) -> Result<Checkpoint<T>> {
    let params: Vec<&ModelParams<T>> = variants.iter().map(|c| &c.params).collect();
    let fused = fuse_models(&params, spec)?;
    let mut meta = CheckpointMeta::new("fused", "fused");
    meta.alpha0 = blended_alpha0(variants, &spec.coefficients);
    meta.fusion_sources = sources.to_vec();
    meta.fusion = Some(spec.clone());
    Ok(Checkpoint { meta, params: fused })
}

fn blended_alpha0<T>(variants: &[&Checkpoint<T>], w: &[f64]) -> f64 {
    let a: f64 = variants.iter().zip(w).map(|(c, w)| w * c.meta.alpha0).sum();
    a.clamp(0.0, 1.0)
}

/// Validation prompts: up to `per_id` validation samples of every identity, identity-major.
pub fn validation_requests<T: Scalar>(dataset: &Dataset<T>, per_id: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for id in 0..dataset.num_ids() {
        out.extend(dataset.validation.iter().copied().filter(|&i| dataset.samples[i].identity == id).take(per_id));
    }
    out
}

/// Starting noise for request `k` under `noise_seed`.
pub fn request_noise<T: Scalar>(noise_seed: u64, k: usize, shape: &[usize]) -> Tensor<T> {
    Tensor::randn(shape, T::one(), &mut step_rng(noise_seed, k))
}

/// Samples each requested dataset prompt once; request `k` starts from noise seeded by `(noise_seed, k)`.
pub fn generate_for_requests<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset<T>,
    world: &World<T>,
    requests: &[usize],
    sampler: &SamplerConfig,
    noise_seed: u64,
) -> Result<Vec<Generation<T>>> {
    let mut out = Vec::with_capacity(requests.len());
    for (k, &idx) in requests.iter().enumerate() {
        let s = dataset
            .samples
            .get(idx)
            .ok_or_else(|| Error::Usage(format!("sample index {idx} out of range")))?;
        let rec = dataset.identity(s.identity)?;
        let x1 = request_noise(noise_seed, k, s.x0.shape());
        let x = sample_euler(params, &x1, &s.c, &rec.id_tokens, &rec.e_ref, world, sampler)?;
        out.push(Generation {
            identity: s.identity,
            z_attr: s.z_attr.clone(),
            sample: x,
        });
    }
    Ok(out)
}

/// Convex coefficient vectors on the simplex grid with spacing `step`, ordered so that weight
/// moves from the first variant towards later ones (`[1, 0, …]` comes first).
pub fn simplex_grid(n: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Usage("no variants".into()));
    }
    let k = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (k * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    let k = k as usize;
    let mut out = Vec::new();
    let mut counts = vec![0usize; n];
    fn rec(i: usize, left: usize, counts: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<f64>>) {
        let n = counts.len();
        if i == n - 1 {
            counts[i] = left;
            out.push(counts.iter().map(|&c| c as f64 / k as f64).collect());
            return;
        }
        for c in (0..=left).rev() {
            counts[i] = c;
            rec(i + 1, left - c, counts, k, out);
        }
    }
    rec(0, k, &mut counts, k, &mut out);
    Ok(out)
}

/// Harmonic mean of facesim (floored at 0) and editdiv min-max normalised to `[lo, hi]`.
/// A degenerate range normalises every editdiv to 1.
pub fn harmonic_score(facesim: f64, editdiv: f64, lo: f64, hi: f64) -> f64 {
    let range = hi - lo;
    let e = if range <= 1e-9 * hi.abs().max(1.0) {
        1.0
    } else {
        ((editdiv - lo) / range).clamp(0.0, 1.0)
    };
    let f = facesim.max(0.0);
    if f + e <= 0.0 {
        0.0
    } else {
        2.0 * f * e / (f + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub coefficients: Vec<f64>,
    pub facesim: f64,
    pub editdiv: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSearch {
    pub spec: FusionSpec,
    pub candidates: Vec<CandidateScore>,
    pub editdiv_min: f64,
    pub editdiv_max: f64,
}

const TIE_TOLERANCE: f64 = 1e-9;

/// Grid search with a caller-supplied `(facesim, editdiv)` evaluator.
pub fn search_fusion_with(
    variant_ids: &[String],
    grid_step: f64,
    mut evaluate: impl FnMut(&[f64]) -> Result<(f64, f64)>,
) -> Result<FusionSearch> {
    if variant_ids.len() == 1 {
        return Ok(FusionSearch {
            spec: FusionSpec::new(vec![1.0], variant_ids.to_vec())?,
            candidates: Vec::new(),
            editdiv_min: 0.0,
            editdiv_max: 0.0,
        });
    }
    let grid = simplex_grid(variant_ids.len(), grid_step)?;
    let mut raw = Vec::with_capacity(grid.len());
    for w in &grid {
        raw.push(evaluate(w)?);
    }
    let lo = raw.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = raw.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let candidates: Vec<CandidateScore> = grid
        .into_iter()
        .zip(raw)
        .map(|(w, (f, e))| CandidateScore {
            score: harmonic_score(f, e, lo, hi),
            coefficients: w,
            facesim: f,
            editdiv: e,
        })
        .collect();
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.score > candidates[best].score + TIE_TOLERANCE {
            best = i;
        }
    }
    let mut coefficients = candidates[best].coefficients.clone();
    // Grid values are k/K; renormalise so the sum is exactly representable as 1.
    let tail: f64 = coefficients[1..].iter().sum();
    coefficients[0] = 1.0 - tail;
    Ok(FusionSearch {
        spec: FusionSpec::new(coefficients, variant_ids.to_vec())?,
        candidates,
        editdiv_min: lo,
        editdiv_max: hi,
    })
}

/// Options for scoring fusion candidates on validation prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionEval {
    pub grid_step: f64,
    pub prompts_per_id: usize,
    pub noise_seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for FusionEval {
    fn default() -> Self {
        Self {
            grid_step: 0.1,
            prompts_per_id: 4,
            noise_seed: 0xF05E,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Validation `(facesim, editdiv)` of a model under common evaluation noise.
pub fn validation_scores<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset<T>,
    world: &World<T>,
    eval: &FusionEval,
) -> Result<(f64, f64)> {
    let requests = validation_requests(dataset, eval.prompts_per_id);
    if requests.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let gens = generate_for_requests(params, dataset, world, &requests, &eval.sampler, eval.noise_seed)?;
    let report = crate::data::eval_metrics(world, &gens, dataset)?;
    Ok((report.facesim, report.editdiv))
}

pub fn search_fusion_coefficients<T: Scalar>(
    variants: &[&Checkpoint<T>],
    variant_ids: &[String],
    dataset: &Dataset<T>,
    world: &World<T>,
    eval: &FusionEval,
) -> Result<FusionSearch> {
    if variants.is_empty() || variants.len() != variant_ids.len() {
        return Err(Error::Usage("need one id per variant and at least one variant".into()));
    }
    if validation_requests(dataset, eval.prompts_per_id).is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    search_fusion_with(variant_ids, eval.grid_step, |w| {
        let spec = FusionSpec::new(w.to_vec(), variant_ids.to_vec())?;
        let fused = fuse_checkpoints(variants, variant_ids, &spec)?;
        checkpoint_scores(&fused, dataset, world, eval)
    })
}

/// [`validation_scores`] sampled at the checkpoint's own ID strength.
pub fn checkpoint_scores<T: Scalar>(ck: &Checkpoint<T>, dataset: &Dataset<T>, world: &World<T>, eval: &FusionEval) -> Result<(f64, f64)> {
    let mut eval = eval.clone();
    eval.sampler.alpha0 = ck.meta.alpha0;
    validation_scores(&ck.params, dataset, world, &eval)
}
