//! Forward process, flow-matching and ID losses, ID guidance, and the guided Euler sampler.
//!
//! Flow time `t` follows the training path `x_t = (1 - t)·x0 + t·x1`: `t = 0` is data and
//! `t = 1` is noise. Sampling integrates from `t = 1` down to `t = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, predict_velocity, GradScope, ModelInput, ModelParams, QueryNoiseSource};
use crate::numerics::{cosine, cosine_grad, Scalar, Tensor};
use crate::schedules::{guidance_weight, id_strength_at, noise_schedule, ScheduleParams};

/// Everything besides `(x_t, t)` that a velocity evaluation is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, T> {
    pub cond: &'a Tensor<T>,
    pub id_tokens: &'a Tensor<T>,
    pub alpha: T,
    /// Source of `Q_noise`; `None` means the current `x_t`.
    pub noise_tokens: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> Conditioning<'a, T> {
    pub fn new(cond: &'a Tensor<T>, id_tokens: &'a Tensor<T>, alpha: T) -> Self {
        Self {
            cond,
            id_tokens,
            alpha,
            noise_tokens: None,
        }
    }

    pub fn input(&self, x_t: &'a Tensor<T>, t: T) -> ModelInput<'a, T> {
        ModelInput::new(x_t, t, self.cond, self.id_tokens, self.alpha).with_noise_tokens(self.noise_tokens)
    }
}

/// A learned (or stub) velocity field with a vector-Jacobian product in `x_t`.
pub trait VelocityModel<T: Scalar> {
    fn velocity(&self, x_t: &Tensor<T>, t: T, cond: &Conditioning<'_, T>) -> Result<Tensor<T>>;

    /// `(∂f/∂x_t)ᵀ · upstream`.
    fn velocity_vjp(&self, x_t: &Tensor<T>, t: T, cond: &Conditioning<'_, T>, upstream: &Tensor<T>) -> Result<Tensor<T>>;

    fn query_noise(&self) -> QueryNoiseSource {
        QueryNoiseSource::CurrentLatent
    }
}

impl<T: Scalar> VelocityModel<T> for ModelParams<T> {
    fn velocity(&self, x_t: &Tensor<T>, t: T, cond: &Conditioning<'_, T>) -> Result<Tensor<T>> {
        predict_velocity(self, &cond.input(x_t, t))
    }

    fn velocity_vjp(&self, x_t: &Tensor<T>, t: T, cond: &Conditioning<'_, T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(backward(self, &cond.input(x_t, t), upstream, GradScope::InputOnly)?.x_t)
    }

    fn query_noise(&self) -> QueryNoiseSource {
        self.config.query_noise
    }
}

/// Maps a sample to an identity embedding (not necessarily normalised; only its direction matters).
pub trait IdEncoder<T: Scalar> {
    fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// `(∂embed/∂x)ᵀ · upstream`.
    fn embed_vjp(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>>;
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

/// `a(t)·x0 + b(t)·eps` with the cosine noise schedule.
pub fn forward_diffuse<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    same_shape(x0, eps, "forward_diffuse")?;
    let (a, b) = noise_schedule(t)?;
    x0.zip_with(eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// `(1 - t)·x0 + t·x1`, the flow-matching training path.
pub fn interpolate_path<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    same_shape(x0, x1, "interpolate_path")?;
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::Domain {
            what: "t",
            value: t.as_f64(),
            domain: "[0, 1]",
        });
    }
    let s = T::one() - t;
    x0.zip_with(x1, "interpolate_path", |a, b| s * a + t * b)
}

/// Mean squared error of a velocity prediction against `x1 - x0`.
pub fn velocity_mse<T: Scalar>(v: &Tensor<T>, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<T> {
    same_shape(v, x0, "flow_matching_loss")?;
    same_shape(x0, x1, "flow_matching_loss")?;
    let n = T::of_usize(v.numel());
    let mut acc = T::zero();
    for ((&p, &a), &b) in v.data().iter().zip(x0.data()).zip(x1.data()) {
        let r = p - (b - a);
        acc += r * r;
    }
    Ok(acc / n)
}

/// `mean ‖f(path(x0, x1, t), t, c) - (x1 - x0)‖²`.
pub fn flow_matching_loss<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    t: T,
    cond: &Conditioning<'_, T>,
) -> Result<T> {
    let x_t = interpolate_path(x0, x1, t)?;
    let v = model.velocity(&x_t, t, cond)?;
    velocity_mse(&v, x0, x1)
}

/// `x̂0 = x_t - t·v`.
pub fn estimate_x0<T: Scalar>(x_t: &Tensor<T>, t: T, v: &Tensor<T>) -> Result<Tensor<T>> {
    x_t.zip_with(v, "estimate_x0", |x, vv| x - t * vv)
}

/// `1 - cosine(encoder(x̂0), e_ref)`, in `[0, 2]`.
pub fn id_loss<T: Scalar, E: IdEncoder<T> + ?Sized>(x0_hat: &Tensor<T>, e_ref: &Tensor<T>, encoder: &E) -> Result<T> {
    let emb = encoder.embed(x0_hat)?;
    Ok(T::one() - cosine(&emb, e_ref)?)
}

/// Gradient of [`id_loss`] with respect to `x̂0`.
pub fn id_loss_grad<T: Scalar, E: IdEncoder<T> + ?Sized>(
    x0_hat: &Tensor<T>,
    e_ref: &Tensor<T>,
    encoder: &E,
) -> Result<Tensor<T>> {
    let emb = encoder.embed(x0_hat)?;
    let g = cosine_grad(&emb, e_ref)?;
    Ok(encoder.embed_vjp(x0_hat, &g)?.scale(-T::one()))
}

/// `l_diff + λ·l_id`.
pub fn total_loss<T: Scalar>(l_diff: T, l_id: T, lambda: T) -> T {
    l_diff + lambda * l_id
}

/// Result of an ID-guidance evaluation.
#[derive(Debug, Clone)]
pub struct Guidance<T> {
    /// Ascent direction of identity similarity, shape of `x_t`.
    pub direction: Tensor<T>,
    /// Identity cosine at the evaluation point.
    pub similarity: T,
    pub clipped: bool,
}

/// Default gradient-norm cap `10·√numel`.
pub fn default_guidance_cap(numel: usize) -> f64 {
    10.0 * (numel as f64).sqrt()
}

/// `∇_{x_t} cosine(encoder(x_t - t·f(x_t, t, c)), e_ref)`, clipped to `cap` in norm.
pub fn id_guidance<T, M, E>(
    x_t: &Tensor<T>,
    t: T,
    e_ref: &Tensor<T>,
    model: &M,
    encoder: &E,
    cond: &Conditioning<'_, T>,
    cap: Option<T>,
) -> Result<Guidance<T>>
where
    T: Scalar,
    M: VelocityModel<T> + ?Sized,
    E: IdEncoder<T> + ?Sized,
{
    let v = model.velocity(x_t, t, cond)?;
    let x0_hat = estimate_x0(x_t, t, &v)?;
    let emb = encoder.embed(&x0_hat)?;
    let similarity = cosine(&emb, e_ref)?;
    let d_emb = cosine_grad(&emb, e_ref)?;
    let d_x0 = encoder.embed_vjp(&x0_hat, &d_emb)?;
    let mut direction = d_x0.clone();
    if t != T::zero() {
        let through_model = model.velocity_vjp(x_t, t, cond, &d_x0)?;
        direction.axpy(-t, &through_model)?;
    }
    let mut clipped = false;
    if let Some(cap) = cap {
        let norm = direction.norm();
        if norm > cap {
            log::warn!("id guidance norm {norm} exceeds cap {cap}; clipping");
            direction = direction.scale(cap / norm);
            clipped = true;
        }
    }
    if !direction.is_finite() {
        return Err(Error::NonFinite("id_guidance".into()));
    }
    Ok(Guidance {
        direction,
        similarity,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Classifier-free mixing scale; 1 evaluates only the conditional field.
    pub cfg_scale: f64,
    /// Distilled-guidance setting of the reference base model. The toy model has no such
    /// input, so this is recorded alongside generations but not consumed.
    pub guidance_scale: f64,
    pub beta0: f64,
    pub alpha0: f64,
    /// Norm cap for the guidance direction; `None` uses `10·√numel`.
    pub guidance_cap: Option<f64>,
    pub method: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 1.0,
            guidance_scale: 3.5,
            beta0: 0.1,
            alpha0: 0.8,
            guidance_cap: None,
            method: "euler".into(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        for (name, v) in [
            ("cfg_scale", self.cfg_scale),
            ("guidance_scale", self.guidance_scale),
            ("beta0", self.beta0),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::Config(format!("alpha0 = {} must lie in [0, 1]", self.alpha0)));
        }
        if self.method != "euler" {
            return Err(Error::Config(format!("unsupported sampler method {:?}", self.method)));
        }
        Ok(())
    }

    fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            alpha0: self.alpha0,
            beta0: self.beta0,
            total_steps: self.steps,
            ..ScheduleParams::default()
        }
    }
}

/// Guided explicit-Euler integration from `t = 1` (noise `x1`) to `t = 0`.
///
/// At step `k` the flow time is `t_k = 1 - k/steps` and the denoising progress is `k/steps`;
/// the ID strength `α₀(1 - k/steps)` feeds query compensation and `β` scales the ID-guidance
/// direction, which is applied so that each reverse-time step climbs identity similarity.
#[allow(clippy::too_many_arguments)]
pub fn sample_euler<T, M, E>(
    model: &M,
    x1: &Tensor<T>,
    cond: &Tensor<T>,
    id_tokens: &Tensor<T>,
    e_ref: &Tensor<T>,
    encoder: &E,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>>
where
    T: Scalar,
    M: VelocityModel<T> + ?Sized,
    E: IdEncoder<T> + ?Sized,
{
    cfg.validate()?;
    let sched = cfg.schedule();
    let steps = cfg.steps;
    let dt = T::one() / T::of_usize(steps);
    let null_cond = Tensor::zeros(cond.shape());
    let cap = T::of(cfg.guidance_cap.unwrap_or_else(|| default_guidance_cap(x1.numel())));
    let initial_noise = (model.query_noise() == QueryNoiseSource::InitialNoise).then_some(x1);
    let mut x = x1.clone();
    for k in 0..steps {
        let progress = T::of_usize(k) / T::of_usize(steps);
        let t = T::one() - progress;
        let alpha = id_strength_at(progress, &sched)?;
        let conditioning = Conditioning {
            cond,
            id_tokens,
            alpha,
            noise_tokens: initial_noise,
        };
        let mut drift = model.velocity(&x, t, &conditioning)?;
        if cfg.cfg_scale != 1.0 {
            let unconditional = Conditioning {
                cond: &null_cond,
                ..conditioning
            };
            let f_null = model.velocity(&x, t, &unconditional)?;
            let s = T::of(cfg.cfg_scale);
            drift = f_null.zip_with(&drift, "cfg mixing", |u, c| u + s * (c - u))?;
        }
        let mut next = x.clone();
        next.axpy(-dt, &drift)?;
        let beta = guidance_weight(progress, &sched)?;
        if beta != T::zero() {
            let g = id_guidance(&x, t, e_ref, model, encoder, &conditioning, Some(cap))?;
            next.axpy(dt * beta, &g.direction)?;
        }
        if !next.is_finite() {
            return Err(Error::Divergence {
                step: k,
                sample: None,
                detail: "non-finite sampler state".into(),
            });
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ToyDiTConfig};
    use crate::numerics::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `f(x, t, c) = a·x + b(x.shape)` where `b` is fixed.
    struct AffineField {
        a: f64,
        b: Tensor<f64>,
    }

    impl VelocityModel<f64> for AffineField {
        fn velocity(&self, x_t: &Tensor<f64>, _t: f64, _c: &Conditioning<'_, f64>) -> Result<Tensor<f64>> {
            let mut v = x_t.scale(self.a);
            v.add_assign(&self.b)?;
            Ok(v)
        }
        fn velocity_vjp(&self, _x: &Tensor<f64>, _t: f64, _c: &Conditioning<'_, f64>, up: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(up.scale(self.a))
        }
    }

    /// Returns a fixed tensor regardless of input.
    struct ConstField(Tensor<f64>);

    impl VelocityModel<f64> for ConstField {
        fn velocity(&self, _x: &Tensor<f64>, _t: f64, _c: &Conditioning<'_, f64>) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
        fn velocity_vjp(&self, x: &Tensor<f64>, _t: f64, _c: &Conditioning<'_, f64>, _up: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct LinearEncoder(Tensor<f64>);

    impl IdEncoder<f64> for LinearEncoder {
        fn embed(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            let flat = x.reshape(&[1, x.numel()])?;
            Ok(Tensor::vector(flat.matmul_nt(&self.0)?.into_data()))
        }
        fn embed_vjp(&self, _x: &Tensor<f64>, up: &Tensor<f64>) -> Result<Tensor<f64>> {
            let row = up.reshape(&[1, up.numel()])?;
            row.matmul(&self.0)?.reshape(_x.shape())
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dummy_cond() -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]))
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let mut r = rng(0);
        let x0 = Tensor::<f64>::randn(&[3, 2], 1.0, &mut r);
        let eps = Tensor::<f64>::randn(&[3, 2], 1.0, &mut r);
        assert_eq!(forward_diffuse(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(forward_diffuse(&x0, &eps, 1.0).unwrap(), eps);
        let mid = forward_diffuse(&x0, &eps, 0.5).unwrap();
        let expected = x0.add(&eps).unwrap().scale(0.5);
        assert!(mid.max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(forward_diffuse(&x0, &Tensor::zeros(&[2, 3]), 0.5).is_err());
    }

    #[test]
    fn forward_diffuse_is_affine_with_unit_coefficient_sum() {
        let mut r = rng(1);
        let x0 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
        let ones = Tensor::full(&[4, 3], 1.0);
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            // Feeding the same constant on both sides exposes a(t) + b(t).
            let both = forward_diffuse(&ones, &ones, t).unwrap();
            assert!(both.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
            let zero_eps = forward_diffuse(&x0, &Tensor::zeros(&[4, 3]), t).unwrap();
            let (a, _) = noise_schedule(t).unwrap();
            assert!(zero_eps.max_abs_diff(&x0.scale(a)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn interpolation_reference_points() {
        let mut r = rng(2);
        let x0 = Tensor::<f64>::randn(&[2, 2], 1.0, &mut r);
        let x1 = Tensor::<f64>::randn(&[2, 2], 1.0, &mut r);
        assert_eq!(interpolate_path(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate_path(&x0, &x1, 1.0).unwrap(), x1);
        let q = interpolate_path(&x0, &x1, 0.25).unwrap();
        let expected = x0.scale(0.75).add(&x1.scale(0.25)).unwrap();
        assert!(q.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn flow_loss_of_stub_predictors() {
        let mut r = rng(3);
        let x0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let x1 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let (c, ids) = dummy_cond();
        let cond = Conditioning::new(&c, &ids, 0.5);
        let target = x1.sub(&x0).unwrap();
        let perfect = ConstField(target.clone());
        assert_eq!(flow_matching_loss(&perfect, &x0, &x1, 0.3, &cond).unwrap(), 0.0);
        let u = Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.5 } else { -0.5 });
        let offset = ConstField(target.add(&u).unwrap());
        assert!((flow_matching_loss(&offset, &x0, &x1, 0.3, &cond).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn flow_loss_matches_direct_formula() {
        let mut r = rng(4);
        let x0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let x1 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let field = AffineField {
            a: -0.7,
            b: Tensor::randn(&[3, 4], 1.0, &mut r),
        };
        let (c, ids) = dummy_cond();
        let cond = Conditioning::new(&c, &ids, 0.5);
        let t = 0.61;
        let mut direct = 0.0;
        for i in 0..12 {
            let (a, b) = (x0.data()[i], x1.data()[i]);
            let xt = (1.0 - t) * a + t * b;
            let pred = -0.7 * xt + field.b.data()[i];
            direct += (pred - (b - a)).powi(2);
        }
        direct /= 12.0;
        assert!((flow_matching_loss(&field, &x0, &x1, t, &cond).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn x0_estimate_recovers_path_origin() {
        let mut r = rng(5);
        let x0 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
        let x1 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
        let xt = interpolate_path(&x0, &x1, 0.8).unwrap();
        let v = x1.sub(&x0).unwrap();
        assert!(estimate_x0(&xt, 0.8, &v).unwrap().max_abs_diff(&x0).unwrap() < 1e-12);
        assert_eq!(estimate_x0(&xt, 0.0, &v).unwrap(), xt);
        assert_eq!(estimate_x0(&xt, 0.8, &Tensor::zeros(&[4, 3])).unwrap(), xt);
    }

    #[test]
    fn id_loss_reference_values() {
        let enc = LinearEncoder(Tensor::eye(2));
        let x = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(id_loss(&x, &Tensor::vector(vec![1.0, 0.0]), &enc).unwrap(), 0.0);
        assert_eq!(id_loss(&x, &Tensor::vector(vec![0.0, 3.0]), &enc).unwrap(), 1.0);
        assert_eq!(id_loss(&x, &Tensor::vector(vec![-1.0, 0.0]), &enc).unwrap(), 2.0);
        assert!(matches!(
            id_loss(&Tensor::zeros(&[1, 2]), &Tensor::vector(vec![1.0, 0.0]), &enc),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn total_loss_reference_values() {
        assert_eq!(total_loss(0.2, 0.4, 0.0), 0.2);
        assert!((total_loss(0.2f64, 0.4, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(total_loss(0.3, 0.0, 0.5), 0.3);
    }

    #[test]
    fn guidance_vanishes_at_identity_fixed_point() {
        let mut r = rng(6);
        let enc = LinearEncoder(Tensor::randn(&[5, 12], 1.0, &mut r));
        let x_t = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let (c, ids) = dummy_cond();
        let cond = Conditioning::new(&c, &ids, 0.5);
        let still = ConstField(Tensor::zeros(&[3, 4]));
        let e_ref = enc.embed(&x_t).unwrap().scale(2.5);
        let g = id_guidance(&x_t, 0.4, &e_ref, &still, &enc, &cond, None).unwrap();
        assert!(g.direction.norm() < 1e-6, "{}", g.direction.norm());
    }

    #[test]
    fn guidance_matches_closed_form_linear_cosine_gradient() {
        let mut r = rng(7);
        let e = Tensor::<f64>::randn(&[5, 12], 1.0, &mut r);
        let enc = LinearEncoder(e.clone());
        let x_t = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let e_ref = Tensor::<f64>::randn(&[5], 1.0, &mut r);
        let (c, ids) = dummy_cond();
        let cond = Conditioning::new(&c, &ids, 0.5);
        let still = ConstField(Tensor::zeros(&[3, 4]));
        let g = id_guidance(&x_t, 0.5, &e_ref, &still, &enc, &cond, None).unwrap();
        // ∇_x cos(Ex, r) = Eᵀ (r/(|Ex||r|) - (Ex·r) Ex/(|Ex|³|r|))
        let x = x_t.data();
        let ex: Vec<f64> = (0..5).map(|i| (0..12).map(|j| e.get(&[i, j]) * x[j]).sum()).collect();
        let rr = e_ref.data();
        let nx = ex.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nr = rr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = ex.iter().zip(rr).map(|(a, b)| a * b).sum();
        let inner: Vec<f64> = (0..5).map(|i| rr[i] / (nx * nr) - dot * ex[i] / (nx.powi(3) * nr)).collect();
        for j in 0..12 {
            let expected: f64 = (0..5).map(|i| e.get(&[i, j]) * inner[i]).sum();
            assert!((g.direction.data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_matches_finite_differences_through_model() {
        let cfg = ToyDiTConfig::minimal();
        let mut params = init_params::<f64>(&cfg, 31).unwrap();
        let mut r = rng(8);
        for b in &mut params.blocks {
            b.id_attn.w_out = Tensor::randn(&[cfg.dim, cfg.dim], 0.3, &mut r);
        }
        let enc = LinearEncoder(Tensor::randn(&[3, cfg.token_count * cfg.dim], 0.2, &mut r));
        let x_t = Tensor::randn(&[cfg.token_count, cfg.dim], 1.0, &mut r);
        let c = Tensor::randn(&[cfg.cond_token_count, cfg.cond_dim], 1.0, &mut r);
        let ids = Tensor::randn(&[cfg.id_token_count, cfg.id_dim], 1.0, &mut r);
        let e_ref = Tensor::randn(&[3], 1.0, &mut r);
        let cond = Conditioning::new(&c, &ids, 0.6);
        let t = 0.7;
        let g = id_guidance(&x_t, t, &e_ref, &params, &enc, &cond, None).unwrap();
        let objective = |x: &Tensor<f64>| {
            let v = params.velocity(x, t, &cond)?;
            cosine(&enc.embed(&estimate_x0(x, t, &v)?)?, &e_ref)
        };
        let fd = finite_diff_grad(objective, &x_t, 1e-5).unwrap();
        assert!(relative_error(&g.direction, &fd, 1e-10).unwrap() < 1e-4);

        // Ascent: a small step along +g does not lower the similarity.
        let before = objective(&x_t).unwrap();
        let mut stepped = x_t.clone();
        stepped.axpy(1e-4, &g.direction).unwrap();
        assert!(objective(&stepped).unwrap() >= before - 1e-6);
    }

    #[test]
    fn guidance_is_clipped_to_cap() {
        let mut r = rng(9);
        let enc = LinearEncoder(Tensor::randn(&[4, 6], 100.0, &mut r));
        let x_t = Tensor::<f64>::randn(&[2, 3], 0.01, &mut r);
        let e_ref = Tensor::<f64>::randn(&[4], 1.0, &mut r);
        let (c, ids) = dummy_cond();
        let cond = Conditioning::new(&c, &ids, 0.5);
        let still = ConstField(Tensor::zeros(&[2, 3]));
        let g = id_guidance(&x_t, 0.5, &e_ref, &still, &enc, &cond, Some(1.0)).unwrap();
        assert!(g.clipped);
        assert!((g.direction.norm() - 1.0).abs() < 1e-12);
    }

    fn unguided_euler(model: &dyn VelocityModel<f64>, x1: &Tensor<f64>, cond: &Tensor<f64>, ids: &Tensor<f64>, steps: usize, alpha0: f64) -> Tensor<f64> {
        let mut x = x1.clone();
        for k in 0..steps {
            let t = 1.0 - k as f64 / steps as f64;
            let alpha = alpha0 * (1.0 - k as f64 / steps as f64);
            let v = model.velocity(&x, t, &Conditioning::new(cond, ids, alpha)).unwrap();
            let dt = 1.0 / steps as f64;
            x = x.zip_with(&v, "euler", |a, b| a - dt * b).unwrap();
        }
        x
    }

    #[test]
    fn guidance_off_reduces_to_plain_euler() {
        let cfg = ToyDiTConfig::minimal();
        let mut params = init_params::<f64>(&cfg, 41).unwrap();
        let mut r = rng(10);
        for b in &mut params.blocks {
            b.id_attn.w_out = Tensor::randn(&[cfg.dim, cfg.dim], 0.3, &mut r);
        }
        let enc = LinearEncoder(Tensor::randn(&[3, cfg.token_count * cfg.dim], 0.2, &mut r));
        let x1 = Tensor::randn(&[cfg.token_count, cfg.dim], 1.0, &mut r);
        let c = Tensor::randn(&[cfg.cond_token_count, cfg.cond_dim], 1.0, &mut r);
        let ids = Tensor::randn(&[cfg.id_token_count, cfg.id_dim], 1.0, &mut r);
        let e_ref = Tensor::randn(&[3], 1.0, &mut r);
        let sc = SamplerConfig {
            beta0: 0.0,
            cfg_scale: 1.0,
            steps: 7,
            ..SamplerConfig::default()
        };
        let guided = sample_euler(&params, &x1, &c, &ids, &e_ref, &enc, &sc).unwrap();
        assert_eq!(guided, unguided_euler(&params, &x1, &c, &ids, 7, sc.alpha0));
        let on = SamplerConfig { beta0: 0.5, ..sc };
        assert_ne!(sample_euler(&params, &x1, &c, &ids, &e_ref, &enc, &on).unwrap(), guided);
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let mut r = rng(11);
        let field = AffineField {
            a: 0.3,
            b: Tensor::randn(&[2, 3], 1.0, &mut r),
        };
        let x1 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
        let enc = LinearEncoder(Tensor::randn(&[2, 6], 1.0, &mut r));
        let (c, ids) = dummy_cond();
        let sc = SamplerConfig {
            steps: 1,
            beta0: 0.0,
            ..SamplerConfig::default()
        };
        let out = sample_euler(&field, &x1, &c, &ids, &Tensor::vector(vec![1.0, 0.0]), &enc, &sc).unwrap();
        for i in 0..6 {
            let hand = x1.data()[i] - (0.3 * x1.data()[i] + field.b.data()[i]);
            assert!((out.data()[i] - hand).abs() < 1e-15);
        }
    }

    #[test]
    fn classifier_free_mixing_uses_null_condition() {
        struct CondEcho;
        impl VelocityModel<f64> for CondEcho {
            fn velocity(&self, x: &Tensor<f64>, _t: f64, c: &Conditioning<'_, f64>) -> Result<Tensor<f64>> {
                Ok(Tensor::full(x.shape(), c.cond.sum()))
            }
            fn velocity_vjp(&self, x: &Tensor<f64>, _t: f64, _c: &Conditioning<'_, f64>, _u: &Tensor<f64>) -> Result<Tensor<f64>> {
                Ok(Tensor::zeros(x.shape()))
            }
        }
        let x1 = Tensor::zeros(&[1, 2]);
        let c = Tensor::full(&[1, 1], 1.0);
        let ids = Tensor::zeros(&[1, 1]);
        let enc = LinearEncoder(Tensor::eye(2));
        let sc = SamplerConfig {
            steps: 1,
            beta0: 0.0,
            cfg_scale: 3.0,
            ..SamplerConfig::default()
        };
        // f(∅) = 0, f(c) = 1 → drift 0 + 3·(1 - 0) = 3
        let out = sample_euler(&CondEcho, &x1, &c, &ids, &Tensor::vector(vec![1.0, 0.0]), &enc, &sc).unwrap();
        assert!(out.data().iter().all(|&v| (v + 3.0).abs() < 1e-15));
    }

    #[test]
    fn euler_is_first_order_on_linear_ode() {
        // dx/dt = -x from t = 1 to 0 gives x(0) = e · x(1).
        let field = AffineField {
            a: -1.0,
            b: Tensor::zeros(&[1, 1]),
        };
        let x1 = Tensor::full(&[1, 1], 1.0);
        let enc = LinearEncoder(Tensor::eye(1));
        let (c, ids) = dummy_cond();
        let exact = std::f64::consts::E;
        let err = |steps: usize| {
            let sc = SamplerConfig {
                steps,
                beta0: 0.0,
                ..SamplerConfig::default()
            };
            let out = sample_euler(&field, &x1, &c, &ids, &Tensor::vector(vec![1.0]), &enc, &sc).unwrap();
            (out.data()[0] - exact).abs()
        };
        let errs: Vec<f64> = [10, 20, 40, 80].iter().map(|&s| err(s)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn divergence_reports_step() {
        let field = AffineField {
            a: f64::MAX,
            b: Tensor::zeros(&[1, 1]),
        };
        let enc = LinearEncoder(Tensor::eye(1));
        let (c, ids) = dummy_cond();
        let sc = SamplerConfig {
            steps: 4,
            beta0: 0.0,
            ..SamplerConfig::default()
        };
        let r = sample_euler(&field, &Tensor::full(&[1, 1], 10.0), &c, &ids, &Tensor::vector(vec![1.0]), &enc, &sc);
        assert!(matches!(r, Err(Error::Divergence { step: 0, .. })), "{r:?}");
    }
}
