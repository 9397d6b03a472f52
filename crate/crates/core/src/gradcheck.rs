//! Analytic-versus-finite-difference check of the full training objective on the minimal model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::World;
use crate::error::{Error, Result};
use crate::flow::{estimate_x0, interpolate_path, velocity_mse};
use crate::model::{backward_traced, forward_traced, init_params, predict_velocity, GradScope, ModelInput, ModelParams, ToyDiTConfig};
use crate::numerics::{cosine, finite_diff_grad, relative_error, Tensor};
use crate::training::joint_loss_grad;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub lambda: f64,
    pub t: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> &ParamCheck {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("at least one parameter")
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error < TOLERANCE)
    }
}

/// Minimal model with every injection path switched on (non-zero `w_out`) and all parameters trainable.
pub fn check_model(seed: u64) -> Result<ModelParams<f64>> {
    let cfg = ToyDiTConfig::minimal();
    let mut p = init_params::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let d = cfg.dim;
    for b in &mut p.blocks {
        b.id_attn.w_out = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    }
    for v in p.freeze_mask.values_mut() {
        *v = true;
    }
    Ok(p)
}

/// Compares `d L_total / d θ` for every parameter tensor. `fault` scales the analytic gradient of one
/// named parameter by 1.01, for exercising the failure path.
pub fn run(seed: u64, lambda: f64, fault: Option<&str>) -> Result<GradcheckReport> {
    let params = check_model(seed)?;
    let cfg = params.config.clone();
    let world = World::<f64>::for_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.token_count, cfg.dim];
    let z_id = Tensor::randn(&[world.config().k_id], 1.0, &mut rng);
    let z_attr = Tensor::randn(&[world.config().k_attr], 1.0, &mut rng);
    let rec = world.identity(0, z_id.clone())?;
    let x0 = world.generate(&z_id, &z_attr)?;
    let c = world.condition(&z_attr)?;
    let x1 = Tensor::randn(&shape, 1.0, &mut rng);
    let t = 0.2 + 0.6 * rng.random::<f64>();
    let alpha = 0.5;
    let x_t = interpolate_path(&x0, &x1, t)?;

    let input = ModelInput::new(&x_t, t, &c, &rec.id_tokens, alpha);
    let (v, trace) = forward_traced(&params, &input)?;
    let (_, _, upstream) = joint_loss_grad(&v, &x_t, t, &x0, &x1, &rec.e_ref, &world, lambda)?;
    let grads = backward_traced(&params, &input, &trace, &upstream, GradScope::All)?;

    let objective = |p: &ModelParams<f64>| -> Result<f64> {
        let v = predict_velocity(p, &ModelInput::new(&x_t, t, &c, &rec.id_tokens, alpha))?;
        let x0_hat = estimate_x0(&x_t, t, &v)?;
        let l_id = 1.0 - cosine(&world.id_encode(&x0_hat)?, &rec.e_ref)?;
        Ok(velocity_mse(&v, &x0, &x1)? + lambda * l_id)
    };

    let mut checks = Vec::new();
    for name in params.param_names() {
        let mut analytic = grads
            .params
            .get(&name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no gradient for {name}")))?;
        if fault == Some(name.as_str()) {
            analytic = analytic.scale(1.01);
        }
        let current = params.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone()).unwrap();
        let numeric = finite_diff_grad(
            |probe: &Tensor<f64>| {
                let mut q = params.clone();
                for (n, slot) in q.named_mut() {
                    if n == name {
                        *slot = probe.clone();
                    }
                }
                objective(&q)
            },
            &current,
            STEP,
        )?;
        checks.push(ParamCheck {
            rel_error: relative_error(&analytic, &numeric, FLOOR)?,
            name,
        });
    }
    if let Some(f) = fault {
        if !checks.iter().any(|c| c.name == f) {
            return Err(Error::Usage(format!("unknown parameter {f:?} for fault injection")));
        }
    }
    Ok(GradcheckReport { seed, lambda, t, checks })
}
