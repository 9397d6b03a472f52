use serde::{Deserialize, Serialize};

use super::AttentionWeights;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const SUM_TOLERANCE: f64 = 1e-12;

/// Convex fusion coefficients over named variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub coefficients: Vec<f64>,
    pub variant_ids: Vec<String>,
}

impl FusionSpec {
    pub fn new(coefficients: Vec<f64>, variant_ids: Vec<String>) -> Result<Self> {
        let spec = Self {
            coefficients,
            variant_ids,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.is_empty() {
            return Err(Error::Spec("no coefficients".into()));
        }
        if self.coefficients.len() != self.variant_ids.len() {
            return Err(Error::Spec(format!(
                "{} coefficients for {} variants",
                self.coefficients.len(),
                self.variant_ids.len()
            )));
        }
        if let Some(w) = self.coefficients.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Spec(format!("coefficient {w} is negative or non-finite")));
        }
        let total: f64 = self.coefficients.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Spec(format!("coefficients sum to {total}, not 1")));
        }
        Ok(())
    }
}

fn weighted_sum<T: Scalar>(tensors: &[&Tensor<T>], coefficients: &[f64]) -> Tensor<T> {
    let mut out = tensors[0].scale(T::of(coefficients[0]));
    for (t, &c) in tensors.iter().zip(coefficients).skip(1) {
        out.axpy(T::of(c), t).expect("shapes checked by caller");
    }
    out
}

/// Element-wise `Σ wᵢ · Wᵢ` over every field of the variants.
pub fn fuse_weights<T: Scalar>(variants: &[&AttentionWeights<T>], spec: &FusionSpec) -> Result<AttentionWeights<T>> {
    spec.validate()?;
    if variants.len() != spec.coefficients.len() {
        return Err(Error::Fusion(format!(
            "{} variants for {} coefficients",
            variants.len(),
            spec.coefficients.len()
        )));
    }
    let first = variants[0];
    for (i, v) in variants.iter().enumerate().skip(1) {
        let same = v.head_count == first.head_count
            && v.fields().iter().zip(first.fields()).all(|((_, a), (_, b))| a.shape() == b.shape());
        if !same {
            return Err(Error::Fusion(format!("variant {i} is not shape-identical to variant 0")));
        }
    }
    let field = |idx: usize| {
        let ts: Vec<&Tensor<T>> = variants.iter().map(|v| v.fields()[idx].1).collect();
        weighted_sum(&ts, &spec.coefficients)
    };
    Ok(AttentionWeights {
        w_q: field(0),
        w_k: field(1),
        w_v: field(2),
        w_qnoise: field(3),
        w_out: field(4),
        head_count: first.head_count,
    })
}
