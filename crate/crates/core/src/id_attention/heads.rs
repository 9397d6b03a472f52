//! Scaled dot-product attention split across heads, with its hand-derived backward pass.

use crate::error::{Error, Result};
use crate::numerics::{dot_slices, softmax_in_place, Scalar, Tensor};

/// Forward state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadsCache<T> {
    pub heads: usize,
    /// Attention probabilities, laid out `[head][query][key]`.
    pub probs: Vec<T>,
    pub out: Tensor<T>,
}

impl<T: Scalar> HeadsCache<T> {
    /// Probability matrix of one head, shape `queries × keys`.
    pub fn head_probs(&self, head: usize, queries: usize, keys: usize) -> Tensor<T> {
        let len = queries * keys;
        Tensor::new(vec![queries, keys], self.probs[head * len..(head + 1) * len].to_vec())
            .expect("probability block shape")
    }
}

/// `softmax(q_h k_hᵀ / √d_h) v_h` for every head, concatenated along columns.
pub fn attend_heads<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<HeadsCache<T>> {
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != m {
        return Err(Error::dim("attention", k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("head count {heads} does not divide width {d}")));
    }
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut probs = vec![T::zero(); heads * n * m];
    let mut out = Tensor::zeros(&[n, d]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &qd[i * d + off..i * d + off + dh];
            let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot_slices(qi, &kd[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(row);
            let o = &mut out.data_mut()[i * d + off..i * d + off + dh];
            for (j, &p) in row.iter().enumerate() {
                for (oc, &vc) in o.iter_mut().zip(&vd[j * d + off..j * d + off + dh]) {
                    *oc += p * vc;
                }
            }
        }
    }
    Ok(HeadsCache { heads, probs, out })
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of the concatenated output.
pub fn attend_heads_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &HeadsCache<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    let heads = cache.heads;
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[m, d]);
    let mut dv = Tensor::zeros(&[m, d]);
    let (qd, kd, vd, god) = (q.data(), k.data(), v.data(), d_out.data());
    let mut d_scores = vec![T::zero(); m];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &cache.probs[(h * n + i) * m..(h * n + i + 1) * m];
            let g = &god[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for j in 0..m {
                let dp = dot_slices(g, &vd[j * d + off..j * d + off + dh]);
                d_scores[j] = dp;
                weighted += p[j] * dp;
            }
            for j in 0..m {
                d_scores[j] = p[j] * (d_scores[j] - weighted) * scale;
            }
            let qi = &qd[i * d + off..i * d + off + dh];
            for j in 0..m {
                let ds = d_scores[j];
                let kj = &kd[j * d + off..j * d + off + dh];
                for (c, &kc) in kj.iter().enumerate() {
                    dq.data_mut()[i * d + off + c] += ds * kc;
                }
                let dkj = &mut dk.data_mut()[j * d + off..j * d + off + dh];
                for (dkc, &qc) in dkj.iter_mut().zip(qi) {
                    *dkc += ds * qc;
                }
                let dvj = &mut dv.data_mut()[j * d + off..j * d + off + dh];
                for (dvc, &gc) in dvj.iter_mut().zip(g) {
                    *dvc += p[j] * gc;
                }
            }
        }
    }
    (dq, dk, dv)
}
