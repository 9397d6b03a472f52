//! Deterministic tensor kernels and the finite-difference gradient oracle.

mod scalar;
mod tensor;

pub use scalar::Scalar;
pub use tensor::Tensor;
pub(crate) use tensor::dot_slices;

use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    let (su, sv) = (u.sq_norm(), v.sq_norm());
    if su == T::zero() || sv == T::zero() {
        return Err(Error::Degenerate("cosine"));
    }
    // sqrt(fl(s·s)) == s, so cosine(u, ±u) comes out as exactly ±1.
    let c = u.dot(v)? / (su * sv).sqrt();
    Ok(c.max(-T::one()).min(T::one()))
}

/// Gradient of `cosine(u, v)` with respect to `u`.
pub fn cosine_grad<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::Degenerate("cosine_grad"));
    }
    let uv = u.dot(v)?;
    let a = T::one() / (nu * nv);
    let b = uv / (nu * nu * nu * nv);
    v.zip_with(u, "cosine_grad", |vi, ui| a * vi - b * ui)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Domain {
            what: "finite-difference step",
            value: h.as_f64(),
            domain: "h > 0",
        });
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad evaluation at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(grad)
}

/// Infinity-norm relative error `max|a-b| / max(max|a|, max|b|, floor)`.
pub fn relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: T) -> Result<T> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic.max_abs().max(numeric.max_abs()).max(floor);
    Ok(diff / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_closed_form() {
        // exp(k) / (e + e² + e³) rewritten as 1 / Σ exp(j - k) to avoid any shared code path.
        let e = std::f64::consts::E;
        let expected = [1.0 / (1.0 + e + e * e), 1.0 / (1.0 / e + 1.0 + e), 1.0 / (1.0 / (e * e) + 1.0 / e + 1.0)];
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_reference_cases() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap(), -1.0);
        assert!(matches!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn finite_differences_on_simple_functions() {
        let g = finite_diff_grad(|x: &Tensor<f64>| Ok(x.sq_norm()), &v(&[1.0, 2.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|x: &Tensor<f64>| Ok(x.sum()), &v(&[0.3, -2.0, 7.0]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&d| (d - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_differences_report_non_finite_evaluations() {
        let r = finite_diff_grad(|_: &Tensor<f64>| Ok(f64::NAN), &v(&[1.0]), 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_diff_grad(|x: &Tensor<f64>| Ok(x.sum()), &v(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let u = v(&[0.3, -1.2, 2.0]);
        let w = v(&[1.0, 0.5, -0.7]);
        let fd = finite_diff_grad(|x: &Tensor<f64>| cosine(x, &w), &u, 1e-6).unwrap();
        let an = cosine_grad(&u, &w).unwrap();
        assert!(relative_error(&an, &fd, 1e-12).unwrap() < 1e-7);
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat(3, 4), b in mat(4, 5), c in mat(5, 2)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-9);
        }

        #[test]
        fn softmax_rows_normalised_and_shift_invariant(a in mat(4, 6), shift in -50.0f64..50.0) {
            let s = softmax_rows(&a);
            for i in 0..4 {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|&x| x >= 0.0));
            }
            let shifted = softmax_rows(&a.map(|x| x + shift));
            prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
        }

        #[test]
        fn cosine_self_and_negation(d in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let u = Tensor::vector(d);
            prop_assume!(u.norm() > 1e-6);
            prop_assert_eq!(cosine(&u, &u).unwrap(), 1.0);
            prop_assert_eq!(cosine(&u, &u.scale(-1.0)).unwrap(), -1.0);
        }

        #[test]
        fn finite_differences_exact_to_second_order_on_cubics(
            coef in prop::collection::vec(-2.0f64..2.0, 3),
            x in prop::collection::vec(-1.5f64..1.5, 3),
        ) {
            // f(x) = Σ c_i x_i³ + x_0 x_1 x_2 ; central differences carry an h² · f''' / 6 bias.
            let f = |x: &Tensor<f64>| {
                let d = x.data();
                Ok(coef.iter().zip(d).map(|(c, xi)| c * xi.powi(3)).sum::<f64>() + d[0] * d[1] * d[2])
            };
            let h = 1e-4;
            let xt = Tensor::vector(x.clone());
            let fd = finite_diff_grad(f, &xt, h).unwrap();
            let analytic = [
                3.0 * coef[0] * x[0] * x[0] + x[1] * x[2],
                3.0 * coef[1] * x[1] * x[1] + x[0] * x[2],
                3.0 * coef[2] * x[2] * x[2] + x[0] * x[1],
            ];
            for i in 0..3 {
                let bias_bound = coef[i].abs() * h * h + 1e-8;
                prop_assert!((fd.data()[i] - analytic[i]).abs() <= bias_bound);
            }
        }
    }
}
