//! Scalar-valued reductions used as training objectives.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Op;
use crate::tensor::Tensor;

fn check_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(shape_err(op, "empty input"));
    }
    Ok(())
}

fn signum0<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `mean |a - b|` (L1 loss).
pub struct MeanAbsDiff;

impl<T: Real> Op<T> for MeanAbsDiff {
    fn name(&self) -> &'static str {
        "mean_abs_diff"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        check_same("mean_abs_diff", x[0], x[1])?;
        let n = T::lit(x[0].numel() as f64);
        let s: T = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(Tensor::scalar(s / n))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = g.item() / T::lit(x[0].numel() as f64);
        let da = x[0].zip_map(x[1], |a, b| scale * signum0(a - b));
        let db = n[1].then(|| da.map(|v| -v));
        vec![n[0].then_some(da), db]
    }
}

/// `mean (x - target)^2` against a constant target.
pub struct MeanSquaredTo<T> {
    pub target: T,
}

impl<T: Real> Op<T> for MeanSquaredTo<T> {
    fn name(&self) -> &'static str {
        "mean_squared_to"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if x[0].numel() == 0 {
            return Err(shape_err("mean_squared_to", "empty input"));
        }
        let t = self.target;
        let s: T = x[0].data().iter().map(|&v| (v - t) * (v - t)).sum();
        Ok(Tensor::scalar(s / T::lit(x[0].numel() as f64)))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = T::lit(2.0) * g.item() / T::lit(x[0].numel() as f64);
        let t = self.target;
        vec![Some(x[0].map(|v| scale * (v - t)))]
    }
}

/// Mean binary cross-entropy of logits against a constant probability target.
pub struct BceWithLogitsTo<T> {
    pub target: T,
}

impl<T: Real> Op<T> for BceWithLogitsTo<T> {
    fn name(&self) -> &'static str {
        "bce_with_logits_to"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if x[0].numel() == 0 {
            return Err(shape_err("bce_with_logits_to", "empty input"));
        }
        let t = self.target;
        // max(z,0) - z*t + log(1 + exp(-|z|))
        let s: T = x[0].data().iter().map(|&z| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()).sum();
        Ok(Tensor::scalar(s / T::lit(x[0].numel() as f64)))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = g.item() / T::lit(x[0].numel() as f64);
        let t = self.target;
        vec![Some(x[0].map(|z| scale * (T::one() / (T::one() + (-z).exp()) - t)))]
    }
}

/// Sum of all elements.
pub struct SumAll;

impl<T: Real> Op<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(x[0].sum()))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(x[0].shape(), g.item()))]
    }
}

/// Inner product `sum(a * b)`.
pub struct Dot;

impl<T: Real> Op<T> for Dot {
    fn name(&self) -> &'static str {
        "dot"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        check_same("dot", x[0], x[1])?;
        Ok(Tensor::scalar(x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| a * b).sum()))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = g.item();
        vec![n[0].then(|| x[1].scale(s)), n[1].then(|| x[0].scale(s))]
    }
}

/// Weighted sum of one-element inputs: `sum_i w_i * x_i`.
/// Zero-weighted inputs receive no gradient, so their subgraphs are skipped by the reverse pass.
pub struct WeightedSum<T> {
    pub weights: Vec<T>,
}

impl<T: Real> Op<T> for WeightedSum<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if x.len() != self.weights.len() || x.iter().any(|t| t.numel() != 1) {
            return Err(shape_err("weighted_sum", "expects one scalar per weight"));
        }
        Ok(Tensor::scalar(x.iter().zip(&self.weights).map(|(t, &w)| w * t.item()).sum()))
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        self.weights
            .iter()
            .zip(n)
            .map(|(&w, &need)| (need && w != T::zero()).then(|| Tensor::scalar(w * g.item())))
            .collect()
    }
}
