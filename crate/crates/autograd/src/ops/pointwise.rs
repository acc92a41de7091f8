//! Elementwise maps and binary arithmetic.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Op;
use crate::tensor::Tensor;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `a + b`.
pub struct Add;

impl<T: Real> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        same_shape("add", x[0], x[1])?;
        Ok(x[0].zip_map(x[1], |a, b| a + b))
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![n[0].then(|| g.clone()), n[1].then(|| g.clone())]
    }
}

/// `a - b`.
pub struct Sub;

impl<T: Real> Op<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        same_shape("sub", x[0], x[1])?;
        Ok(x[0].zip_map(x[1], |a, b| a - b))
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![n[0].then(|| g.clone()), n[1].then(|| g.map(|v| -v))]
    }
}

/// Hadamard product `a * b`.
pub struct Mul;

impl<T: Real> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        same_shape("mul", x[0], x[1])?;
        Ok(x[0].zip_map(x[1], |a, b| a * b))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![n[0].then(|| g.zip_map(x[1], |g, b| g * b)), n[1].then(|| g.zip_map(x[0], |g, a| g * a))]
    }
}

/// `scale * x + shift`.
pub struct Affine<T> {
    pub scale: T,
    pub shift: T,
}

impl<T: Real> Op<T> for Affine<T> {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (s, b) = (self.scale, self.shift);
        Ok(x[0].map(|v| s * v + b))
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.scale(self.scale))]
    }
}

/// `max(x, 0)`; sub-gradient 0 at the kink.
pub struct Relu;

impl<T: Real> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(x[0].map(|v| if v > T::zero() { v } else { T::zero() }))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(x[0], |g, v| if v > T::zero() { g } else { T::zero() }))]
    }
}

/// `x` for positive inputs, `slope * x` otherwise.
pub struct LeakyRelu<T> {
    pub slope: T,
}

impl<T: Real> Op<T> for LeakyRelu<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let s = self.slope;
        Ok(x[0].map(|v| if v > T::zero() { v } else { s * v }))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.slope;
        vec![Some(g.zip_map(x[0], |g, v| if v > T::zero() { g } else { s * g }))]
    }
}

pub struct Tanh;

impl<T: Real> Op<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(x[0].map(T::tanh))
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(y, |g, y| g * (T::one() - y * y)))]
    }
}

/// `atanh(clamp(x, -limit, limit))`; gradient is zero where the clamp is active.
pub struct AtanhClamped<T> {
    pub limit: T,
}

impl<T: Real> Op<T> for AtanhClamped<T> {
    fn name(&self) -> &'static str {
        "atanh_clamped"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let l = self.limit;
        Ok(x[0].map(|v| v.max(-l).min(l).atanh()))
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let l = self.limit;
        vec![Some(g.zip_map(x[0], |g, v| if v.abs() < l { g / (T::one() - v * v) } else { T::zero() }))]
    }
}

/// Per-channel normalization over the spatial axes of a `[C, H, W]` tensor, no affine part.
pub struct InstanceNorm<T> {
    pub eps: T,
}

impl<T: Real> InstanceNorm<T> {
    fn inv_std(&self, x: &[T]) -> (T, T) {
        let n = T::lit(x.len() as f64);
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        (mean, T::one() / (var + self.eps).sqrt())
    }
}

impl<T: Real> Op<T> for InstanceNorm<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (c, h, w) = x[0].chw("instance_norm")?;
        let plane = h * w;
        let mut out = x[0].clone();
        for ch in 0..c {
            let s = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
            let (mean, inv) = self.inv_std(s);
            for v in s.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Ok(out)
    }
    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = x[0].chw("instance_norm").expect("validated");
        let plane = h * w;
        let n = T::lit(plane as f64);
        let mut dx = Tensor::zeros(x[0].shape());
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            let (_, inv) = self.inv_std(&x[0].data()[r.clone()]);
            let (gs, ys) = (&g.data()[r.clone()], &y.data()[r.clone()]);
            let mean_g = gs.iter().copied().sum::<T>() / n;
            let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
            for ((d, &gv), &yv) in dx.data_mut()[r].iter_mut().zip(gs).zip(ys) {
                *d = inv * (gv - mean_g - yv * mean_gy);
            }
        }
        vec![Some(dx)]
    }
}
