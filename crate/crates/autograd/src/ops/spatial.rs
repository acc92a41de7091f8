//! Shape-changing ops on `[C, H, W]` tensors.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Op;
use crate::tensor::Tensor;

/// Mirror padding without edge repetition (`reflect` mode); each pad must be smaller than the
/// padded extent.
#[derive(Clone, Copy, Debug)]
pub struct ReflectPad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl ReflectPad {
    pub fn uniform(p: usize) -> Self {
        Self { top: p, bottom: p, left: p, right: p }
    }

    #[inline]
    fn source(i: isize, n: usize) -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i as usize
    }
}

impl<T: Real> Op<T> for ReflectPad {
    fn name(&self) -> &'static str {
        "reflect_pad"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (c, h, w) = x[0].chw("reflect_pad")?;
        if self.top.max(self.bottom) >= h || self.left.max(self.right) >= w {
            return Err(shape_err("reflect_pad", format!("padding {self:?} too large for {h}x{w}")));
        }
        let (ho, wo) = (h + self.top + self.bottom, w + self.left + self.right);
        let src = x[0].data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                let iy = Self::source(oy as isize - self.top as isize, h);
                let row = &src[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                for ox in 0..wo {
                    out.push(row[Self::source(ox as isize - self.left as isize, w)]);
                }
            }
        }
        Tensor::from_vec(&[c, ho, wo], out)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = x[0].chw("reflect_pad").expect("validated");
        let (ho, wo) = (h + self.top + self.bottom, w + self.left + self.right);
        let mut dx = Tensor::zeros(x[0].shape());
        let gd = g.data();
        let d = dx.data_mut();
        for ch in 0..c {
            for oy in 0..ho {
                let iy = Self::source(oy as isize - self.top as isize, h);
                for ox in 0..wo {
                    let ix = Self::source(ox as isize - self.left as isize, w);
                    d[(ch * h + iy) * w + ix] += gd[(ch * ho + oy) * wo + ox];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Exact rectangular sub-window.
#[derive(Clone, Copy, Debug)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> Op<T> for Crop {
    fn name(&self) -> &'static str {
        "crop"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (c, h, w) = x[0].chw("crop")?;
        if self.top + self.height > h || self.left + self.width > w {
            return Err(shape_err("crop", format!("window {self:?} exceeds {h}x{w}")));
        }
        let src = x[0].data();
        let mut out = Vec::with_capacity(c * self.height * self.width);
        for ch in 0..c {
            for y in 0..self.height {
                let start = (ch * h + self.top + y) * w + self.left;
                out.extend_from_slice(&src[start..start + self.width]);
            }
        }
        Tensor::from_vec(&[c, self.height, self.width], out)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = x[0].chw("crop").expect("validated");
        let mut dx = Tensor::zeros(x[0].shape());
        let gd = g.data();
        for ch in 0..c {
            for y in 0..self.height {
                let start = (ch * h + self.top + y) * w + self.left;
                let gs = (ch * self.height + y) * self.width;
                dx.data_mut()[start..start + self.width].copy_from_slice(&gd[gs..gs + self.width]);
            }
        }
        vec![Some(dx)]
    }
}

/// Channel range `[start, start + len)`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelSlice {
    pub start: usize,
    pub len: usize,
}

impl<T: Real> Op<T> for ChannelSlice {
    fn name(&self) -> &'static str {
        "channel_slice"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        x[0].channels(self.start, self.len)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (_, h, w) = x[0].chw("channel_slice").expect("validated");
        let mut dx = Tensor::zeros(x[0].shape());
        let plane = h * w;
        dx.data_mut()[self.start * plane..(self.start + self.len) * plane].copy_from_slice(g.data());
        vec![Some(dx)]
    }
}

/// Stacks inputs along the channel axis.
pub struct ConcatChannels;

impl<T: Real> Op<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Tensor::concat_channels(x)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut start = 0;
        x.iter()
            .zip(n)
            .map(|(t, &need)| {
                let c = t.shape()[0];
                let r = need.then(|| g.channels(start, c).expect("validated"));
                start += c;
                r
            })
            .collect()
    }
}

/// Reinterprets the element buffer under a new shape.
pub struct Reshape {
    pub shape: Vec<usize>,
}

impl<T: Real> Op<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        x[0].clone().reshape(&self.shape)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(x[0].shape()).expect("same numel"))]
    }
}
