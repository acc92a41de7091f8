pub mod conv;
pub mod matrix;
pub mod pointwise;
pub mod reduce;
pub mod spatial;

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};

pub use conv::{Conv2d, ConvTranspose2d, Window};
pub use matrix::{AddRowBias, DiagonalCrossEntropy, GatherLocations, L2NormalizeRows, MatMul};
pub use pointwise::{Add, Affine, AtanhClamped, InstanceNorm, LeakyRelu, Mul, Relu, Sub, Tanh};
pub use reduce::{BceWithLogitsTo, Dot, MeanAbsDiff, MeanSquaredTo, SumAll, WeightedSum};
pub use spatial::{ChannelSlice, ConcatChannels, Crop, ReflectPad, Reshape};

/// Shorthands for the built-in ops.
impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let op = Conv2d { stride, pad };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let op = ConvTranspose2d { stride, pad, output_pad };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Mul, &[a, b])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Affine { scale: T::lit(scale), shift: T::lit(shift) }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(LeakyRelu { slope: T::lit(slope) }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Tanh, &[x])
    }

    pub fn atanh_clamped(&mut self, x: Var, limit: f64) -> Result<Var> {
        self.apply(AtanhClamped { limit: T::lit(limit) }, &[x])
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(InstanceNorm { eps: T::lit(eps) }, &[x])
    }

    pub fn reflect_pad(&mut self, x: Var, pad: ReflectPad) -> Result<Var> {
        self.apply(pad, &[x])
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.apply(Crop { top, left, height, width }, &[x])
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(ChannelSlice { start, len }, &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(ConcatChannels, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MeanAbsDiff, &[a, b])
    }

    pub fn mean_squared_to(&mut self, x: Var, target: f64) -> Result<Var> {
        self.apply(MeanSquaredTo { target: T::lit(target) }, &[x])
    }

    pub fn bce_with_logits_to(&mut self, x: Var, target: f64) -> Result<Var> {
        self.apply(BceWithLogitsTo { target: T::lit(target) }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(SumAll, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Dot, &[a, b])
    }

    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[f64]) -> Result<Var> {
        self.apply(WeightedSum { weights: weights.iter().map(|&w| T::lit(w)).collect() }, xs)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(MatMul { trans_a, trans_b }, &[a, b])
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(AddRowBias, &[x, b])
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(L2NormalizeRows { eps: T::lit(eps) }, &[x])
    }

    pub fn gather_locations(&mut self, x: Var, locations: Vec<usize>) -> Result<Var> {
        self.apply(GatherLocations { locations }, &[x])
    }

    pub fn diagonal_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        self.apply(DiagonalCrossEntropy, &[logits])
    }
}
