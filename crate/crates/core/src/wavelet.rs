//! Single-level orthonormal 2-D Haar analysis and synthesis.
//!
//! For each channel and each 2x2 block `[a b; c d]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! HL responds to horizontal variation (differences along a row), LH to vertical variation.
//! The transform matrix is orthogonal, so synthesis is its transpose and energy is preserved.

use fs2ffpe_autograd::{Op, Real, Result as TResult, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Magnification, ValueRange};

/// Band order used wherever the four bands are stacked along the channel axis.
pub const BAND_NAMES: [&str; 4] = ["LL", "HL", "LH", "HH"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Orthonormal,
}

/// The four half-resolution bands of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T: Real = f32> {
    pub ll: Tensor<T>,
    pub hl: Tensor<T>,
    pub lh: Tensor<T>,
    pub hh: Tensor<T>,
    pub source_shape: (usize, usize),
    pub norm: Normalization,
}

impl<T: Real> WaveletBands<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.hl, &self.lh, &self.hh]
    }

    /// Checks that all bands share `[C, H/2, W/2]` for the recorded source shape.
    pub fn validate(&self) -> Result<()> {
        let shape = self.ll.shape();
        let (h, w) = self.source_shape;
        if shape.len() != 3 || shape[1] * 2 != h || shape[2] * 2 != w {
            return Err(Error::Shape(format!("LL band {shape:?} inconsistent with source {h}x{w}")));
        }
        for (name, b) in BAND_NAMES.iter().zip(self.bands()) {
            if b.shape() != shape {
                return Err(Error::Shape(format!("{name} band {:?} differs from LL {shape:?}", b.shape())));
            }
        }
        Ok(())
    }

    /// Sum of squares over all four bands.
    pub fn energy(&self) -> T {
        self.bands().iter().map(|b| b.sum_sq()).sum()
    }

    /// Bands stacked as `[4C, H/2, W/2]` in LL, HL, LH, HH order.
    pub fn stacked(&self) -> Result<Tensor<T>> {
        self.validate()?;
        Ok(Tensor::concat_channels(&self.bands())?)
    }

    pub fn from_stacked(t: &Tensor<T>, source_shape: (usize, usize)) -> Result<Self> {
        let (c4, _, _) = t.chw("bands")?;
        if c4 % 4 != 0 {
            return Err(Error::Shape(format!("stacked bands need 4k channels, got {c4}")));
        }
        let c = c4 / 4;
        let bands = Self {
            ll: t.channels(0, c)?,
            hl: t.channels(c, c)?,
            lh: t.channels(2 * c, c)?,
            hh: t.channels(3 * c, c)?,
            source_shape,
            norm: Normalization::Orthonormal,
        };
        bands.validate()?;
        Ok(bands)
    }
}

fn analysis_kernel<T: Real>(x: &Tensor<T>) -> TResult<Tensor<T>> {
    let (c, h, w) = x.chw("dwt2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Shape { op: "dwt2", msg: format!("odd image size {h}x{w}") });
    }
    let (hh, hw) = (h / 2, w / 2);
    let plane = hh * hw;
    let half = T::lit(0.5);
    let src = x.data();
    let mut out = vec![T::zero(); 4 * c * plane];
    for ch in 0..c {
        for i in 0..hh {
            let r0 = &src[(ch * h + 2 * i) * w..(ch * h + 2 * i + 1) * w];
            let r1 = &src[(ch * h + 2 * i + 1) * w..(ch * h + 2 * i + 2) * w];
            for j in 0..hw {
                let (a, b, cc, d) = (r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]);
                let o = ch * plane + i * hw + j;
                out[o] = (a + b + cc + d) * half;
                out[c * plane + o] = (a - b + cc - d) * half;
                out[2 * c * plane + o] = (a + b - cc - d) * half;
                out[3 * c * plane + o] = (a - b - cc + d) * half;
            }
        }
    }
    Tensor::from_vec(&[4 * c, hh, hw], out)
}

fn synthesis_kernel<T: Real>(bands: &Tensor<T>) -> TResult<Tensor<T>> {
    let (c4, hh, hw) = bands.chw("idwt2")?;
    if c4 % 4 != 0 {
        return Err(TensorError::Shape { op: "idwt2", msg: format!("need 4k channels, got {c4}") });
    }
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let plane = hh * hw;
    let half = T::lit(0.5);
    let src = bands.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..hh {
            for j in 0..hw {
                let o = ch * plane + i * hw + j;
                let (ll, hl, lh, hh_) = (src[o], src[c * plane + o], src[2 * c * plane + o], src[3 * c * plane + o]);
                let top = (ch * h + 2 * i) * w + 2 * j;
                let bot = top + w;
                out[top] = (ll + hl + lh + hh_) * half;
                out[top + 1] = (ll - hl + lh - hh_) * half;
                out[bot] = (ll + hl - lh - hh_) * half;
                out[bot + 1] = (ll - hl - lh + hh_) * half;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Differentiable analysis: `[C, H, W] -> [4C, H/2, W/2]` (LL, HL, LH, HH).
pub struct HaarAnalysis;

impl<T: Real> Op<T> for HaarAnalysis {
    fn name(&self) -> &'static str {
        "haar_analysis"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> TResult<Tensor<T>> {
        analysis_kernel(x[0])
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        // orthogonal transform: adjoint == inverse
        vec![Some(synthesis_kernel(g).expect("band-shaped gradient"))]
    }
}

/// Differentiable synthesis: `[4C, H/2, W/2] -> [C, H, W]`.
pub struct HaarSynthesis;

impl<T: Real> Op<T> for HaarSynthesis {
    fn name(&self) -> &'static str {
        "haar_synthesis"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> TResult<Tensor<T>> {
        synthesis_kernel(x[0])
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(analysis_kernel(g).expect("image-shaped gradient"))]
    }
}

/// Tape form of [`dwt2`]; returns the stacked bands.
pub fn dwt2_var<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    Ok(tape.apply(HaarAnalysis, &[x])?)
}

/// Tape form of [`idwt2`] taking the four bands separately.
pub fn idwt2_var<T: Real>(tape: &mut Tape<T>, ll: Var, hl: Var, lh: Var, hh: Var) -> Result<Var> {
    let stacked = tape.concat_channels(&[ll, hl, lh, hh])?;
    Ok(tape.apply(HaarSynthesis, &[stacked])?)
}

/// Analysis of a raw `[C, H, W]` tensor with even sides.
pub fn dwt2_tensor<T: Real>(x: &Tensor<T>) -> Result<WaveletBands<T>> {
    let (_, h, w) = x.chw("dwt2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("dwt2 needs even sides, got {h}x{w}")));
    }
    WaveletBands::from_stacked(&analysis_kernel(x)?, (h, w))
}

pub fn dwt2<T: Real>(img: &ImageTensor<T>) -> Result<WaveletBands<T>> {
    dwt2_tensor(img.tensor())
}

/// Synthesis to a raw tensor of shape `[C, source_h, source_w]`.
pub fn idwt2_tensor<T: Real>(bands: &WaveletBands<T>) -> Result<Tensor<T>> {
    bands.validate()?;
    Ok(synthesis_kernel(&bands.stacked()?)?)
}

/// Exact inverse of [`dwt2`]. The result carries an unbounded value range because arbitrary
/// band content need not map back into `[-1, 1]`.
pub fn idwt2<T: Real>(bands: &WaveletBands<T>) -> Result<ImageTensor<T>> {
    ImageTensor::with_range(idwt2_tensor(bands)?, ValueRange::Unbounded, Magnification::X10, "idwt2")
}

/// Affine map between one band and 8-bit pixels: `value = offset + scale * pixel`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandQuantization {
    pub offset: f64,
    pub scale: f64,
}

/// Stretches a `[3, h, w]` band over `[0, 255]`; a constant band maps to all-zero pixels.
pub fn band_to_rgb8<T: Real>(band: &Tensor<T>) -> (image::RgbImage, BandQuantization) {
    let d = band.data();
    let lo = d.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
    let hi = d.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { (hi - lo) / 255.0 } else { 1.0 };
    let (h, w) = (band.shape()[1], band.shape()[2]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            ((d[(c * h + y as usize) * w + x as usize].as_f64() - lo) / scale).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    (img, BandQuantization { offset: lo, scale })
}

/// Inverse of [`band_to_rgb8`] up to half a quantization step.
pub fn rgb8_to_band<T: Real>(img: &image::RgbImage, q: BandQuantization) -> Result<Tensor<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = T::lit(q.offset + q.scale * p.0[c] as f64);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            f(c, y, x)
        })
    }

    #[test]
    fn constant_image_has_only_ll() {
        let b = dwt2_tensor(&img(8, 8, |_, _, _| 0.3)).unwrap();
        assert!(b.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for band in [&b.hl, &b.lh, &b.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_corner_pixel_block() {
        // block (1 0 / 0 0) in every 2x2 cell
        let b = dwt2_tensor(&img(8, 8, |_, y, x| if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 })).unwrap();
        for band in b.bands() {
            assert!(band.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn constant_bands_invert_to_constant_image() {
        let c: f64 = -0.35;
        let z = Tensor::zeros(&[3, 4, 4]);
        let bands = WaveletBands {
            ll: Tensor::full(&[3, 4, 4], 2.0 * c),
            hl: z.clone(),
            lh: z.clone(),
            hh: z,
            source_shape: (8, 8),
            norm: Normalization::Orthonormal,
        };
        let out = idwt2(&bands).unwrap();
        assert!(out.tensor().data().iter().all(|&v| (v - c).abs() < 1e-15));
    }

    #[test]
    fn horizontally_constant_image_has_no_hl() {
        let b = dwt2_tensor(&img(8, 10, |c, y, _| (y * y) as f64 * 0.01 + c as f64)).unwrap();
        assert!(b.hl.data().iter().all(|&v| v == 0.0));
        assert!(b.lh.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn odd_sizes_and_mismatched_bands_are_shape_errors() {
        assert!(matches!(dwt2_tensor(&Tensor::<f64>::zeros(&[3, 7, 8])), Err(Error::Shape(_))));
        let mut b = dwt2_tensor(&Tensor::<f64>::zeros(&[3, 8, 8])).unwrap();
        b.hh = Tensor::zeros(&[3, 4, 2]);
        assert!(matches!(idwt2(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn quantized_bands_recompose_within_half_a_step() {
        let x = img(16, 12, |c, y, x| ((x * 31 + y * 17 + c * 7) % 23) as f64 / 11.5 - 1.0);
        let b = dwt2_tensor(&x).unwrap();
        let mut qs = Vec::new();
        let back: Vec<Tensor<f64>> = b
            .bands()
            .iter()
            .map(|t| {
                let (png, q) = band_to_rgb8(t);
                qs.push(q);
                rgb8_to_band(&png, q).unwrap()
            })
            .collect();
        let bands =
            WaveletBands::from_stacked(&Tensor::concat_channels(&back.iter().collect::<Vec<_>>()).unwrap(), (16, 12))
                .unwrap();
        let y = idwt2_tensor(&bands).unwrap();
        // each pixel sums four bands, each off by at most scale/2, weighted 1/2
        let bound: f64 = qs.iter().map(|q| q.scale / 4.0).sum::<f64>() + 1e-12;
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= bound, "{a} {b} {bound}");
        }
        let (_, flat) = band_to_rgb8(&Tensor::<f64>::full(&[3, 2, 2], 0.25));
        assert_eq!(flat, BandQuantization { offset: 0.25, scale: 1.0 });
    }
}
