//! Exact center crops, half-pixel bilinear resizing, and the dual-resolution input pair.

use fs2ffpe_autograd::{Op, Real, Result as TResult, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Magnification};

/// Top-left offset of a centred `size x size` window in an `h x w` image.
pub fn center_offset(h: usize, w: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::Geometry(format!("crop {size} does not fit {h}x{w}")));
    }
    if (h - size) % 2 != 0 || (w - size) % 2 != 0 {
        return Err(Error::Geometry(format!("crop {size} from {h}x{w} has a non-integral offset")));
    }
    Ok(((h - size) / 2, (w - size) / 2))
}

pub fn centercrop_tensor<T: Real>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw("centercrop")?;
    let (top, left) = center_offset(h, w, size)?;
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let start = (ch * h + top + y) * w + left;
            out.extend_from_slice(&x.data()[start..start + size]);
        }
    }
    Ok(Tensor::from_vec(&[c, size, size], out)?)
}

/// Center `size x size` subarray, no interpolation.
pub fn centercrop<T: Real>(img: &ImageTensor<T>, size: usize) -> Result<ImageTensor<T>> {
    let t = centercrop_tensor(img.tensor(), size)?;
    ImageTensor::with_range(t, img.range(), img.magnification(), img.id())
}

/// Tape form of [`centercrop`].
pub fn centercrop_var<T: Real>(tape: &mut Tape<T>, x: Var, size: usize) -> Result<Var> {
    let (_, h, w) = tape.value(x).chw("centercrop")?;
    let (top, left) = center_offset(h, w, size)?;
    Ok(tape.crop(x, top, left, size, size)?)
}

/// Two-tap interpolation weights along one axis: output `i` reads
/// `(1 - f) * src[i0] + f * src[i1]` where `i0, i1, f` come from the half-pixel-centre map
/// `s = (i + 0.5) * n_in / n_out - 0.5`, clamped to the valid range.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let f = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, f)
        })
        .collect()
}

fn resize_kernel<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> TResult<Tensor<T>> {
    let (c, h, w) = x.chw("resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(TensorError::Shape { op: "resize", msg: "empty size".into() });
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = x.data();
    let mut out = vec![T::zero(); c * out_h * out_w];
    let mut row = vec![T::zero(); w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (a, b) = (T::lit(1.0 - fy), T::lit(fy));
            for (x, r) in row.iter_mut().enumerate() {
                *r = a * plane[y0 * w + x] + b * plane[y1 * w + x];
            }
            let dst = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (o, &(x0, x1, fx)) in dst.iter_mut().zip(&tx) {
                *o = T::lit(1.0 - fx) * row[x0] + T::lit(fx) * row[x1];
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

fn resize_adjoint<T: Real>(g: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let (c, out_h, out_w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    if (out_h, out_w) == (in_h, in_w) {
        return g.clone();
    }
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut dx = Tensor::zeros(&[c, in_h, in_w]);
    let d = dx.data_mut();
    let mut row = vec![T::zero(); in_w];
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            row.iter_mut().for_each(|r| *r = T::zero());
            let gr = &g.data()[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (&gv, &(x0, x1, fx)) in gr.iter().zip(&tx) {
                row[x0] += T::lit(1.0 - fx) * gv;
                row[x1] += T::lit(fx) * gv;
            }
            let (a, b) = (T::lit(1.0 - fy), T::lit(fy));
            for (x, &r) in row.iter().enumerate() {
                d[(ch * in_h + y0) * in_w + x] += a * r;
                d[(ch * in_h + y1) * in_w + x] += b * r;
            }
        }
    }
    dx
}

/// Differentiable bilinear resize (half-pixel centres, no antialiasing).
pub struct Resize {
    pub height: usize,
    pub width: usize,
}

impl<T: Real> Op<T> for Resize {
    fn name(&self) -> &'static str {
        "resize"
    }
    fn forward(&self, x: &[&Tensor<T>]) -> TResult<Tensor<T>> {
        resize_kernel(x[0], self.height, self.width)
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = x[0].shape();
        vec![Some(resize_adjoint(g, s[1], s[2]))]
    }
}

pub fn resize_tensor<T: Real>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    Ok(resize_kernel(x, height, width)?)
}

/// Bilinear resampling to `size x size`; the identity when the size is unchanged.
pub fn resize<T: Real>(img: &ImageTensor<T>, size: usize) -> Result<ImageTensor<T>> {
    if size == 0 {
        return Err(Error::Geometry("resize target must be at least 1".into()));
    }
    let t = resize_tensor(img.tensor(), size, size)?;
    ImageTensor::with_range(t, img.range(), img.magnification(), img.id())
}

pub fn resize_var<T: Real>(tape: &mut Tape<T>, x: Var, size: usize) -> Result<Var> {
    Ok(tape.apply(Resize { height: size, width: size }, &[x])?)
}

/// Linked inputs for one source tile: the 10x main-path crop and the wide-context 5x view.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionPair<T: Real = f32> {
    pub fs_10x: ImageTensor<T>,
    pub fs_5x: ImageTensor<T>,
    pub source_id: String,
}

/// `fs_10x` = center half crop of `source`; `fs_5x` = all of `source` downscaled by two.
///
/// The source must be square with a side divisible by four, so the 10x view lands exactly on
/// the central half of the 5x view (448 -> 224 + 224 for the default geometry).
pub fn make_resolution_pair<T: Real>(source: &ImageTensor<T>, net_size: usize) -> Result<ResolutionPair<T>> {
    let (h, w) = (source.height(), source.width());
    if h != w || h != 2 * net_size || net_size % 2 != 0 {
        return Err(Error::Geometry(format!(
            "source tile must be {0}x{0} for network size {net_size}, got {h}x{w}",
            2 * net_size
        )));
    }
    let fs_10x = centercrop(source, net_size)?.with_magnification(Magnification::X10);
    let fs_5x = resize(source, net_size)?.with_magnification(Magnification::X5);
    Ok(ResolutionPair { fs_10x, fs_5x, source_id: source.id().to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |i| f((i / w) % h, i % w))
    }

    #[test]
    fn centercrop_is_an_exact_subarray() {
        let x = t(4, 4, |y, x| (y * 4 + x + 1) as f64);
        let c = centercrop_tensor(&x, 2).unwrap();
        assert_eq!(&c.data()[..4], &[6.0, 7.0, 10.0, 11.0]);
        assert_eq!(centercrop_tensor(&x, 4).unwrap(), x);
        assert_eq!(center_offset(448, 448, 112).unwrap(), (168, 168));
    }

    #[test]
    fn non_integral_or_oversized_crops_fail() {
        let x = t(8, 8, |_, _| 0.0);
        assert!(matches!(centercrop_tensor(&x, 3), Err(Error::Geometry(_))));
        assert!(matches!(centercrop_tensor(&x, 10), Err(Error::Geometry(_))));
    }

    #[test]
    fn crops_compose() {
        let x = t(16, 16, |y, x| (y * 31 + x * 7) as f64);
        let a = centercrop_tensor(&centercrop_tensor(&x, 8).unwrap(), 4).unwrap();
        assert_eq!(a, centercrop_tensor(&x, 4).unwrap());
    }

    #[test]
    fn resize_identity_and_constants() {
        let x = t(6, 6, |y, x| (y * x) as f64 * 0.1);
        assert_eq!(resize_tensor(&x, 6, 6).unwrap(), x);
        let c = t(10, 10, |_, _| 0.25);
        for s in [1, 3, 7, 10, 23] {
            let r = resize_tensor(&c, s, s).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn two_by_two_column_ramp_averages_to_half() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(resize_tensor(&x, 1, 1).unwrap().data(), &[0.5]);
    }

    #[test]
    fn halving_is_a_two_by_two_box_average() {
        let x = t(8, 8, |y, x| (y * 8 + x) as f64);
        let r = resize_tensor(&x, 4, 4).unwrap();
        // out(1,2) averages rows 2..3, cols 4..5
        let want = (20.0 + 21.0 + 28.0 + 29.0) / 4.0;
        assert_eq!(r.data()[4 + 2], want);
    }

    #[test]
    fn down_up_roundtrip_of_a_ramp_is_close() {
        let n = 64;
        let x = t(n, n, |_, x| x as f64 / (n - 1) as f64);
        let down = resize_tensor(&x, n / 2, n / 2).unwrap();
        let up = resize_tensor(&down, n, n).unwrap();
        let mae = up.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64;
        assert!(mae < 0.01, "{mae}");
        let c = t(n, n, |_, _| -0.5);
        let back = resize_tensor(&resize_tensor(&c, n / 2, n / 2).unwrap(), n, n).unwrap();
        assert_eq!(back, c);
    }

    fn source(f: impl Fn(usize, usize) -> f64) -> ImageTensor<f64> {
        ImageTensor::new(t(448, 448, f), Magnification::X10, "src").unwrap()
    }

    #[test]
    fn constant_source_pair_is_consistent() {
        let p = make_resolution_pair(&source(|_, _| 0.2), 224).unwrap();
        let a = centercrop(&p.fs_5x, 112).unwrap();
        let b = resize(&p.fs_10x, 112).unwrap();
        assert_eq!(a.tensor().max_abs_diff(b.tensor()), 0.0);
        assert_eq!(p.fs_10x.magnification(), Magnification::X10);
        assert_eq!(p.fs_5x.magnification(), Magnification::X5);
    }

    #[test]
    fn corner_pixel_only_reaches_the_wide_view() {
        let p = make_resolution_pair(&source(|y, x| if (y, x) == (0, 0) { 1.0 } else { -1.0 }), 224).unwrap();
        assert!(p.fs_10x.tensor().data().iter().all(|&v| v == -1.0));
        let v = p.fs_5x.tensor().data()[0];
        assert!(v > -1.0 && v < 1.0, "attenuated, got {v}");
    }

    #[test]
    fn center_pixel_reaches_both_views() {
        let p = make_resolution_pair(&source(|y, x| if (y, x) == (224, 224) { 1.0 } else { -1.0 }), 224).unwrap();
        assert!(p.fs_10x.tensor().data().iter().any(|&v| v > -1.0));
        assert!(p.fs_5x.tensor().data().iter().any(|&v| v > -1.0));
    }

    #[test]
    fn wrong_source_size_is_rejected() {
        let s = ImageTensor::new(t(440, 440, |_, _| 0.0), Magnification::X10, "s").unwrap();
        assert!(matches!(make_resolution_pair(&s, 224), Err(Error::Geometry(_))));
    }
}
