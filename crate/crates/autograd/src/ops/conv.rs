//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::error::{shape_err, Result};
use std::ops::Range;

use crate::real::{gemm, gemm_view, MatRef, Real};
use crate::tape::Op;
use crate::tensor::Tensor;

/// Spatial geometry of a strided, zero-padded window sweep over an `h x w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// Output size of a convolution over an `h x w` input, or `None` if the kernel does not fit.
    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }
}

/// Unfolds output rows `rows` of the sweep over `x: [c, h, w]` into `cols: [c*kh*kw, rows.len()*wo]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    wo: usize,
    rows: Range<usize>,
    cols: &mut [T],
) {
    let p = rows.len() * wo;
    debug_assert_eq!(cols.len(), c * win.kh * win.kw * p);
    let (s, pad) = (win.stride as isize, win.pad as isize);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for (r, oy) in rows.clone().enumerate() {
                    let iy = oy as isize * s + ki as isize - pad;
                    let out_row = &mut dst[r * wo..(r + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(kj, win, w, wo);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let x0 = (lo * win.stride + kj) as isize - pad;
                    if s == 1 {
                        out_row[lo..hi].copy_from_slice(&src[x0 as usize..x0 as usize + (hi - lo)]);
                    } else {
                        for (i, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o = src[x0 as usize + i * win.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` lies inside `[0, w)`.
fn valid_span(kj: usize, win: Window, w: usize, wo: usize) -> (usize, usize) {
    let (s, pad) = (win.stride, win.pad);
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(s) };
    let hi = if w + pad <= kj { 0 } else { (w + pad - kj - 1) / s + 1 };
    let hi = hi.min(wo);
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` of output rows `rows` back into `x: [c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    wo: usize,
    rows: Range<usize>,
    x: &mut [T],
) {
    let p = rows.len() * wo;
    let (s, pad) = (win.stride as isize, win.pad as isize);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let src = &cols[row * p..(row + 1) * p];
                for (r, oy) in rows.clone().enumerate() {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(kj, win, w, wo);
                    let x0 = ((lo * win.stride + kj) as isize - pad) as usize;
                    let row_src = &src[r * wo + lo..r * wo + hi];
                    if s == 1 {
                        for (d, &v) in dst[x0..x0 + (hi - lo)].iter_mut().zip(row_src) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in row_src.iter().enumerate() {
                            dst[x0 + i * win.stride] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Upper bound on the elements of one unfolded band; bigger sweeps are lowered band by band.
const BAND_ELEMS: usize = 1 << 20;

/// Consecutive output-row ranges whose `[k, rows*wo]` unfolding fits in [`BAND_ELEMS`].
fn bands(k: usize, ho: usize, wo: usize) -> impl Iterator<Item = Range<usize>> {
    let step = (BAND_ELEMS / (k * wo).max(1)).clamp(1, ho.max(1));
    (0..ho).step_by(step).map(move |r| r..(r + step).min(ho))
}

/// Columns `[q0, q0 + n)` of a row-major `rows x p` matrix.
fn column_block<T>(data: &[T], rows: usize, p: usize, q0: usize, n: usize) -> MatRef<'_, T> {
    MatRef { data, offset: q0, rows, cols: n, rs: p, cs: 1 }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(grad: &[T], channels: usize, plane: usize) -> Tensor<T> {
    Tensor::from_fn(&[channels], |o| grad[o * plane..(o + 1) * plane].iter().copied().sum())
}

/// `y = W * x + b` with `W: [out, in, kh, kw]`, zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn geometry<T: Real>(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
    ) -> Result<(usize, usize, usize, usize, Window, usize, usize)> {
        let (c, h, wd) = x.chw("conv2d")?;
        let &[o, ci, kh, kw] = w.shape() else {
            return Err(shape_err("conv2d", format!("weight must be rank 4, got {:?}", w.shape())));
        };
        if ci != c {
            return Err(shape_err("conv2d", format!("input has {c} channels, weight expects {ci}")));
        }
        let win = Window { kh, kw, stride: self.stride, pad: self.pad };
        let (ho, wo) = win.out_size(h, wd).ok_or_else(|| {
            shape_err("conv2d", format!("{kh}x{kw} kernel does not fit {h}x{wd} input (pad {})", self.pad))
        })?;
        Ok((c, h, wd, o, win, ho, wo))
    }
}

impl<T: Real> Op<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c, h, wd, o, win, ho, wo) = self.geometry(x, w)?;
        let k = c * win.kh * win.kw;
        let p = ho * wo;
        let mut out = vec![T::zero(); o * p];
        let identity_unfold = win.kh == 1 && win.kw == 1 && win.stride == 1 && win.pad == 0;
        if identity_unfold {
            gemm(false, false, o, p, k, T::one(), w.data(), x.data(), T::zero(), &mut out);
        } else {
            let mut cols = Vec::new();
            for rows in bands(k, ho, wo) {
                let (q0, n) = (rows.start * wo, rows.len() * wo);
                cols.resize(k * n, T::zero());
                im2col(x.data(), c, h, wd, win, wo, rows, &mut cols);
                let wm = MatRef::dense(w.data(), o, k);
                gemm_view(T::one(), wm, MatRef::dense(&cols, k, n), T::zero(), &mut out, q0, p);
            }
        }
        if let Some(b) = inputs.get(2) {
            if b.numel() != o {
                return Err(shape_err("conv2d", format!("bias has {} entries for {o} outputs", b.numel())));
            }
            add_bias(&mut out, b.data(), p);
        }
        Tensor::from_vec(&[o, ho, wo], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c, h, wd, o, win, ho, wo) = self.geometry(x, w).expect("validated in forward");
        let k = c * win.kh * win.kw;
        let p = ho * wo;
        let g = grad.data();
        let mut result = vec![None, None];
        let wm = MatRef::dense(w.data(), o, k);
        let mut cols = Vec::new();
        if needs[0] {
            let mut dx = vec![T::zero(); c * h * wd];
            for rows in bands(k, ho, wo) {
                let (q0, n) = (rows.start * wo, rows.len() * wo);
                cols.resize(k * n, T::zero());
                gemm_view(T::one(), wm.t(), column_block(g, o, p, q0, n), T::zero(), &mut cols, 0, n);
                col2im(&cols, c, h, wd, win, wo, rows, &mut dx);
            }
            result[0] = Some(Tensor::from_vec(x.shape(), dx).expect("shape"));
        }
        if needs[1] {
            let mut dw = vec![T::zero(); o * k];
            for (i, rows) in bands(k, ho, wo).enumerate() {
                let (q0, n) = (rows.start * wo, rows.len() * wo);
                cols.resize(k * n, T::zero());
                im2col(x.data(), c, h, wd, win, wo, rows, &mut cols);
                let beta = if i == 0 { T::zero() } else { T::one() };
                gemm_view(T::one(), column_block(g, o, p, q0, n), MatRef::dense(&cols, k, n).t(), beta, &mut dw, 0, k);
            }
            result[1] = Some(Tensor::from_vec(w.shape(), dw).expect("shape"));
        }
        if inputs.len() > 2 {
            result.push(needs[2].then(|| bias_grad(g, o, p)));
        }
        result
    }
}

/// Transposed convolution (fractionally-strided), `W: [in, out, k, k]`.
///
/// Output size is `(h - 1) * stride - 2 * pad + k + output_pad`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    fn geometry<T: Real>(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
    ) -> Result<(usize, usize, usize, usize, Window, usize, usize)> {
        let (c, h, wd) = x.chw("conv_transpose2d")?;
        let &[ci, o, kh, kw] = w.shape() else {
            return Err(shape_err("conv_transpose2d", format!("weight must be rank 4, got {:?}", w.shape())));
        };
        if ci != c {
            return Err(shape_err("conv_transpose2d", format!("input has {c} channels, weight expects {ci}")));
        }
        if self.output_pad >= self.stride.max(1) {
            return Err(shape_err("conv_transpose2d", "output_pad must be smaller than stride"));
        }
        let grow = |n: usize, k: usize| -> Option<usize> {
            ((n - 1) * self.stride + k + self.output_pad).checked_sub(2 * self.pad)
        };
        let (ho, wo) = match (grow(h, kh), grow(wd, kw)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(shape_err("conv_transpose2d", "padding larger than output")),
        };
        let win = Window { kh, kw, stride: self.stride, pad: self.pad };
        debug_assert_eq!(win.out_size(ho, wo), Some((h, wd)));
        Ok((c, h, wd, o, win, ho, wo))
    }
}

impl<T: Real> Op<T> for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c, h, wd, o, win, ho, wo) = self.geometry(x, w)?;
        let k = o * win.kh * win.kw;
        let p = h * wd;
        let wm = MatRef::dense(w.data(), c, k);
        let mut cols = Vec::new();
        let mut out = vec![T::zero(); o * ho * wo];
        for rows in bands(k, h, wd) {
            let (q0, n) = (rows.start * wd, rows.len() * wd);
            cols.resize(k * n, T::zero());
            gemm_view(T::one(), wm.t(), column_block(x.data(), c, p, q0, n), T::zero(), &mut cols, 0, n);
            col2im(&cols, o, ho, wo, win, wd, rows, &mut out);
        }
        if let Some(b) = inputs.get(2) {
            if b.numel() != o {
                return Err(shape_err("conv_transpose2d", "bias length mismatch"));
            }
            add_bias(&mut out, b.data(), ho * wo);
        }
        Tensor::from_vec(&[o, ho, wo], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (c, h, wd, o, win, ho, wo) = self.geometry(x, w).expect("validated in forward");
        let k = o * win.kh * win.kw;
        let p = h * wd;
        let mut result = vec![None, None];
        if needs[0] || needs[1] {
            let wm = MatRef::dense(w.data(), c, k);
            let mut dx = needs[0].then(|| vec![T::zero(); c * p]);
            let mut dw = needs[1].then(|| vec![T::zero(); c * k]);
            let mut dcols = Vec::new();
            for (i, rows) in bands(k, h, wd).enumerate() {
                let (q0, n) = (rows.start * wd, rows.len() * wd);
                dcols.resize(k * n, T::zero());
                im2col(grad.data(), o, ho, wo, win, wd, rows, &mut dcols);
                let dc = MatRef::dense(&dcols, k, n);
                if let Some(dx) = dx.as_mut() {
                    gemm_view(T::one(), wm, dc, T::zero(), dx, q0, p);
                }
                if let Some(dw) = dw.as_mut() {
                    let beta = if i == 0 { T::zero() } else { T::one() };
                    gemm_view(T::one(), column_block(x.data(), c, p, q0, n), dc.t(), beta, dw, 0, k);
                }
            }
            result[0] = dx.map(|d| Tensor::from_vec(x.shape(), d).expect("shape"));
            result[1] = dw.map(|d| Tensor::from_vec(w.shape(), d).expect("shape"));
        }
        if inputs.len() > 2 {
            result.push(needs[2].then(|| bias_grad(grad.data(), o, ho * wo)));
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_im2col(x: &[f64], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(c * win.kh * win.kw * ho * wo);
        for ch in 0..c {
            for ki in 0..win.kh {
                for kj in 0..win.kw {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                            let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                            let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                            out.push(if inside { x[ch * h * w + iy as usize * w + ix as usize] } else { 0.0 });
                        }
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn im2col_matches_naive_and_col2im_is_its_adjoint(
            c in 1usize..3, h in 1usize..9, w in 1usize..9, kh in 1usize..5, kw in 1usize..5,
            stride in 1usize..4, pad in 0usize..4, seed in any::<u64>(),
        ) {
            let win = Window { kh, kw, stride, pad };
            let Some((ho, wo)) = win.out_size(h, w) else { return Ok(()) };
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
            let x: Vec<f64> = (0..c * h * w).map(|_| next()).collect();
            let k = c * kh * kw * ho * wo;
            let mut cols = vec![f64::NAN; k];
            im2col(&x, c, h, w, win, wo, 0..ho, &mut cols);
            prop_assert_eq!(&cols, &naive_im2col(&x, c, h, w, win, ho, wo));
            let y: Vec<f64> = (0..k).map(|_| next()).collect();
            let mut back = vec![0.0; c * h * w];
            col2im(&y, c, h, w, win, wo, 0..ho, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
    }

    /// `<op(x, w), u>` is bilinear, so each backward output is pinned by one inner product.
    fn check_adjoints(op: &dyn Op<f64>, xs: &[usize], ws: &[usize]) {
        let t = |shape: &[usize], seed| Tensor::from_vec(shape, lcg(seed, shape.iter().product())).unwrap();
        let (x, w, vx, vw) = (t(xs, 1), t(ws, 2), t(xs, 3), t(ws, 4));
        let y = op.forward(&[&x, &w]).unwrap();
        let u = t(y.shape(), 5);
        let g = op.backward(&[&x, &w], &y, &u, &[true, true]);
        let (dx, dw) = (g[0].as_ref().unwrap(), g[1].as_ref().unwrap());
        assert!(close(dot(dx.data(), vx.data()), dot(u.data(), op.forward(&[&vx, &w]).unwrap().data())));
        assert!(close(dot(dw.data(), vw.data()), dot(u.data(), op.forward(&[&x, &vw]).unwrap().data())));
    }

    #[test]
    fn banded_lowering_covers_every_row_once() {
        for (k, ho, wo) in [(9, 1, 1), (72, 256, 128), (784, 224, 224), (BAND_ELEMS + 1, 3, 1)] {
            let rows: Vec<_> = bands(k, ho, wo).collect();
            assert_eq!(rows.first().unwrap().start, 0);
            assert_eq!(rows.last().unwrap().end, ho);
            assert!(rows.windows(2).all(|r| r[0].end == r[1].start));
            assert!(rows.iter().all(|r| !r.is_empty() && (r.len() == 1 || r.len() * k * wo <= BAND_ELEMS)));
        }
    }

    #[test]
    fn multi_band_conv_matches_direct_sum() {
        let (c, h, w, o) = (8, 256, 130, 2);
        assert!(bands(c * 9, h, w).count() > 1);
        let conv = Conv2d { stride: 1, pad: 1 };
        let x = Tensor::from_vec(&[c, h, w], lcg(7, c * h * w)).unwrap();
        let wt = Tensor::from_vec(&[o, c, 3, 3], lcg(8, o * c * 9)).unwrap();
        let y = conv.forward(&[&x, &wt]).unwrap();
        let at = |ch: usize, iy: isize, ix: isize| {
            if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                x.data()[ch * h * w + iy as usize * w + ix as usize]
            } else {
                0.0
            }
        };
        for (oo, oy, ox) in [(0, 0, 0), (1, 255, 129), (0, 113, 64), (1, 114, 1), (0, 226, 128)] {
            let mut want = 0.0;
            for ch in 0..c {
                for ki in 0..3 {
                    for kj in 0..3 {
                        want += wt.data()[((oo * c + ch) * 3 + ki) * 3 + kj]
                            * at(ch, oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                    }
                }
            }
            assert!(close(y.data()[(oo * h + oy) * w + ox], want));
        }
        check_adjoints(&conv, &[c, h, w], &[o, c, 3, 3]);
        check_adjoints(&Conv2d { stride: 2, pad: 1 }, &[c, h, w], &[o, c, 3, 3]);
    }

    #[test]
    fn multi_band_transposed_conv_is_adjoint() {
        let (c, h, w, o) = (4, 130, 128, 64);
        assert!(bands(o * 9, h, w).count() > 1);
        check_adjoints(&ConvTranspose2d { stride: 2, pad: 1, output_pad: 1 }, &[c, h, w], &[c, o, 3, 3]);
    }
}
