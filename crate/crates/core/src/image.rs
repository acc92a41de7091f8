//! The image tile type shared by every stage, and its 8-bit PNG mapping.

use std::path::Path;

use fs2ffpe_autograd::{Real, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Sampling scale a tile represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Magnification {
    X10,
    X5,
    /// A wavelet band or other non-spatial derivative.
    Band,
}

/// Declared value interval of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueRange {
    Closed(f64, f64),
    /// Values outside any fixed interval, e.g. an image rebuilt from arbitrary bands.
    Unbounded,
}

impl ValueRange {
    pub const CANONICAL: ValueRange = ValueRange::Closed(-1.0, 1.0);
}

/// RGB tile as `[3, H, W]`, canonical range `[-1, 1]`.
///
/// Construction validates the shape (three channels, even sides of at least 8), rejects
/// non-finite elements, and clamps into the declared range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T: Real = f32> {
    data: Tensor<T>,
    range: ValueRange,
    magnification: Magnification,
    id: String,
}

pub const MIN_SIDE: usize = 8;

impl<T: Real> ImageTensor<T> {
    pub fn new(data: Tensor<T>, magnification: Magnification, id: impl Into<String>) -> Result<Self> {
        Self::with_range(data, ValueRange::CANONICAL, magnification, id)
    }

    pub fn with_range(
        mut data: Tensor<T>,
        range: ValueRange,
        magnification: Magnification,
        id: impl Into<String>,
    ) -> Result<Self> {
        let (c, h, w) = data.chw("ImageTensor").map_err(Error::from)?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 || h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!("image sides must be even and >= {MIN_SIDE}, got {h}x{w}")));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        if let ValueRange::Closed(lo, hi) = range {
            let (lo, hi) = (T::lit(lo), T::lit(hi));
            for v in data.data_mut() {
                *v = v.max(lo).min(hi);
            }
        }
        Ok(Self { data, range, magnification, id: id.into() })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn magnification(&self) -> Magnification {
        self.magnification
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_magnification(mut self, m: Magnification) -> Self {
        self.magnification = m;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            data: self.data.cast(),
            range: self.range,
            magnification: self.magnification,
            id: self.id.clone(),
        }
    }

    /// `v = pixel / 127.5 - 1`.
    pub fn from_rgb8(img: &RgbImage, magnification: Magnification, id: impl Into<String>) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![T::zero(); 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = T::lit(px.0[c] as f64 / 127.5 - 1.0);
            }
        }
        Self::new(Tensor::from_vec(&[3, h, w], data)?, magnification, id)
    }

    /// Inverse of [`from_rgb8`](Self::from_rgb8) with rounding; values outside `[-1, 1]` saturate.
    pub fn to_rgb8(&self) -> RgbImage {
        tensor_to_rgb8(&self.data)
    }

    pub fn load_png(path: &Path, magnification: Magnification) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_rgb8(&img, magnification, id)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// Maps any `[3, H, W]` tensor to 8-bit RGB via `round((v + 1) * 127.5)`, saturating.
pub fn tensor_to_rgb8<T: Real>(t: &Tensor<T>) -> RgbImage {
    let (_, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize].as_f64();
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}
