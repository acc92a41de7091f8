use fs2ffpe_autograd::Real;

use super::Label;
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StainCall {
    Positive,
    Negative,
    /// Too few stained pixels, or a mean hue outside both bands.
    Indeterminate,
}

impl StainCall {
    pub fn label(self) -> Option<Label> {
        match self {
            StainCall::Positive => Some(Label::Positive),
            StainCall::Negative => Some(Label::Negative),
            StainCall::Indeterminate => None,
        }
    }
}

/// Nuclear segmentation and hue bands, calibrated on the synthetic stain palette
/// (brown DAB near 27 degrees, blue hematoxylin near 230 degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainThresholds {
    /// A pixel is nuclear when HSV value is below this ...
    pub max_value: f64,
    /// ... and saturation above this.
    pub min_saturation: f64,
    pub min_pixels: usize,
    /// Hue band (degrees, wrapping through 0) read as brown / positive.
    pub positive_hue: (f64, f64),
    /// Hue band read as blue / negative.
    pub negative_hue: (f64, f64),
}

impl Default for StainThresholds {
    fn default() -> Self {
        Self {
            max_value: 0.70,
            min_saturation: 0.25,
            min_pixels: 150,
            positive_hue: (330.0, 75.0),
            negative_hue: (180.0, 290.0),
        }
    }
}

/// `(hue in degrees, saturation, value)` for RGB in `[0, 1]`.
pub(crate) fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

fn in_band(h: f64, (lo, hi): (f64, f64)) -> bool {
    if lo <= hi {
        h >= lo && h < hi
    } else {
        h >= lo || h < hi
    }
}

impl StainThresholds {
    /// Saturation-weighted circular mean hue over segmented nuclear pixels, then banded.
    pub fn classify<T: Real>(&self, img: &ImageTensor<T>) -> StainCall {
        let t = img.tensor();
        let plane = img.height() * img.width();
        let d = t.data();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for i in 0..plane {
            let px = |c: usize| ((d[c * plane + i].as_f64() + 1.0) * 0.5).clamp(0.0, 1.0);
            let (h, s, v) = rgb_to_hsv(px(0), px(1), px(2));
            if v < self.max_value && s > self.min_saturation {
                let a = h.to_radians();
                sx += s * a.cos();
                sy += s * a.sin();
                n += 1;
            }
        }
        if n < self.min_pixels || (sx == 0.0 && sy == 0.0) {
            return StainCall::Indeterminate;
        }
        let hue = sy.atan2(sx).to_degrees().rem_euclid(360.0);
        if in_band(hue, self.positive_hue) {
            StainCall::Positive
        } else if in_band(hue, self.negative_hue) {
            StainCall::Negative
        } else {
            StainCall::Indeterminate
        }
    }
}

/// Tile-level staining status with the default thresholds.
pub fn staining_status_of<T: Real>(img: &ImageTensor<T>) -> StainCall {
    StainThresholds::default().classify(img)
}
