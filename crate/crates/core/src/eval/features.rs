use fs2ffpe_autograd::{Tape, Tensor};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::resize_tensor;
use crate::image::ImageTensor;
use crate::rng::{seed_all, Component};

pub const DESK_CNN_DIM: usize = 64;
/// Environment variable naming the reference extractor's weight file.
pub const REFERENCE_WEIGHTS_ENV: &str = "FS2FFPE_REFERENCE_WEIGHTS";

const DESK_SEED: u64 = 0x5EED_DE5C;
const DESK_INPUT: usize = 112;
const DESK_WIDTHS: [usize; 4] = [3, 16, 32, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extractor {
    /// Standard ImageNet classifier embedding; needs user-supplied weights.
    Reference,
    /// Small fixed-seed random convolutional embedder.
    DeskCnn,
}

impl Extractor {
    pub fn id(self) -> String {
        match self {
            Extractor::Reference => "reference".into(),
            Extractor::DeskCnn => format!("desk_cnn-v1-d{DESK_CNN_DIM}"),
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Extractor::Reference => 2048,
            Extractor::DeskCnn => DESK_CNN_DIM,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk_cnn" => Ok(Extractor::DeskCnn),
            "reference" => Ok(Extractor::Reference),
            _ => Err(Error::Config(format!("unknown extractor '{s}' (expected desk_cnn or reference)"))),
        }
    }
}

struct DeskCnn {
    weights: Vec<Tensor<f64>>,
}

impl DeskCnn {
    fn new() -> Self {
        let mut rng = seed_all(DESK_SEED).stream(Component::FeatureExtractor, 0);
        let weights = DESK_WIDTHS
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid");
                Tensor::from_fn(&[w[1], w[0], 3, 3], |_| dist.sample(&mut rng))
            })
            .collect();
        Self { weights }
    }

    /// Three stride-2 conv+ReLU stages; each stage's channels are mean- and max-pooled, and the
    /// input colour means and deviations are appended.
    fn embed(&self, img: &Tensor<f64>) -> Result<Vec<f64>> {
        let x = resize_tensor(img, DESK_INPUT, DESK_INPUT)?;
        let mut feats = Vec::with_capacity(DESK_CNN_DIM);
        let plane = DESK_INPUT * DESK_INPUT;
        for c in 0..3 {
            let p = &x.data()[c * plane..(c + 1) * plane];
            let m = p.iter().sum::<f64>() / plane as f64;
            let v = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / plane as f64;
            feats.push(m);
            feats.push(v.sqrt());
        }
        let mut tape = Tape::no_grad();
        let mut y = tape.constant(x);
        let mut pooled: Vec<Vec<f64>> = Vec::new();
        for w in &self.weights {
            let wv = tape.constant(w.clone());
            y = tape.conv2d(y, wv, None, 2, 1)?;
            y = tape.relu(y)?;
            let (c, h, ww) = tape.value(y).chw("desk_cnn")?;
            let d = tape.value(y).data();
            let n = h * ww;
            pooled.push((0..c).map(|k| d[k * n..(k + 1) * n].iter().sum::<f64>() / n as f64).collect());
        }
        // 6 colour stats + 16 + 32 + (64 - 54 = 10 of the last stage's means)
        for p in &pooled[..2] {
            feats.extend_from_slice(p);
        }
        feats.extend_from_slice(&pooled[2][..DESK_CNN_DIM - feats.len()]);
        Ok(feats)
    }
}

/// `d`-dimensional embeddings of `imgs`, deterministic for a given extractor.
pub fn extract_features(imgs: &[ImageTensor<f64>], extractor: Extractor) -> Result<Vec<Vec<f64>>> {
    match extractor {
        Extractor::DeskCnn => {
            let net = DeskCnn::new();
            imgs.iter().map(|i| net.embed(i.tensor())).collect()
        }
        Extractor::Reference => Err(match std::env::var(REFERENCE_WEIGHTS_ENV) {
            Err(_) => Error::Config(format!(
                "the reference extractor needs Inception-v3 (pool3, 2048-d) weights: download the standard \
                 FID weights and point {REFERENCE_WEIGHTS_ENV} at the file, or use --extractor desk_cnn"
            )),
            Ok(p) => Error::Config(format!(
                "{REFERENCE_WEIGHTS_ENV}={p}: loading reference weights is not supported by this build; \
                 use --extractor desk_cnn"
            )),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Magnification;

    fn img(v: f64) -> ImageTensor<f64> {
        let t = Tensor::from_fn(&[3, 32, 32], |i| ((i % 17) as f64 / 17.0 - 0.5) * v);
        ImageTensor::new(t, Magnification::X10, "i").unwrap()
    }

    #[test]
    fn desk_features_are_deterministic_with_documented_dim() {
        let imgs = [img(1.0), img(0.5)];
        let a = extract_features(&imgs, Extractor::DeskCnn).unwrap();
        let b = extract_features(&imgs, Extractor::DeskCnn).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|f| f.len() == Extractor::DeskCnn.dim()));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn reference_without_weights_is_actionable() {
        std::env::remove_var(REFERENCE_WEIGHTS_ENV);
        let e = extract_features(&[img(1.0)], Extractor::Reference).unwrap_err().to_string();
        assert!(e.contains(REFERENCE_WEIGHTS_ENV) && e.contains("desk_cnn"), "{e}");
    }
}
