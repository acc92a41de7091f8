use fs2ffpe_autograd::ops::Window;
use fs2ffpe_autograd::{Real, Tape, Tensor, Var};
use rand::Rng;

use super::{Bound, ConvLayer, ParamSet};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const KERNEL: usize = 4;

/// PatchGAN: `n_layers` stride-2 4x4 convolutions, one stride-1 convolution, then a stride-1
/// projection to one logit channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub base_width: usize,
    pub n_layers: usize,
}

impl DiscriminatorSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { base_width: cfg.disc_base_width, n_layers: cfg.disc_layers }
    }

    /// Logit-map side for an `n x n` input: each stride-2 layer maps `s -> s/2`
    /// (`floor((s + 2 - 4) / 2) + 1`), each stride-1 layer `s -> s - 1`.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        let mut s = n;
        for i in 0..self.n_layers + 2 {
            let stride = if i < self.n_layers { 2 } else { 1 };
            s = Window { kh: KERNEL, kw: KERNEL, stride, pad: 1 }.out_size(s, s)?.0;
        }
        Some(s)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
    layers: Vec<(ConvLayer, bool, bool)>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if spec.base_width == 0 || spec.n_layers == 0 {
            return Err(Error::Config("discriminator width and depth must be positive".into()));
        }
        let mut p = ParamSet::default();
        let w = spec.base_width;
        let width = |i: usize| w * (1usize << i.min(3));
        let mut layers = vec![(ConvLayer::new(&mut p, "conv0", w, 3, KERNEL, 2, 1, std, rng), false, true)];
        for i in 1..spec.n_layers {
            let l = ConvLayer::new(&mut p, &format!("conv{i}"), width(i), width(i - 1), KERNEL, 2, 1, std, rng);
            layers.push((l, true, true));
        }
        let n = spec.n_layers;
        layers.push((
            ConvLayer::new(&mut p, &format!("conv{n}"), width(n), width(n - 1), KERNEL, 1, 1, std, rng),
            true,
            true,
        ));
        layers.push((ConvLayer::new(&mut p, "logits", 1, width(n), KERNEL, 1, 1, std, rng), false, false));
        Ok(Self { spec, params: p, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Logit map `[1, s, s]` for a `[3, n, n]` input.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (c, h, w) = tape.value(x).chw("discriminator")?;
        if c != 3 || self.spec.output_side(h.min(w)).is_none() {
            return Err(Error::Shape(format!(
                "discriminator with {} layers cannot score a [{c}, {h}, {w}] input",
                self.spec.n_layers
            )));
        }
        let mut y = x;
        for (layer, norm, act) in &self.layers {
            y = layer.apply(tape, p, y)?;
            if *norm {
                y = tape.instance_norm(y, NORM_EPS)?;
            }
            if *act {
                y = tape.leaky_relu(y, SLOPE)?;
            }
        }
        Ok(y)
    }
}

/// Logit map of one image.
pub fn discriminate<T: Real>(d: &Discriminator<T>, img: &ImageTensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let p = d.params.bind(&mut tape, false);
    let x = tape.constant(img.tensor().clone());
    let y = d.forward(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Magnification;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(n: usize) -> ImageTensor<f64> {
        let t = Tensor::from_fn(&[3, n, n], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        ImageTensor::new(t, Magnification::X10, "x").unwrap()
    }

    #[test]
    fn patch_map_side_follows_stride_arithmetic() {
        let spec = DiscriminatorSpec { base_width: 2, n_layers: 3 };
        // 224 -> 112 -> 56 -> 28 (stride 2), -> 27 -> 26 (stride 1)
        assert_eq!(spec.output_side(224), Some(26));
        let d = Discriminator::<f64>::new(spec, 0.02, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(discriminate(&d, &img(224)).unwrap().shape(), &[1, 26, 26]);
        assert_eq!(DiscriminatorSpec { base_width: 2, n_layers: 1 }.output_side(8), Some(2));
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let spec = DiscriminatorSpec { base_width: 2, n_layers: 2 };
        let mut d = Discriminator::<f64>::new(spec, 0.02, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        d.params.fill(0.0);
        assert!(discriminate(&d, &img(32)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersized_input_is_a_shape_error() {
        let spec = DiscriminatorSpec { base_width: 2, n_layers: 3 };
        let d = Discriminator::<f64>::new(spec, 0.02, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(discriminate(&d, &img(8)), Err(Error::Shape(_))));
    }
}
