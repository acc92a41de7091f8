use fs2ffpe_autograd::ops::ReflectPad;
use fs2ffpe_autograd::{Real, Tape, Tensor, Var};
use rand::Rng;

use super::{normal_tensor, Bound, ConvLayer, ParamSet};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image::MIN_SIDE;
use crate::image::{ImageTensor, ValueRange};
use crate::wavelet::WaveletBands;

/// Inputs are clamped to this magnitude before the inverse tanh of the global skip.
pub const SKIP_LIMIT: f64 = 0.9999;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// `tanh(atanh(x) + r)`: output in (-1, 1).
    Tanh,
    /// `x + r`: unbounded, for wavelet detail bands.
    Linear,
}

/// Encoder, residual bottleneck, decoder; the decoder output `r` is a residual on the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub n_resblocks: usize,
    pub downsample_levels: usize,
    pub output: OutputKind,
}

impl GeneratorSpec {
    pub fn main(cfg: &TrainConfig) -> Self {
        Self {
            base_width: cfg.gen_base_width,
            n_resblocks: cfg.gen_resblocks,
            downsample_levels: cfg.gen_downsample,
            output: OutputKind::Tanh,
        }
    }

    pub fn aux(cfg: &TrainConfig) -> Self {
        Self {
            base_width: cfg.aux_base_width,
            n_resblocks: cfg.gen_resblocks,
            downsample_levels: cfg.gen_downsample,
            output: OutputKind::Linear,
        }
    }

    /// Tap ids: 0 input, 1 stem, then one per downsampling stage, then one per residual block.
    pub fn max_tap(&self) -> usize {
        1 + self.downsample_levels + self.n_resblocks
    }

    pub fn tap_channels(&self, id: usize) -> Result<usize> {
        let l = self.downsample_levels;
        match id {
            0 => Ok(3),
            1 => Ok(self.base_width),
            i if i <= 1 + l => Ok(self.base_width << (i - 1)),
            i if i <= self.max_tap() => Ok(self.base_width << l),
            _ => Err(Error::Config(format!("encoder layer {id} does not exist (max {})", self.max_tap()))),
        }
    }

    /// Spatial downscale factor of tap `id` relative to the (padded) input.
    pub fn tap_stride(&self, id: usize) -> usize {
        match id {
            0 | 1 => 1,
            i => 1 << (i - 1).min(self.downsample_levels),
        }
    }

    fn multiple(&self) -> usize {
        1 << self.downsample_levels
    }
}

#[derive(Clone, Copy, Debug)]
struct UpLayer {
    w: usize,
    b: usize,
}

/// Generator parameters plus the layer wiring.
#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    spec: GeneratorSpec,
    pub params: ParamSet<T>,
    stem: ConvLayer,
    down: Vec<ConvLayer>,
    blocks: Vec<(ConvLayer, ConvLayer)>,
    up: Vec<UpLayer>,
    head: ConvLayer,
}

impl<T: Real> Generator<T> {
    /// Conv weights drawn from `N(0, std)`, biases zero.
    pub fn new(spec: GeneratorSpec, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if spec.base_width == 0 || spec.downsample_levels == 0 {
            return Err(Error::Config("generator width and downsample levels must be positive".into()));
        }
        let mut p = ParamSet::default();
        let w = spec.base_width;
        let stem = ConvLayer::new(&mut p, "stem", w, 3, 7, 1, 0, std, rng);
        let mut down = Vec::new();
        for i in 0..spec.downsample_levels {
            let (ci, co) = (w << i, w << (i + 1));
            down.push(ConvLayer::new(&mut p, &format!("down{i}"), co, ci, 3, 2, 1, std, rng));
        }
        let wb = w << spec.downsample_levels;
        let blocks = (0..spec.n_resblocks)
            .map(|i| {
                let a = ConvLayer::new(&mut p, &format!("res{i}.a"), wb, wb, 3, 1, 0, std, rng);
                let b = ConvLayer::new(&mut p, &format!("res{i}.b"), wb, wb, 3, 1, 0, std, rng);
                (a, b)
            })
            .collect();
        let mut up = Vec::new();
        for i in (0..spec.downsample_levels).rev() {
            let (ci, co) = (w << (i + 1), w << i);
            let wi = p.push(format!("up{i}.weight"), normal_tensor(&[ci, co, 3, 3], std, rng));
            let bi = p.push(format!("up{i}.bias"), Tensor::zeros(&[co]));
            up.push(UpLayer { w: wi, b: bi });
        }
        let head = ConvLayer::new(&mut p, "head", 3, w, 7, 1, 0, std, rng);
        Ok(Self { spec, params: p, stem, down, blocks, up, head })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Zeroes the output head so that `r == 0` and the network starts as the identity map
    /// (up to the skip clamp for the tanh head).
    pub fn init_identity_bias(&mut self) {
        for slot in [self.head.w, self.head.b] {
            self.params.tensors_mut()[slot].data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Full forward pass; also returns the activations at `taps` (in the order requested).
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, taps: &[usize]) -> Result<(Var, Vec<Var>)> {
        let (out, t) = self.run(tape, p, x, taps, true)?;
        Ok((out.expect("full pass yields an output"), t))
    }

    /// Encoder-only pass, stopping at the deepest requested tap.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, x: Var, taps: &[usize]) -> Result<Vec<Var>> {
        Ok(self.run(tape, p, x, taps, false)?.1)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        taps: &[usize],
        full: bool,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        let (c, h, w) = tape.value(x).chw("generator")?;
        if c != 3 || h % 2 != 0 || w % 2 != 0 || h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "generator input must be [3, H, W] with even H, W >= {MIN_SIDE}, got [{c}, {h}, {w}]"
            )));
        }
        for &t in taps {
            self.spec.tap_channels(t)?;
        }
        let last = taps.iter().copied().max();
        let mut found: Vec<Option<Var>> = vec![None; taps.len()];
        let record = |id: usize, v: Var, found: &mut Vec<Option<Var>>| {
            for (slot, &t) in found.iter_mut().zip(taps) {
                if t == id {
                    *slot = Some(v);
                }
            }
        };
        let done = |id: usize| !full && !matches!(last, Some(l) if id < l);
        let collect = |found: Vec<Option<Var>>| found.into_iter().map(|v| v.expect("tap reached")).collect();

        let m = self.spec.multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let xp =
            if ph + pw > 0 { tape.reflect_pad(x, ReflectPad { top: 0, bottom: ph, left: 0, right: pw })? } else { x };
        record(0, xp, &mut found);
        if done(0) {
            return Ok((None, collect(found)));
        }
        let mut id = 1;
        let mut y = tape.reflect_pad(xp, ReflectPad::uniform(3))?;
        y = self.stem.apply(tape, p, y)?;
        y = norm_relu(tape, y)?;
        record(id, y, &mut found);
        if done(id) {
            return Ok((None, collect(found)));
        }
        for layer in &self.down {
            id += 1;
            y = layer.apply(tape, p, y)?;
            y = norm_relu(tape, y)?;
            record(id, y, &mut found);
            if done(id) {
                return Ok((None, collect(found)));
            }
        }
        for (a, b) in &self.blocks {
            id += 1;
            let mut r = tape.reflect_pad(y, ReflectPad::uniform(1))?;
            r = a.apply(tape, p, r)?;
            r = norm_relu(tape, r)?;
            r = tape.reflect_pad(r, ReflectPad::uniform(1))?;
            r = b.apply(tape, p, r)?;
            r = tape.instance_norm(r, NORM_EPS)?;
            y = tape.add(y, r)?;
            record(id, y, &mut found);
            if done(id) {
                return Ok((None, collect(found)));
            }
        }
        for u in &self.up {
            y = tape.conv_transpose2d(y, p.at(u.w), Some(p.at(u.b)), 2, 1, 1)?;
            y = norm_relu(tape, y)?;
        }
        y = tape.reflect_pad(y, ReflectPad::uniform(3))?;
        let mut r = self.head.apply(tape, p, y)?;
        if ph + pw > 0 {
            r = tape.crop(r, 0, 0, h, w)?;
        }
        let out = match self.spec.output {
            OutputKind::Tanh => {
                let s = tape.atanh_clamped(x, SKIP_LIMIT)?;
                let z = tape.add(s, r)?;
                tape.tanh(z)?
            }
            OutputKind::Linear => tape.add(x, r)?,
        };
        Ok((Some(out), collect(found)))
    }
}

fn norm_relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let y = tape.instance_norm(x, NORM_EPS)?;
    Ok(tape.relu(y)?)
}

/// Per-layer encoder activations for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T: Real = f32> {
    pub layer_ids: Vec<usize>,
    pub maps: Vec<Tensor<T>>,
}

fn run_inference<T: Real>(g: &Generator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let p = g.params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (out, _) = g.forward(&mut tape, &p, xv, &[])?;
    Ok(tape.value(out).clone())
}

/// Applies a tanh-headed generator to one image; pure in `(params, img)`.
pub fn transfer<T: Real>(g: &Generator<T>, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    let out = run_inference(g, img.tensor())?;
    let range = match g.spec.output {
        OutputKind::Tanh => ValueRange::CANONICAL,
        OutputKind::Linear => ValueRange::Unbounded,
    };
    ImageTensor::with_range(out, range, img.magnification(), img.id())
}

/// Transfers `LL` through `g` (scaled by 1/2 in, 2 out) and each detail band through the shared
/// `g_aux`.
pub fn transfer_bands<T: Real>(
    g: &Generator<T>,
    g_aux: &Generator<T>,
    bands: &WaveletBands<T>,
) -> Result<WaveletBands<T>> {
    bands.validate()?;
    let ll = run_inference(g, &bands.ll.scale(T::lit(0.5)))?.scale(T::lit(2.0));
    Ok(WaveletBands {
        ll,
        hl: run_inference(g_aux, &bands.hl)?,
        lh: run_inference(g_aux, &bands.lh)?,
        hh: run_inference(g_aux, &bands.hh)?,
        source_shape: bands.source_shape,
        norm: bands.norm,
    })
}

/// Encoder activations of `img` at `layer_ids`.
pub fn encode_features<T: Real>(
    g: &Generator<T>,
    img: &ImageTensor<T>,
    layer_ids: &[usize],
) -> Result<FeatureStack<T>> {
    let mut tape = Tape::no_grad();
    let p = g.params.bind(&mut tape, false);
    let x = tape.constant(img.tensor().clone());
    let taps = g.encode(&mut tape, &p, x, layer_ids)?;
    Ok(FeatureStack { layer_ids: layer_ids.to_vec(), maps: taps.into_iter().map(|v| tape.value(v).clone()).collect() })
}
