//! Training objectives, each in a tape form (for optimisation) and a plain form (for evaluation
//! and oracle tests).

use fs2ffpe_autograd::{Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{GanMode, LossWeights};
use crate::error::{Error, Result};
use crate::geometry::{centercrop_var, resize_var};
use crate::image::ImageTensor;
use crate::models::{Bound, FeatureStack, ProjectionHeads};

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// `mean |centercrop(out_5x, c) - resize(out_10x, c)|`; `out_5x` is detached (the teacher).
pub fn crcm_loss_var<T: Real>(tape: &mut Tape<T>, out_5x: Var, out_10x: Var, compare_size: usize) -> Result<Var> {
    same_shape(tape, out_5x, out_10x, "crcm")?;
    let teacher = tape.detach(out_5x);
    let a = centercrop_var(tape, teacher, compare_size)?;
    let b = resize_var(tape, out_10x, compare_size)?;
    Ok(tape.mean_abs_diff(a, b)?)
}

/// Cross-resolution consistency between the two views, compared at half the input side.
pub fn crcm_loss<T: Real>(out_5x: &ImageTensor<T>, out_10x: &ImageTensor<T>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let a = tape.constant(out_5x.tensor().clone());
    let b = tape.constant(out_10x.tensor().clone());
    let v = crcm_loss_var(&mut tape, a, b, out_10x.height() / 2)?;
    Ok(tape.value(v).item().as_f64())
}

/// `mean |out_10x - wdgm_out|`, differentiable in both arguments.
pub fn wdgm_loss_var<T: Real>(tape: &mut Tape<T>, out_10x: Var, wdgm_out: Var) -> Result<Var> {
    same_shape(tape, out_10x, wdgm_out, "wdgm")?;
    Ok(tape.mean_abs_diff(out_10x, wdgm_out)?)
}

pub fn wdgm_loss<T: Real>(out_10x: &ImageTensor<T>, wdgm_out: &ImageTensor<T>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let a = tape.constant(out_10x.tensor().clone());
    let b = tape.constant(wdgm_out.tensor().clone());
    let v = wdgm_loss_var(&mut tape, a, b)?;
    Ok(tape.value(v).item().as_f64())
}

/// Discriminator objective on real logits and (already detached) fake logits.
pub fn gan_d_loss_var<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var, mode: GanMode) -> Result<Var> {
    let (r, f) = match mode {
        GanMode::Lsgan => (tape.mean_squared_to(d_real, 1.0)?, tape.mean_squared_to(d_fake, 0.0)?),
        GanMode::Bce => (tape.bce_with_logits_to(d_real, 1.0)?, tape.bce_with_logits_to(d_fake, 0.0)?),
    };
    Ok(tape.weighted_sum(&[r, f], &[0.5, 0.5])?)
}

/// Generator objective: fakes scored as real.
pub fn gan_g_loss_var<T: Real>(tape: &mut Tape<T>, d_fake: Var, mode: GanMode) -> Result<Var> {
    Ok(match mode {
        GanMode::Lsgan => tape.mean_squared_to(d_fake, 1.0)?,
        GanMode::Bce => tape.bce_with_logits_to(d_fake, 1.0)?,
    })
}

/// `(l_D, l_G)` for fixed logit maps.
pub fn gan_losses<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>, mode: GanMode) -> Result<(f64, f64)> {
    let mut tape = Tape::no_grad();
    let r = tape.constant(d_real.clone());
    let f = tape.constant(d_fake.clone());
    let ld = gan_d_loss_var(&mut tape, r, f, mode)?;
    let lg = gan_g_loss_var(&mut tape, f, mode)?;
    Ok((tape.value(ld).item().as_f64(), tape.value(lg).item().as_f64()))
}

/// `n` distinct flat locations out of `available`, in random order.
pub fn sample_locations(rng: &mut impl Rng, available: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > available {
        return Err(Error::Config(format!("cannot sample {n} patches from {available} locations")));
    }
    let mut all: Vec<usize> = (0..available).collect();
    let (chosen, _) = all.partial_shuffle(rng, n);
    Ok(chosen.to_vec())
}

/// Locations for every tap, drawn in layer order from one stream.
pub fn sample_patch_sets<T: Real>(
    rng: &mut impl Rng,
    tape: &Tape<T>,
    taps: &[Var],
    n: usize,
) -> Result<Vec<Vec<usize>>> {
    taps.iter()
        .map(|&t| {
            let s = tape.value(t).shape();
            sample_locations(rng, s[1] * s[2], n)
        })
        .collect()
}

/// Contrastive patch loss: per layer, projected output patches `q` are classified against the
/// detached projected source patches `k` at the same locations; mean over layers.
#[allow(clippy::too_many_arguments)]
pub fn patchnce_loss_var<T: Real>(
    tape: &mut Tape<T>,
    heads: &ProjectionHeads<T>,
    hp: &Bound,
    src: &[Var],
    out: &[Var],
    locations: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    if src.len() != out.len() || src.len() != locations.len() || src.len() != heads.layer_ids().len() {
        return Err(Error::Config("patchNCE needs one source map, output map and location set per layer".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut per_layer = Vec::with_capacity(src.len());
    for (k, ((&s, &o), locs)) in src.iter().zip(out).zip(locations).enumerate() {
        same_shape(tape, s, o, "patchNCE features")?;
        let fs = tape.gather_locations(s, locs.clone())?;
        let fo = tape.gather_locations(o, locs.clone())?;
        let key = heads.project(tape, hp, k, fs)?;
        let key = tape.detach(key);
        let query = heads.project(tape, hp, k, fo)?;
        per_layer.push(info_nce_var(tape, query, key, temperature)?);
    }
    let w = vec![1.0 / per_layer.len() as f64; per_layer.len()];
    Ok(tape.weighted_sum(&per_layer, &w)?)
}

/// InfoNCE with positives on the diagonal of `q k^T / tau`.
pub fn info_nce_var<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, temperature: f64) -> Result<Var> {
    let sim = tape.matmul(q, k, false, true)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    Ok(tape.diagonal_cross_entropy(logits)?)
}

/// InfoNCE for fixed embeddings `q, k: [N, D]`.
pub fn info_nce<T: Real>(q: &Tensor<T>, k: &Tensor<T>, temperature: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let v = info_nce_var(&mut tape, qv, kv, temperature)?;
    Ok(tape.value(v).item().as_f64())
}

/// Plain-value patchNCE between two feature stacks with freshly sampled locations.
pub fn patchnce_loss<T: Real>(
    heads: &ProjectionHeads<T>,
    src: &FeatureStack<T>,
    out: &FeatureStack<T>,
    n_patches: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if src.layer_ids != out.layer_ids || src.layer_ids != heads.layer_ids() {
        return Err(Error::Config("feature stacks and heads disagree on layer ids".into()));
    }
    let mut tape = Tape::no_grad();
    let hp = heads.params.bind(&mut tape, false);
    let s: Vec<Var> = src.maps.iter().map(|m| tape.constant(m.clone())).collect();
    let o: Vec<Var> = out.maps.iter().map(|m| tape.constant(m.clone())).collect();
    let locs = sample_patch_sets(rng, &tape, &s, n_patches)?;
    let v = patchnce_loss_var(&mut tape, heads, &hp, &s, &o, &locs, temperature)?;
    Ok(tape.value(v).item().as_f64())
}

/// Composite generator objective `sum_i w_i * part_i` in the order gan, nce, crcm, wdgm.
pub fn generator_loss_var<T: Real>(tape: &mut Tape<T>, parts: [Var; 4], weights: &LossWeights) -> Result<Var> {
    Ok(tape.weighted_sum(&parts, &weights.as_array())?)
}
