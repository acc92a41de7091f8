//! The optimisation loop: dual-resolution generator passes, the wavelet path, alternating
//! discriminator / generator updates, checkpoints and loss logging.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fs2ffpe_autograd::{Adam, Real, Tape, Tensor, Var};
use image::RgbImage;
use rand::Rng;

use crate::checkpoint::{Checkpoint, Moments, Segment, SEGMENT_D, SEGMENT_G, SEGMENT_G_AUX, SEGMENT_HEADS};
use crate::config::{lr_at, TrainConfig};
use crate::data::{epoch_order, CorpusManifest, Domain, Split};
use crate::error::{Error, Result};
use crate::geometry::{centercrop, make_resolution_pair, ResolutionPair};
use crate::image::{tensor_to_rgb8, ImageTensor, Magnification};
use crate::losses::{
    crcm_loss_var, gan_d_loss_var, gan_g_loss_var, generator_loss_var, patchnce_loss_var, sample_patch_sets,
    wdgm_loss_var,
};
use crate::models::{
    gradients_of, Bound, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParamSet, ProjectionHeads,
};
use crate::report::{LossReport, CSV_HEADER};
use crate::rng::{seed_all, Component, RngStreams};
use crate::wavelet::{dwt2_var, idwt2_var};

const ADAM_EPS: f64 = 1e-8;
/// Allowed relative gap between the tape's total and the weighted sum of reported parts.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

/// The four trainable networks.
#[derive(Clone, Debug)]
pub struct Networks<T: Real> {
    pub g: Generator<T>,
    pub g_aux: Generator<T>,
    pub d: Discriminator<T>,
    pub heads: ProjectionHeads<T>,
}

impl<T: Real> Networks<T> {
    /// Seeded initialisation; each network draws from its own weight-init stream.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let s = seed_all(cfg.seed);
        let g_spec = GeneratorSpec::main(cfg);
        let mut g = Generator::new(g_spec, cfg.init_std, &mut s.stream(Component::WeightInit, 0))?;
        let mut g_aux = Generator::new(GeneratorSpec::aux(cfg), cfg.init_std, &mut s.stream(Component::WeightInit, 1))?;
        let d = Discriminator::new(
            DiscriminatorSpec::from_config(cfg),
            cfg.init_std,
            &mut s.stream(Component::WeightInit, 2),
        )?;
        let heads = ProjectionHeads::new(
            &g_spec,
            &cfg.nce_layers,
            cfg.head_dim,
            cfg.init_std,
            &mut s.stream(Component::WeightInit, 3),
        )?;
        if cfg.identity_init {
            g.init_identity_bias();
            g_aux.init_identity_bias();
        }
        Ok(Self { g, g_aux, d, heads })
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    /// Completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub nets: Networks<T>,
    pub opt_g: Adam<T>,
    pub opt_g_aux: Adam<T>,
    pub opt_d: Adam<T>,
    pub opt_heads: Adam<T>,
    pub streams: RngStreams,
}

fn adam_for<T: Real>(p: &ParamSet<T>, cfg: &TrainConfig) -> Adam<T> {
    Adam::new(p.tensors(), cfg.adam_beta1, cfg.adam_beta2, ADAM_EPS)
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(&config)?;
        Ok(Self {
            iteration: 0,
            config_hash: config.hash(),
            opt_g: adam_for(&nets.g.params, &config),
            opt_g_aux: adam_for(&nets.g_aux.params, &config),
            opt_d: adam_for(&nets.d.params, &config),
            opt_heads: adam_for(&nets.heads.params, &config),
            streams: seed_all(config.seed),
            nets,
            config,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let seg = |name: &str, p: &ParamSet<T>, a: &Adam<T>| Segment {
            name: name.into(),
            names: p.names().to_vec(),
            params: p.tensors().to_vec(),
            moments: Some(Moments::from_adam(a)),
        };
        Checkpoint {
            iteration: self.iteration,
            config: self.config.clone(),
            segments: vec![
                seg(SEGMENT_G, &self.nets.g.params, &self.opt_g),
                seg(SEGMENT_G_AUX, &self.nets.g_aux.params, &self.opt_g_aux),
                seg(SEGMENT_D, &self.nets.d.params, &self.opt_d),
                seg(SEGMENT_HEADS, &self.nets.heads.params, &self.opt_heads),
            ],
        }
    }

    /// Restores a state; `config` must hash identically to the checkpoint's config.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, config: &TrainConfig) -> Result<Self> {
        if ckpt.config.hash() != config.hash() {
            return Err(Error::Config(
                "the resumed checkpoint was written with a different configuration (config hash mismatch)".into(),
            ));
        }
        let mut s = Self::new(config.clone())?;
        s.iteration = ckpt.iteration;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let restore = |name: &str, p: &mut ParamSet<T>, opt: &mut Adam<T>| -> Result<()> {
            let seg = ckpt.require(name)?.clone();
            p.load(&seg.names, seg.params)?;
            let m =
                seg.moments.ok_or_else(|| Error::Checkpoint(format!("segment '{name}' lacks optimizer moments")))?;
            *opt = m.into_adam(b1, b2, ADAM_EPS);
            Ok(())
        };
        restore(SEGMENT_G, &mut s.nets.g.params, &mut s.opt_g)?;
        restore(SEGMENT_G_AUX, &mut s.nets.g_aux.params, &mut s.opt_g_aux)?;
        restore(SEGMENT_D, &mut s.nets.d.params, &mut s.opt_d)?;
        restore(SEGMENT_HEADS, &mut s.nets.heads.params, &mut s.opt_heads)?;
        Ok(s)
    }
}

/// Images produced by one step, for sample grids.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Real> {
    pub report: LossReport,
    pub fs_10x: Tensor<T>,
    pub out_10x: Tensor<T>,
    pub out_5x: Tensor<T>,
    pub wdgm_out: Tensor<T>,
}

/// Generator-side graph of one sample, kept alive across the discriminator update.
pub struct GenPass<T: Real> {
    tape: Tape<T>,
    gp: Bound,
    ap: Bound,
    hp: Bound,
    x10: Var,
    out10: Var,
    out5: Var,
    /// Whether `out5` carries gradients (only when D also scores the 5x branch).
    out5_live: bool,
    tilde: Var,
    src_taps: Vec<Var>,
    real: Tensor<T>,
}

fn non_finite<T: Real>(tape: &Tape<T>, what: &str) -> Error {
    let at = tape.first_non_finite().unwrap_or_else(|| "no non-finite node recorded".into());
    Error::Numeric(format!("{what} is not finite; first non-finite tensor: {at}"))
}

fn check_params<T: Real>(p: &ParamSet<T>, net: &str, iteration: u64) -> Result<()> {
    match p.first_non_finite() {
        Some(name) => {
            Err(Error::Numeric(format!("{net} parameter '{name}' became non-finite at iteration {iteration}")))
        }
        None => Ok(()),
    }
}

fn real_view<T: Real>(ffpe: &ImageTensor<T>, cfg: &TrainConfig) -> Result<Tensor<T>> {
    if ffpe.height() == cfg.tile_size_net && ffpe.width() == cfg.tile_size_net {
        Ok(ffpe.tensor().clone())
    } else if ffpe.height() == cfg.tile_size_source && ffpe.width() == cfg.tile_size_source {
        Ok(centercrop(ffpe, cfg.tile_size_net)?.into_tensor())
    } else {
        Err(Error::Shape(format!(
            "FFPE tile must be {0}x{0} or {1}x{1}, got {2}x{3}",
            cfg.tile_size_source,
            cfg.tile_size_net,
            ffpe.height(),
            ffpe.width()
        )))
    }
}

fn generator_pass<T: Real>(state: &TrainState<T>, pair: &ResolutionPair<T>, real: Tensor<T>) -> Result<GenPass<T>> {
    let cfg = &state.config;
    let nets = &state.nets;
    let mut t = Tape::new();
    let gp = nets.g.params.bind(&mut t, true);
    let ap = nets.g_aux.params.bind(&mut t, true);
    let hp = nets.heads.params.bind(&mut t, true);

    let x10 = t.constant(pair.fs_10x.tensor().clone());
    t.set_label(x10, "fs_10x");
    let (out10, src_taps) = nets.g.forward(&mut t, &gp, x10, &cfg.nce_layers)?;
    t.set_label(out10, "G(fs_10x)");

    let out5 = if cfg.disc_on_5x {
        let x5 = t.constant(pair.fs_5x.tensor().clone());
        t.set_label(x5, "fs_5x");
        nets.g.forward(&mut t, &gp, x5, &[])?.0
    } else {
        let mut nt = Tape::no_grad();
        let p = nets.g.params.bind(&mut nt, false);
        let x5 = nt.constant(pair.fs_5x.tensor().clone());
        let (o, _) = nets.g.forward(&mut nt, &p, x5, &[])?;
        t.constant(nt.value(o).clone())
    };
    t.set_label(out5, "G(fs_5x)");

    let bands = dwt2_var(&mut t, x10)?;
    t.set_label(bands, "dwt2(fs_10x)");
    let band = |t: &mut Tape<T>, k: usize| t.channel_slice(bands, 3 * k, 3);
    let ll = band(&mut t, 0)?;
    let ll_in = t.scale(ll, 0.5)?;
    let (ll_out, _) = nets.g.forward(&mut t, &gp, ll_in, &[])?;
    let ll_out = t.scale(ll_out, 2.0)?;
    t.set_label(ll_out, "G(LL)");
    let mut detail = Vec::with_capacity(3);
    for (k, name) in [(1, "G_aux(HL)"), (2, "G_aux(LH)"), (3, "G_aux(HH)")] {
        let b = band(&mut t, k)?;
        let (o, _) = nets.g_aux.forward(&mut t, &ap, b, &[])?;
        t.set_label(o, name);
        detail.push(o);
    }
    let tilde = idwt2_var(&mut t, ll_out, detail[0], detail[1], detail[2])?;
    t.set_label(tilde, "idwt2(transferred bands)");
    Ok(GenPass { tape: t, gp, ap, hp, x10, out10, out5, out5_live: cfg.disc_on_5x, tilde, src_taps, real })
}

fn mean_grads<T: Real>(acc: &mut Vec<Option<Tensor<T>>>, add: Vec<Option<Tensor<T>>>) {
    if acc.is_empty() {
        *acc = add;
        return;
    }
    for (a, b) in acc.iter_mut().zip(add) {
        match (a.as_mut(), b) {
            (Some(x), Some(y)) => x.add_assign(&y),
            (None, Some(y)) => *a = Some(y),
            _ => {}
        }
    }
}

fn scale_grads<T: Real>(g: &mut [Option<Tensor<T>>], n: usize) {
    if n > 1 {
        let s = T::lit(1.0 / n as f64);
        for t in g.iter_mut().flatten() {
            *t = t.scale(s);
        }
    }
}

/// One iteration on a single (FS, FFPE) pair.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    fs_tile: &ImageTensor<T>,
    ffpe_tile: &ImageTensor<T>,
) -> Result<StepOutput<T>> {
    train_step_batch(state, &[(fs_tile, ffpe_tile)])
}

/// One iteration over a batch; gradients are averaged over the pairs.
///
/// Order: resolution pairs and generator passes for every pair, one discriminator update on the
/// detached fakes, then one joint update of G, G_aux and the projection heads with the
/// (already updated, frozen) discriminator. The learning rate is `lr_at(iteration)`.
pub fn train_step_batch<T: Real>(
    state: &mut TrainState<T>,
    batch: &[(&ImageTensor<T>, &ImageTensor<T>)],
) -> Result<StepOutput<T>> {
    let passes = generator_passes(state, batch)?;
    let gan_d = update_discriminator(state, &passes)?;
    update_generators(state, passes, gan_d)
}

/// Steps (a)-(c): resolution pair, both G branches and the wavelet recomposition per pair.
pub fn generator_passes<T: Real>(
    state: &TrainState<T>,
    batch: &[(&ImageTensor<T>, &ImageTensor<T>)],
) -> Result<Vec<GenPass<T>>> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let cfg = &state.config;
    batch
        .iter()
        .map(|(fs, ffpe)| {
            let pair = make_resolution_pair(fs, cfg.tile_size_net)?;
            generator_pass(state, &pair, real_view(ffpe, cfg)?)
        })
        .collect()
}

/// Step (d): one discriminator update on real FFPE views and detached fakes. Touches only D and
/// its optimizer. Returns the batch-mean discriminator loss.
pub fn update_discriminator<T: Real>(state: &mut TrainState<T>, passes: &[GenPass<T>]) -> Result<f64> {
    let cfg = &state.config;
    let n = passes.len();
    let lr = lr_at(state.iteration, cfg)?;
    let mut dt = Tape::new();
    let dp = state.nets.d.params.bind(&mut dt, true);
    let mut d_terms = Vec::with_capacity(n);
    for gp in passes {
        let real = dt.constant(gp.real.clone());
        dt.set_label(real, "FFPE real");
        let score_real = state.nets.d.forward(&mut dt, &dp, real)?;
        let fake = dt.constant(gp.tape.value(gp.out10).clone());
        let score_fake = state.nets.d.forward(&mut dt, &dp, fake)?;
        let mut l = gan_d_loss_var(&mut dt, score_real, score_fake, cfg.gan_mode)?;
        if gp.out5_live {
            let fake5 = dt.constant(gp.tape.value(gp.out5).clone());
            let score5 = state.nets.d.forward(&mut dt, &dp, fake5)?;
            let l5 = gan_d_loss_var(&mut dt, score_real, score5, cfg.gan_mode)?;
            l = dt.weighted_sum(&[l, l5], &[0.5, 0.5])?;
        }
        d_terms.push(l);
    }
    let loss_d = dt.weighted_sum(&d_terms, &vec![1.0 / n as f64; n])?;
    let gan_d = dt.value(loss_d).item().as_f64();
    if !gan_d.is_finite() {
        return Err(non_finite(&dt, "gan_D"));
    }
    let grads = dt.backward(loss_d)?;
    let d_grads = gradients_of(&grads, &dp);
    drop(dt);
    state.opt_d.update(state.nets.d.params.tensors_mut(), &d_grads, T::lit(lr));
    check_params(&state.nets.d.params, "D", state.iteration + 1)?;
    Ok(gan_d)
}

/// Step (e): the composite generator objective with D frozen, updating G, G_aux and the heads;
/// advances the iteration counter.
pub fn update_generators<T: Real>(
    state: &mut TrainState<T>,
    passes: Vec<GenPass<T>>,
    gan_d: f64,
) -> Result<StepOutput<T>> {
    let cfg = state.config.clone();
    let t_index = state.iteration;
    let lr = lr_at(t_index, &cfg)?;
    let n = passes.len();
    let (mut g_acc, mut a_acc, mut h_acc) = (Vec::new(), Vec::new(), Vec::new());
    let mut sums = [0.0f64; 5];
    let mut last = None;
    for (b, mut gp) in passes.into_iter().enumerate() {
        let t = &mut gp.tape;
        let dpc = state.nets.d.params.bind(t, false);
        let score = state.nets.d.forward(t, &dpc, gp.out10)?;
        let mut gan = gan_g_loss_var(t, score, cfg.gan_mode)?;
        if gp.out5_live {
            let score5 = state.nets.d.forward(t, &dpc, gp.out5)?;
            let g5 = gan_g_loss_var(t, score5, cfg.gan_mode)?;
            gan = t.weighted_sum(&[gan, g5], &[0.5, 0.5])?;
        }
        t.set_label(gan, "gan_G");
        let out_taps = state.nets.g.encode(t, &gp.gp, gp.out10, &cfg.nce_layers)?;
        let mut rng = state.streams.stream(Component::PatchSample, t_index * n as u64 + b as u64);
        let locs = sample_patch_sets(&mut rng, t, &gp.src_taps, cfg.nce_patches)?;
        let nce = patchnce_loss_var(t, &state.nets.heads, &gp.hp, &gp.src_taps, &out_taps, &locs, cfg.nce_temperature)?;
        t.set_label(nce, "patchNCE");
        let crcm = crcm_loss_var(t, gp.out5, gp.out10, cfg.compare_size)?;
        t.set_label(crcm, "crcm");
        let wdgm = wdgm_loss_var(t, gp.out10, gp.tilde)?;
        t.set_label(wdgm, "wdgm");
        let total = generator_loss_var(t, [gan, nce, crcm, wdgm], &cfg.loss_weights)?;
        t.set_label(total, "total_G");
        let vals = [gan, nce, crcm, wdgm, total].map(|v| t.value(v).item().as_f64());
        for (name, v) in ["gan_G", "patchNCE", "crcm", "wdgm", "total_G"].iter().zip(vals) {
            if !v.is_finite() {
                return Err(non_finite(t, name));
            }
        }
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        let grads = t.backward(total)?;
        mean_grads(&mut g_acc, gradients_of(&grads, &gp.gp));
        mean_grads(&mut a_acc, gradients_of(&grads, &gp.ap));
        mean_grads(&mut h_acc, gradients_of(&grads, &gp.hp));
        if b + 1 == n {
            last = Some((
                t.value(gp.x10).clone(),
                t.value(gp.out10).clone(),
                t.value(gp.out5).clone(),
                t.value(gp.tilde).clone(),
            ));
        }
    }
    for g in [&mut g_acc, &mut a_acc, &mut h_acc] {
        scale_grads(g, n);
    }
    let lr_t = T::lit(lr);
    let pad = |g: Vec<Option<Tensor<T>>>, len: usize| if g.is_empty() { vec![None; len] } else { g };
    let g_acc = pad(g_acc, state.nets.g.params.len());
    let a_acc = pad(a_acc, state.nets.g_aux.params.len());
    let h_acc = pad(h_acc, state.nets.heads.params.len());
    state.opt_g.update(state.nets.g.params.tensors_mut(), &g_acc, lr_t);
    state.opt_g_aux.update(state.nets.g_aux.params.tensors_mut(), &a_acc, lr_t);
    state.opt_heads.update(state.nets.heads.params.tensors_mut(), &h_acc, lr_t);
    state.iteration += 1;
    check_params(&state.nets.g.params, "G", state.iteration)?;
    check_params(&state.nets.g_aux.params, "G_aux", state.iteration)?;
    check_params(&state.nets.heads.params, "heads", state.iteration)?;

    let mean = |v: f64| v / n as f64;
    let report = LossReport {
        iteration: state.iteration,
        gan_d,
        gan_g: mean(sums[0]),
        patch_nce: mean(sums[1]),
        crcm: mean(sums[2]),
        wdgm: mean(sums[3]),
        total_g: mean(sums[4]),
        lr,
    };
    let gap = report.total_identity_gap(&cfg.loss_weights);
    if gap > IDENTITY_TOLERANCE {
        return Err(Error::Numeric(format!(
            "total_G differs from the weighted sum of its parts by {gap:e} (relative)"
        )));
    }
    let (fs_10x, out_10x, out_5x, wdgm_out) = last.expect("non-empty batch");
    Ok(StepOutput { report, fs_10x, out_10x, out_5x, wdgm_out })
}

/// Source of unpaired training tiles.
pub trait TileSource<T: Real> {
    fn fs_len(&self) -> usize;
    fn ffpe_len(&self) -> usize;
    fn fs(&self, i: usize) -> Result<ImageTensor<T>>;
    fn ffpe(&self, i: usize) -> Result<ImageTensor<T>>;
}

/// Train-split tiles of a manifest, decoded on demand.
pub struct ManifestTiles {
    pub fs: Vec<PathBuf>,
    pub ffpe: Vec<PathBuf>,
}

impl ManifestTiles {
    pub fn train_split(m: &CorpusManifest) -> Result<Self> {
        let paths = |d| m.select(d, Split::Train).into_iter().map(|e| m.absolute(e)).collect::<Vec<_>>();
        let s = Self { fs: paths(Domain::Fs), ffpe: paths(Domain::Ffpe) };
        if s.fs.is_empty() || s.ffpe.is_empty() {
            return Err(Error::Integrity("the train split needs at least one FS and one FFPE tile".into()));
        }
        Ok(s)
    }
}

impl<T: Real> TileSource<T> for ManifestTiles {
    fn fs_len(&self) -> usize {
        self.fs.len()
    }
    fn ffpe_len(&self) -> usize {
        self.ffpe.len()
    }
    fn fs(&self, i: usize) -> Result<ImageTensor<T>> {
        Ok(ImageTensor::<f64>::load_png(&self.fs[i], Magnification::X10)?.cast())
    }
    fn ffpe(&self, i: usize) -> Result<ImageTensor<T>> {
        Ok(ImageTensor::<f64>::load_png(&self.ffpe[i], Magnification::X10)?.cast())
    }
}

/// Tiles already in memory.
pub struct MemoryTiles<T: Real> {
    pub fs: Vec<ImageTensor<T>>,
    pub ffpe: Vec<ImageTensor<T>>,
}

impl<T: Real> TileSource<T> for MemoryTiles<T> {
    fn fs_len(&self) -> usize {
        self.fs.len()
    }
    fn ffpe_len(&self) -> usize {
        self.ffpe.len()
    }
    fn fs(&self, i: usize) -> Result<ImageTensor<T>> {
        Ok(self.fs[i].clone())
    }
    fn ffpe(&self, i: usize) -> Result<ImageTensor<T>> {
        Ok(self.ffpe[i].clone())
    }
}

/// Indices of the `slot`-th FS and FFPE draws: FS walks seeded per-epoch permutations, FFPE is
/// drawn independently and uniformly. Pure in `(seed, slot)`.
pub fn draw_indices(streams: &RngStreams, slot: u64, n_fs: usize, n_ffpe: usize) -> (usize, usize) {
    let epoch = slot / n_fs as u64;
    let pos = (slot % n_fs as u64) as usize;
    let fs = epoch_order(streams.seed(), epoch, n_fs)[pos];
    let ffpe = streams.stream(Component::FfpeDraw, slot).gen_range(0..n_ffpe);
    (fs, ffpe)
}

/// Side-by-side `[FS input | G(10x) | wavelet recomposition | G(5x)]`.
pub fn sample_grid<T: Real>(o: &StepOutput<T>) -> RgbImage {
    let tiles = [&o.fs_10x, &o.out_10x, &o.wdgm_out, &o.out_5x].map(tensor_to_rgb8);
    let (w, h) = (tiles[0].width(), tiles[0].height());
    let mut grid = RgbImage::new(4 * w, h);
    for (k, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut grid, t, (k as u32 * w) as i64, 0);
    }
    grid
}

/// Output locations of a training run.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }
    pub fn latest(&self) -> PathBuf {
        self.root.join("latest.ckpt")
    }
    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{iteration:08}.ckpt"))
    }
    pub fn sample(&self, iteration: u64) -> PathBuf {
        self.root.join("samples").join(format!("step_{iteration:08}.png"))
    }
}

/// Opens `losses.csv` for appending; rows past `iteration` (from an abandoned run) are dropped.
fn open_loss_log(path: &Path, iteration: u64) -> Result<fs::File> {
    let mut keep = vec![CSV_HEADER.to_string()];
    if iteration > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            if LossReport::parse_csv_row(line)?.iteration <= iteration {
                keep.push(line.to_string());
            }
        }
    }
    let mut body = keep.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Runs until `state.iteration == until`, logging every step and writing checkpoints and sample
/// grids at the configured intervals plus a final checkpoint.
pub fn train_loop<T: Real>(
    state: &mut TrainState<T>,
    data: &dyn TileSource<T>,
    out: &RunDir,
    until: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    if until > state.config.total_iterations {
        return Err(Error::Range(format!(
            "cannot train to iteration {until}; the schedule ends at {}",
            state.config.total_iterations
        )));
    }
    if data.fs_len() == 0 || data.ffpe_len() == 0 {
        return Err(Error::Integrity("no training tiles".into()));
    }
    for dir in [out.root.clone(), out.root.join("checkpoints"), out.root.join("samples")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let log_path = out.losses();
    let mut log = open_loss_log(&log_path, state.iteration)?;
    let b = state.config.batch_size as u64;
    while state.iteration < until {
        let mut tiles = Vec::with_capacity(b as usize);
        for k in 0..b {
            let (i, j) = draw_indices(&state.streams, state.iteration * b + k, data.fs_len(), data.ffpe_len());
            tiles.push((data.fs(i)?, data.ffpe(j)?));
        }
        let refs: Vec<_> = tiles.iter().map(|(a, c)| (a, c)).collect();
        let step = train_step_batch(state, &refs)?;
        writeln!(log, "{}", step.report.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        on_step(&step.report);
        let it = state.iteration;
        if state.config.sample_every > 0 && it % state.config.sample_every == 0 {
            let p = out.sample(it);
            sample_grid(&step).save(&p).map_err(|e| Error::Image { path: p, source: e })?;
        }
        if (state.config.checkpoint_every > 0 && it % state.config.checkpoint_every == 0) || it == until {
            let c = state.to_checkpoint();
            c.save(&out.checkpoint(it))?;
            c.save(&out.latest())?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))
}
