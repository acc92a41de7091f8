//! Directory-level FS -> FFPE conversion with the main generator only, plus latency figures.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fs2ffpe_autograd::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SEGMENT_G};
use crate::error::{Error, Result};
use crate::geometry::centercrop;
use crate::image::{ImageTensor, Magnification};
use crate::models::{transfer, Generator, GeneratorSpec};

/// Extensions picked up from an input directory.
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

/// Per-image wall-clock figures in seconds. The first image is the warmup and is excluded from
/// `mean_s` / `p95_s` (unless it is the only one).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n_images: usize,
    pub mean_s: f64,
    pub p95_s: f64,
    pub warmup_s: f64,
    pub with_io_mean_s: f64,
    pub n_skipped: usize,
}

impl TimingReport {
    fn from_samples(compute: &[f64], with_io: &[f64], n_skipped: usize) -> Self {
        let Some((&warmup, rest)) = compute.split_first() else {
            return Self { n_skipped, ..Self::default() };
        };
        let timed = if rest.is_empty() { &compute[..1] } else { rest };
        let io_timed = if with_io.len() > 1 { &with_io[1..] } else { with_io };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut sorted = timed.to_vec();
        sorted.sort_by(f64::total_cmp);
        // nearest rank
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Self {
            n_images: compute.len(),
            mean_s: mean(timed),
            p95_s: sorted[rank - 1],
            warmup_s: warmup,
            with_io_mean_s: mean(io_timed),
            n_skipped,
        }
    }
}

/// Main generator of a checkpoint. Any other segment (or its absence) is ignored.
pub fn load_generator<T: Real>(ckpt: &Path) -> Result<Generator<T>> {
    let c = Checkpoint::<T>::load(ckpt)?;
    let seg = c.require(SEGMENT_G)?;
    let mut g = Generator::new(GeneratorSpec::main(&c.config), c.config.init_std, &mut ChaCha8Rng::seed_from_u64(0))?;
    g.params.load(&seg.names, seg.params.clone())?;
    Ok(g)
}

/// `G(img)` with the checkpoint's main generator.
pub fn infer_single<T: Real>(ckpt: &Path, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    transfer(&load_generator::<T>(ckpt)?, img)
}

/// Sorted image files directly inside `dir`.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn load_tile<T: Real>(path: &Path, tile_size: Option<usize>) -> Result<ImageTensor<T>> {
    let img = ImageTensor::<f64>::load_png(path, Magnification::X10)?;
    let img = match tile_size {
        Some(s) if img.height() != s || img.width() != s => centercrop(&img, s)?,
        _ => img,
    };
    Ok(img.cast())
}

/// Converts every image in `in_dir` into `out_dir/<stem>.png`, optionally centre-cropped to
/// `tile_size` first. Unreadable or malformed tiles are skipped with a warning; it is an error
/// only when the directory had images and none converted. Model loading is not timed.
pub fn infer_dir<T: Real>(
    ckpt: &Path,
    in_dir: &Path,
    out_dir: &Path,
    tile_size: Option<usize>,
) -> Result<TimingReport> {
    let g = load_generator::<T>(ckpt)?;
    let files = image_files(in_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (mut compute, mut with_io) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for path in &files {
        let t_io = Instant::now();
        let img = match load_tile::<T>(path, tile_size) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let t0 = Instant::now();
        let out = transfer(&g, &img)?;
        let dt = t0.elapsed().as_secs_f64();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.save_png(&out_dir.join(format!("{stem}.png")))?;
        compute.push(dt);
        with_io.push(t_io.elapsed().as_secs_f64());
    }
    if !files.is_empty() && compute.is_empty() {
        return Err(Error::Integrity(format!(
            "none of the {} images in {} could be converted",
            files.len(),
            in_dir.display()
        )));
    }
    Ok(TimingReport::from_samples(&compute, &with_io, skipped))
}

/// Writes the report as pretty JSON.
pub fn write_report(report: &TimingReport, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::prune_to_generator;
    use crate::config::TrainConfig;
    use crate::trainer::TrainState;

    fn ckpt(dir: &Path, identity: bool) -> PathBuf {
        let cfg = TrainConfig { identity_init: identity, ..TrainConfig::tiny() };
        let p = dir.join("model.ckpt");
        TrainState::<f32>::new(cfg).unwrap().to_checkpoint().save(&p).unwrap();
        p
    }

    fn write_tile(path: &Path, seed: u8) {
        image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 7) as u8 ^ seed, (y * 5) as u8, seed]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn report_excludes_warmup() {
        let r = TimingReport::from_samples(&[5.0, 1.0, 2.0, 3.0], &[6.0, 2.0, 3.0, 4.0], 0);
        assert_eq!((r.n_images, r.warmup_s, r.mean_s, r.p95_s, r.with_io_mean_s), (4, 5.0, 2.0, 3.0, 3.0));
        let one = TimingReport::from_samples(&[0.5], &[0.7], 1);
        assert_eq!((one.mean_s, one.p95_s, one.with_io_mean_s, one.n_skipped), (0.5, 0.5, 0.7, 1));
    }

    #[test]
    fn empty_directory_is_an_empty_report() {
        let d = tempfile::tempdir().unwrap();
        let c = ckpt(d.path(), false);
        fs::create_dir(d.path().join("in")).unwrap();
        let r = infer_dir::<f32>(&c, &d.path().join("in"), &d.path().join("out"), None).unwrap();
        assert_eq!(r, TimingReport::default());
    }

    #[test]
    fn copies_of_one_tile_give_identical_outputs() {
        let d = tempfile::tempdir().unwrap();
        let c = ckpt(d.path(), false);
        let inp = d.path().join("in");
        fs::create_dir(&inp).unwrap();
        for i in 0..10 {
            write_tile(&inp.join(format!("t{i}.png")), 40);
        }
        let r = infer_dir::<f32>(&c, &inp, &d.path().join("out"), None).unwrap();
        assert_eq!(r.n_images, 10);
        let first = fs::read(d.path().join("out/t0.png")).unwrap();
        for i in 1..10 {
            assert_eq!(fs::read(d.path().join(format!("out/t{i}.png"))).unwrap(), first);
        }
    }

    #[test]
    fn unreadable_tiles_are_skipped_and_all_bad_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        let c = ckpt(d.path(), false);
        let inp = d.path().join("in");
        fs::create_dir(&inp).unwrap();
        fs::write(inp.join("broken.png"), b"not a png").unwrap();
        assert!(matches!(infer_dir::<f32>(&c, &inp, &d.path().join("out"), None), Err(Error::Integrity(_))));
        write_tile(&inp.join("good.png"), 3);
        let r = infer_dir::<f32>(&c, &inp, &d.path().join("out"), None).unwrap();
        assert_eq!((r.n_images, r.n_skipped), (1, 1));
    }

    #[test]
    fn identity_checkpoint_returns_the_input() {
        let d = tempfile::tempdir().unwrap();
        let c = ckpt(d.path(), true);
        let p = d.path().join("x.png");
        write_tile(&p, 90);
        let img = ImageTensor::<f32>::load_png(&p, Magnification::X10).unwrap();
        let out = infer_single(&c, &img).unwrap();
        let mae = img.tensor().data().iter().zip(out.tensor().data()).map(|(a, b)| (a - b).abs()).sum::<f32>()
            / img.tensor().data().len() as f32;
        assert!(mae < 1e-3, "{mae}");
        assert!(out.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pruned_checkpoint_converts_identically() {
        let d = tempfile::tempdir().unwrap();
        let c = ckpt(d.path(), false);
        let pruned = d.path().join("g_only.ckpt");
        prune_to_generator(&c, &pruned).unwrap();
        let inp = d.path().join("in");
        fs::create_dir(&inp).unwrap();
        write_tile(&inp.join("a.png"), 17);
        write_tile(&inp.join("b.png"), 200);
        infer_dir::<f32>(&c, &inp, &d.path().join("full"), None).unwrap();
        infer_dir::<f32>(&pruned, &inp, &d.path().join("pruned"), None).unwrap();
        for f in ["a.png", "b.png"] {
            assert_eq!(
                fs::read(d.path().join("full").join(f)).unwrap(),
                fs::read(d.path().join("pruned").join(f)).unwrap()
            );
        }
    }
}
