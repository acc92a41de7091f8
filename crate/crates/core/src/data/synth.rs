use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fs2ffpe_autograd::Tensor;
use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::manifest::{write_split_file, CorpusManifest, Domain, ManifestEntry, Split, SOURCE_TILE};
use crate::error::{Error, Result};
use crate::geometry::resize_tensor;
use crate::rng::{seed_all, Component};

/// Clean renderings of the test-split FS tiles live under this directory.
pub const CLEAN_DIR: &str = "FS_clean";

const BG_LIGHT: [f64; 3] = [242.0, 240.0, 243.0];
const BG_TISSUE: [f64; 3] = [212.0, 205.0, 222.0];
const DAB: [f64; 3] = [135.0, 82.0, 38.0];
const HEMATOXYLIN: [f64; 3] = [75.0, 85.0, 150.0];
const BLOB_BLUE: [f64; 3] = [95.0, 110.0, 175.0];
const BLOB_BROWN: [f64; 3] = [160.0, 110.0, 60.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            _ => Err(Error::Format(format!("unknown label '{s}'"))),
        }
    }
}

/// Frozen-section artefacts applied on top of a clean rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FsDegradation {
    /// Mean number of contamination blobs per tile (Poisson).
    pub contamination_blob_rate: f64,
    /// Gaussian blur in pixels.
    pub blur_sigma: f64,
    /// Fraction by which nuclear stain fades toward the background, in `[0, 1]`.
    pub stain_attenuation: f64,
    /// Standard deviation (pixels) of blob centres around the tile centre.
    pub contamination_spread: f64,
}

impl FsDegradation {
    pub const NONE: FsDegradation = FsDegradation {
        contamination_blob_rate: 0.0,
        blur_sigma: 0.0,
        stain_attenuation: 0.0,
        contamination_spread: 0.0,
    };
}

impl Default for FsDegradation {
    fn default() -> Self {
        Self { contamination_blob_rate: 2.5, blur_sigma: 1.6, stain_attenuation: 0.5, contamination_spread: 80.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub tiles_per_patient: usize,
    /// Inclusive range.
    pub nuclei_per_tile: (usize, usize),
    pub positive_fraction: f64,
    pub fs: FsDegradation,
    /// FS and FFPE tiles of one split share patient ids when set.
    pub shared_patients: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_per_domain: 1000,
            test_per_domain: 200,
            tiles_per_patient: 20,
            nuclei_per_tile: (30, 70),
            positive_fraction: 0.5,
            fs: FsDegradation::default(),
            shared_patients: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let f = &self.fs;
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!("positive_fraction {} is outside [0, 1]", self.positive_fraction)));
        }
        if !(0.0..=1.0).contains(&f.stain_attenuation) {
            return Err(Error::Config(format!("stain_attenuation {} is outside [0, 1]", f.stain_attenuation)));
        }
        for (name, v) in [
            ("contamination_blob_rate", f.contamination_blob_rate),
            ("blur_sigma", f.blur_sigma),
            ("contamination_spread", f.contamination_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.tiles_per_patient == 0 || self.nuclei_per_tile.0 > self.nuclei_per_tile.1 {
            return Err(Error::Config("tiles_per_patient must be positive and nuclei range ordered".into()));
        }
        Ok(())
    }
}

/// RGB planes in `[0, 255]`, channel-major.
struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, i: usize, colour: [f64; 3], w: f64) {
        let n = self.size * self.size;
        for (c, &col) in colour.iter().enumerate() {
            let p = &mut self.px[c * n + i];
            *p += w * (col - *p);
        }
    }

    fn to_rgb8(&self) -> RgbImage {
        let n = self.size * self.size;
        RgbImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            let i = y as usize * self.size + x as usize;
            image::Rgb([0, 1, 2].map(|c| self.px[c * n + i].round().clamp(0.0, 255.0) as u8))
        })
    }
}

struct Nucleus {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    colour: [f64; 3],
}

/// Smooth random field in `[0, 1]` from a coarse grid, bilinearly upsampled.
fn low_frequency_field(rng: &mut impl Rng, size: usize, grid: usize) -> Vec<f64> {
    let coarse = Tensor::<f64>::from_fn(&[1, grid, grid], |_| rng.gen::<f64>());
    resize_tensor(&coarse, size, size).expect("valid sizes").into_data()
}

fn gaussian_blur(px: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let reflect = |i: isize| -> usize {
        let n = size as isize;
        let mut j = i;
        if j < 0 {
            j = -j;
        }
        if j >= n {
            j = 2 * (n - 1) - j;
        }
        j.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0.0; size * size];
    for plane in px.chunks_mut(size * size) {
        for y in 0..size {
            for x in 0..size {
                tmp[y * size + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * plane[y * size + reflect(x as isize + t as isize - r)])
                    .sum::<f64>()
                    / norm;
            }
        }
        for y in 0..size {
            for x in 0..size {
                plane[y * size + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * tmp[reflect(y as isize + t as isize - r) * size + x])
                    .sum::<f64>()
                    / norm;
            }
        }
    }
}

/// Renders one tile. Returns the clean (FFPE-quality) image and, when `fs` is given, its
/// frozen-section counterpart with the same content.
pub fn render_tile(
    rng: &mut impl Rng,
    label: Label,
    nuclei: (usize, usize),
    fs: Option<&FsDegradation>,
    size: usize,
) -> (RgbImage, Option<RgbImage>) {
    let n = size * size;
    let field = low_frequency_field(rng, size, 7);
    let grain = Normal::new(0.0, 3.0).expect("valid");
    let mut bg = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            bg[c * n + i] = BG_LIGHT[c] + field[i] * (BG_TISSUE[c] - BG_LIGHT[c]) + grain.sample(rng);
        }
    }
    let mut canvas = Canvas { size, px: bg.clone() };
    let mut mask = vec![0.0f64; n];

    let count = rng.gen_range(nuclei.0..=nuclei.1);
    let brown_share = match label {
        Label::Positive => rng.gen_range(0.85..=1.0),
        Label::Negative => 0.0,
    };
    let jitter = Normal::new(0.0, 10.0).expect("valid");
    let chromatin = Normal::new(0.0, 9.0).expect("valid");
    let nuclei: Vec<Nucleus> = (0..count)
        .map(|_| {
            let base = if rng.gen::<f64>() < brown_share { DAB } else { HEMATOXYLIN };
            let j = jitter.sample(rng);
            Nucleus {
                cx: rng.gen_range(0.0..size as f64),
                cy: rng.gen_range(0.0..size as f64),
                rx: rng.gen_range(6.0..13.0),
                ry: rng.gen_range(5.0..10.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                colour: base.map(|v| v + j),
            }
        })
        .collect();
    for nu in &nuclei {
        let (s, c) = nu.angle.sin_cos();
        let reach = nu.rx.max(nu.ry) + 1.0;
        let x0 = (nu.cx - reach).floor().max(0.0) as usize;
        let x1 = ((nu.cx + reach).ceil() as usize).min(size - 1);
        let y0 = (nu.cy - reach).floor().max(0.0) as usize;
        let y1 = ((nu.cy + reach).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - nu.cx, y as f64 + 0.5 - nu.cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                let d = ((u / nu.rx).powi(2) + (v / nu.ry).powi(2)).sqrt();
                // one-pixel anti-aliased rim
                let cover = ((1.0 - d) * nu.ry + 0.5).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let t = chromatin.sample(rng);
                    let i = y * size + x;
                    canvas.blend(i, nu.colour.map(|v| v + t), cover);
                    mask[i] = mask[i].max(cover);
                }
            }
        }
    }
    let clean = canvas.to_rgb8();
    let Some(fs) = fs else { return (clean, None) };

    let fade = fs.stain_attenuation * rng.gen_range(0.7..=1.0);
    for i in 0..n {
        let w = fade * mask[i];
        if w > 0.0 {
            canvas.blend(i, [bg[i], bg[n + i], bg[2 * n + i]], w);
        }
    }
    let blobs = if fs.contamination_blob_rate > 0.0 {
        Poisson::new(fs.contamination_blob_rate).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    let spread = Normal::new(0.0, fs.contamination_spread.max(1e-9)).expect("valid");
    let hue = match label {
        Label::Positive => BLOB_BLUE,
        Label::Negative => BLOB_BROWN,
    };
    for _ in 0..blobs {
        let cx = size as f64 / 2.0 + spread.sample(rng);
        let cy = size as f64 / 2.0 + spread.sample(rng);
        let r = rng.gen_range(30.0..75.0);
        let alpha = rng.gen_range(0.35..0.6);
        for y in 0..size {
            for x in 0..size {
                let d2 = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)) / (r * r);
                if d2 < 4.0 {
                    canvas.blend(y * size + x, hue, alpha * (-2.0 * d2).exp());
                }
            }
        }
    }
    gaussian_blur(&mut canvas.px, size, fs.blur_sigma);
    (clean, Some(canvas.to_rgb8()))
}

fn domain_code(d: Domain) -> u64 {
    match d {
        Domain::Fs => 1,
        Domain::Ffpe => 2,
    }
}

/// Writes `out/{FS,FFPE}/<patient>/tile_<i>.png`, clean FS test renderings under [`CLEAN_DIR`],
/// plus `manifest.csv`, `split.csv` and the `labels.csv` sidecar.
pub fn synthesize_corpus(spec: &SynthSpec, out: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let streams = seed_all(spec.seed);
    let mut entries = Vec::new();
    let mut labels: Vec<(PathBuf, Label)> = Vec::new();
    let mut splits = BTreeMap::new();
    for (split_code, (split, count)) in
        [(Split::Train, spec.train_per_domain), (Split::Test, spec.test_per_domain)].into_iter().enumerate()
    {
        let patient_offset =
            if split == Split::Train { 0 } else { spec.train_per_domain.div_ceil(spec.tiles_per_patient) };
        for domain in [Domain::Fs, Domain::Ffpe] {
            for i in 0..count {
                let index = (domain_code(domain) << 40) | ((split_code as u64) << 32) | i as u64;
                let mut rng = streams.stream(Component::Synthesis, index);
                let number = patient_offset + i / spec.tiles_per_patient;
                let pid = if spec.shared_patients { format!("P{number:04}") } else { format!("{domain}-P{number:04}") };
                splits.insert(pid.clone(), split);
                let label = if rng.gen::<f64>() < spec.positive_fraction { Label::Positive } else { Label::Negative };
                let fs = (domain == Domain::Fs).then_some(&spec.fs);
                let (clean, degraded) = render_tile(&mut rng, label, spec.nuclei_per_tile, fs, SOURCE_TILE);
                let name = format!("tile_{i:05}.png");
                let rel = PathBuf::from(domain.dir_name()).join(&pid).join(&name);
                let image = degraded.as_ref().unwrap_or(&clean);
                save(out, &rel, image)?;
                if domain == Domain::Fs && split == Split::Test {
                    let crel = PathBuf::from(CLEAN_DIR).join(&pid).join(&name);
                    save(out, &crel, &clean)?;
                    labels.push((crel, label));
                }
                labels.push((rel.clone(), label));
                entries.push(ManifestEntry { path: rel, domain, patient_id: pid, split });
            }
        }
    }
    write_split_file(&out.join("split.csv"), &splits)?;
    let lp = out.join("labels.csv");
    let csv_err = |e| Error::Csv { path: lp.clone(), source: e };
    let mut w = csv::Writer::from_path(&lp).map_err(csv_err)?;
    w.write_record(["path", "label"]).map_err(csv_err)?;
    for (p, l) in &labels {
        w.write_record([p.to_string_lossy().as_ref(), &l.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&lp, e))?;
    let manifest = CorpusManifest { root: out.to_path_buf(), entries, magnification_note: "10x".into() };
    manifest.check_patient_split()?;
    manifest.write_csv(&out.join("manifest.csv"))?;
    Ok(manifest)
}

fn save(root: &Path, rel: &Path, img: &RgbImage) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(&path).map_err(|e| Error::Image { path, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_labels, staining_status_of, StainCall};
    use crate::image::{ImageTensor, Magnification};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { train_per_domain: 3, test_per_domain: 2, tiles_per_patient: 2, seed, ..SynthSpec::default() }
    }

    #[test]
    fn corpus_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synthesize_corpus(&small(5), a.path()).unwrap();
        synthesize_corpus(&small(5), b.path()).unwrap();
        for e in &ma.entries {
            assert_eq!(std::fs::read(a.path().join(&e.path)).unwrap(), std::fs::read(b.path().join(&e.path)).unwrap());
        }
        assert_eq!(ma.entries.len(), 10);
        let labels = read_labels(&a.path().join("labels.csv")).unwrap();
        assert_eq!(labels.len(), 12);
    }

    #[test]
    fn zero_positive_fraction_has_no_positive_labels() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_corpus(&SynthSpec { positive_fraction: 0.0, ..small(1) }, dir.path()).unwrap();
        let labels = read_labels(&dir.path().join("labels.csv")).unwrap();
        assert!(labels.values().all(|&l| l == Label::Negative));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SynthSpec { positive_fraction: 1.5, ..small(0) }.validate().is_err());
        let fs = FsDegradation { blur_sigma: -1.0, ..FsDegradation::default() };
        assert!(SynthSpec { fs, ..small(0) }.validate().is_err());
    }

    #[test]
    fn clean_renderings_classify_by_label() {
        for (i, label) in [Label::Positive, Label::Negative, Label::Positive, Label::Negative].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let (clean, fs) = render_tile(&mut rng, label, (30, 70), Some(&FsDegradation::default()), 448);
            let t = ImageTensor::<f64>::from_rgb8(&clean, Magnification::X10, "t").unwrap();
            assert_eq!(staining_status_of(&t).label(), Some(label));
            assert_ne!(fs.unwrap(), clean);
        }
    }

    #[test]
    fn degradations_change_only_pixels_when_enabled() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (a, fs) = render_tile(&mut r1, Label::Positive, (20, 20), Some(&FsDegradation::NONE), 64);
        let (b, _) = render_tile(&mut r2, Label::Positive, (20, 20), None, 64);
        assert_eq!(a, b);
        assert_eq!(fs.unwrap(), a);
        assert_ne!(
            staining_status_of(&ImageTensor::<f64>::from_rgb8(&a, Magnification::X10, "").unwrap()),
            StainCall::Negative
        );
    }
}
