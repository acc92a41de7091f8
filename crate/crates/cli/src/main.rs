//! `fs2ffpe`: synth | train | infer | eval | wavelet | ablate.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data integrity error, 4 numeric
//! failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fs2ffpe_autograd::Real;
use fs2ffpe_core::ablation::run_ablation;
use fs2ffpe_core::checkpoint::Checkpoint;
use fs2ffpe_core::config::TrainConfig;
use fs2ffpe_core::data::{synthesize_corpus, CorpusManifest, FsDegradation, SynthSpec};
use fs2ffpe_core::error::{Error, Result};
use fs2ffpe_core::eval::{evaluate_sets, load_dir, Extractor};
use fs2ffpe_core::image::{ImageTensor, Magnification};
use fs2ffpe_core::inference::{infer_dir, write_report};
use fs2ffpe_core::trainer::{train_loop, ManifestTiles, RunDir, TrainState};
use fs2ffpe_core::wavelet::{band_to_rgb8, dwt2, idwt2, rgb8_to_band, BandQuantization, WaveletBands, BAND_NAMES};

#[derive(Parser)]
#[command(name = "fs2ffpe", version, about = "Frozen-section to FFPE stain transfer")]
struct Cli {
    /// Overrides the seed of the config or the synthetic corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bitwise-reproducible execution. Every code path is single-threaded and seeded, so this
    /// is always in effect; the flag is accepted for scripts that pass it explicitly.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Floating-point width for networks and checkpoints.
    #[arg(long, global = true, value_enum, default_value = "32")]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Desk,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural FS/FFPE corpus.
    Synth(SynthArgs),
    /// Train G, G_aux, D and the projection heads.
    Train(TrainArgs),
    /// Convert a directory of FS tiles with a checkpoint's main generator.
    Infer(InferArgs),
    /// FID and KID x100 between two tile directories.
    Eval(EvalArgs),
    /// Haar decomposition and recomposition of single PNGs.
    #[command(subcommand)]
    Wavelet(WaveletCommand),
    /// Baseline / +CRCM / +WDGM / full comparison with shared seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; keys it omits take full-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Used when no --config is given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train_per_domain: usize,
    #[arg(long, default_value_t = 200)]
    test_per_domain: usize,
    #[arg(long, default_value_t = 20)]
    tiles_per_patient: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long)]
    blob_rate: Option<f64>,
    #[arg(long)]
    blur: Option<f64>,
    #[arg(long)]
    attenuation: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// manifest.csv of the corpus.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; without --config its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed iterations instead of the end of the schedule.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Writes timing.json-style figures here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Centre-crop inputs to this side first.
    #[arg(long)]
    tile_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, default_value = "desk_cnn")]
    extractor: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    kid_subset: usize,
    #[arg(long, default_value_t = 100)]
    kid_subsets: usize,
}

#[derive(Subcommand)]
enum WaveletCommand {
    /// PNG in; LL/HL/LH/HH PNGs plus bands.txt (offset and scale per band) out.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Directory written by `decompose` in; one PNG out.
    Recompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Overrides total_iterations for every arm.
    #[arg(long)]
    iterations: Option<u64>,
}

fn resolve_config(a: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => match a.preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
            Preset::Tiny => TrainConfig::tiny(),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_options(cli: &Cli, options: &[(&str, String)]) {
    println!("# resolved settings");
    println!("precision = {}", if matches!(cli.precision, Precision::F32) { 32 } else { 64 });
    println!("deterministic = true");
    for (k, v) in options {
        println!("{k} = {v}");
    }
    println!();
}

fn print_config(cli: &Cli, cfg: &TrainConfig) {
    print_options(cli, &[]);
    println!("# training config");
    print!("{}", cfg.serialize());
    println!();
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let d = FsDegradation::default();
    let spec = SynthSpec {
        train_per_domain: a.train_per_domain,
        test_per_domain: a.test_per_domain,
        tiles_per_patient: a.tiles_per_patient,
        positive_fraction: a.positive_fraction,
        fs: FsDegradation {
            contamination_blob_rate: a.blob_rate.unwrap_or(d.contamination_blob_rate),
            blur_sigma: a.blur.unwrap_or(d.blur_sigma),
            stain_attenuation: a.attenuation.unwrap_or(d.stain_attenuation),
            contamination_spread: a.spread.unwrap_or(d.contamination_spread),
        },
        seed: cli.seed.unwrap_or(0),
        ..SynthSpec::default()
    };
    spec.validate()?;
    print_options(cli, &[("out", a.out.display().to_string()), ("spec", format!("{spec:?}"))]);
    let m = synthesize_corpus(&spec, &a.out)?;
    println!("wrote {} tiles; manifest at {}", m.entries.len(), a.out.join("manifest.csv").display());
    Ok(())
}

fn train<T: Real>(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let manifest = CorpusManifest::read_csv(&a.data)?;
    let mut state = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<T>::load(path)?;
            let mut cfg = match &a.cfg.config {
                Some(_) => resolve_config(&a.cfg, None)?,
                None => ckpt.config.clone(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            print_config(cli, &cfg);
            TrainState::from_checkpoint(ckpt, &cfg)?
        }
        None => {
            let cfg = resolve_config(&a.cfg, cli.seed)?;
            print_config(cli, &cfg);
            TrainState::new(cfg)?
        }
    };
    let data = ManifestTiles::train_split(&manifest)?;
    let until = a.until.unwrap_or(state.config.total_iterations);
    let every = (state.config.total_iterations / 100).max(1);
    let out = RunDir { root: a.out.clone() };
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    state.config.save(&a.out.join("config.toml"))?;
    train_loop(&mut state, &data, &out, until, |r| {
        if r.iteration % every == 0 || r.iteration == until {
            eprintln!(
                "step {:>7}  gan_D {:.4}  gan_G {:.4}  nce {:.4}  crcm {:.5}  wdgm {:.5}  total {:.4}  lr {:.2e}",
                r.iteration, r.gan_d, r.gan_g, r.patch_nce, r.crcm, r.wdgm, r.total_g, r.lr
            );
        }
    })?;
    println!("finished at iteration {}; latest checkpoint {}", state.iteration, out.latest().display());
    Ok(())
}

fn infer<T: Real>(cli: &Cli, a: &InferArgs) -> Result<()> {
    print_options(
        cli,
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("in", a.input.display().to_string()),
            ("out", a.out.display().to_string()),
            ("tile_size", a.tile_size.map_or("native".into(), |s| s.to_string())),
        ],
    );
    let report = infer_dir::<T>(&a.ckpt, &a.input, &a.out, a.tile_size)?;
    if let Some(p) = &a.report {
        write_report(&report, p)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let extractor = Extractor::parse(&a.extractor)?;
    print_options(
        cli,
        &[
            ("real", a.real.display().to_string()),
            ("fake", a.fake.display().to_string()),
            ("extractor", extractor.id()),
            ("kid_subset", a.kid_subset.to_string()),
            ("kid_subsets", a.kid_subsets.to_string()),
        ],
    );
    let real = load_dir(&a.real)?;
    let fake = load_dir(&a.fake)?;
    let m = evaluate_sets(&real, &fake, extractor, a.kid_subset, a.kid_subsets, cli.seed.unwrap_or(0))?;
    let json = serde_json::to_string_pretty(&m).expect("plain struct");
    if let Some(p) = &a.report {
        fs::write(p, &json).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    for w in &m.warnings {
        log::warn!("{w}");
    }
    println!("{json}");
    Ok(())
}

const SIDECAR: &str = "bands.txt";

fn decompose(input: &Path, out: &Path) -> Result<()> {
    let img = ImageTensor::<f64>::load_png(input, Magnification::X10)?;
    let bands = dwt2(&img)?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let mut side =
        format!("# band offset scale (value = offset + scale * pixel); source {}x{}\n", img.height(), img.width());
    for (name, b) in BAND_NAMES.iter().zip(bands.bands()) {
        let (png, q) = band_to_rgb8(b);
        let p = out.join(format!("{name}.png"));
        png.save(&p).map_err(|source| Error::Image { path: p, source })?;
        side += &format!("{name} {:?} {:?}\n", q.offset, q.scale);
    }
    let p = out.join(SIDECAR);
    fs::write(&p, side).map_err(|e| Error::Io { path: p, source: e })
}

fn recompose(input: &Path, out: &Path) -> Result<()> {
    let p = input.join(SIDECAR);
    let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    let mut tensors = Vec::new();
    for name in BAND_NAMES {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .ok_or_else(|| Error::Format(format!("{} has no {name} line", p.display())))?;
        let nums: Vec<f64> = line
            .split_whitespace()
            .skip(1)
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad number '{v}' in {}", p.display()))))
            .collect::<Result<_>>()?;
        let [offset, scale] = nums[..] else {
            return Err(Error::Format(format!("{name} line in {} needs offset and scale", p.display())));
        };
        let bp = input.join(format!("{name}.png"));
        let png = image::open(&bp).map_err(|source| Error::Image { path: bp, source })?.to_rgb8();
        tensors.push(rgb8_to_band::<f64>(&png, BandQuantization { offset, scale })?);
    }
    let [h, w] = [tensors[0].shape()[1] * 2, tensors[0].shape()[2] * 2];
    let stacked = fs2ffpe_autograd::Tensor::concat_channels(&tensors.iter().collect::<Vec<_>>())?;
    let img = idwt2(&WaveletBands::from_stacked(&stacked, (h, w))?)?;
    img.save_png(out)
}

fn wavelet(cli: &Cli, c: &WaveletCommand) -> Result<()> {
    let (input, out) = match c {
        WaveletCommand::Decompose { input, out } | WaveletCommand::Recompose { input, out } => (input, out),
    };
    print_options(cli, &[("in", input.display().to_string()), ("out", out.display().to_string())]);
    match c {
        WaveletCommand::Decompose { .. } => decompose(input, out),
        WaveletCommand::Recompose { .. } => recompose(input, out),
    }
}

/// `Ok(false)` when some sub-run failed; the partial report is still written.
fn ablate<T: Real>(cli: &Cli, a: &AblateArgs) -> Result<bool> {
    let mut cfg = resolve_config(&a.cfg, None)?;
    if let Some(n) = a.iterations {
        cfg.total_iterations = n;
        cfg.validate()?;
    }
    print_options(cli, &[("seeds", format!("{:?}", a.seeds)), ("out", a.out.display().to_string())]);
    print_config(cli, &cfg);
    let manifest = CorpusManifest::read_csv(&a.data)?;
    let every = (cfg.total_iterations / 10).max(1);
    let report = run_ablation::<T>(&cfg, &manifest, &a.out, &a.seeds, |arm, seed, r| {
        if r.iteration % every == 0 {
            eprintln!("[{arm} seed {seed}] step {} total_G {:.4}", r.iteration, r.total_g);
        }
    })?;
    print!("{}", report.table());
    let o = report.ordering();
    println!(
        "ordering: stain(full) >= stain(+WDGM): {}; stain(full) >= stain(baseline): {}; FID(full) < FID(baseline): {}",
        o.preservation_full_ge_wdgm, o.preservation_full_ge_baseline, o.fid_full_lt_baseline
    );
    Ok(!report.any_failed())
}

fn dispatch<T: Real>(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a)?,
        Command::Train(a) => train::<T>(cli, a)?,
        Command::Infer(a) => infer::<T>(cli, a)?,
        Command::Eval(a) => eval(cli, a)?,
        Command::Wavelet(c) => wavelet(cli, c)?,
        Command::Ablate(a) => return ablate::<T>(cli, a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.precision {
        Precision::F32 => dispatch::<f32>(&cli),
        Precision::F64 => dispatch::<f64>(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more ablation runs failed; see the report for markers");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
