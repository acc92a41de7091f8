//! Four-arm loss ablation: baseline, +CRCM, +WDGM and full, trained with shared seeds and
//! scored on the contaminated FS test split.

use std::fs;
use std::path::{Path, PathBuf};

use fs2ffpe_autograd::Real;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{LossWeights, TrainConfig};
use crate::data::{read_labels, CorpusManifest, Domain, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sets, staining_preservation, Extractor};
use crate::geometry::centercrop;
use crate::image::{ImageTensor, Magnification};
use crate::models::transfer;
use crate::report::LossReport;
use crate::trainer::{train_loop, ManifestTiles, RunDir, TrainState};

pub const ARM_NAMES: [&str; 4] = ["baseline", "+CRCM", "+WDGM", "full"];

/// KID protocol used for every arm.
pub const KID_SUBSET: usize = 100;
pub const KID_SUBSETS: usize = 100;

/// Loss weights of each arm, derived from the configured full weights.
pub fn arm_weights(full: &LossWeights) -> [LossWeights; 4] {
    let base = LossWeights { crcm: 0.0, wdgm: 0.0, ..*full };
    [base, LossWeights { wdgm: 0.0, ..*full }, LossWeights { crcm: 0.0, ..*full }, *full]
}

fn arm_dir(name: &str) -> &'static str {
    match name {
        "baseline" => "baseline",
        "+CRCM" => "crcm",
        "+WDGM" => "wdgm",
        _ => "full",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    /// `[gan, nce, crcm, wdgm]` as trained.
    pub weights: [f64; 4],
    pub iterations: u64,
    pub fid: Option<f64>,
    pub kid_x100: Option<f64>,
    pub staining_preservation: Option<f64>,
    pub n_scored: usize,
    pub n_excluded: usize,
    /// Failure message of this sub-run, if any.
    pub error: Option<String>,
}

/// Per-arm medians over seeds (failed runs excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub weights: [f64; 4],
    pub n_runs: usize,
    pub fid: Option<f64>,
    pub kid_x100: Option<f64>,
    pub staining_preservation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub extractor_id: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// The three ordering requirements between arm medians.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ordering {
    pub preservation_full_ge_wdgm: bool,
    pub preservation_full_ge_baseline: bool,
    pub fid_full_lt_baseline: bool,
}

impl Ordering {
    pub fn holds(&self) -> bool {
        self.preservation_full_ge_wdgm && self.preservation_full_ge_baseline && self.fid_full_lt_baseline
    }
}

impl AblationReport {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }

    /// Missing medians count as a violated requirement.
    pub fn ordering(&self) -> Ordering {
        let get = |arm: &str, f: fn(&ArmSummary) -> Option<f64>| self.arm(arm).and_then(f);
        let pres = |a| get(a, |s| s.staining_preservation);
        let fid = |a| get(a, |s| s.fid);
        let ge = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a >= b);
        Ordering {
            preservation_full_ge_wdgm: ge(pres("full"), pres("+WDGM")),
            preservation_full_ge_baseline: ge(pres("full"), pres("baseline")),
            fid_full_lt_baseline: matches!((fid("full"), fid("baseline")), (Some(f), Some(b)) if f < b),
        }
    }

    /// Four-row table: arm, weights, median FID, KID x100 and staining preservation.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>, p: usize| v.map_or("FAILED".to_string(), |x| format!("{x:.p$}"));
        let mut s = format!(
            "{:<9} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>4}\n",
            "arm", "w_gan", "w_nce", "w_crcm", "w_wdgm", "FID", "KIDx100", "stain_acc", "runs"
        );
        for a in &self.summary {
            let w = a.weights;
            s += &format!(
                "{:<9} {:>5} {:>5} {:>6} {:>6} {:>9} {:>9} {:>9} {:>4}\n",
                a.arm,
                w[0],
                w[1],
                w[2],
                w[3],
                cell(a.fid, 3),
                cell(a.kid_x100, 3),
                cell(a.staining_preservation, 4),
                a.n_runs
            );
        }
        s
    }

    fn summarise(&mut self) {
        self.summary = ARM_NAMES
            .iter()
            .filter_map(|&arm| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.arm == arm).collect();
                let ok: Vec<&&AblationRow> = rows.iter().filter(|r| r.error.is_none()).collect();
                let first = rows.first()?;
                Some(ArmSummary {
                    arm: arm.to_string(),
                    weights: first.weights,
                    n_runs: ok.len(),
                    fid: median(ok.iter().filter_map(|r| r.fid)),
                    kid_x100: median(ok.iter().filter_map(|r| r.kid_x100)),
                    staining_preservation: median(ok.iter().filter_map(|r| r.staining_preservation)),
                })
            })
            .collect();
    }
}

/// Contaminated FS test tiles with labels, and FFPE test tiles, both centre-cropped to the
/// network size.
pub struct EvalSet {
    pub fs: Vec<ImageTensor<f64>>,
    pub labels: Vec<crate::data::Label>,
    pub ffpe: Vec<ImageTensor<f64>>,
}

impl EvalSet {
    pub fn from_manifest(m: &CorpusManifest, net_size: usize) -> Result<Self> {
        let labels_path = m.root.join("labels.csv");
        let all_labels = read_labels(&labels_path)?;
        let load = |e: &crate::data::ManifestEntry| -> Result<ImageTensor<f64>> {
            centercrop(&ImageTensor::load_png(&m.absolute(e), Magnification::X10)?, net_size)
        };
        let (mut fs, mut labels) = (Vec::new(), Vec::new());
        for e in m.select(Domain::Fs, Split::Test) {
            let l = all_labels.get(&e.path).ok_or_else(|| {
                Error::Integrity(format!("no label for {} in {}", e.path.display(), labels_path.display()))
            })?;
            fs.push(load(e)?);
            labels.push(*l);
        }
        let ffpe = m.select(Domain::Ffpe, Split::Test).into_iter().map(load).collect::<Result<Vec<_>>>()?;
        if fs.is_empty() || ffpe.len() < 2 {
            return Err(Error::Integrity("the test split needs FS tiles and at least two FFPE tiles".into()));
        }
        Ok(Self { fs, labels, ffpe })
    }
}

/// Scores one trained state on the evaluation set.
pub fn score_state<T: Real>(
    state: &TrainState<T>,
    set: &EvalSet,
    seed: u64,
) -> Result<(f64, f64, crate::eval::Preservation)> {
    let outputs = set
        .fs
        .iter()
        .map(|x| Ok(transfer(&state.nets.g, &x.cast::<T>())?.cast::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    let m = evaluate_sets(&set.ffpe, &outputs, Extractor::DeskCnn, KID_SUBSET, KID_SUBSETS, seed)?;
    Ok((m.fid, m.kid_x100, staining_preservation(&outputs, &set.labels)?))
}

/// Trains (or resumes) one arm/seed run under `dir` and returns its final state.
fn train_arm<T: Real>(
    cfg: TrainConfig,
    data: &ManifestTiles,
    dir: &Path,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<TrainState<T>> {
    let out = RunDir { root: dir.to_path_buf() };
    let mut state = if out.latest().exists() {
        TrainState::from_checkpoint(Checkpoint::<T>::load(&out.latest())?, &cfg)?
    } else {
        TrainState::new(cfg.clone())?
    };
    let until = cfg.total_iterations;
    if state.iteration < until {
        train_loop(&mut state, data, &out, until, |r| progress(r))?;
    }
    Ok(state)
}

/// Runs every arm for every seed with `base` as the template (its weights are the full arm's).
/// Existing finished runs under `out` are reused. Sub-run failures become marked rows.
pub fn run_ablation<T: Real>(
    base: &TrainConfig,
    manifest: &CorpusManifest,
    out: &Path,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &LossReport),
) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = ManifestTiles::train_split(manifest)?;
    let set = EvalSet::from_manifest(manifest, base.tile_size_net)?;
    let mut report = AblationReport { extractor_id: Extractor::DeskCnn.id(), rows: Vec::new(), summary: Vec::new() };
    for &seed in seeds {
        for (arm, w) in ARM_NAMES.iter().zip(arm_weights(&base.loss_weights)) {
            let cfg = TrainConfig { seed, loss_weights: w, ..base.clone() };
            let dir: PathBuf = out.join(arm_dir(arm)).join(format!("seed_{seed}"));
            let mut row = AblationRow {
                arm: arm.to_string(),
                seed,
                weights: w.as_array(),
                iterations: cfg.total_iterations,
                fid: None,
                kid_x100: None,
                staining_preservation: None,
                n_scored: 0,
                n_excluded: 0,
                error: None,
            };
            let result = train_arm::<T>(cfg, &data, &dir, &mut |r| progress(arm, seed, r))
                .and_then(|state| score_state(&state, &set, seed));
            match result {
                Ok((fid, kid, p)) => {
                    row.fid = Some(fid);
                    row.kid_x100 = Some(kid);
                    row.staining_preservation = Some(p.accuracy);
                    row.n_scored = p.n_scored;
                    row.n_excluded = p.n_excluded;
                }
                Err(e) => {
                    log::error!("ablation arm {arm} seed {seed} failed: {e}");
                    row.error = Some(e.to_string());
                }
            }
            report.rows.push(row);
            report.summarise();
            write_report(&report, out)?;
        }
    }
    Ok(report)
}

/// `ablation.json` (all rows and medians) and `ablation.txt` (the four-row table).
pub fn write_report(report: &AblationReport, out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    let p = out.join("ablation.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = out.join("ablation.txt");
    fs::write(&p, report.table()).map_err(|e| Error::io(&p, e))
}
