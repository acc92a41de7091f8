//! Distribution metrics between image sets and the staining-preservation score.

mod features;
mod metrics;

pub use features::{extract_features, Extractor, DESK_CNN_DIM, REFERENCE_WEIGHTS_ENV};
pub use metrics::{fid, kid_x100, polynomial_kernel, staining_preservation, FeatureSetStats, Preservation};

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Magnification};

/// Contents of `metrics.json`.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MetricsReport {
    pub fid: f64,
    pub kid_x100: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor_id: String,
    pub warnings: Vec<String>,
}

/// Sorted PNG files directly inside `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<ImageTensor<f64>>> {
    png_files(dir)?.iter().map(|p| ImageTensor::load_png(p, Magnification::X10)).collect()
}

/// FID and KID x100 between two image sets.
pub fn evaluate_sets(
    real: &[ImageTensor<f64>],
    fake: &[ImageTensor<f64>],
    extractor: Extractor,
    kid_subset: usize,
    kid_subsets: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let fr = extract_features(real, extractor)?;
    let ff = extract_features(fake, extractor)?;
    let id = extractor.id();
    let mut warnings = Vec::new();
    if extractor == Extractor::DeskCnn {
        warnings.push(
            "desk_cnn features: values are only comparable within this artifact, not with published FID/KID".into(),
        );
    }
    let subset = kid_subset.min(fr.len()).min(ff.len());
    if subset < kid_subset {
        warnings.push(format!("KID subset size reduced from {kid_subset} to {subset} (too few images)"));
    }
    let a = FeatureSetStats::from_features(&fr, &id)?;
    let b = FeatureSetStats::from_features(&ff, &id)?;
    Ok(MetricsReport {
        fid: fid(&a, &b)?,
        kid_x100: kid_x100(&fr, &ff, subset, kid_subsets, seed)?,
        n_real: real.len(),
        n_fake: fake.len(),
        extractor_id: id,
        warnings,
    })
}
