use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;

use crate::data::{staining_status_of, Label};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{seed_all, Component};

/// Eigenvalues below zero (round-off on PSD matrices) are clamped to this floor.
const EIG_FLOOR: f64 = 0.0;

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
    pub extractor_id: String,
}

impl FeatureSetStats {
    /// Sample mean and unbiased covariance, accumulated in input order.
    pub fn from_features(feats: &[Vec<f64>], extractor_id: &str) -> Result<Self> {
        let n = feats.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = feats[0].len();
        if feats.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, n, extractor_id: extractor_id.to_string() })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let s = e.eigenvalues.map(|l| l.max(EIG_FLOOR).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// Frechet distance `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// `Tr((S_a S_b)^(1/2))` is evaluated as `Tr((A S_b A)^(1/2))` with `A = S_a^(1/2)`, a symmetric
/// PSD matrix with the same spectrum.
pub fn fid(a: &FeatureSetStats, b: &FeatureSetStats) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::Config(format!(
            "feature sets come from different extractors ({} vs {})",
            a.extractor_id, b.extractor_id
        )));
    }
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let sa = psd_sqrt(&a.cov)?;
    let mut m = &sa * &b.cov * &sa;
    m = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|l| l.max(EIG_FLOOR).sqrt()).sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// `(x . y / d + 1)^3`.
pub fn polynomial_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

fn gram(rows_a: &DMatrix<f64>, rows_b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = rows_a.ncols() as f64;
    (rows_a * rows_b.transpose()).map(|v| (v / d + 1.0).powi(3))
}

/// Unbiased MMD^2 between the row sets `x` and `y` (equal sizes).
fn mmd2_unbiased(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let m = x.nrows() as f64;
    let (kxx, kyy, kxy) = (gram(x, x), gram(y, y), gram(x, y));
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    off_diag(&kxx) / (m * (m - 1.0)) + off_diag(&kyy) / (m * (m - 1.0)) - 2.0 * kxy.sum() / (m * m)
}

/// 100 x mean unbiased MMD^2 over `n_subsets` random subsets of `subset_size` per side, drawn
/// without replacement.
pub fn kid_x100(a: &[Vec<f64>], b: &[Vec<f64>], subset_size: usize, n_subsets: usize, seed: u64) -> Result<f64> {
    if subset_size < 2 || a.len() < subset_size || b.len() < subset_size || n_subsets == 0 {
        return Err(Error::Config(format!(
            "KID needs at least {subset_size} (>= 2) samples per side and one subset; got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let streams = seed_all(seed);
    let mut total = 0.0;
    for s in 0..n_subsets {
        let mut rng = streams.stream(Component::KidSubsets, s as u64);
        let ia = sample(&mut rng, a.len(), subset_size);
        let ib = sample(&mut rng, b.len(), subset_size);
        let x = DMatrix::from_fn(subset_size, d, |i, j| a[ia.index(i)][j]);
        let y = DMatrix::from_fn(subset_size, d, |i, j| b[ib.index(i)][j]);
        total += mmd2_unbiased(&x, &y);
    }
    Ok(100.0 * total / n_subsets as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preservation {
    /// Correct calls over scored (non-indeterminate) outputs; 0 when nothing could be scored.
    pub accuracy: f64,
    pub n_scored: usize,
    pub n_excluded: usize,
}

/// Fraction of outputs whose staining call matches the ground-truth label.
pub fn staining_preservation(outputs: &[ImageTensor<f64>], labels: &[Label]) -> Result<Preservation> {
    if outputs.is_empty() {
        return Err(Error::Config("staining preservation of an empty set is undefined".into()));
    }
    if outputs.len() != labels.len() {
        return Err(Error::Config(format!("{} outputs but {} labels", outputs.len(), labels.len())));
    }
    let (mut correct, mut scored) = (0usize, 0usize);
    for (o, &l) in outputs.iter().zip(labels) {
        if let Some(call) = staining_status_of(o).label() {
            scored += 1;
            correct += usize::from(call == l);
        }
    }
    Ok(Preservation {
        accuracy: if scored == 0 { 0.0 } else { correct as f64 / scored as f64 },
        n_scored: scored,
        n_excluded: outputs.len() - scored,
    })
}
