//! Training configuration, its on-disk key/value form, and the learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-term weights of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gan: f64,
    pub nce: f64,
    pub crcm: f64,
    pub wdgm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gan: 1.0, nce: 1.0, crcm: 1.0, wdgm: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.gan, self.nce, self.crcm, self.wdgm]
    }
}

/// Adversarial objective family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    /// Least-squares targets (1 real, 0 fake).
    Lsgan,
    /// Binary cross-entropy on logits.
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub total_iterations: u64,
    pub decay_start_fraction: f64,
    pub batch_size: usize,
    pub tile_size_source: usize,
    pub tile_size_net: usize,
    pub compare_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,

    pub gen_base_width: usize,
    pub gen_resblocks: usize,
    pub gen_downsample: usize,
    pub aux_base_width: usize,
    pub disc_base_width: usize,
    pub disc_layers: usize,
    pub head_dim: usize,
    pub nce_layers: Vec<usize>,
    pub nce_patches: usize,
    pub nce_temperature: f64,
    pub gan_mode: GanMode,
    /// Also show the 5x-branch output to the discriminator.
    pub disc_on_5x: bool,
    /// Start generators at the identity map instead of random weights.
    pub identity_init: bool,
    pub init_std: f64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
}

impl Default for TrainConfig {
    /// Full-scale settings (400k iterations, width-64 nine-block generator).
    fn default() -> Self {
        Self {
            lr_initial: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            total_iterations: 400_000,
            decay_start_fraction: 0.5,
            batch_size: 1,
            tile_size_source: 448,
            tile_size_net: 224,
            compare_size: 112,
            loss_weights: LossWeights::default(),
            seed: 0,
            gen_base_width: 64,
            gen_resblocks: 9,
            gen_downsample: 2,
            aux_base_width: 32,
            disc_base_width: 64,
            disc_layers: 3,
            head_dim: 256,
            nce_layers: vec![0, 1, 2, 3, 4],
            nce_patches: 256,
            nce_temperature: 0.07,
            gan_mode: GanMode::Lsgan,
            disc_on_5x: false,
            identity_init: false,
            init_std: 0.02,
            checkpoint_every: 5000,
            sample_every: 5000,
        }
    }
}

impl TrainConfig {
    /// Small networks for single-machine CPU runs; tile geometry is unchanged.
    pub fn desk() -> Self {
        Self {
            total_iterations: 5000,
            gen_base_width: 16,
            gen_resblocks: 2,
            aux_base_width: 8,
            disc_base_width: 16,
            checkpoint_every: 500,
            sample_every: 500,
            ..Self::default()
        }
    }

    /// 64 px sources and width-4 networks; seconds per hundred steps. For smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            total_iterations: 20,
            tile_size_source: 64,
            tile_size_net: 32,
            compare_size: 16,
            gen_base_width: 4,
            gen_resblocks: 1,
            aux_base_width: 4,
            disc_base_width: 4,
            disc_layers: 2,
            head_dim: 8,
            nce_layers: vec![0, 2, 3],
            nce_patches: 16,
            checkpoint_every: 5,
            sample_every: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0,1), got {v}"));
            }
        }
        if self.total_iterations == 0 {
            return bad("total_iterations must be positive".into());
        }
        if !(self.decay_start_fraction > 0.0 && self.decay_start_fraction < 1.0) {
            return bad(format!("decay_start_fraction must lie in (0,1), got {}", self.decay_start_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.tile_size_source != 2 * self.tile_size_net || self.tile_size_net != 2 * self.compare_size {
            return bad(format!(
                "tile sizes must satisfy source = 2 x net = 4 x compare, got {}/{}/{}",
                self.tile_size_source, self.tile_size_net, self.compare_size
            ));
        }
        if self.tile_size_net % 2 != 0 || self.tile_size_net < crate::image::MIN_SIDE {
            return bad(format!("tile_size_net must be even and >= 8, got {}", self.tile_size_net));
        }
        for (k, v) in self.loss_weights_named() {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("loss_weights.{k} must be finite and non-negative, got {v}"));
            }
        }
        for (k, v) in [
            ("gen_base_width", self.gen_base_width),
            ("aux_base_width", self.aux_base_width),
            ("disc_base_width", self.disc_base_width),
            ("disc_layers", self.disc_layers),
            ("head_dim", self.head_dim),
            ("nce_patches", self.nce_patches),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.nce_temperature.is_nan() || self.nce_temperature <= 0.0 {
            return bad("nce_temperature must be positive".into());
        }
        if self.nce_layers.is_empty() {
            return bad("nce_layers must not be empty".into());
        }
        let max_tap = 1 + self.gen_downsample + self.gen_resblocks;
        if let Some(&l) = self.nce_layers.iter().find(|&&l| l > max_tap) {
            return bad(format!("nce_layers entry {l} exceeds the deepest encoder tap {max_tap}"));
        }
        if self.checkpoint_every == 0 || self.sample_every == 0 {
            return bad("checkpoint_every and sample_every must be positive".into());
        }
        Ok(())
    }

    fn loss_weights_named(&self) -> [(&'static str, f64); 4] {
        let w = &self.loss_weights;
        [("gan", w.gan), ("nce", w.nce), ("crcm", w.crcm), ("wdgm", w.wdgm)]
    }

    /// Parses the key/value document. Unknown keys are rejected; missing keys take full-scale
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `key = value` line per field, in declaration order.
    pub fn serialize(&self) -> String {
        let table = toml::Table::try_from(self).expect("config is always representable");
        let mut out = String::new();
        // toml::Table is ordered by key; emit in field order instead.
        for key in FIELD_ORDER {
            let value = &table[*key];
            writeln!(out, "{key} = {value}").expect("write to string");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    /// Stable digest of the serialized form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.serialize().as_bytes()))
    }

    /// Iteration at which linear decay begins.
    pub fn decay_start(&self) -> f64 {
        self.decay_start_fraction * self.total_iterations as f64
    }
}

const FIELD_ORDER: &[&str] = &[
    "lr_initial",
    "adam_beta1",
    "adam_beta2",
    "total_iterations",
    "decay_start_fraction",
    "batch_size",
    "tile_size_source",
    "tile_size_net",
    "compare_size",
    "loss_weights",
    "seed",
    "gen_base_width",
    "gen_resblocks",
    "gen_downsample",
    "aux_base_width",
    "disc_base_width",
    "disc_layers",
    "head_dim",
    "nce_layers",
    "nce_patches",
    "nce_temperature",
    "gan_mode",
    "disc_on_5x",
    "identity_init",
    "init_std",
    "checkpoint_every",
    "sample_every",
];

/// Learning rate for `iteration`: constant, then linear decay reaching exactly 0 at
/// `total_iterations`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_iterations;
    if iteration > total {
        return Err(Error::Range(format!("iteration {iteration} outside [0, {total}]")));
    }
    let start = cfg.decay_start();
    let t = iteration as f64;
    if t < start {
        return Ok(cfg.lr_initial);
    }
    Ok(cfg.lr_initial * (total as f64 - t) / (total as f64 - start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_reference_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0001);
        assert_eq!(lr_at(200_000, &cfg).unwrap(), 0.0001);
        assert!((lr_at(300_000, &cfg).unwrap() - 0.00005).abs() < 1e-18);
        assert_eq!(lr_at(400_000, &cfg).unwrap(), 0.0);
        assert!(matches!(lr_at(400_001, &cfg), Err(Error::Range(_))));
    }

    #[test]
    fn schedule_is_monotone_non_increasing() {
        let cfg = TrainConfig { total_iterations: 97, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=97).map(|i| lr_at(i, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn serialized_form_is_flat_and_roundtrips() {
        let mut cfg = TrainConfig::desk();
        cfg.loss_weights.crcm = 0.0;
        cfg.nce_temperature = 0.1 + 0.2;
        let text = cfg.serialize();
        assert!(text.lines().all(|l| l.contains(" = ")), "{text}");
        assert!(text.contains("loss_weights = {"), "{text}");
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = TrainConfig::parse("lr_initial = 0.001\nlearning_rate = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("learning_rate")), "{err}");
    }

    #[test]
    fn inconsistent_tile_geometry_is_rejected() {
        let err = TrainConfig::parse("tile_size_net = 256\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
