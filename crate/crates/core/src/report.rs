use std::io::Write;

use crate::config::LossWeights;
use crate::error::{Error, Result};

/// Scalar losses of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub gan_d: f64,
    pub gan_g: f64,
    pub patch_nce: f64,
    pub crcm: f64,
    pub wdgm: f64,
    pub total_g: f64,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "iteration,gan_D,gan_G,patchNCE,crcm,wdgm,total_G,lr";

/// Parts of the generator objective; `None` marks a component that was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub gan_g: Option<f64>,
    pub patch_nce: Option<f64>,
    pub crcm: Option<f64>,
    pub wdgm: Option<f64>,
}

/// `w_gan * gan + w_nce * nce + w_crcm * crcm + w_wdgm * wdgm`.
pub fn generator_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    let get = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::Config(format!("generator loss component '{name}' missing")))
    };
    Ok(weights.gan * get(parts.gan_g, "gan_G")?
        + weights.nce * get(parts.patch_nce, "patchNCE")?
        + weights.crcm * get(parts.crcm, "crcm")?
        + weights.wdgm * get(parts.wdgm, "wdgm")?)
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            gan_g: Some(self.gan_g),
            patch_nce: Some(self.patch_nce),
            crcm: Some(self.crcm),
            wdgm: Some(self.wdgm),
        }
    }

    /// Relative gap between `total_g` and the weighted sum of its parts.
    pub fn total_identity_gap(&self, weights: &LossWeights) -> f64 {
        let sum = generator_loss(&self.parts(), weights).expect("all parts present");
        (self.total_g - sum).abs() / sum.abs().max(f64::MIN_POSITIVE)
    }

    pub fn all_finite(&self) -> bool {
        [self.gan_d, self.gan_g, self.patch_nce, self.crcm, self.wdgm, self.total_g, self.lr]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, self.gan_d, self.gan_g, self.patch_nce, self.crcm, self.wdgm, self.total_g, self.lr
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("loss row needs 8 fields: {line}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Format(format!("bad number '{}' in loss row", f[i])))
        };
        Ok(Self {
            iteration: f[0].parse().map_err(|_| Error::Format(format!("bad iteration '{}'", f[0])))?,
            gan_d: num(1)?,
            gan_g: num(2)?,
            patch_nce: num(3)?,
            crcm: num(4)?,
            wdgm: num(5)?,
            total_g: num(6)?,
            lr: num(7)?,
        })
    }

    pub fn write_csv_header(w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_weights_sum_components() {
        let w = LossWeights::default();
        let ones = LossParts { gan_g: Some(1.0), patch_nce: Some(1.0), crcm: Some(1.0), wdgm: Some(1.0) };
        assert_eq!(generator_loss(&ones, &w).unwrap(), 4.0);
        let p = LossParts { gan_g: Some(0.5), patch_nce: Some(0.2), crcm: Some(0.1), wdgm: Some(0.3) };
        assert!((generator_loss(&p, &w).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn baseline_weights_drop_the_auxiliary_terms() {
        let w = LossWeights { gan: 1.0, nce: 1.0, crcm: 0.0, wdgm: 0.0 };
        let p = LossParts { gan_g: Some(0.5), patch_nce: Some(0.2), crcm: Some(9.0), wdgm: Some(7.0) };
        assert!((generator_loss(&p, &w).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn missing_component_is_a_config_error() {
        let p = LossParts { gan_g: Some(1.0), ..Default::default() };
        assert!(matches!(generator_loss(&p, &LossWeights::default()), Err(Error::Config(_))));
    }

    #[test]
    fn csv_row_roundtrips_exactly() {
        let r = LossReport {
            iteration: 12,
            gan_d: 0.1 + 0.2,
            gan_g: 1.0 / 3.0,
            patch_nce: 5.5,
            crcm: 1e-9,
            wdgm: 0.0,
            total_g: 7.25,
            lr: 1e-4,
        };
        assert_eq!(LossReport::parse_csv_row(&r.csv_row()).unwrap(), r);
    }
}
