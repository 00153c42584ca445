//! Spatial-spectral rotary position embedding.
//!
//! Spatial branch features are split in two halves rotated by the patch row
//! `u` and column `v`; spectral branch features are rotated by the physical
//! wavelength. Row 0 of every table is the CLS token and carries angle zero.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub base_spatial: f64,
    pub base_spectral: f64,
    /// Multiplier from nanometres to the phase unit (micrometres by default).
    pub lambda_unit: f64,
    /// Spatial branch per-head width.
    pub d_s: usize,
    /// Spectral branch per-head width.
    pub d_c: usize,
}

impl RopeConfig {
    pub fn new(d_s: usize, d_c: usize) -> Result<Self> {
        let cfg = Self {
            base_spatial: 10_000.0,
            base_spectral: 100.0,
            lambda_unit: 1e-3,
            d_s,
            d_c,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.d_s % 4 != 0 {
            return Err(Error::config(format!("spatial width {} must be a positive multiple of 4", self.d_s)));
        }
        if self.d_c == 0 || self.d_c % 2 != 0 {
            return Err(Error::config(format!("spectral width {} must be a positive even number", self.d_c)));
        }
        if !(self.base_spatial > 1.0 && self.base_spectral > 1.0) {
            return Err(Error::config("rope bases must exceed 1"));
        }
        if !(self.lambda_unit.is_finite() && self.lambda_unit > 0.0) {
            return Err(Error::config("lambda_unit must be positive"));
        }
        Ok(())
    }

    /// Angles for `[CLS] + coords`, shape `[N+1, d_s/2]`.
    pub fn spatial_table(&self, coords: &[(f64, f64)]) -> PhaseTable {
        let quarter = self.d_s / 4;
        let half = self.d_s / 2;
        let mut angles = vec![0.0; (coords.len() + 1) * half];
        for (t, &(u, v)) in coords.iter().enumerate() {
            let row = &mut angles[(t + 1) * half..(t + 2) * half];
            for i in 0..quarter {
                let inv = self.base_spatial.powf(-2.0 * i as f64 / half as f64);
                row[i] = u * inv;
                row[quarter + i] = v * inv;
            }
        }
        PhaseTable { angles, pairs: half }
    }

    /// Angles for `[CLS] + wavelengths` (nm), shape `[C+1, d_c/2]`.
    pub fn spectral_table(&self, wavelengths: &[f64]) -> PhaseTable {
        let half = self.d_c / 2;
        let mut angles = vec![0.0; (wavelengths.len() + 1) * half];
        for (t, &nm) in wavelengths.iter().enumerate() {
            let lambda = nm * self.lambda_unit;
            for i in 0..half {
                angles[(t + 1) * half + i] =
                    lambda * self.base_spectral.powf(-2.0 * i as f64 / self.d_c as f64);
            }
        }
        PhaseTable { angles, pairs: half }
    }
}

/// Per-token rotation angles, row-major `[tokens, pairs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTable {
    angles: Vec<f64>,
    pairs: usize,
}

impl PhaseTable {
    pub fn new(angles: Vec<f64>, pairs: usize) -> Result<Self> {
        if pairs == 0 || angles.is_empty() || angles.len() % pairs != 0 {
            return Err(Error::dim(format!("{} angles do not form rows of {pairs}", angles.len())));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite rotation angle".into()));
        }
        Ok(Self { angles, pairs })
    }

    pub fn tokens(&self) -> usize {
        self.angles.len() / self.pairs
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn angle(&self, token: usize, pair: usize) -> f64 {
        self.angles[token * self.pairs + pair]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.angles[token * self.pairs..(token + 1) * self.pairs]
    }

    /// `cos` and `sin` tables for the graph rope op.
    pub fn trig<T: Scalar>(&self) -> (Arc<Tensor<T>>, Arc<Tensor<T>>) {
        let shape = vec![self.tokens(), self.pairs];
        let cos = self.angles.iter().map(|a| T::from_f64(a.cos())).collect();
        let sin = self.angles.iter().map(|a| T::from_f64(a.sin())).collect();
        (
            Arc::new(Tensor::new(shape.clone(), cos).expect("table shape")),
            Arc::new(Tensor::new(shape, sin).expect("table shape")),
        )
    }
}

/// Rotates consecutive feature pairs of each row by the table row with the
/// same index (modulo the table length, so leading batch axes broadcast).
pub fn rotate_pairs<T: Scalar>(x: &Tensor<T>, table: &PhaseTable) -> Result<Tensor<T>> {
    rotate(x, table, false)
}

/// Inverse of [`rotate_pairs`].
pub fn unrotate_pairs<T: Scalar>(x: &Tensor<T>, table: &PhaseTable) -> Result<Tensor<T>> {
    rotate(x, table, true)
}

fn rotate<T: Scalar>(x: &Tensor<T>, table: &PhaseTable, inverse: bool) -> Result<Tensor<T>> {
    let w = x.width();
    if w != 2 * table.pairs() || x.rows() % table.tokens() != 0 {
        return Err(Error::dim(format!(
            "rotation table [{}, {}] does not fit {:?}",
            table.tokens(),
            table.pairs(),
            x.shape()
        )));
    }
    let (cos, sin) = table.trig::<T>();
    Tensor::new(x.shape().to_vec(), ops::rotate_rows(x.data(), w, &cos, &sin, inverse))
}

/// Rotates `[N+1, d_s]` spatial queries/keys; row 0 (CLS) is untouched.
pub fn apply_spatial<T: Scalar>(qk: &Tensor<T>, coords: &[(f64, f64)], cfg: &RopeConfig) -> Result<Tensor<T>> {
    if qk.width() != cfg.d_s {
        return Err(Error::dim(format!("spatial width {} != configured {}", qk.width(), cfg.d_s)));
    }
    rotate_pairs(qk, &cfg.spatial_table(coords))
}

/// Rotates `[C+1, d_c]` spectral queries/keys; row 0 (CLS) is untouched.
pub fn apply_spectral<T: Scalar>(qk: &Tensor<T>, wavelengths: &[f64], cfg: &RopeConfig) -> Result<Tensor<T>> {
    if qk.width() != cfg.d_c {
        return Err(Error::dim(format!("spectral width {} != configured {}", qk.width(), cfg.d_c)));
    }
    rotate_pairs(qk, &cfg.spectral_table(wavelengths))
}
