//! LESS attention, its transformer block, and the dense spatial-spectral
//! attention used as an oracle and benchmark baseline.
//!
//! Shapes: a token grid is `[N', C', D]` with `N' = N + 1` spatial and
//! `C' = C + 1` spectral entries (CLS at index 0 of each axis). Per-head
//! branch tensors are `[H, L, d]`.

mod block;
mod dense;
mod less;
mod pool;

pub use block::{less_block, LessBlockParams};
pub use dense::{full_ss_attention, DenseOutput, DenseParams, DEFAULT_TOKEN_CAP};
pub use less::{
    branch_attention, less_attention, BranchOutput, BranchParams, LessAttnParams, LessOutput,
    RankFactors, RankParams,
};
pub use pool::{atten_pool, PoolHead, PoolOutput, PoolParams};

use crate::error::{Error, Result};
use crate::rope::RopeConfig;

/// Structural hyper-parameters of one LESS attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LessConfig {
    pub dim: usize,
    pub heads: usize,
    /// Spatial per-head width.
    pub d1: usize,
    /// Spectral per-head width.
    pub d2: usize,
    pub rank: usize,
    /// Apply SSRoPE to branch queries and keys.
    pub use_rope: bool,
    pub rope: RopeConfig,
}

impl LessConfig {
    pub fn new(dim: usize, heads: usize, d1: usize, d2: usize, rank: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            d1,
            d2,
            rank,
            use_rope: true,
            rope: RopeConfig::new(d1, d2)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same layer without positional rotation (for oracle tests where the
    /// widths are not rotation-compatible).
    pub fn without_rope(dim: usize, heads: usize, d1: usize, d2: usize, rank: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            d1,
            d2,
            rank,
            use_rope: false,
            rope: RopeConfig {
                base_spatial: 10_000.0,
                base_spectral: 100.0,
                lambda_unit: 1e-3,
                d_s: d1,
                d_c: d2,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.rank == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::config("heads, rank and sub-dimensions must be positive"));
        }
        if self.d1 * self.d2 * self.heads != self.dim {
            return Err(Error::config(format!(
                "d1 * d2 * heads = {} * {} * {} != width {}",
                self.d1, self.d2, self.heads, self.dim
            )));
        }
        if self.use_rope {
            if self.rope.d_s != self.d1 || self.rope.d_c != self.d2 {
                return Err(Error::config("rope widths must equal the branch widths"));
            }
            self.rope.validate()?;
        }
        Ok(())
    }

    /// Per-head width of the pooling attention.
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Rejects grids whose axes are shorter than the rank.
    pub fn check_grid(&self, spatial: usize, spectral: usize) -> Result<()> {
        if self.rank > spatial.min(spectral) {
            return Err(Error::config(format!(
                "rank {} exceeds min({spatial}, {spectral})",
                self.rank
            )));
        }
        Ok(())
    }
}

fn lecun_std(fan_in: usize) -> f64 {
    (fan_in as f64).sqrt().recip()
}
