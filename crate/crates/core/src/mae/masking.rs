//! Hierarchical channel sampling and decoupled spatial/spectral masking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Bounds on the fraction of channels kept by one sampling draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HcsRange {
    pub r_l: f64,
    pub r_h: f64,
}

impl HcsRange {
    pub fn new(r_l: f64, r_h: f64) -> Result<Self> {
        if !(r_l > 0.0 && r_l <= r_h && r_h <= 1.0) {
            return Err(Error::config(format!("invalid channel ratio range [{r_l}, {r_h}]")));
        }
        Ok(Self { r_l, r_h })
    }

    /// Inclusive bounds on the number of sampled channels out of `c`.
    pub fn count_bounds(&self, c: usize) -> (usize, usize) {
        let k = |r: f64| ((r * c as f64).round() as usize).max(1);
        (k(self.r_l), k(self.r_h))
    }
}

/// Draws `rho ~ U[r_l, r_h]`, keeps `max(1, round(rho * c))` channels chosen
/// uniformly without replacement. Returned indices are sorted.
pub fn hcs_sample(c: usize, range: HcsRange, seed: u64) -> Result<Vec<usize>> {
    if c == 0 {
        return Err(Error::config("channel sampling needs at least one channel"));
    }
    let range = HcsRange::new(range.r_l, range.r_h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = if range.r_l == range.r_h {
        range.r_l
    } else {
        rng.random_range(range.r_l..=range.r_h)
    };
    let k = ((rho * c as f64).round() as usize).clamp(1, c);
    let mut picked = sample(&mut rng, c, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Visible/masked partition for one step. `hcs_channels` index the input
/// cube; the spectral sets are subsets of `hcs_channels`. The spatial sets
/// are shared by every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub spatial_visible: Vec<usize>,
    pub spatial_masked: Vec<usize>,
    pub spectral_visible: Vec<usize>,
    pub spectral_masked: Vec<usize>,
    pub hcs_channels: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Everything visible over `n` positions and the given channels.
    pub fn unmasked(n: usize, channels: Vec<usize>) -> Self {
        Self {
            spatial_visible: (0..n).collect(),
            spatial_masked: Vec::new(),
            spectral_visible: channels.clone(),
            spectral_masked: Vec::new(),
            hcs_channels: channels,
            seed: 0,
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial_visible.len() + self.spatial_masked.len()
    }

    /// Positions of the visible channels within `hcs_channels`.
    pub fn spectral_visible_local(&self) -> Vec<usize> {
        self.spectral_visible
            .iter()
            .map(|c| self.hcs_channels.binary_search(c).expect("visible channel is sampled"))
            .collect()
    }

    /// Whether token `(n, local channel position)` is outside the visible
    /// sub-grid.
    pub fn is_masked(&self, n: usize, local_c: usize) -> bool {
        let c = self.hcs_channels[local_c];
        self.spatial_visible.binary_search(&n).is_err()
            || self.spectral_visible.binary_search(&c).is_err()
    }

    pub fn visible_tokens(&self) -> usize {
        self.spatial_visible.len() * self.spectral_visible.len()
    }
}

fn partition(items: &[usize], ratio: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let masked_count = (ratio * items.len() as f64).floor() as usize;
    let mut hidden = vec![false; items.len()];
    for i in sample(rng, items.len(), masked_count) {
        hidden[i] = true;
    }
    let (mut visible, mut masked) = (Vec::new(), Vec::new());
    for (&item, h) in items.iter().zip(hidden) {
        if h { masked.push(item) } else { visible.push(item) }
    }
    (visible, masked)
}

/// Masks `floor(ratio * len)` entries on each axis, uniformly without
/// replacement. `channels` must be sorted (as returned by [`hcs_sample`]).
pub fn make_mask_plan(n: usize, channels: &[usize], ratios: (f64, f64), seed: u64) -> Result<MaskPlan> {
    for r in [ratios.0, ratios.1] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::config(format!("mask ratio {r} outside [0, 1)")));
        }
    }
    if n == 0 || channels.is_empty() {
        return Err(Error::DegenerateInput("mask plan over an empty axis".into()));
    }
    if channels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("channels must be strictly increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<usize> = (0..n).collect();
    let (spatial_visible, spatial_masked) = partition(&positions, ratios.0, &mut rng);
    let (spectral_visible, spectral_masked) = partition(channels, ratios.1, &mut rng);
    Ok(MaskPlan {
        spatial_visible,
        spatial_masked,
        spectral_visible,
        spectral_masked,
        hcs_channels: channels.to_vec(),
        seed,
    })
}

/// Independent sub-seed for stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}
