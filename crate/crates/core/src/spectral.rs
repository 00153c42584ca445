//! Wavelength grids, sensor-style channel configurations and synthetic
//! hyperspectral cubes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boundary between the VNIR and SWIR regions, in nanometers.
pub const VNIR_SWIR_SPLIT_NM: f64 = 1000.0;

pub const REFERENCE_VNIR: usize = 100;
pub const REFERENCE_SWIR: usize = 102;

#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthGrid {
    wavelengths: Vec<f64>,
    vnir_count: usize,
    swir_count: usize,
}

impl WavelengthGrid {
    /// Builds a grid from strictly increasing wavelengths (nm).
    pub fn new(wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("wavelengths must be strictly increasing"));
        }
        let vnir_count = wavelengths
            .iter()
            .filter(|&&l| l < VNIR_SWIR_SPLIT_NM)
            .count();
        let swir_count = wavelengths.len() - vnir_count;
        Ok(Self {
            wavelengths,
            vnir_count,
            swir_count,
        })
    }

    /// Synthetic EnMAP-like grid: 100 VNIR bands over 420–995 nm and 102 SWIR
    /// bands over 1005–2445 nm, each linearly spaced.
    pub fn reference() -> Self {
        let mut wavelengths = linspace(420.0, 995.0, REFERENCE_VNIR);
        wavelengths.extend(linspace(1005.0, 2445.0, REFERENCE_SWIR));
        Self::new(wavelengths).expect("reference grid is increasing")
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    pub fn vnir_count(&self) -> usize {
        self.vnir_count
    }

    pub fn swir_count(&self) -> usize {
        self.swir_count
    }
}

pub fn make_reference_grid() -> WavelengthGrid {
    WavelengthGrid::reference()
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}

/// `k` evenly spaced picks out of `0..m`: index `j` maps to
/// `round(j * (m - 1) / (k - 1))`.
pub fn evenly_spaced(k: usize, m: usize) -> Result<Vec<usize>> {
    if k > m {
        return Err(Error::config(format!("cannot pick {k} of {m}")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    Ok((0..k)
        .map(|j| ((j * (m - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigKind {
    /// 80 VNIR + 40 SWIR bands.
    VnirPlus,
    /// 40 VNIR + 80 SWIR bands.
    SwirPlus,
    /// Complement of [`ConfigKind::VnirPlus`] in the full grid.
    Disjoint,
    Full,
    Custom,
}

impl ConfigKind {
    pub const NAMED: [ConfigKind; 4] = [
        ConfigKind::VnirPlus,
        ConfigKind::SwirPlus,
        ConfigKind::Disjoint,
        ConfigKind::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfigKind::VnirPlus => "C120_VNIR+",
            ConfigKind::SwirPlus => "C120_SWIR+",
            ConfigKind::Disjoint => "C82_disjoint",
            ConfigKind::Full => "C202_full",
            ConfigKind::Custom => "custom",
        }
    }

    /// Channel count on the reference grid, if fixed.
    pub fn cardinality(self) -> Option<usize> {
        match self {
            ConfigKind::VnirPlus | ConfigKind::SwirPlus => Some(120),
            ConfigKind::Disjoint => Some(82),
            ConfigKind::Full => Some(202),
            ConfigKind::Custom => None,
        }
    }
}

impl fmt::Display for ConfigKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfigKind {
    type Err = Error;

    /// Accepts both the canonical names and the short CLI spellings.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C120_VNIR+" | "vnir-plus" => Ok(ConfigKind::VnirPlus),
            "C120_SWIR+" | "swir-plus" => Ok(ConfigKind::SwirPlus),
            "C82_disjoint" | "disjoint" => Ok(ConfigKind::Disjoint),
            "C202_full" | "full" => Ok(ConfigKind::Full),
            "custom" => Ok(ConfigKind::Custom),
            other => Err(Error::config(format!("unknown channel configuration {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub kind: ConfigKind,
    pub indices: Vec<usize>,
    pub wavelengths: Vec<f64>,
}

impl ChannelConfig {
    /// A custom configuration from strictly increasing grid indices.
    pub fn custom(grid: &WavelengthGrid, indices: Vec<usize>) -> Result<Self> {
        Self::from_indices(grid, ConfigKind::Custom, indices)
    }

    fn from_indices(grid: &WavelengthGrid, kind: ConfigKind, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("channel indices must be strictly increasing"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid.len()) {
            return Err(Error::config(format!(
                "channel index {bad} outside grid of {}",
                grid.len()
            )));
        }
        let wavelengths = indices.iter().map(|&i| grid.wavelengths[i]).collect();
        Ok(Self {
            kind,
            indices,
            wavelengths,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(vnir, swir)` channel counts relative to `grid`.
    pub fn region_counts(&self, grid: &WavelengthGrid) -> (usize, usize) {
        let vnir = self.indices.iter().filter(|&&i| i < grid.vnir_count).count();
        (vnir, self.len() - vnir)
    }

    /// Line-oriented text form: `name,count` then one `index,wavelength_nm`
    /// row per channel. Wavelengths use the shortest round-trip float format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{},{}\n", self.kind.name(), self.len());
        for (i, l) in self.indices.iter().zip(&self.wavelengths) {
            out.push_str(&format!("{i},{l:?}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty configuration file".into()))?;
        let (name, count) = split_pair(header)?;
        let kind: ConfigKind = name.parse()?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::Parse(format!("bad channel count {count:?}")))?;
        let mut indices = Vec::with_capacity(count);
        let mut wavelengths = Vec::with_capacity(count);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (i, l) = split_pair(line)?;
            indices.push(
                i.parse()
                    .map_err(|_| Error::Parse(format!("bad index {i:?}")))?,
            );
            wavelengths.push(
                l.parse()
                    .map_err(|_| Error::Parse(format!("bad wavelength {l:?}")))?,
            );
        }
        if indices.len() != count {
            return Err(Error::Parse(format!(
                "header declares {count} channels, found {}",
                indices.len()
            )));
        }
        if indices.windows(2).any(|w: &[usize]| w[1] <= w[0]) {
            return Err(Error::Parse("channel indices must be strictly increasing".into()));
        }
        Ok(Self {
            kind,
            indices,
            wavelengths,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn split_pair(line: &str) -> Result<(&str, &str)> {
    line.trim()
        .split_once(',')
        .ok_or_else(|| Error::Parse(format!("expected two comma-separated fields in {line:?}")))
}

/// Named channel subsets, selected by evenly spaced indices within each
/// spectral region.
pub fn make_config(grid: &WavelengthGrid, kind: ConfigKind) -> Result<ChannelConfig> {
    let region = |vnir: usize, swir: usize| -> Result<Vec<usize>> {
        let mut idx = evenly_spaced(vnir, grid.vnir_count)?;
        idx.extend(
            evenly_spaced(swir, grid.swir_count)?
                .into_iter()
                .map(|i| i + grid.vnir_count),
        );
        Ok(idx)
    };
    match kind {
        ConfigKind::VnirPlus => ChannelConfig::from_indices(grid, kind, region(80, 40)?),
        ConfigKind::SwirPlus => ChannelConfig::from_indices(grid, kind, region(40, 80)?),
        ConfigKind::Disjoint => {
            let base = make_config(grid, ConfigKind::VnirPlus)?;
            let mut c = complement_config(grid, &base)?;
            c.kind = ConfigKind::Disjoint;
            Ok(c)
        }
        ConfigKind::Full => ChannelConfig::from_indices(grid, kind, (0..grid.len()).collect()),
        ConfigKind::Custom => Err(Error::config(
            "custom configurations are built from explicit indices",
        )),
    }
}

/// All grid channels not in `base`, in increasing order.
pub fn complement_config(grid: &WavelengthGrid, base: &ChannelConfig) -> Result<ChannelConfig> {
    let mut taken = vec![false; grid.len()];
    for &i in &base.indices {
        *taken.get_mut(i).ok_or_else(|| {
            Error::config(format!("channel index {i} outside grid of {}", grid.len()))
        })? = true;
    }
    let indices = (0..grid.len()).filter(|&i| !taken[i]).collect();
    ChannelConfig::from_indices(grid, ConfigKind::Custom, indices)
}

/// A synthetic hyperspectral image, `values` shaped `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub values: Tensor<f64>,
    pub wavelengths: Vec<f64>,
    pub seed: u64,
}

impl HyperCube {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Channel planes at `indices`, in the given order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<HyperCube> {
        let plane = self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &c in indices {
            if c >= self.channels() {
                return Err(Error::dim(format!(
                    "channel {c} outside cube of {}",
                    self.channels()
                )));
            }
            data.extend_from_slice(&self.values.data()[c * plane..(c + 1) * plane]);
        }
        Ok(HyperCube {
            values: Tensor::new(vec![indices.len(), self.height(), self.width()], data)?,
            wavelengths: indices.iter().map(|&c| self.wavelengths[c]).collect(),
            seed: self.seed,
        })
    }
}

const BLOBS: usize = 4;
const NOISE_STD: f64 = 0.05;

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    center_nm: f64,
    width_nm: f64,
    amplitude: f64,
}

/// Deterministic cube: a sum of smooth spatial blobs, each carrying a Gaussian
/// spectral signature, plus per-pixel noise; every channel is normalized to
/// zero mean and unit variance.
///
/// Noise for a channel is drawn from a stream keyed by its wavelength, so a
/// cube generated for a channel subset equals the matching slice of the
/// full-grid cube.
pub fn synth_cube(wavelengths: &[f64], height: usize, width: usize, seed: u64) -> Result<HyperCube> {
    if wavelengths.is_empty() || height == 0 || width == 0 {
        return Err(Error::dim("cube needs at least one channel and pixel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = height.max(width) as f64;
    let blobs: Vec<Blob> = (0..BLOBS)
        .map(|_| Blob {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            sigma: rng.random_range(0.15..0.4) * extent,
            center_nm: rng.random_range(400.0..2500.0),
            width_nm: rng.random_range(150.0..500.0),
            amplitude: rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        })
        .collect();

    let spatial: Vec<Vec<f64>> = blobs
        .iter()
        .map(|b| {
            let mut plane = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                    plane.push((-d2 / (2.0 * b.sigma * b.sigma)).exp());
                }
            }
            plane
        })
        .collect();

    let plane_len = height * width;
    let mut data = Vec::with_capacity(wavelengths.len() * plane_len);
    for &lambda in wavelengths {
        let weights: Vec<f64> = blobs
            .iter()
            .map(|b| b.amplitude * (-(lambda - b.center_nm).powi(2) / (2.0 * b.width_nm.powi(2))).exp())
            .collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(lambda.to_bits());
        let mut plane: Vec<f64> = (0..plane_len)
            .map(|p| {
                let signal: f64 = weights.iter().zip(&spatial).map(|(w, s)| w * s[p]).sum();
                let eps: f64 = StandardNormal.sample(&mut noise_rng);
                signal + NOISE_STD * eps
            })
            .collect();
        let mean = plane.iter().sum::<f64>() / plane_len as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane_len as f64;
        let inv = 1.0 / var.sqrt().max(1e-12);
        for v in &mut plane {
            *v = (*v - mean) * inv;
        }
        data.extend(plane);
    }
    Ok(HyperCube {
        values: Tensor::new(vec![wavelengths.len(), height, width], data)?,
        wavelengths: wavelengths.to_vec(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grid_layout() {
        let g = make_reference_grid();
        assert_eq!(g.len(), 202);
        assert_eq!((g.vnir_count(), g.swir_count()), (100, 102));
        assert_eq!(g.wavelengths()[0], 420.0);
        assert_eq!(*g.wavelengths().last().unwrap(), 2445.0);
        assert!(g.wavelengths().windows(2).all(|w| w[1] - w[0] > 0.0));
    }

    #[test]
    fn named_configs() {
        let g = make_reference_grid();
        let vnir = make_config(&g, ConfigKind::VnirPlus).unwrap();
        assert_eq!(vnir.len(), 120);
        assert_eq!(vnir.region_counts(&g), (80, 40));
        let swir = make_config(&g, ConfigKind::SwirPlus).unwrap();
        assert_eq!(swir.region_counts(&g), (40, 80));
        let full = make_config(&g, ConfigKind::Full).unwrap();
        assert_eq!(full.indices, (0..202).collect::<Vec<_>>());
        let disjoint = make_config(&g, ConfigKind::Disjoint).unwrap();
        assert_eq!(disjoint.len(), 82);
        assert_eq!(disjoint.region_counts(&g), (20, 62));
        assert!(make_config(&g, ConfigKind::Custom).is_err());
        assert!("bogus".parse::<ConfigKind>().is_err());
    }

    #[test]
    fn complement_identities() {
        let g = make_reference_grid();
        let full = make_config(&g, ConfigKind::Full).unwrap();
        assert!(complement_config(&g, &full).unwrap().is_empty());

        let base = make_config(&g, ConfigKind::SwirPlus).unwrap();
        let comp = complement_config(&g, &base).unwrap();
        let mut union: Vec<usize> = base.indices.iter().chain(&comp.indices).copied().collect();
        union.sort_unstable();
        assert_eq!(union, full.indices);
        assert!(base.indices.iter().all(|i| !comp.indices.contains(i)));

        let bad = ChannelConfig {
            kind: ConfigKind::Custom,
            indices: vec![3, 500],
            wavelengths: vec![0.0, 0.0],
        };
        assert!(matches!(complement_config(&g, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn evenly_spaced_rule() {
        assert_eq!(evenly_spaced(3, 5).unwrap(), vec![0, 2, 4]);
        assert_eq!(evenly_spaced(4, 10).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(evenly_spaced(1, 7).unwrap(), vec![0]);
        assert!(evenly_spaced(8, 7).is_err());
        for m in 1..60 {
            for k in 1..=m {
                let idx = evenly_spaced(k, m).unwrap();
                assert!(idx.windows(2).all(|w| w[1] > w[0]));
                assert_eq!(*idx.last().unwrap(), if k == 1 { 0 } else { m - 1 });
            }
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let g = make_reference_grid();
        for kind in ConfigKind::NAMED {
            let c = make_config(&g, kind).unwrap();
            let back = ChannelConfig::from_text(&c.to_text()).unwrap();
            assert_eq!(back.kind, c.kind);
            assert_eq!(back.indices, c.indices);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back.wavelengths), bits(&c.wavelengths));
        }
        assert!(ChannelConfig::from_text("C202_full,3\n0,420.0\n").is_err());
        assert!(ChannelConfig::from_text("").is_err());
    }

    #[test]
    fn cubes_are_deterministic_and_slice_consistent() {
        let g = make_reference_grid();
        let a = synth_cube(g.wavelengths(), 8, 12, 5).unwrap();
        let b = synth_cube(g.wavelengths(), 8, 12, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_cube(g.wavelengths(), 8, 12, 6).unwrap();
        assert_ne!(a.values, c.values);

        let cfg = make_config(&g, ConfigKind::SwirPlus).unwrap();
        let sub = synth_cube(&cfg.wavelengths, 8, 12, 5).unwrap();
        assert_eq!(sub, a.select_channels(&cfg.indices).unwrap());
    }

    #[test]
    fn cube_channels_are_standardized() {
        let cube = synth_cube(&[500.0, 900.0, 1500.0], 16, 16, 0).unwrap();
        let plane = 256;
        for c in 0..3 {
            let p = &cube.values.data()[c * plane..(c + 1) * plane];
            let mean = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}
