//! FLOP accounting against closed forms and latency scaling with channel
//! count for LESS attention versus the dense oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{full_ss_attention, less_attention, DenseParams, LessAttnParams, LessConfig};
use crate::embed::{patch_coords, TokenGrid};
use crate::error::{Error, Result};
use crate::spectral::{evenly_spaced, make_reference_grid};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mechanism {
    Less,
    Dense,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Less => "less",
            Mechanism::Dense => "dense",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "less" => Ok(Mechanism::Less),
            "dense" => Ok(Mechanism::Dense),
            other => Err(Error::Parse(format!("unknown mechanism {other:?}"))),
        }
    }
}

/// Attention-layer shape: `n` spatial patches and `c` channels (CLS excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeConfig {
    pub n: usize,
    pub c: usize,
    pub dim: usize,
    pub heads: usize,
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
}

impl ShapeConfig {
    /// Toy encoder attention (16 patches, width 64, 4 heads of 8 x 2).
    pub fn toy(c: usize) -> Self {
        Self {
            n: 16,
            c,
            dim: 64,
            heads: 4,
            d1: 8,
            d2: 2,
            rank: 1,
        }
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("at least one spatial patch is required"));
        }
        if self.c == 0 {
            return Err(Error::config("at least one channel is required"));
        }
        self.less_config()?.check_grid(self.n + 1, self.c + 1)
    }

    fn less_config(&self) -> Result<LessConfig> {
        LessConfig::new(self.dim, self.heads, self.d1, self.d2, self.rank)
    }

    /// `T = (N+1)(C+1)`.
    pub fn tokens(&self) -> usize {
        (self.n + 1) * (self.c + 1)
    }
}

/// Closed-form matmul FLOPs per label for one attention layer.
pub fn predicted_flops(shape: &ShapeConfig, mechanism: Mechanism) -> BTreeMap<String, u64> {
    let u = |x: usize| x as u64;
    let (ns, nc, d, h, r) = (u(shape.n + 1), u(shape.c + 1), u(shape.dim), u(shape.heads), u(shape.rank));
    let (d1, d2) = (u(shape.d1), u(shape.d2));
    let mut out = BTreeMap::new();
    match mechanism {
        Mechanism::Less => {
            let pool = |a: u64, b: u64, d_out: u64| 2 * a * d * d + 4 * a * b * d * d + 4 * a * b * d + 2 * a * d * d_out;
            out.insert("pool".into(), pool(ns, nc, d1) + pool(nc, ns, d2));
            out.insert("branch_proj".into(), r * 6 * h * (ns * d1 * d1 + nc * d2 * d2));
            out.insert("spatial".into(), 4 * r * ns * ns * d1 * h);
            out.insert("spectral".into(), 4 * r * nc * nc * d2 * h);
            out.insert("compose".into(), 2 * r * ns * nc * d);
            out.insert("out_proj".into(), 2 * ns * nc * d * d);
        }
        Mechanism::Dense => {
            let t = ns * nc;
            out.insert("dense".into(), 4 * t * t * d);
            out.insert("dense_proj".into(), 8 * t * d * d);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub shape: ShapeConfig,
    pub mechanism: Mechanism,
    pub counted: BTreeMap<String, u64>,
    pub predicted: BTreeMap<String, u64>,
}

impl FlopReport {
    /// Every predicted label matches its counted value and no unpredicted
    /// label was counted.
    pub fn all_match(&self) -> bool {
        self.counted == self.predicted
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,counted,predicted,match\n");
        let labels: std::collections::BTreeSet<_> = self.counted.keys().chain(self.predicted.keys()).collect();
        for label in labels {
            let c = self.counted.get(label).copied().unwrap_or(0);
            let p = self.predicted.get(label).copied().unwrap_or(0);
            let _ = writeln!(s, "{label},{c},{p},{}", c == p);
        }
        s
    }
}

struct Layer<T> {
    store: ParamStore<T>,
    less: Option<LessAttnParams>,
    dense: Option<DenseParams>,
}

fn build_layer<T: Scalar>(shape: &ShapeConfig, mechanism: Mechanism, seed: u64) -> Result<Layer<T>> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (less, dense) = match mechanism {
        Mechanism::Less => (Some(LessAttnParams::init(&mut store, "less", shape.less_config()?, &mut rng)?), None),
        Mechanism::Dense => (None, Some(DenseParams::init(&mut store, "dense", shape.dim, shape.heads, &mut rng)?)),
    };
    Ok(Layer { store, less, dense })
}

/// Random grid values plus square-ish patch coordinates and wavelengths
/// evenly spread over the reference grid.
fn random_grid<T: Scalar>(shape: &ShapeConfig, seed: u64) -> Result<(Tensor<T>, Vec<(f64, f64)>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = shape.tokens() * shape.dim;
    let values = Tensor::new(
        vec![shape.n + 1, shape.c + 1, shape.dim],
        (0..len).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect(),
    )?;
    let side = (shape.n as f64).sqrt().ceil() as usize;
    let coords = patch_coords(side, side, 1).into_iter().take(shape.n).collect();
    let grid = make_reference_grid();
    let wavelengths = if shape.c <= grid.len() {
        evenly_spaced(shape.c, grid.len())?.into_iter().map(|i| grid.wavelengths()[i]).collect()
    } else {
        (0..shape.c).map(|i| 420.0 + 2025.0 * i as f64 / (shape.c - 1) as f64).collect()
    };
    Ok((values, coords, wavelengths))
}

fn forward<T: Scalar>(
    layer: &Layer<T>,
    values: &Tensor<T>,
    coords: &[(f64, f64)],
    wavelengths: &[f64],
    token_cap: usize,
) -> Result<BTreeMap<String, u64>> {
    let mut g = Graph::new(&layer.store);
    let tokens = g.constant(values.clone());
    let grid = TokenGrid {
        tokens,
        coords: coords.to_vec(),
        wavelengths: wavelengths.to_vec(),
    };
    if let Some(p) = &layer.less {
        less_attention(&mut g, &grid, p)?;
    }
    if let Some(p) = &layer.dense {
        full_ss_attention(&mut g, &grid, p, token_cap)?;
    }
    let flops = g.take_flops();
    Ok(flops.labels().map(|(l, v)| (l.to_string(), v)).collect())
}

/// One instrumented forward on random data compared against the closed forms.
pub fn count_flops<T: Scalar>(
    shape: &ShapeConfig,
    mechanism: Mechanism,
    seed: u64,
    token_cap: usize,
) -> Result<FlopReport> {
    let layer = build_layer::<T>(shape, mechanism, seed)?;
    let (values, coords, wavelengths) = random_grid::<T>(shape, seed)?;
    let counted = forward(&layer, &values, &coords, &wavelengths, token_cap)?;
    Ok(FlopReport {
        shape: *shape,
        mechanism,
        counted,
        predicted: predicted_flops(shape, mechanism),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    CapacityExceeded,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::CapacityExceeded => "capacity-exceeded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub mechanism: Mechanism,
    pub c: usize,
    pub reps: usize,
    /// Seconds; NaN when the run was refused.
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Median relative to the first successful row.
    pub normalized: f64,
    pub status: Status,
}

pub const WARMUP_RUNS: usize = 3;
pub const MIN_REPS: usize = 5;
pub const DEFAULT_CHANNELS: [usize; 4] = [10, 50, 100, 200];

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        0.5 * (sorted[m - 1] + sorted[m])
    }
}

/// Median forward time of one attention layer at each channel count, after
/// [`WARMUP_RUNS`] untimed runs. Runs refused by the dense token cap are
/// reported with status capacity-exceeded.
pub fn measure_latency<T: Scalar>(
    mechanism: Mechanism,
    channels: &[usize],
    reps: usize,
    base: ShapeConfig,
    token_cap: usize,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    if reps < MIN_REPS {
        return Err(Error::config(format!("at least {MIN_REPS} repetitions are required, got {reps}")));
    }
    if channels.is_empty() || channels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("channel list must be non-empty and strictly ascending"));
    }
    let layer = build_layer::<T>(&base.with_channels(channels[0]), mechanism, seed)?;
    let mut rows = Vec::with_capacity(channels.len());
    for &c in channels {
        let shape = base.with_channels(c);
        shape.validate()?;
        if mechanism == Mechanism::Dense && shape.tokens() > token_cap {
            rows.push(LatencyRow {
                mechanism,
                c,
                reps,
                median_s: f64::NAN,
                min_s: f64::NAN,
                max_s: f64::NAN,
                normalized: f64::NAN,
                status: Status::CapacityExceeded,
            });
            continue;
        }
        let (values, coords, wavelengths) = random_grid::<T>(&shape, seed)?;
        for _ in 0..WARMUP_RUNS {
            forward(&layer, &values, &coords, &wavelengths, token_cap)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            forward(&layer, &values, &coords, &wavelengths, token_cap)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        rows.push(LatencyRow {
            mechanism,
            c,
            reps,
            median_s: median(&times),
            min_s: times[0],
            max_s: times[reps - 1],
            normalized: f64::NAN,
            status: Status::Ok,
        });
    }
    if let Some(base_time) = rows.iter().find(|r| r.status == Status::Ok).map(|r| r.median_s) {
        for row in rows.iter_mut().filter(|r| r.status == Status::Ok) {
            row.normalized = row.median_s / base_time;
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln(median)` against `ln(C)` over successful rows.
pub fn fit_scaling_exponent(rows: &[LatencyRow]) -> Result<f64> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.status == Status::Ok && r.median_s > 0.0)
        .map(|r| ((r.c as f64).ln(), r.median_s.ln()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 successful rows, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all rows share one channel count".into()));
    }
    Ok(sxy / sxx)
}

pub const LATENCY_HEADER: &str = "mechanism,C,reps,median_s,normalized,status";

/// Latency rows as CSV; refused runs leave the numeric fields empty.
pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = format!("{LATENCY_HEADER}\n");
    for r in rows {
        match r.status {
            Status::Ok => {
                let _ = writeln!(s, "{},{},{},{:.9},{:.6},{}", r.mechanism.name(), r.c, r.reps, r.median_s, r.normalized, r.status.name());
            }
            Status::CapacityExceeded => {
                let _ = writeln!(s, "{},{},{},,,{}", r.mechanism.name(), r.c, r.reps, r.status.name());
            }
        }
    }
    s
}
