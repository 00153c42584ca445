//! Self-checks run by `lessvit verify`: the Kronecker mixed product, LESS
//! against the materialized Kronecker product, dense attention against
//! explicit loops, SSRoPE rotations, masking and channel sampling counts,
//! FLOP closed forms, finite differences and the dense capacity guard.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{full_ss_attention, less_attention, DenseParams, LessAttnParams, LessConfig};
use crate::bench::{count_flops, Mechanism, ShapeConfig};
use crate::embed::TokenGrid;
use crate::error::{Error, Result};
use crate::mae::{forward_loss, hcs_sample, make_mask_plan, step_plan, synth_dataset, HcsRange, HyperMae, MaeConfig};
use crate::rope::{apply_spatial, apply_spectral, RopeConfig};
use crate::tensor::{ops, Graph, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random configurations per check.
    pub cases: usize,
    /// Negates every Kronecker composition so the rank-1 check must fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 50,
            inject_fault: false,
        }
    }
}

pub fn run_verify(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let (seed, cases) = (opts.seed, opts.cases);
    Ok(vec![
        kron_check(seed, cases)?,
        rank_one_check(seed, cases, opts.inject_fault)?,
        dense_check::<f64>(seed, cases, 1e-12)?,
        dense_check::<f32>(seed, cases, 1e-6)?,
        rope_norm_check(seed, cases)?,
        rope_shift_check(seed, cases)?,
        mask_check(seed, cases)?,
        hcs_check(seed, 10_000)?,
        flop_check()?,
        CheckResult {
            name: "model-finite-difference",
            cases: 24,
            max_error: model_grad_check(seed, 24)?,
            tolerance: 1e-4,
        },
        capacity_check()?,
    ])
}

fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect())
}

fn random_meta(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<(f64, f64)>, Vec<f64>) {
    let coords = (0..n)
        .map(|_| (rng.random_range(0..8) as f64, rng.random_range(0..8) as f64))
        .collect();
    let mut wl: Vec<f64> = (0..c).map(|_| rng.random_range(400.0..2500.0)).collect();
    wl.sort_by(f64::total_cmp);
    (coords, wl)
}

fn head_slice(t: &Tensor<f64>, h: usize) -> Result<Tensor<f64>> {
    let (l, w) = (t.shape()[1], t.shape()[2]);
    Tensor::new(vec![l, w], t.data()[h * l * w..(h + 1) * l * w].to_vec())
}

/// `(A (x) B)(C (x) D)` against `(AC) (x) (BD)` on random shapes.
fn kron_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b72);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut dim = || rng.random_range(1..=4);
        let (m, k, n, p, l, q) = (dim(), dim(), dim(), dim(), dim(), dim());
        let a: Tensor<f64> = random_tensor(&mut rng, vec![m, k])?;
        let b = random_tensor(&mut rng, vec![p, l])?;
        let c = random_tensor(&mut rng, vec![k, n])?;
        let d = random_tensor(&mut rng, vec![l, q])?;
        let lhs = ops::matmul(&ops::kron(&a, &b)?, &ops::kron(&c, &d)?)?;
        let rhs = ops::kron(&ops::matmul(&a, &c)?, &ops::matmul(&b, &d)?)?;
        worst = worst.max(lhs.max_abs_diff(&rhs)?);
    }
    Ok(CheckResult {
        name: "kronecker-mixed-product",
        cases,
        max_error: worst,
        tolerance: 1e-12,
    })
}

/// Rank-1 LESS per head against `kron(A_S, A_C) kron(V_S, V_C)`.
fn rank_one_check(seed: u64, cases: usize, inject_fault: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4b52);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.random_range(1..=3);
        let (d1, d2) = (rng.random_range(1..=4), rng.random_range(1..=2));
        let (n, c) = (rng.random_range(1..=7), rng.random_range(1..=5));
        let dim = heads * d1 * d2;
        let cfg = if d1 == 4 && d2 == 2 {
            LessConfig::new(dim, heads, d1, d2, 1)?
        } else {
            LessConfig::without_rope(dim, heads, d1, d2, 1)?
        };
        let mut store = ParamStore::<f64>::new();
        let params = LessAttnParams::init(&mut store, "less", cfg, &mut rng)?;
        let x = random_tensor(&mut rng, vec![n + 1, c + 1, cfg.dim])?;
        let (coords, wavelengths) = random_meta(&mut rng, n, c);
        let mut g = Graph::new(&store);
        if inject_fault {
            g.inject_compose_sign_flip();
        }
        let tokens = g.constant(x);
        let out = less_attention(&mut g, &TokenGrid { tokens, coords, wavelengths }, &params)?;
        let f = &out.factors[0];
        let composed = g.value(out.composed);
        let width = d1 * d2;
        for h in 0..heads {
            let a = ops::kron(&head_slice(g.value(f.spatial.attn), h)?, &head_slice(g.value(f.spectral.attn), h)?)?;
            let v = ops::kron(&head_slice(g.value(f.spatial.values), h)?, &head_slice(g.value(f.spectral.values), h)?)?;
            let expect = ops::matmul(&a, &v)?;
            for t in 0..expect.rows() {
                let got = &composed.data()[t * cfg.dim + h * width..t * cfg.dim + (h + 1) * width];
                for (x, y) in got.iter().zip(expect.row(t)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    Ok(CheckResult {
        name: "less-rank1-kronecker",
        cases,
        max_error: worst,
        tolerance: 1e-10,
    })
}

/// Dense attention in precision `T` against an f64 loop over flattened tokens.
fn dense_check<T: Scalar>(seed: u64, cases: usize, tolerance: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde5e);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, c) = loop {
            let (n, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
            if (n + 1) * (c + 1) <= 30 {
                break (n, c);
            }
        };
        let heads = rng.random_range(1..=2);
        let dh = [2, 4][rng.random_range(0..2)];
        let dim = heads * dh;
        let mut store = ParamStore::<T>::new();
        let p = DenseParams::init(&mut store, "dense", dim, heads, &mut rng)?;
        *store.get_mut(p.bo) = random_tensor(&mut rng, vec![dim])?;
        let x = random_tensor::<T>(&mut rng, vec![n + 1, c + 1, dim])?;
        let (coords, wavelengths) = random_meta(&mut rng, n, c);
        let mut g = Graph::new(&store);
        let tokens = g.constant(x.clone());
        let out = full_ss_attention(&mut g, &TokenGrid { tokens, coords, wavelengths }, &p, 30)?;
        let got = g.value(out.out).to_f64_vec();

        let w = |id| store.get(id).to_f64_vec();
        let (wq, wk, wv, wo, bo) = (w(p.wq), w(p.wk), w(p.wv), w(p.wo), w(p.bo));
        let xs = x.to_f64_vec();
        let t = (n + 1) * (c + 1);
        let proj = |m: &[f64]| -> Vec<f64> {
            let mut y = vec![0.0; t * dim];
            for i in 0..t {
                for j in 0..dim {
                    y[i * dim + j] = (0..dim).map(|k| xs[i * dim + k] * m[k * dim + j]).sum();
                }
            }
            y
        };
        let (q, k, v) = (proj(&wq), proj(&wk), proj(&wv));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = vec![0.0; t * dim];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|s| cols.clone().map(|j| q[i * dim + j] * k[s * dim + j]).sum::<f64>() * scale)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in cols.clone() {
                    concat[i * dim + j] = (0..t).map(|s| e[s] / z * v[s * dim + j]).sum();
                }
            }
        }
        for i in 0..t {
            for j in 0..dim {
                let expect = bo[j] + (0..dim).map(|k| concat[i * dim + k] * wo[k * dim + j]).sum::<f64>();
                worst = worst.max((got[i * dim + j] - expect).abs());
            }
        }
    }
    Ok(CheckResult {
        name: if T::NAME == "f32" { "dense-oracle-f32" } else { "dense-oracle-f64" },
        cases,
        max_error: worst,
        tolerance,
    })
}

/// Largest absolute gap between counted and closed-form FLOPs.
fn flop_check() -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [1, 4, 16] {
        for c in [1, 10, 40] {
            let shape = ShapeConfig { n, c, ..ShapeConfig::toy(c) };
            for mechanism in [Mechanism::Less, Mechanism::Dense] {
                let report = count_flops::<f32>(&shape, mechanism, 0, usize::MAX)?;
                let labels = report.counted.keys().chain(report.predicted.keys());
                for label in labels {
                    let a = report.counted.get(label).copied().unwrap_or(0) as f64;
                    let b = report.predicted.get(label).copied().unwrap_or(0) as f64;
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }
    Ok(CheckResult {
        name: "flop-closed-form",
        cases,
        max_error: worst,
        tolerance: 0.0,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rope_inputs(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Result<Tensor<f64>> {
    let mut t = random_tensor(rng, vec![rows, width])?;
    for v in &mut t.data_mut()[..width] {
        *v *= 3.0;
    }
    Ok(t)
}

/// Per-token norm change after rotation, plus any change to the CLS row.
fn rope_norm_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e0f);
    let cfg = RopeConfig::new(16, 8)?;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..=6);
        let coords: Vec<_> = (0..n).map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect();
        let wl: Vec<_> = (0..n).map(|_| rng.random_range(400.0..2500.0)).collect();
        for (x, y) in [
            {
                let x = rope_inputs(&mut rng, n + 1, 16)?;
                let y = apply_spatial(&x, &coords, &cfg)?;
                (x, y)
            },
            {
                let x = rope_inputs(&mut rng, n + 1, 8)?;
                let y = apply_spectral(&x, &wl, &cfg)?;
                (x, y)
            },
        ] {
            for t in 0..=n {
                let (a, b) = (dot(x.row(t), x.row(t)).sqrt(), dot(y.row(t), y.row(t)).sqrt());
                worst = worst.max((a - b).abs());
            }
            for (a, b) in x.row(0).iter().zip(y.row(0)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(CheckResult {
        name: "ssrope-norm-and-cls",
        cases,
        max_error: worst,
        tolerance: 1e-6,
    })
}

/// `<R(p)q, R(p')k>` must not change when both positions shift together.
fn rope_shift_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e0e);
    let cfg = RopeConfig::new(16, 8)?;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let qk = rope_inputs(&mut rng, 3, 16)?;
        let mut pos = || (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let (a, b, s) = (pos(), pos(), pos());
        let r0 = apply_spatial(&qk, &[a, b], &cfg)?;
        let r1 = apply_spatial(&qk, &[(a.0 + s.0, a.1 + s.1), (b.0 + s.0, b.1 + s.1)], &cfg)?;
        worst = worst.max((dot(r0.row(1), r0.row(2)) - dot(r1.row(1), r1.row(2))).abs());

        let q = rope_inputs(&mut rng, 3, 8)?;
        let (l1, l2) = (rng.random_range(400.0..2500.0), rng.random_range(400.0..2500.0));
        let shift = rng.random_range(-300.0..300.0);
        let r0 = apply_spectral(&q, &[l1, l2], &cfg)?;
        let r1 = apply_spectral(&q, &[l1 + shift, l2 + shift], &cfg)?;
        worst = worst.max((dot(r0.row(1), r0.row(2)) - dot(r1.row(1), r1.row(2))).abs());
    }
    Ok(CheckResult {
        name: "ssrope-relative-shift",
        cases,
        max_error: worst,
        tolerance: 1e-10,
    })
}

/// 75% masks over 16 patches and 8 sampled channels must hide exactly 12
/// patches and 6 channels, with one spatial mask for every channel. Error is
/// the number of violations.
fn mask_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut wrong = 0;
    let channels: Vec<usize> = (0..16).step_by(2).collect();
    for i in 0..cases as u64 {
        let plan = make_mask_plan(16, &channels, (0.75, 0.75), seed.wrapping_add(i))?;
        wrong += usize::from(plan.spatial_masked.len() != 12 || plan.spectral_masked.len() != 6);
        wrong += usize::from(plan.spatial_visible.len() != 4 || plan.spectral_visible.len() != 2);
        for &n in &plan.spatial_masked {
            wrong += (0..channels.len()).filter(|&c| !plan.is_masked(n, c)).count();
        }
    }
    Ok(CheckResult {
        name: "mask-counts",
        cases,
        max_error: wrong as f64,
        tolerance: 0.0,
    })
}

/// Channel sampling draws per range and channel count; error is the number
/// of draws whose size leaves `[round(r_l C), round(r_h C)]`.
fn hcs_check(seed: u64, draws: usize) -> Result<CheckResult> {
    let mut wrong = 0;
    let mut cases = 0;
    for (lo, hi) in [(0.2, 0.3), (0.4, 0.5)] {
        let range = HcsRange::new(lo, hi)?;
        for c in [8, 120, 202] {
            let (min, max) = range.count_bounds(c);
            for i in 0..draws as u64 {
                let k = hcs_sample(c, range, seed.wrapping_mul(31).wrapping_add(i))?.len();
                wrong += usize::from(k < min || k > max);
                cases += 1;
            }
        }
    }
    Ok(CheckResult {
        name: "hcs-count-range",
        cases,
        max_error: wrong as f64,
        tolerance: 0.0,
    })
}

/// Max relative error between backpropagated and central-difference
/// gradients of the pretraining loss on a toy model with one encoder block,
/// over `samples` parameter coordinates spread across every tensor.
pub fn model_grad_check(seed: u64, samples: usize) -> Result<f64> {
    let mut cfg = MaeConfig::toy()?;
    cfg.encoder_depth = 1;
    cfg.decoder_depth = 1;
    let (store, model) = HyperMae::init::<f64>(cfg.clone(), seed)?;
    let cube = synth_dataset(&cfg, seed, 1)?.remove(0);
    let plan = step_plan(&cfg, cube.channels(), seed)?;
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = forward_loss(&mut g, &model, &cube, &plan)?;
        Ok(g.value(l).data()[0])
    };
    let analytic = {
        let mut g = Graph::new(&store);
        let l = forward_loss(&mut g, &model, &cube, &plan)?;
        g.backward(l)?.into_param_grads(store.len())
    };
    let ids: Vec<_> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for i in 0..samples {
        // one tensor from each of `samples` equal slices of the parameter list
        let (lo, hi) = (i * ids.len() / samples, ((i + 1) * ids.len() / samples).max(i * ids.len() / samples + 1));
        let id = ids[rng.random_range(lo..hi.min(ids.len()))];
        let k = rng.random_range(0..store.get(id).len());
        let orig = store.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = orig + eps;
        let plus = loss(&probe)?;
        probe.get_mut(id).data_mut()[k] = orig - eps;
        let minus = loss(&probe)?;
        probe.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Dense attention must refuse a grid one token over a lowered cap and accept
/// it at exactly the cap. Error is the number of wrong outcomes.
fn capacity_check() -> Result<CheckResult> {
    let shape = ShapeConfig { n: 3, c: 4, dim: 16, heads: 2, d1: 4, d2: 2, rank: 1 };
    let tokens = shape.tokens();
    let mut wrong = 0;
    match count_flops::<f32>(&shape, Mechanism::Dense, 0, tokens - 1) {
        Err(Error::Capacity { tokens: t, cap }) if t == tokens && cap == tokens - 1 => {}
        _ => wrong += 1,
    }
    if count_flops::<f32>(&shape, Mechanism::Dense, 0, tokens).is_err() {
        wrong += 1;
    }
    Ok(CheckResult {
        name: "dense-capacity-guard",
        cases: 2,
        max_error: wrong as f64,
        tolerance: 0.0,
    })
}
