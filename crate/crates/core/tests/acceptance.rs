//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lessvit::attention::{full_ss_attention, less_attention, DenseParams, LessAttnParams, LessConfig};
use lessvit::bench::{count_flops, fit_scaling_exponent, latency_csv, measure_latency, Mechanism, ShapeConfig, Status};
use lessvit::embed::TokenGrid;
use lessvit::mae::{hcs_sample, make_mask_plan, HcsRange, HyperMae, MaeConfig};
use lessvit::rope::{apply_spatial, apply_spectral, RopeConfig};
use lessvit::spectral::{make_config, make_reference_grid, ConfigKind};
use lessvit::tensor::ops;
use lessvit::verify::model_grad_check;
use lessvit::{Graph, ParamStore, Scalar, Tensor};

struct Fail(String);

impl From<String> for Fail {
    fn from(s: String) -> Self {
        Fail(s)
    }
}

impl From<&str> for Fail {
    fn from(s: &str) -> Self {
        Fail(s.to_string())
    }
}

impl From<lessvit::Error> for Fail {
    fn from(e: lessvit::Error) -> Self {
        Fail(e.to_string())
    }
}

type Outcome = Result<String, Fail>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), Fail> {
    if cond {
        Ok(())
    } else {
        Err(Fail(msg.into()))
    }
}

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(scale * rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn meta(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<(f64, f64)>, Vec<f64>) {
    let coords = (0..n).map(|i| ((i / 3) as f64, (i % 3) as f64)).collect();
    let mut wl: Vec<f64> = (0..c).map(|_| rng.random_range(400.0..2500.0)).collect();
    wl.sort_by(f64::total_cmp);
    (coords, wl)
}

fn head(t: &Tensor<f64>, h: usize) -> Tensor<f64> {
    let (l, w) = (t.shape()[1], t.shape()[2]);
    Tensor::new(vec![l, w], t.data()[h * l * w..(h + 1) * l * w].to_vec()).unwrap()
}

/// Factorized LESS against the materialized `(A_C (x) A_S)(V_C (x) V_S)`
/// with channel-major token order.
fn rank_one_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (ns, nc) = (rng.random_range(2..=8), rng.random_range(2..=6));
        let (d1, d2) = (rng.random_range(1..=4), rng.random_range(1..=2));
        let cfg = if d1 == 4 && d2 == 2 {
            LessConfig::new(8, 1, 4, 2, 1)
        } else {
            LessConfig::without_rope(d1 * d2, 1, d1, d2, 1)
        }
        .unwrap();
        let mut store = ParamStore::<f64>::new();
        let params = LessAttnParams::init(&mut store, "less", cfg, &mut rng).unwrap();
        let x = random(&mut rng, vec![ns, nc, cfg.dim], 1.0);
        let (coords, wavelengths) = meta(&mut rng, ns - 1, nc - 1);
        let mut g = Graph::new(&store);
        let tokens = g.constant(x);
        let out = less_attention(&mut g, &TokenGrid { tokens, coords, wavelengths }, &params).unwrap();
        let f = &out.factors[0];
        let a = ops::kron(&head(g.value(f.spectral.attn), 0), &head(g.value(f.spatial.attn), 0)).unwrap();
        let v = ops::kron(&head(g.value(f.spectral.values), 0), &head(g.value(f.spatial.values), 0)).unwrap();
        let joint = ops::matmul(&a, &v).unwrap();
        let composed = g.value(out.composed);
        for n in 0..ns {
            for c in 0..nc {
                for i in 0..d1 {
                    for j in 0..d2 {
                        let want = joint.get(&[c * ns + n, j * d1 + i]);
                        worst = worst.max((composed.get(&[n, c, i * d2 + j]) - want).abs());
                    }
                }
            }
        }
        let wo = store.get(params.out_w);
        let projected = ops::matmul(&composed.clone().reshape(vec![ns * nc, cfg.dim]).unwrap(), wo).unwrap();
        let got = g.value(out.out).clone().reshape(vec![ns * nc, cfg.dim]).unwrap();
        worst = worst.max(projected.max_abs_diff(&got).unwrap());
    }
    ensure(worst < 1e-10, format!("max error {worst:.3e} >= 1e-10"))?;
    Ok(format!("50 configs, max error {worst:.3e}"))
}

/// Output of dense attention computed pair by pair.
fn dense_loop(x: &[f64], t: usize, dim: usize, heads: usize, w: [&[f64]; 4], bo: &[f64]) -> Vec<f64> {
    let dh = dim / heads;
    let proj = |m: &[f64], i: usize, j: usize| (0..dim).map(|k| x[i * dim + k] * m[k * dim + j]).sum::<f64>();
    let mut concat = vec![0.0; t * dim];
    for h in 0..heads {
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for (s, l) in logits.iter_mut().enumerate() {
                for j in h * dh..(h + 1) * dh {
                    *l += proj(w[0], i, j) * proj(w[1], s, j);
                }
                *l /= (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (s, l) in logits.iter().enumerate() {
                let p = (l - max).exp() / z;
                for j in h * dh..(h + 1) * dh {
                    concat[i * dim + j] += p * proj(w[2], s, j);
                }
            }
        }
    }
    (0..t * dim)
        .map(|e| {
            let (i, j) = (e / dim, e % dim);
            bo[j] + (0..dim).map(|k| concat[i * dim + k] * w[3][k * dim + j]).sum::<f64>()
        })
        .collect()
}

fn dense_error<T: Scalar>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (ns, nc) = loop {
            let (a, b) = (rng.random_range(1..=10), rng.random_range(1..=10));
            if a * b <= 30 {
                break (a, b);
            }
        };
        let heads = rng.random_range(1..=2);
        let dim = heads * [2, 4][rng.random_range(0..2)];
        let mut store = ParamStore::<T>::new();
        let p = DenseParams::init(&mut store, "dense", dim, heads, &mut rng).unwrap();
        store.replace(p.bo, random(&mut rng, vec![dim], 1.0)).unwrap();
        let x = random::<T>(&mut rng, vec![ns, nc, dim], 1.0);
        let (coords, wavelengths) = meta(&mut rng, ns - 1, nc - 1);
        let mut g = Graph::new(&store);
        let tokens = g.constant(x.clone());
        let out = full_ss_attention(&mut g, &TokenGrid { tokens, coords, wavelengths }, &p, 30).unwrap();
        let w = |id| store.get(id).to_f64_vec();
        let (wq, wk, wv, wo, bo) = (w(p.wq), w(p.wk), w(p.wv), w(p.wo), w(p.bo));
        let want = dense_loop(&x.to_f64_vec(), ns * nc, dim, heads, [&wq, &wk, &wv, &wo], &bo);
        for (a, b) in g.value(out.out).to_f64_vec().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn dense_oracle() -> Outcome {
    let (e64, e32) = (dense_error::<f64>(2), dense_error::<f32>(3));
    ensure(e64 < 1e-12, format!("f64 error {e64:.3e} >= 1e-12"))?;
    ensure(e32 < 1e-6, format!("f32 error {e32:.3e} >= 1e-6"))?;
    Ok(format!("30 grids per precision, max error f64 {e64:.3e}, f32 {e32:.3e}"))
}

/// Counted FLOPs against closed forms on 12 configs. Channel counts are
/// chosen so the grid's spectral extent `C + 1` doubles (16, 32, 64).
fn flop_closed_forms() -> Outcome {
    let mut compose = std::collections::BTreeMap::new();
    let mut dense = std::collections::BTreeMap::new();
    for n in [1usize, 4, 16, 36] {
        for c in [15usize, 31, 63] {
            let shape = ShapeConfig { n, ..ShapeConfig::toy(c) };
            let (ns, nc, d, h, r) = ((n + 1) as u64, (c + 1) as u64, 64u64, 4u64, 1u64);
            let (d1, d2) = (8u64, 2u64);
            let less = count_flops::<f32>(&shape, Mechanism::Less, 0, usize::MAX).map_err(|e| e.to_string())?;
            for (label, want) in [
                ("spatial", 4 * r * ns * ns * d1 * h),
                ("spectral", 4 * r * nc * nc * d2 * h),
                ("compose", 2 * r * ns * nc * d),
            ] {
                let got = less.counted.get(label).copied().unwrap_or(0);
                ensure(got == want, format!("N={n} C={c} {label}: counted {got}, expected {want}"))?;
            }
            let full = count_flops::<f32>(&shape, Mechanism::Dense, 0, usize::MAX).map_err(|e| e.to_string())?;
            let t = ns * nc;
            let got = full.counted.get("dense").copied().unwrap_or(0);
            ensure(got == 4 * t * t * d, format!("N={n} C={c} dense: counted {got}, expected {}", 4 * t * t * d))?;
            compose.insert((n, c), less.counted["compose"]);
            dense.insert((n, c), got);
        }
    }
    let mut worst_dense = 0.0f64;
    for n in [1usize, 4, 16, 36] {
        for (lo, hi) in [(15, 31), (31, 63)] {
            ensure(compose[&(n, hi)] == 2 * compose[&(n, lo)], format!("compose did not double at N={n}, C={lo}"))?;
            let ratio = dense[&(n, hi)] as f64 / dense[&(n, lo)] as f64;
            ensure((ratio / 4.0 - 1.0).abs() <= 0.1, format!("dense ratio {ratio} at N={n}, C={lo}"))?;
            worst_dense = worst_dense.max((ratio / 4.0 - 1.0).abs());
        }
    }
    Ok(format!("12 configs exact; compose x2.000 per doubling; dense within {:.1}% of x4", 100.0 * worst_dense))
}

fn scaling_study() -> Outcome {
    let cs = [10, 50, 100, 200];
    let base = ShapeConfig::toy(10);
    let less = measure_latency::<f32>(Mechanism::Less, &cs, 5, base, 20_000, 0).map_err(|e| e.to_string())?;
    let dense = measure_latency::<f32>(Mechanism::Dense, &cs, 5, base, 20_000, 0).map_err(|e| e.to_string())?;
    let el = fit_scaling_exponent(&less).map_err(|e| e.to_string())?;
    let ed = fit_scaling_exponent(&dense).map_err(|e| e.to_string())?;
    ensure(el <= 1.3, format!("LESS exponent {el:.3} > 1.3"))?;
    ensure(ed - el >= 0.5, format!("exponent gap {:.3} < 0.5 (LESS {el:.3}, dense {ed:.3})", ed - el))?;

    // 17 x 201 = 3417 tokens exceeds a cap of 2000; 17 x 101 = 1717 does not
    let capped = measure_latency::<f32>(Mechanism::Dense, &cs, 5, base, 2000, 0).map_err(|e| e.to_string())?;
    let statuses: Vec<_> = capped.iter().map(|r| r.status).collect();
    ensure(
        statuses == [Status::Ok, Status::Ok, Status::Ok, Status::CapacityExceeded],
        format!("capped statuses {statuses:?}"),
    )?;
    let csv = latency_csv(&capped);
    ensure(csv.lines().all(|l| l.split(',').count() == 6), "malformed capped CSV")?;
    ensure(csv.lines().last() == Some("dense,200,5,,,capacity-exceeded"), "missing capacity row")?;
    Ok(format!("exponents LESS {el:.3}, dense {ed:.3}, gap {:.3}; C=200 refused at cap 2000", ed - el))
}

fn ssrope_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RopeConfig::new(32, 2)?;
    let wide = RopeConfig::new(16, 8)?;
    let (mut norm, mut shift, mut cls) = (0.0f64, 0.0f64, 0.0f64);
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    for cfg in [cfg, wide] {
        for _ in 0..100 {
            let x: Tensor<f64> = random(&mut rng, vec![3, cfg.d_s], 2.0);
            let p = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let (a, b, s) = (p(&mut rng), p(&mut rng), (rng.random_range(-32.0..32.0), rng.random_range(-32.0..32.0)));
            let y = apply_spatial(&x, &[a, b], &cfg)?;
            for t in 0..3 {
                norm = norm.max((sq(x.row(t)) - sq(y.row(t))).abs());
            }
            cls = cls.max(x.row(0).iter().zip(y.row(0)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
            let x32 = x.cast::<f32>();
            let logit = |t: &Tensor<f32>| t.row(1).iter().zip(t.row(2)).map(|(u, v)| u * v).sum::<f32>() as f64;
            let y0 = apply_spatial(&x32, &[a, b], &cfg)?;
            let y1 = apply_spatial(&x32, &[(a.0 + s.0, a.1 + s.1), (b.0 + s.0, b.1 + s.1)], &cfg)?;
            shift = shift.max((logit(&y0) - logit(&y1)).abs());

            let x: Tensor<f64> = random(&mut rng, vec![3, cfg.d_c], 2.0);
            let (l1, l2, dl) = (rng.random_range(400.0..2500.0), rng.random_range(400.0..2500.0), rng.random_range(-500.0..500.0));
            let y = apply_spectral(&x, &[l1, l2], &cfg)?;
            for t in 0..3 {
                norm = norm.max((sq(x.row(t)) - sq(y.row(t))).abs());
            }
            cls = cls.max(x.row(0).iter().zip(y.row(0)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
            let x32 = x.cast::<f32>();
            let y0 = apply_spectral(&x32, &[l1, l2], &cfg)?;
            let y1 = apply_spectral(&x32, &[l1 + dl, l2 + dl], &cfg)?;
            shift = shift.max((logit(&y0) - logit(&y1)).abs());
        }
    }
    ensure(norm < 1e-6, format!("norm change {norm:.3e}"))?;
    ensure(shift < 1e-5, format!("logit change under joint shift {shift:.3e}"))?;
    ensure(cls == 0.0, format!("CLS row changed by {cls:.3e}"))?;
    Ok(format!("200 draws per axis; norm {norm:.1e}, f32 shift {shift:.1e}, CLS untouched"))
}

fn masking_structure() -> Outcome {
    let channels: Vec<usize> = (0..8).map(|i| 5 * i + 2).collect();
    for seed in 0..1000 {
        let plan = make_mask_plan(16, &channels, (0.75, 0.75), seed)?;
        ensure(
            plan.spatial_masked.len() == 12 && plan.spectral_masked.len() == 6,
            format!("seed {seed}: {} spatial + {} spectral masked", plan.spatial_masked.len(), plan.spectral_masked.len()),
        )?;
        for c in 0..8 {
            let masked: Vec<usize> = (0..16).filter(|&n| plan.spatial_visible.binary_search(&n).is_err()).collect();
            ensure(masked == plan.spatial_masked, format!("seed {seed}: spatial mask differs on channel {c}"))?;
            ensure(
                plan.spatial_masked.iter().all(|&n| plan.is_masked(n, c)),
                format!("seed {seed}: masked patch visible on channel {c}"),
            )?;
        }
    }
    let mut draws = 0;
    for (lo, hi) in [(0.2, 0.3), (0.4, 0.5)] {
        let range = HcsRange::new(lo, hi)?;
        for c in [100usize, 120, 202] {
            let (min, max) = ((lo * c as f64).round() as usize, (hi * c as f64).round() as usize);
            for seed in 0..10_000u64 {
                let k = hcs_sample(c, range, seed)?.len();
                ensure(k >= min && k <= max, format!("[{lo}, {hi}] C={c} seed {seed}: {k} outside [{min}, {max}]"))?;
                draws += 1;
            }
        }
    }
    Ok(format!("12 + 6 masked over 1000 plans; {draws} channel draws within bounds"))
}

fn channel_configs() -> Outcome {
    let grid = make_reference_grid();
    let mut summary = Vec::new();
    for (kind, total, split) in [
        (ConfigKind::VnirPlus, 120, (80, 40)),
        (ConfigKind::SwirPlus, 120, (40, 80)),
        (ConfigKind::Disjoint, 82, (20, 62)),
        (ConfigKind::Full, 202, (100, 102)),
    ] {
        let cfg = make_config(&grid, kind)?;
        ensure(cfg.len() == total, format!("{kind}: {} channels", cfg.len()))?;
        ensure(cfg.region_counts(&grid) == split, format!("{kind}: split {:?}", cfg.region_counts(&grid)))?;
        summary.push(format!("{kind}={total}"));
    }
    let vnir = make_config(&grid, ConfigKind::VnirPlus)?;
    let disjoint = make_config(&grid, ConfigKind::Disjoint)?;
    ensure(disjoint.indices.iter().all(|i| vnir.indices.binary_search(i).is_err()), "C82 overlaps C120_VNIR+")?;
    let mut union: Vec<usize> = vnir.indices.iter().chain(&disjoint.indices).copied().collect();
    union.sort_unstable();
    ensure(union == make_config(&grid, ConfigKind::Full)?.indices, "union is not C202")?;
    Ok(format!("{}; disjoint and complementary", summary.join(" ")))
}

fn gradient_check() -> Outcome {
    let err = model_grad_check(0, 40)?;
    ensure(err < 1e-4, format!("max relative error {err:.3e}"))?;
    Ok(format!("40 parameter coordinates, max relative error {err:.3e}"))
}

fn lessvit(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_lessvit")).args(args).output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_pretraining() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        lessvit(&["pretrain", "--preset", "toy", "--steps", "200", "--seed", "0", "--out", path(out)])?;
    }
    let csv = std::fs::read(a.join("loss.csv")).map_err(|e| e.to_string())?;
    ensure(csv == std::fs::read(b.join("loss.csv")).map_err(|e| e.to_string())?, "loss CSVs differ")?;
    let text = String::from_utf8(csv).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = text.lines().skip(1).map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect();
    ensure(losses.len() == 200, format!("{} loss rows", losses.len()))?;
    let ratio = losses[199] / losses[0];
    ensure(ratio <= 0.5, format!("loss {:.4} -> {:.4}, ratio {ratio:.4} > 0.5", losses[0], losses[199]))?;
    Ok(format!("loss {:.4} -> {:.4} (ratio {ratio:.4}); two runs byte-identical", losses[0], losses[199]))
}

/// Parameter count of one LESS block from its shapes.
fn block_params(d: usize, h: usize, d1: usize, d2: usize, r: usize) -> usize {
    let pools = 2 * (3 * d * d) + d * (d1 + d2);
    let branches = r * 3 * h * (d1 * d1 + d2 * d2);
    let out = d * d + d;
    let norms = 4 * d;
    let mlp = d * 4 * d + 4 * d + 4 * d * d + d;
    pools + branches + out + norms + mlp
}

fn reference_preset() -> Outcome {
    let cfg = MaeConfig::reference()?;
    let (e, dd) = (cfg.encoder, cfg.decoder);
    ensure(cfg.encoder_depth == 12 && cfg.decoder_depth == 8, "depths")?;
    ensure(e.dim == 768 && dd.dim == 512, "widths")?;
    ensure(e.heads == 12 && e.rank == 1 && dd.rank == 1, "heads or rank")?;
    ensure((e.d1, e.d2) == (32, 2) && (dd.d1, dd.d2) == (32, 2) && e.d1 / e.d2 == 16, "per-head split")?;
    ensure(e.heads * e.d1 * e.d2 == e.dim && dd.heads * dd.d1 * dd.d2 == dd.dim, "head widths")?;

    let p2 = cfg.patch * cfg.patch;
    let encoder = p2 * e.dim + 4 * e.dim + 12 * block_params(768, 12, 32, 2, 1) + 2 * e.dim;
    let decoder = e.dim * dd.dim + dd.dim + dd.dim + 8 * block_params(512, 8, 32, 2, 1) + 2 * dd.dim + dd.dim * p2 + p2;
    let (store, model) = HyperMae::init::<f32>(cfg, 0)?;
    ensure(model.encoder.len() == 12 && model.decoder.as_ref().map(|d| d.blocks.len()) == Some(8), "block counts")?;
    ensure(store.scalar_count() == encoder + decoder, format!("{} parameters, expected {}", store.scalar_count(), encoder + decoder))?;
    drop(store);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = lessvit(&["pretrain", "--preset", "reference-shape-only", "--out", path(dir.path())])?;
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).map_err(|e| e.to_string())?;
    let loss: f64 = csv.lines().nth(1).and_then(|l| l.split_once(',')).ok_or("no loss row")?.1.parse().map_err(|_| "bad loss")?;
    ensure(loss.is_finite(), "non-finite loss")?;
    ensure(out.contains(&format!("parameters: {} total", encoder + decoder)), "reported parameter count")?;
    Ok(format!("12 + 8 blocks, 768/512 wide, 12 heads of 32 x 2, {} parameters, one step loss {loss:.4}", encoder + decoder))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("rank-1 factorization oracle", rank_one_oracle),
        ("dense attention oracle", dense_oracle),
        ("FLOP closed forms", flop_closed_forms),
        ("channel scaling study", scaling_study),
        ("SSRoPE properties", ssrope_properties),
        ("masking and channel sampling", masking_structure),
        ("channel configurations", channel_configs),
        ("gradient check", gradient_check),
        ("toy pretraining", toy_pretraining),
        ("reference preset structure", reference_preset),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(Fail(format!("panicked: {}", msg.unwrap_or_default())))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1} s)", i + 1),
            Err(Fail(why)) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1} s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
