//! `lessvit` command line: channel configurations, pretraining, the
//! verification suite and scaling benchmarks.

mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use manifest::{ParamCounts, RunManifest};

use crate::attention::DEFAULT_TOKEN_CAP;
use crate::bench::{
    count_flops, fit_scaling_exponent, latency_csv, measure_latency, LatencyRow, Mechanism, ShapeConfig,
    DEFAULT_CHANNELS, MIN_REPS,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::mae::{pretrain, save_checkpoint, MaeConfig, OptimizerKind, PretrainOptions};
use crate::spectral::{make_config, make_reference_grid, ConfigKind};
use crate::tensor::Scalar;
use crate::verify::{run_verify, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lessvit", version, about = "Low-rank spatial-spectral attention toolkit")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    VnirPlus,
    SwirPlus,
    Disjoint,
    Full,
}

impl From<KindArg> for ConfigKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::VnirPlus => ConfigKind::VnirPlus,
            KindArg::SwirPlus => ConfigKind::SwirPlus,
            KindArg::Disjoint => ConfigKind::Disjoint,
            KindArg::Full => ConfigKind::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Toy,
    ReferenceShapeOnly,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a named channel configuration of the 202-band reference grid.
    GenConfig {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-autoencoder pretraining on synthetic cubes.
    Pretrain {
        #[arg(long, value_enum, default_value = "toy")]
        preset: PresetArg,
        /// Defaults to 200 for the toy preset; the reference preset runs exactly 1.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to f64 for the toy preset and f32 for the reference preset.
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Run the oracle, invariant and gradient checks.
    Verify {
        /// Random configurations per check.
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// FLOP counts and forward latency against channel count.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "less,dense")]
        mechanisms: Vec<Mechanism>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CHANNELS)]
        cs: Vec<usize>,
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
        /// Dense attention refuses grids with more flattened tokens.
        #[arg(long, default_value_t = DEFAULT_TOKEN_CAP)]
        cap: usize,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cli: Cli, command: Vec<String>) -> Result<i32> {
    let seed = cli.seed;
    match cli.command {
        Command::GenConfig { kind, out } => gen_config(kind.into(), &out),
        Command::Pretrain { preset, steps, out, precision } => {
            let reference = preset == PresetArg::ReferenceShapeOnly;
            let precision = precision.unwrap_or(if reference { Precision::F32 } else { Precision::F64 });
            let job = PretrainJob { reference, steps, seed, out, command };
            match precision {
                Precision::F32 => job.run::<f32>(),
                Precision::F64 => job.run::<f64>(),
            }
        }
        Command::Verify { cases, inject_fault } => verify(seed, cases, inject_fault),
        Command::Bench { mechanisms, cs, reps, cap, precision, out } => {
            let job = BenchJob { mechanisms, cs, reps, cap, seed, out, command };
            match precision {
                Precision::F32 => job.run::<f32>(),
                Precision::F64 => job.run::<f64>(),
            }
        }
    }
}

fn gen_config(kind: ConfigKind, out: &Path) -> Result<i32> {
    let grid = make_reference_grid();
    let cfg = make_config(&grid, kind)?;
    cfg.write(out)?;
    let (vnir, swir) = cfg.region_counts(&grid);
    println!("{}: {} channels ({vnir} VNIR + {swir} SWIR) -> {}", kind.name(), cfg.len(), out.display());
    Ok(EXIT_OK)
}

struct PretrainJob {
    reference: bool,
    steps: Option<usize>,
    seed: u64,
    out: PathBuf,
    command: Vec<String>,
}

impl PretrainJob {
    fn run<T: Scalar>(self) -> Result<i32> {
        let (cfg, opts) = if self.reference {
            if self.steps.is_some_and(|s| s != 1) {
                return Err(Error::Config("the reference shape check runs exactly 1 step".into()));
            }
            let opts = PretrainOptions {
                steps: 1,
                seed: self.seed,
                batch: 1,
                dataset: 1,
                lr: 1e-4,
                optimizer: OptimizerKind::Sgd { momentum: 0.0 },
            };
            (MaeConfig::reference()?, opts)
        } else {
            let defaults = PretrainOptions::default();
            let opts = PretrainOptions {
                steps: self.steps.unwrap_or(defaults.steps),
                seed: self.seed,
                ..defaults
            };
            (MaeConfig::toy()?, opts)
        };
        if opts.steps == 0 {
            return Err(Error::Config("at least one step is required".into()));
        }
        let preset = if self.reference { "reference-shape-only" } else { cfg.preset.name() };
        let manifest_path = self.out.join("run.json");
        let loss_path = self.out.join("loss.csv");
        let ckpt_path = self.out.join("model.ckpt");

        let mut manifest = RunManifest::new(self.command, "pretrain", self.seed);
        manifest.preset = Some(preset.to_string());
        manifest.precision = Some(T::NAME.to_string());
        manifest.outputs = if self.reference {
            vec![manifest_path.clone(), loss_path.clone()]
        } else {
            vec![manifest_path.clone(), loss_path.clone(), ckpt_path.clone()]
        };
        manifest.settings = serde_json::json!({
            "steps": opts.steps,
            "batch": opts.batch,
            "dataset": opts.dataset,
            "lr": opts.lr,
            "optimizer": format!("{:?}", opts.optimizer),
            "patch": cfg.patch,
            "height": cfg.height,
            "width": cfg.width,
            "channels": cfg.channels(),
            "hcs": [cfg.hcs.r_l, cfg.hcs.r_h],
            "mask_ratios": [cfg.mask_ratios.0, cfg.mask_ratios.1],
            "encoder": block_summary(&cfg.encoder, cfg.encoder_depth),
            "decoder": block_summary(&cfg.decoder, cfg.decoder_depth),
        });
        manifest.write(&manifest_path)?;
        println!(
            "pretrain {preset}: {} steps, seed {}, {}, encoder {}x{} ({} heads, d1={} d2={} r={}), decoder {}x{} ({} heads)",
            opts.steps,
            self.seed,
            T::NAME,
            cfg.encoder_depth,
            cfg.encoder.dim,
            cfg.encoder.heads,
            cfg.encoder.d1,
            cfg.encoder.d2,
            cfg.encoder.rank,
            cfg.decoder_depth,
            cfg.decoder.dim,
            cfg.decoder.heads,
        );

        let mut csv = String::from("step,loss\n");
        let verbose = opts.steps <= 10;
        let result = pretrain::<T>(cfg, &opts, |step, loss| {
            let _ = writeln!(csv, "{step},{loss:?}");
            if verbose || step % 25 == 0 || step == 1 {
                println!("step {step:>4}  loss {loss:.6}");
            }
        });
        write_atomic(&loss_path, csv.as_bytes())?;
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                manifest.status = "failed".into();
                manifest.error = Some(e.to_string());
                manifest.write(&manifest_path)?;
                return Err(e);
            }
        };
        let counts = ParamCounts::of(&run.store);
        println!(
            "parameters: {} total ({} encoder, {} decoder), optimizer {}",
            counts.total, counts.encoder, counts.decoder, run.optimizer
        );
        if !self.reference {
            save_checkpoint(&ckpt_path, &run.store, preset, self.seed, opts.steps)?;
            let (first, last) = (run.losses[0], run.losses[run.losses.len() - 1]);
            println!("loss {first:.6} -> {last:.6} (ratio {:.4})", last / first);
        }
        manifest.parameters = Some(counts);
        manifest.status = "completed".into();
        manifest.write(&manifest_path)?;
        Ok(EXIT_OK)
    }
}

fn block_summary(cfg: &crate::attention::LessConfig, depth: usize) -> serde_json::Value {
    serde_json::json!({
        "depth": depth,
        "dim": cfg.dim,
        "heads": cfg.heads,
        "d1": cfg.d1,
        "d2": cfg.d2,
        "rank": cfg.rank,
    })
}

fn verify(seed: u64, cases: usize, inject_fault: bool) -> Result<i32> {
    if cases == 0 {
        return Err(Error::Config("at least one case per check is required".into()));
    }
    let results = run_verify(&VerifyOptions { seed, cases, inject_fault })?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict}  {:<26} cases {:>6}  max error {:.3e}  tolerance {:.1e}",
            r.name, r.cases, r.max_error, r.tolerance
        );
        failed += usize::from(!r.passed());
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

struct BenchJob {
    mechanisms: Vec<Mechanism>,
    cs: Vec<usize>,
    reps: usize,
    cap: usize,
    seed: u64,
    out: PathBuf,
    command: Vec<String>,
}

impl BenchJob {
    fn run<T: Scalar>(self) -> Result<i32> {
        if self.mechanisms.is_empty() {
            return Err(Error::Config("no mechanisms selected".into()));
        }
        let base = ShapeConfig::toy(self.cs.first().copied().unwrap_or(1));
        let manifest_path = self.out.join("run.json");
        let latency_path = self.out.join("latency.csv");
        let mut manifest = RunManifest::new(self.command, "bench", self.seed);
        manifest.preset = Some("toy".into());
        manifest.precision = Some(T::NAME.to_string());
        manifest.outputs = vec![manifest_path.clone(), latency_path.clone()];
        manifest.settings = serde_json::json!({
            "mechanisms": self.mechanisms.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "channels": self.cs,
            "reps": self.reps,
            "warmup": crate::bench::WARMUP_RUNS,
            "token_cap": self.cap,
            "batch": 1,
            "patches": base.n,
            "dim": base.dim,
            "heads": base.heads,
            "d1": base.d1,
            "d2": base.d2,
            "rank": base.rank,
        });
        manifest.write(&manifest_path)?;

        let mut flop_files = Vec::new();
        for &m in &self.mechanisms {
            for &c in &self.cs {
                let shape = base.with_channels(c);
                match count_flops::<T>(&shape, m, self.seed, self.cap) {
                    Ok(report) => {
                        let path = self.out.join(format!("flops_{}_c{c}.csv", m.name()));
                        write_atomic(&path, report.to_csv().as_bytes())?;
                        if !report.all_match() {
                            return Err(Error::Numeric(format!("{} FLOP count mismatch at C={c}", m.name())));
                        }
                        flop_files.push(path);
                    }
                    Err(Error::Capacity { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }

        let mut rows: Vec<LatencyRow> = Vec::new();
        let mut summary = Vec::new();
        for &m in &self.mechanisms {
            let r = measure_latency::<T>(m, &self.cs, self.reps, base, self.cap, self.seed)?;
            for row in &r {
                match row.status {
                    crate::bench::Status::Ok => println!(
                        "{:<5} C={:<4} median {:.6}s (min {:.6}, max {:.6}) x{:.2}",
                        m.name(),
                        row.c,
                        row.median_s,
                        row.min_s,
                        row.max_s,
                        row.normalized
                    ),
                    status => println!("{:<5} C={:<4} {}", m.name(), row.c, status.name()),
                }
            }
            summary.push((m, fit_scaling_exponent(&r)));
            rows.extend(r);
        }
        write_atomic(&latency_path, latency_csv(&rows).as_bytes())?;

        let mut line = String::from("exponents:");
        for (m, fit) in &summary {
            match fit {
                Ok(e) => {
                    let _ = write!(line, " {}={e:.3}", m.name());
                }
                Err(_) => {
                    let _ = write!(line, " {}=n/a", m.name());
                }
            }
        }
        let fit = |mech| summary.iter().find(|(m, _)| *m == mech).and_then(|(_, f)| f.as_ref().ok().copied());
        if let (Some(less), Some(dense)) = (fit(Mechanism::Less), fit(Mechanism::Dense)) {
            let _ = write!(line, " gap={:.3}", dense - less);
        }
        println!("{line}");

        manifest.outputs.extend(flop_files);
        manifest.settings["exponents"] = summary
            .iter()
            .map(|(m, f)| (m.name().to_string(), serde_json::json!(f.as_ref().ok())))
            .collect::<serde_json::Map<_, _>>()
            .into();
        manifest.status = "completed".into();
        manifest.write(&manifest_path)?;
        Ok(EXIT_OK)
    }
}
