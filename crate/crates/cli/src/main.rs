use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gald::bench::{records_to_csv, run_sweep, summarize, BenchConfig, Method};
use gald::ga::{GaConfig, GaKind};
use gald::ld::{Arrangement, GaldConfig, LdConfig, Ldv1Config, Ldv1Strategy, Ldv2Config};
use gald::ops::local_attention::BorderMode;
use gald::registry::{run_gradcheck, GradcheckSpec, LdVersion, GRADCHECK_OPS};
use gald::toy::{train_toy, ToyHead, TrainConfig, TrainStatus};
use gald::verify::{run_verify, VerifyOptions, CHECKS};
use gald::GaldError;

mod settings;

use settings::FileConfig;

/// Largest input, in elements, accepted by `gradcheck`.
const GRADCHECK_MAX_ELEMENTS: usize = 4096;
/// Largest image side accepted by `train`.
const TRAIN_MAX_SIDE: usize = 512;

#[derive(Parser, Debug)]
#[command(
    name = "gald",
    version,
    about = "Global aggregation / local distribution context modules"
)]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check fast kernels against brute-force oracles.
    Verify(VerifyArgs),
    /// Compare analytic and finite-difference gradients of one op.
    Gradcheck(GradcheckArgs),
    /// Time attention kernels over a size sweep and write CSV and JSON.
    Bench(BenchArgs),
    /// Train the toy segmentation network and write a JSON report.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    border_mode: Option<BorderMode>,
    /// Check to run; repeat for several. Defaults to all.
    #[arg(long = "check")]
    checks: Vec<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Registered op name.
    op: String,
    #[command(flatten)]
    common: Common,
    /// Input shape `n,c,h,w`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    ga: Option<GaKind>,
    #[arg(long)]
    ld: Option<LdVersion>,
    #[arg(long)]
    arrangement: Option<Arrangement>,
    /// LDv2 window size.
    #[arg(long)]
    k: Option<usize>,
    /// LDv2 dilation.
    #[arg(long)]
    r: Option<usize>,
    /// LDv1 downsample ratio.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    strategy: Option<Ldv1Strategy>,
    #[arg(long)]
    border_mode: Option<BorderMode>,
}

#[derive(Args, Debug)]
struct Output {
    /// Directory for artifacts.
    #[arg(long, env = "GALD_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    output: Output,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Square grid sides.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    c_reduced: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    warmups: Option<usize>,
    #[arg(long)]
    memory_ceiling_mb: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    ohem: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    ga: Option<GaKind>,
    /// `none`, `v1` or `v2`.
    #[arg(long)]
    ld: Option<String>,
    #[arg(long)]
    arrangement: Option<Arrangement>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    border_mode: Option<BorderMode>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Image side.
    #[arg(long)]
    size: Option<usize>,
    /// Backbone width.
    #[arg(long)]
    channels: Option<usize>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// A check or run failed (exit 1).
    Check(String),
    /// Bad input or environment (exit 2).
    Usage(String),
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Usage(s)
    }
}

impl From<GaldError> for Failure {
    fn from(e: GaldError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    gald::parallel::set_parallel(!cli.sequential);
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Train(a) => cmd_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let file = FileConfig::load(
        a.common.config.as_deref(),
        &["seed", "border_mode", "checks"],
    )?;
    let checks = if a.checks.is_empty() {
        file.pick_list(None, "checks", Vec::new())?
    } else {
        a.checks
    };
    let opts = VerifyOptions {
        seed: file.pick(a.common.seed, "seed", 42)?,
        border_mode: file.pick(a.border_mode, "border_mode", BorderMode::MaskedSoftmax)?,
        checks,
    };
    for c in &opts.checks {
        if !CHECKS.contains(&c.as_str()) {
            return Err(Failure::Usage(format!(
                "unknown check `{c}` (known: {})",
                CHECKS.join(", ")
            )));
        }
    }
    let report = run_verify(&opts)?;
    println!("seed {} border_mode {:?}", report.seed, report.border_mode);
    for o in &report.outcomes {
        println!("{:5} {:18} {}", o.status.label(), o.name, o.detail);
    }
    if report.all_ok() {
        Ok(())
    } else {
        Err(Failure::Check("verification failed".into()))
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if !GRADCHECK_OPS.contains(&a.op.as_str()) {
        return Err(Failure::Usage(format!(
            "unknown op `{}` (registered: {})",
            a.op,
            GRADCHECK_OPS.join(", ")
        )));
    }
    let file = FileConfig::load(
        a.common.config.as_deref(),
        &[
            "seed",
            "dims",
            "ga",
            "ld",
            "arrangement",
            "k",
            "r",
            "d",
            "strategy",
            "border_mode",
        ],
    )?;
    let mut spec = GradcheckSpec::new(&a.op, file.pick(a.common.seed, "seed", 42)?);
    let dims = file.pick_list(a.dims, "dims", spec.dims.to_vec())?;
    spec.dims = <[usize; 4]>::try_from(dims.as_slice())
        .map_err(|_| format!("--dims takes four values n,c,h,w, got {}", dims.len()))?;
    if spec.dims.contains(&0) {
        return Err(Failure::Usage("--dims must be positive".into()));
    }
    let numel = spec
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if numel.is_none_or(|n| n > GRADCHECK_MAX_ELEMENTS) {
        return Err(Failure::Usage(format!(
            "--dims {:?} exceeds {GRADCHECK_MAX_ELEMENTS} elements; finite differences need one forward pass per element",
            spec.dims
        )));
    }
    spec.ga = file.pick(a.ga, "ga", spec.ga)?;
    spec.ld = file.pick(a.ld, "ld", spec.ld)?;
    spec.arrangement = file.pick(a.arrangement, "arrangement", spec.arrangement)?;
    spec.kernel = file.pick(a.k, "k", spec.kernel)?;
    spec.dilation = file.pick(a.r, "r", spec.dilation)?;
    spec.downsample_ratio = file.pick(a.d, "d", spec.downsample_ratio)?;
    spec.ldv1_strategy = file.pick(a.strategy, "strategy", spec.ldv1_strategy)?;
    spec.border_mode = file.pick(a.border_mode, "border_mode", spec.border_mode)?;
    let report = run_gradcheck(&spec)?;
    println!("op {} dims {:?} seed {}", spec.op, spec.dims, spec.seed);
    for t in &report.tensors {
        println!(
            "tensor {:2}  max rel err {:.3e}  max abs err {:.3e}",
            t.index, t.max_rel_error, t.max_abs_error
        );
    }
    println!(
        "max rel err {:.3e} (tol {:.0e})",
        report.max_rel_error(),
        report.tol
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {}",
            spec.op
        )))
    }
}

fn prepare_out(out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.unwrap_or_else(|| PathBuf::from("gald_out"));
    std::fs::create_dir_all(&dir).map_err(|e| {
        Failure::Usage(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}

fn write_artifact(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v)
        .map_err(|e| Failure::Usage(format!("cannot serialise report: {e}")))
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let file = FileConfig::load(
        a.common.config.as_deref(),
        &[
            "seed",
            "methods",
            "sizes",
            "c_reduced",
            "k",
            "r",
            "runs",
            "warmups",
            "memory_ceiling_mb",
        ],
    )?;
    let base = BenchConfig::default();
    let cfg = BenchConfig {
        seed: file.pick(a.common.seed, "seed", base.seed)?,
        c_reduced: file.pick(a.c_reduced, "c_reduced", base.c_reduced)?,
        kernel: file.pick(a.k, "k", base.kernel)?,
        dilation: file.pick(a.r, "r", base.dilation)?,
        runs: file.pick(a.runs, "runs", base.runs)?,
        warmups: file.pick(a.warmups, "warmups", base.warmups)?,
        memory_ceiling_bytes: file
            .pick(
                a.memory_ceiling_mb,
                "memory_ceiling_mb",
                base.memory_ceiling_bytes >> 20,
            )?
            .checked_mul(1 << 20)
            .ok_or_else(|| "memory ceiling overflows".to_string())?,
    };
    let methods = file.pick_list(a.methods, "methods", vec![Method::Nonlocal, Method::Ldv2])?;
    let sides = file.pick_list(a.sizes, "sizes", vec![8, 16, 32, 64])?;
    let sizes: Vec<(usize, usize)> = sides.iter().map(|&s| (s, s)).collect();
    let out = prepare_out(a.output.out)?;
    let records = run_sweep(&methods, &sizes, &cfg)?;
    let summary = summarize(records, &cfg);
    write_artifact(&out.join("bench.csv"), &records_to_csv(&summary.records))?;
    write_artifact(&out.join("bench.json"), &to_json(&summary)?)?;
    println!(
        "seed {}  C'={} k={} r={}",
        cfg.seed, cfg.c_reduced, cfg.kernel, cfg.dilation
    );
    println!(
        "{:10} {:>5} {:>5} {:>14} {:>12}",
        "method", "h", "w", "macs", "median_ms"
    );
    for r in &summary.records {
        println!(
            "{:10} {:>5} {:>5} {:>14} {:>12.3}",
            r.method,
            r.h,
            r.w,
            r.mac_count,
            r.wall_ns as f64 / 1e6
        );
    }
    for f in &summary.fits {
        println!(
            "{:10} time ~ N^{:.3} (R^2 {:.4})",
            f.method, f.exponent, f.r_squared
        );
    }
    println!(
        "wrote {} and {}",
        out.join("bench.csv").display(),
        out.join("bench.json").display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let file = FileConfig::load(
        a.common.config.as_deref(),
        &[
            "seed",
            "epochs",
            "lr",
            "batch",
            "momentum",
            "ohem",
            "grad_clip",
            "ga",
            "ld",
            "arrangement",
            "k",
            "r",
            "d",
            "border_mode",
            "train_samples",
            "eval_samples",
            "size",
            "channels",
        ],
    )?;
    let seed = file.pick(a.common.seed, "seed", 42)?;
    let channels: usize = file.pick(a.channels, "channels", 8)?;
    let reduced = (channels / 2).max(1);
    let size = file.pick(a.size, "size", 64)?;
    if size > TRAIN_MAX_SIDE {
        return Err(Failure::Usage(format!(
            "--size must be at most {TRAIN_MAX_SIDE}, got {size}"
        )));
    }
    let mut ga = GaConfig::new(file.pick(a.ga, "ga", GaKind::Aspp)?, reduced);
    // Rates at or beyond the feature-map side see only padding.
    ga.aspp_rates.retain(|&r| r < size / 2);
    if ga.kind == GaKind::Aspp && ga.aspp_rates.is_empty() {
        return Err(Failure::Usage(format!(
            "--size {size} is too small for any ASPP rate"
        )));
    }
    let ld_choice: String = file.pick(a.ld.clone(), "ld", "v2".to_string())?;
    let ld = match ld_choice.as_str() {
        "none" => None,
        "v1" => {
            let d = file.pick(a.d, "d", 8)?;
            Some(LdConfig::V1(Ldv1Config::new(
                d,
                Ldv1Strategy::DepthwiseConv,
            )?))
        }
        "v2" => {
            let k = file.pick(a.k, "k", 5)?;
            let r = file.pick(a.r, "r", 3)?;
            let mode = file.pick(a.border_mode, "border_mode", BorderMode::MaskedSoftmax)?;
            Some(LdConfig::V2(
                Ldv2Config::new(reduced)
                    .with_window(k, r)?
                    .with_border(mode),
            ))
        }
        other => {
            return Err(Failure::Usage(format!(
                "--ld must be none, v1 or v2, got `{other}`"
            )))
        }
    };
    let head = match ld {
        None => ToyHead::GaOnly { ga },
        Some(ld) => ToyHead::Gald(GaldConfig {
            ga,
            ld,
            arrangement: file.pick(a.arrangement, "arrangement", Arrangement::Gald)?,
        }),
    };
    let base = TrainConfig::new(seed, head);
    let cfg = TrainConfig {
        epochs: file.pick(a.epochs, "epochs", base.epochs)?,
        lr: file.pick(a.lr, "lr", base.lr)?,
        batch: file.pick(a.batch, "batch", base.batch)?,
        momentum: file.pick(a.momentum, "momentum", base.momentum)?,
        ohem_topk_fraction: file.pick(a.ohem, "ohem", base.ohem_topk_fraction)?,
        grad_clip: file.pick(a.grad_clip, "grad_clip", base.grad_clip)?,
        train_samples: file.pick(a.train_samples, "train_samples", base.train_samples)?,
        eval_samples: file.pick(a.eval_samples, "eval_samples", base.eval_samples)?,
        height: size,
        width: size,
        channels,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a)?;
    let out = prepare_out(a.output.out)?;
    let path = out.join("train_report.json");
    let outcome = train_toy(&cfg)?;
    let report = &outcome.report;
    write_artifact(&path, &to_json(report)?)?;
    println!(
        "seed {}  head {}  steps {}  params {}",
        report.seed, report.head, report.steps, report.param_count
    );
    println!("mIoU {:.4}", report.final_miou);
    for s in &report.boundary_f {
        println!("boundary F @{:>2}px {:.4}", s.slack, s.fscore);
    }
    println!("wrote {}", path.display());
    match report.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { step } => {
            Err(Failure::Check(format!("training diverged at step {step}")))
        }
    }
}
