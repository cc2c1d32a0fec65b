use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mixgda::config::{preset, RunConfig, PRESET_NAMES};
use mixgda::gda::{de_fields, gccb, gvat, groi, roi_partition};
use mixgda::network::{ForwardOpts, Network};
use mixgda::principal::{degenerated_entropy, reliability, residual_mass};
use mixgda::trainer::{evaluate, metrics_csv, run_training, CycleMetrics, TrainData};
use mixgda::verify::{run_suite, Faults, SuiteSizes};
use mixgda::{ppm, Tensor};

#[derive(Parser)]
#[command(name = "mixgda", version, about = "Semi-supervised training with gradient-based augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Print the test error of a checkpoint.
    Eval(EvalArgs),
    /// Dump gVAT / gCCB / gROI images for inspection.
    Augment(AugmentArgs),
    /// Run the invariant and oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped configuration by name.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory dataset paths are resolved against.
    #[arg(long, default_value = ".")]
    data_root: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory (defaults to the configured one, else runs/<name>-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the resolved configuration only.
    #[arg(long)]
    dry_run: bool,
    /// Drop every term except the labeled cross-entropy.
    #[arg(long)]
    supervised_only: bool,
    /// Shrink to a synthetic desk-scale run with this many steps per cycle.
    #[arg(long, value_name = "STEPS")]
    desk_scale: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Gvat,
    Gccb,
    Groi,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Gvat => "gvat",
            Which::Gccb => "gccb",
            Which::Groi => "groi",
        })
    }
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    which: Which,
    /// PPM/PGM inputs; without them, test-set images are used.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// First test-set index.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    CcbSign,
}

#[derive(Args)]
struct VerifyArgs {
    /// Break a rule on purpose to confirm the suite catches it.
    #[arg(long, value_enum)]
    inject_fault: Option<Fault>,
    /// Reduced instance counts.
    #[arg(long)]
    quick: bool,
}

/// Bad invocation or input; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mixgda::Error>() {
            use mixgda::Error as E;
            if matches!(
                e,
                E::Config { .. } | E::Io(_) | E::Json(_) | E::BadHeader { .. } | E::Truncated { .. } | E::LabelOutOfRange { .. }
            ) {
                return 2;
            }
        }
    }
    1
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => preset(name).map_err(|_| usage(format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", "))))?,
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn invalid_config(e: mixgda::Error) -> anyhow::Error {
    anyhow::Error::new(e).context("invalid configuration")
}

fn write_metrics(dir: &Path, rows: &[CycleMetrics]) -> Result<()> {
    fs::write(dir.join("metrics.csv"), metrics_csv(rows)).context("writing metrics.csv")
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.cfg)?;
    if let Some(steps) = args.desk_scale {
        cfg = cfg.desk_scale(steps);
    }
    if args.supervised_only {
        cfg.hp = cfg.hp.supervised_only();
        cfg.name = format!("{}-supervised", cfg.name);
    }
    let out = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.name, cfg.seed)));
    cfg.out_dir = Some(out.clone());
    cfg.validate().map_err(invalid_config)?;
    if args.dry_run {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let data = TrainData::load(&cfg, &args.cfg.data_root).context("loading dataset")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut write_err = None;
    let outcome = run_training(&cfg, &data, |m| {
        let err = m.test_error.map(|e| format!(" test_error={e:.4}")).unwrap_or_default();
        eprintln!(
            "cycle {:>4} lr={:.3e} beta1={} loss={:.5}{err} [{:.0}s]",
            m.cycle,
            m.lr,
            m.beta1,
            m.loss.total,
            start.elapsed().as_secs_f64()
        );
        rows.push(m.clone());
        if let Err(e) = write_metrics(&out, &rows) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_metrics(&out, &outcome.metrics)?;
    outcome.prime.save(&out.join("prime.ckpt"))?;
    outcome.averaged.save(&out.join("averaged.ckpt"))?;
    let summary = json!({
        "final_error_prime": outcome.error_prime,
        "final_error_averaged": outcome.error_averaged,
        "seed": cfg.seed,
        "config": serde_json::to_value(&cfg)?,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("final_error_prime {}", outcome.error_prime);
    println!("final_error_averaged {}", outcome.error_averaged);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Network::load_checkpoint(path)?)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let net = load_checkpoint(&args.checkpoint)?;
    let cfg = resolve(&args.cfg)?;
    cfg.validate().map_err(invalid_config)?;
    let (_, test) = cfg.dataset.load(&args.cfg.data_root).context("loading dataset")?;
    let error = evaluate(&net, &test)?;
    println!(
        "{}",
        json!({ "checkpoint": args.checkpoint, "n_test": test.len(), "error_rate": error })
    );
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let net = load_checkpoint(&args.checkpoint)?;
    let cfg = resolve(&args.cfg)?;
    cfg.validate().map_err(invalid_config)?;
    let hp = &cfg.hp;
    let inputs: Vec<(String, Tensor)> = if args.images.is_empty() {
        let (_, test) = cfg.dataset.load(&args.cfg.data_root).context("loading dataset")?;
        let end = args.start.checked_add(args.count).filter(|&e| e <= test.len());
        let end = end.ok_or_else(|| usage(format!("test set has {} images", test.len())))?;
        (args.start..end).map(|i| (format!("test{i:05}"), test[i].image.clone())).collect()
    } else {
        let mut v = Vec::new();
        for p in &args.images {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            v.push((stem, ppm::decode(&bytes, p)?));
        }
        v
    };
    fs::create_dir_all(&args.out)?;
    for (name, u) in &inputs {
        let f = de_fields(&net, &Tensor::stack(std::slice::from_ref(u))?, hp.a, &ForwardOpts::EVAL)?;
        let probs = f.probs.data().to_vec();
        let field = &f.fields[0];
        let part = roi_partition(field, hp.m_roi, hp.lambda_rate)?;
        let augmented = match args.which {
            Which::Gvat => gvat(u, field, hp.eps),
            Which::Gccb => gccb(u, field, hp.m_ccb, hp.mag_cont, hp.mag_bri)?,
            Which::Groi => groi(u, &part, hp.m_roi, hp.zeta_groi)?,
        };
        ppm::write(&args.out.join(format!("{name}_input.ppm")), u)?;
        ppm::write(&args.out.join(format!("{name}_{}.ppm", args.which)), &augmented)?;
        let sidecar = json!({
            "which": args.which.to_string(),
            "probs": probs,
            "de": degenerated_entropy(&probs, hp.a)?,
            "d_rel": reliability(&probs, hp.reliability)?.value,
            "residual_mass": residual_mass(&probs, hp.a)?,
            "omega_low_len": part.omega_low.len(),
            "omega_low": part.omega_low,
            "field_l1": field.l1_norm,
        });
        fs::write(
            args.out.join(format!("{name}_{}.json", args.which)),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
    }
    println!("wrote {} image pairs to {}", inputs.len(), args.out.display());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let faults = Faults {
        broken_ccb_sign: matches!(args.inject_fault, Some(Fault::CcbSign)),
    };
    let sizes = if args.quick { SuiteSizes::quick() } else { SuiteSizes::default() };
    let start = Instant::now();
    let outcomes = run_suite(sizes, faults);
    let mut ok = true;
    for c in &outcomes {
        println!("{}", c.line());
        ok &= c.passed;
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} checks passed in {:.1}s",
        outcomes.len() - failed,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MIXGDA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("MIXGDA_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a).map(|()| true),
        Command::Eval(a) => cmd_eval(a).map(|()| true),
        Command::Augment(a) => cmd_augment(a).map(|()| true),
        Command::Verify(a) => cmd_verify(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
