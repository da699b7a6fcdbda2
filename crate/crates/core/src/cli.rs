//! The `affectfuse` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data, format or config error,
//! 3 numerical or training failure. Arguments, configs and inputs are all
//! checked before anything is written, and files are replaced atomically.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{short_hash, RunConfig};
use crate::container::write_atomic;
use crate::data::{generate_dataset, load_dataset, save_dataset, EmotionDataset, MissingMode, Split};
use crate::error::{Error, Result};
use crate::harness::{
    check_fixed_point, check_gradients, check_lipschitz, confidence_trace, grad_check_config, masked_split,
    missing_rate_sweep, output_name, run_ablation_with, trace_to_csv,
};
use crate::model::Variant;
use crate::rng::stream;
use crate::train::{evaluate, load_checkpoint, save_checkpoint, train_with, Checkpoint, MetricsRecord};

pub const THREADS_ENV: &str = "AFFECTFUSE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "affectfuse", version, about = "Multimodal emotion recognition on synthetic sessions")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads; 1 is the serial reference mode. Falls back to
    /// AFFECTFUSE_THREADS, then to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and epoch log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::AtMostOne)]
        mode: ModeArg,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Paired missing-modality sweep over several checkpoints.
    SweepMissing {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(long, value_enum, default_value_t = ModeArg::AtMostOne)]
        mode: ModeArg,
        /// Root of the mask streams; the same seed gives the same masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Per-step fusion weights of one session.
    TraceConfidence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        session: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train every variant per seed and tabulate test metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Numerical checks of the gradient, Lipschitz and fixed-point claims.
    CheckTheory(CheckArgs),
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(value_enum)]
    pub check: Check,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Lipschitz only: checkpoint to probe instead of a fresh model.
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    /// Lipschitz only: dataset whose first test session is probed.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Check {
    Grad,
    Lipschitz,
    FixedPoint,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    AtMostOne,
    Independent,
}

impl From<ModeArg> for MissingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AtMostOne => MissingMode::AtMostOne,
            ModeArg::Independent => MissingMode::Independent,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to `out` and `err`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            return 1;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command, out, err)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// `--threads`, else the environment variable, else 0 (rayon's default).
fn thread_count(flag: Option<usize>) -> std::result::Result<usize, String> {
    if let Some(n) = flag {
        return if n == 0 { Err("--threads must be at least 1".into()) } else { Ok(n) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
        },
        Err(_) => Ok(0),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Model section of `cfg` checked against the dataset it will be fit to.
fn check_model_fits(cfg: &RunConfig, ds: &EmotionDataset) -> Result<()> {
    if cfg.model.raw_dims != ds.config.raw_dims {
        return Err(Error::config(
            "model.raw_dims",
            format!("{:?} does not match the data's {:?}", cfg.model.raw_dims, ds.config.raw_dims),
        ));
    }
    if cfg.model.t_max < ds.config.steps {
        return Err(Error::config(
            "model.t_max",
            format!("{} is shorter than the data's {} steps", cfg.model.t_max, ds.config.steps),
        ));
    }
    Ok(())
}

fn check_fingerprint(c: &Checkpoint, ds: &EmotionDataset, path: &Path) -> Result<()> {
    if c.data_fingerprint != ds.fingerprint {
        return Err(Error::Protocol(format!(
            "{} was trained on data {}, given data is {}",
            path.display(),
            c.data_fingerprint,
            ds.fingerprint
        )));
    }
    Ok(())
}

pub const METRICS_HEADER: [&str; 16] = [
    "split", "accuracy", "macro_f1", "f1_0", "f1_1", "f1_2", "f1_3", "loss_total", "loss_ce", "loss_kl",
    "steps", "missing_rate", "mode", "variant", "config_hash", "seed",
];

fn metrics_csv(m: &MetricsRecord, rate: f64, mode: MissingMode, c: &Checkpoint) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(crate::train::csv_err)?;
    let mut row = vec!["test".to_string(), m.accuracy.to_string(), m.macro_f1.to_string()];
    row.extend((0..4).map(|k| m.per_class_f1.get(k).map_or(String::new(), |v| v.to_string())));
    row.extend([
        m.loss_total.to_string(),
        m.loss_ce.to_string(),
        m.loss_kl.to_string(),
        m.steps.to_string(),
        rate.to_string(),
        mode.as_str().to_string(),
        c.model.config.variant.to_string(),
        c.config_hash.clone(),
        c.seed.to_string(),
    ]);
    w.write_record(&row).map_err(crate::train::csv_err)?;
    let bytes = w.into_inner().map_err(|e| crate::train::csv_err(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn dispatch(cmd: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    match cmd {
        Command::GenerateData { config, out: path } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate_dataset(&cfg.generator)?;
            save_dataset(&ds, &path)?;
            writeln!(out, "wrote {} (fingerprint {})", path.display(), ds.fingerprint)?;
            for s in [Split::Train, Split::Val, Split::Test] {
                let shares: Vec<String> = ds.class_shares(s).iter().map(|v| format!("{v:.3}")).collect();
                writeln!(out, "{}: {} sessions, class shares {}", s.as_str(), ds.split(s).len(), shares.join(" "))?;
            }
            for w in ds.integrity_warnings() {
                writeln!(err, "warning: {w}")?;
            }
            Ok(0)
        }

        Command::Train { config, data, out: dir } => {
            let cfg = load_config(config.as_deref())?;
            require_dir(&dir)?;
            let ds = load_dataset(&data)?;
            check_model_fits(&cfg, &ds)?;
            let hash = cfg.hash();
            let seed = cfg.train.seed;
            let outcome = train_with(&cfg.model, &cfg.train, &ds.train, &ds.val, &mut |r| {
                let _ = writeln!(
                    err,
                    "epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  acc {:.4}  f1 {:.4}",
                    r.epoch, r.lr, r.train_total, r.val_total, r.val_acc, r.val_macro_f1
                );
            })?;
            let ckpt = Checkpoint {
                model: outcome.model,
                seed,
                config_hash: hash.clone(),
                data_fingerprint: ds.fingerprint.clone(),
                best_epoch: outcome.best_epoch,
                best_val_macro_f1: outcome.best_val_macro_f1,
            };
            let log = dir.join(output_name("train", &hash, seed));
            write_text(&log, &outcome.history.to_csv(&hash, seed)?)?;
            let ckpt_path = dir.join(format!("model_{hash}_{seed}.afus"));
            save_checkpoint(&ckpt, &ckpt_path)?;
            writeln!(
                out,
                "best epoch {} val macro-F1 {:.4}\nwrote {}\nwrote {}",
                ckpt.best_epoch,
                ckpt.best_val_macro_f1,
                ckpt_path.display(),
                log.display()
            )?;
            Ok(0)
        }

        Command::Eval { model, data, missing_rate, mode, out: dir } => {
            if !(0.0..=1.0).contains(&missing_rate) {
                return Err(Error::config("--missing-rate", format!("{missing_rate} outside [0, 1]")));
            }
            require_dir(&dir)?;
            let c = load_checkpoint(&model)?;
            let ds = load_dataset(&data)?;
            check_fingerprint(&c, &ds, &model)?;
            let mode = MissingMode::from(mode);
            let split = masked_split(&ds.test, missing_rate, mode, c.seed)?;
            let loss_cfg = crate::train::TrainConfig::default().loss_config(c.model.config.variant);
            let m = evaluate(&c.model, &split, loss_cfg)?;
            let path = dir.join(output_name("eval", &c.config_hash, c.seed));
            write_text(&path, &metrics_csv(&m, missing_rate, mode, &c)?)?;
            writeln!(out, "accuracy {:.4}  macro-F1 {:.4}  steps {}", m.accuracy, m.macro_f1, m.steps)?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(0)
        }

        Command::SweepMissing { models, data, rates, mode, seed, out: dir } => {
            require_dir(&dir)?;
            let ds = load_dataset(&data)?;
            let mut named = Vec::new();
            for p in &models {
                let c = load_checkpoint(p)?;
                let stem = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
                named.push((format!("{}:{stem}", c.model.config.variant), c));
            }
            let res = missing_rate_sweep(&named, &ds.test, &ds.fingerprint, &rates, mode.into(), seed)?;
            let hash = short_hash(&res.config_hashes.join(","));
            let csv_path = dir.join(output_name("sweep", &hash, seed));
            let json_path = csv_path.with_extension("json");
            write_text(&csv_path, &res.to_csv()?)?;
            write_text(&json_path, &to_json(&res)?)?;
            for name in &res.models {
                let accs: Vec<String> = res
                    .rates
                    .iter()
                    .map(|&r| format!("{:.4}", res.cell(name, r).unwrap().accuracy))
                    .collect();
                writeln!(out, "{name}: {}", accs.join(" "))?;
            }
            writeln!(out, "wrote {}", csv_path.display())?;
            Ok(0)
        }

        Command::TraceConfidence { model, data, session, out: dir } => {
            require_dir(&dir)?;
            let c = load_checkpoint(&model)?;
            let ds = load_dataset(&data)?;
            check_fingerprint(&c, &ds, &model)?;
            let s = [Split::Train, Split::Val, Split::Test]
                .iter()
                .flat_map(|&sp| ds.split(sp))
                .find(|s| s.id == session)
                .ok_or_else(|| Error::Protocol(format!("no session with id {session}")))?;
            let rows = confidence_trace(&c.model, s)?;
            let path = dir.join(output_name(&format!("trace-{session}"), &c.config_hash, c.seed));
            write_text(&path, &trace_to_csv(session, &rows, c.model.config.variant, &c.config_hash, c.seed)?)?;
            writeln!(out, "wrote {} ({} steps)", path.display(), rows.len())?;
            Ok(0)
        }

        Command::Ablate { config, data, seeds, out: dir } => {
            let cfg = load_config(config.as_deref())?;
            require_dir(&dir)?;
            let ds = load_dataset(&data)?;
            check_model_fits(&cfg, &ds)?;
            let hash = cfg.hash();
            let table = run_ablation_with(&Variant::ALL, &ds, &cfg.model, &cfg.train, &seeds, &hash, &mut |c| {
                let _ = writeln!(
                    err,
                    "{} seed {}: accuracy {:.4} macro-F1 {:.4}",
                    c.variant, c.seed, c.test.accuracy, c.test.macro_f1
                );
            })?;
            let tag: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
            let csv_path = dir.join(format!("ablation_{hash}_{}.csv", tag.join("-")));
            write_text(&csv_path, &table.to_csv()?)?;
            write_text(&csv_path.with_extension("json"), &table.summary_json()?)?;
            write!(out, "{}", table.to_markdown())?;
            writeln!(out, "wrote {}", csv_path.display())?;
            Ok(0)
        }

        Command::CheckTheory(args) => check_theory(args, out),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn verdict(out: &mut (dyn Write + Send), passed: bool) -> Result<i32> {
    writeln!(out, "{}", if passed { "PASS" } else { "FAIL" })?;
    Ok(if passed { 0 } else { 3 })
}

fn check_theory(args: CheckArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = cfg.train.seed;
    match args.check {
        Check::Grad => {
            let rep = check_gradients(&grad_check_config(), 3, 2, seed)?;
            for b in &rep.blocks {
                writeln!(out, "{:<48} {:.3e}", b.name, b.max_rel_err)?;
            }
            writeln!(out, "max relative error {:.3e} (tol {:.0e}, step {:.0e})", rep.max_rel_err(), rep.tol, rep.step)?;
            verdict(out, rep.passed())
        }
        Check::FixedPoint => {
            let rep = check_fixed_point(&cfg.model, &cfg.harness, seed)?;
            writeln!(out, "{}", to_json(&rep)?)?;
            verdict(out, rep.passed)
        }
        Check::Lipschitz => {
            let (model, ds) = match (&args.model, &args.data) {
                (Some(m), Some(d)) => {
                    let c = load_checkpoint(m)?;
                    let ds = load_dataset(d)?;
                    check_fingerprint(&c, &ds, m)?;
                    (c.model, ds)
                }
                _ => {
                    let small = crate::data::GeneratorConfig {
                        train_sessions: 1,
                        val_sessions: 1,
                        test_sessions: 1,
                        ..cfg.generator.clone()
                    };
                    let ds = generate_dataset(&small)?;
                    check_model_fits(&cfg, &ds)?;
                    (crate::model::Model::new(cfg.model.clone(), &mut stream(seed, "init"))?, ds)
                }
            };
            let session = ds.test.first().ok_or_else(|| Error::Protocol("test split is empty".into()))?;
            let rep =
                check_lipschitz(&model, session, cfg.harness.lipschitz_samples, cfg.harness.lipschitz_eps, seed)?;
            for r in &rep.rows {
                let regime = r.zeroed.map_or("all present".to_string(), |z| format!("{z} zeroed"));
                writeln!(out, "{:<7} {:<15} empirical {:.4e}  bound {:.4e}", r.modality, regime, r.empirical, r.bound)?;
            }
            verdict(out, rep.passed)
        }
    }
}
