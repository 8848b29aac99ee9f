//! Command-line front end: train models, draw samples, score them against
//! fresh data, and run the analytic verification checks on a checkpoint.
//!
//! Every failure prints a single `error: <class>: <detail>` line on stderr
//! and exits with the class's code (see `--help`), so sweep scripts can
//! dispatch on `$?` without scraping output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowlab::arr::Arr;
use flowlab::checkpoint::{self, Checkpoint};
use flowlab::config::TrainConfig;
use flowlab::data::{energy_distance, sliced_wasserstein, GmmSpec};
use flowlab::sample::{generate, gmm_velocity, EDGE};
use flowlab::train::{self, TrainError};
use flowlab::verify::{
    boundary_check, global_error_check, ode_error_check, residual_probe_grid, residual_report,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const EXIT_HELP: &str = "Exit codes:
  0  success (for `verify`: every check passed)
  1  a verification check failed
  2  bad usage: unknown flag or malformed invocation
  3  missing or unreadable file
  4  invalid configuration, request, or sampling setup
  5  malformed or tampered checkpoint
  6  training aborted

Samples, scores, and checks all use the checkpoint's EMA weights.";

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Desk-scale lab for one-step flow models", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file, writing checkpoints and a metrics log
    Train {
        /// Path to a `key = value` config file
        config: PathBuf,
    },
    /// Draw few-step samples from a checkpoint into a CSV file
    Sample {
        ckpt: PathBuf,
        /// Number of solution-map applications per sample
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        /// Number of samples to draw
        #[arg(long, default_value_t = 4096)]
        count: usize,
        /// Class label to condition on; omitted means unconditional
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path (columns x0..x{d-1},label,seed,nfe)
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoint samples against fresh draws from a preset
    Eval {
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Energy)]
        metric: Metric,
        /// Data preset supplying the fresh comparison samples
        #[arg(long)]
        against: String,
        #[arg(long, default_value_t = 4096)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run analytic verification checks against a checkpoint
    Verify {
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Check::All)]
        check: Check,
        /// Probes per check (trajectories for global-bound)
        #[arg(long, default_value_t = 1024)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for per-probe CSV reports, one file per check
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    /// Squared energy distance
    Energy,
    /// Sliced Wasserstein over 512 projections
    Sw,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Check {
    Boundary,
    Residual,
    GlobalBound,
    OdeError,
    All,
}

// ─── Error-to-exit-code mapping ──────────────────────────────────────────

enum CliError {
    CheckFailed,
    Io(String),
    Request(String),
    Ckpt(String),
    Train(String),
}

impl CliError {
    fn report(&self) -> Option<(&'static str, &str)> {
        match self {
            // `verify` already printed its FAIL lines.
            CliError::CheckFailed => None,
            CliError::Io(d) => Some(("io", d)),
            CliError::Request(d) => Some(("invalid request", d)),
            CliError::Ckpt(d) => Some(("bad checkpoint", d)),
            CliError::Train(d) => Some(("training aborted", d)),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed => 1,
            CliError::Io(_) => 3,
            CliError::Request(_) => 4,
            CliError::Ckpt(_) => 5,
            CliError::Train(_) => 6,
        }
    }
}

fn oneline(s: String) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        match e {
            checkpoint::CheckpointError::Io(io) => CliError::Io(oneline(io.to_string())),
            other => CliError::Ckpt(oneline(other.to_string())),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(io) => CliError::Io(oneline(io.to_string())),
            TrainError::Checkpoint(c) => CliError::from(c),
            other => CliError::Train(oneline(other.to_string())),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some((class, detail)) = e.report() {
                eprintln!("error: {class}: {detail}");
            }
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Sample { ckpt, nfe, count, label, seed, out } => {
            cmd_sample(&ckpt, nfe, count, label, seed, &out)
        }
        Cmd::Eval { ckpt, metric, against, count, nfe, seed } => {
            cmd_eval(&ckpt, metric, &against, count, nfe, seed)
        }
        Cmd::Verify { ckpt, check, count, seed, report_dir } => {
            cmd_verify(&ckpt, check, count, seed, report_dir.as_deref())
        }
    }
}

// ─── Subcommands ─────────────────────────────────────────────────────────

fn cmd_train(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg = TrainConfig::parse(&text)
        .map_err(|e| CliError::Request(oneline(format!("{}: {e}", path.display()))))?;
    let ck = train::train(&cfg)?;
    println!(
        "trained {} steps; final checkpoint {}; metrics {}",
        ck.step,
        train::final_checkpoint_path(&cfg.checkpoint_dir).display(),
        cfg.log_path
    );
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    checkpoint::load(path).map_err(|e| match e {
        checkpoint::CheckpointError::Io(io) => {
            CliError::Io(format!("{}: {io}", path.display()))
        }
        other => CliError::Ckpt(oneline(format!("{}: {other}", path.display()))),
    })
}

/// `nfe` jumps of equal time length from 1 to 0.
fn uniform_grid(nfe: usize) -> Vec<f64> {
    (0..=nfe).map(|k| 1.0 - k as f64 / nfe as f64).collect()
}

fn cmd_sample(
    ckpt: &Path,
    nfe: usize,
    count: usize,
    label: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    if nfe == 0 {
        return Err(CliError::Request("nfe must be at least 1".into()));
    }
    if count == 0 {
        return Err(CliError::Request("count must be at least 1".into()));
    }
    let ck = load(ckpt)?;
    let gmm = ck.config.gmm();
    let lab = match label {
        Some(l) if l >= gmm.num_classes() => {
            return Err(CliError::Request(format!(
                "label {l} out of range for {} ({} classes)",
                ck.config.preset,
                gmm.num_classes()
            )));
        }
        Some(l) => l,
        None => gmm.num_classes(),
    };
    let labels = vec![lab; count];
    let xs = generate(
        &ck.ema.params,
        ck.config.parameterization,
        ck.config.schedule,
        &uniform_grid(nfe),
        &labels,
        seed,
    )
    .map_err(|e| CliError::Request(oneline(e.to_string())))?;

    let (n, d) = xs.dims();
    let mut csv = String::new();
    for j in 0..d {
        let _ = write!(csv, "x{j},");
    }
    csv.push_str("label,seed,nfe\n");
    for i in 0..n {
        for v in xs.row(i) {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(csv, "{lab},{seed},{nfe}");
    }
    std::fs::write(out, csv).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    metric: Metric,
    against: &str,
    count: usize,
    nfe: usize,
    seed: u64,
) -> Result<(), CliError> {
    if nfe == 0 || count == 0 {
        return Err(CliError::Request("count and nfe must be at least 1".into()));
    }
    let ck = load(ckpt)?;
    let gmm = GmmSpec::preset(against).ok_or_else(|| {
        CliError::Request(format!(
            "unknown preset {against:?}; expected one of {:?}",
            GmmSpec::preset_names()
        ))
    })?;
    if gmm.dim != ck.config.data_dim {
        return Err(CliError::Request(format!(
            "preset {against} has dimension {}, checkpoint was trained at {}",
            gmm.dim, ck.config.data_dim
        )));
    }
    let labels = vec![ck.config.gmm().num_classes(); count];
    let xs = generate(
        &ck.ema.params,
        ck.config.parameterization,
        ck.config.schedule,
        &uniform_grid(nfe),
        &labels,
        seed,
    )
    .map_err(|e| CliError::Request(oneline(e.to_string())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66726573685f6461);
    let (fresh, _) = gmm.sample(count, &mut rng);
    let value = match metric {
        Metric::Energy => energy_distance(&xs, &fresh),
        Metric::Sw => sliced_wasserstein(&xs, &fresh, 512, seed),
    };
    let name = match metric {
        Metric::Energy => "energy",
        Metric::Sw => "sw",
    };
    println!("{name} {value:.6} (count {count}, nfe {nfe}, against {against})");
    Ok(())
}

// ─── Verification checks ─────────────────────────────────────────────────

struct CheckOutcome {
    name: &'static str,
    pass: bool,
    detail: String,
    report: Option<(String, String)>,
}

fn cmd_verify(
    ckpt: &Path,
    which: Check,
    count: usize,
    seed: u64,
    report_dir: Option<&Path>,
) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Request("count must be at least 1".into()));
    }
    let ck = load(ckpt)?;
    let cfg = &ck.config;
    let gmm = cfg.gmm();
    let params = &ck.ema.params;
    let sol = cfg.parameterization;
    let wants = |c: Check| which == c || which == Check::All;

    let mut outcomes: Vec<CheckOutcome> = Vec::new();

    if wants(Check::Boundary) {
        let (x, t) = boundary_probes(&gmm, cfg, count, seed);
        let labels = mixed_labels(&gmm, count);
        let out = match boundary_check(params, sol, &x, &t, &labels) {
            Ok(worst) => CheckOutcome {
                name: "boundary",
                pass: worst <= 1e-12,
                detail: format!("max deviation {worst:.3e} (tolerance 1e-12)"),
                report: None,
            },
            Err(e) => fail("boundary", e.to_string()),
        };
        outcomes.push(out);
    }

    let (px, pt, ps) = residual_probe_grid(&gmm, cfg.schedule, count, seed);
    let plabels = vec![gmm.num_classes(); count];
    let mut field =
        |x: &[f64], t: f64| gmm_velocity(&gmm, cfg.schedule, x, t.clamp(EDGE, 1.0 - EDGE)).unwrap();

    if wants(Check::Residual) {
        let out = match residual_report(params, sol, &mut field, &px, &pt, &ps, &plabels, 1e-3) {
            Ok(rep) => CheckOutcome {
                name: "residual",
                pass: true,
                detail: format!("median {:.5}, max {:.5} over {count} probes", rep.median, rep.max),
                report: Some((
                    "residual.csv".into(),
                    csv_columns(&[("t", &rep.t), ("s", &rep.s), ("norm", &rep.norms)]),
                )),
            },
            Err(e) => fail("residual", e.to_string()),
        };
        outcomes.push(out);
    }

    if wants(Check::GlobalBound) {
        let trajectories = count.min(1024);
        let out = match global_error_check(
            params,
            sol,
            &gmm,
            cfg.schedule,
            gmm.num_classes(),
            trajectories,
            200,
            16,
            3.0,
            1e-3,
            seed,
        ) {
            Ok(rep) => CheckOutcome {
                name: "global-bound",
                pass: rep.fraction_ok >= 0.95,
                detail: format!(
                    "{:.1}% of {trajectories} trajectories within {}x their residual bound",
                    100.0 * rep.fraction_ok,
                    rep.slack
                ),
                report: Some((
                    "global_bound.csv".into(),
                    csv_columns(&[("error", &rep.errors), ("delta_hat", &rep.delta_hats)]),
                )),
            },
            Err(e) => fail("global-bound", e.to_string()),
        };
        outcomes.push(out);
    }

    if wants(Check::OdeError) {
        let out = match ode_error_check(params, sol, &gmm, cfg.schedule, gmm.num_classes(), &px, &pt, &ps, 1e-3)
        {
            Ok(rep) => CheckOutcome {
                name: "ode-error",
                pass: true,
                detail: format!(
                    "median {:.5}, residual bound {:.5}, median/sqrt(bound) {:.3}",
                    rep.median, rep.delta_hat, rep.ratio_median_to_sqrt_delta
                ),
                report: Some(("ode_error.csv".into(), csv_columns(&[("norm", &rep.norms)]))),
            },
            Err(e) => fail("ode-error", e.to_string()),
        };
        outcomes.push(out);
    }

    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for o in &outcomes {
            if let Some((file, body)) = &o.report {
                let path = dir.join(file);
                std::fs::write(&path, body)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
        }
    }

    let mut all_pass = true;
    for o in &outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{}: {verdict} {}", o.name, o.detail);
        all_pass &= o.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed)
    }
}

fn fail(name: &'static str, detail: String) -> CheckOutcome {
    CheckOutcome { name, pass: false, detail: oneline(detail), report: None }
}

/// Marginal draws x_t at interior times for the boundary identity.
fn boundary_probes(gmm: &GmmSpec, cfg: &TrainConfig, count: usize, seed: u64) -> (Arr, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x626f756e64);
    let mut t = Vec::with_capacity(count);
    let x = Arr::from_rows(count, gmm.dim, |_, row| {
        let ti = EDGE + (1.0 - 2.0 * EDGE) * rng.gen::<f64>();
        t.push(ti);
        let (x0, _) = gmm.sample_one(&mut rng);
        let a = cfg.schedule.alpha(ti);
        let b = cfg.schedule.beta(ti);
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = a * x0[j] + b * z;
        }
    });
    (x, t)
}

/// Cycle through every class plus the unconditional slot.
fn mixed_labels(gmm: &GmmSpec, count: usize) -> Vec<usize> {
    (0..count).map(|i| i % (gmm.num_classes() + 1)).collect()
}

fn csv_columns(cols: &[(&str, &[f64])]) -> String {
    let mut out = String::new();
    out.push_str(&cols.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(","));
    out.push('\n');
    let rows = cols.first().map_or(0, |(_, v)| v.len());
    for i in 0..rows {
        let line = cols.iter().map(|(_, v)| format!("{}", v[i])).collect::<Vec<_>>().join(",");
        out.push_str(&line);
        out.push('\n');
    }
    out
}
