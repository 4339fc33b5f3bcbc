use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lll_core::gradcheck::{self, GradcheckOptions, Target};
use lll_core::metrics_report::{analyze, emit_report, format_table, read_run};
use lll_core::sweep::{run_sweep, SweepRow, SweepSpec};
use lll_core::trainer::{train, Config};
use lll_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Long-tailed classification losses: gradient checks, training runs,
/// sweeps and reports.
#[derive(Debug, Parser)]
#[command(name = "lll", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long = "tol", default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these targets (e.g. `paco`, `chain/cibl`).
        #[arg(long = "loss")]
        losses: Vec<String>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train one config and write its report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the config seed and LLL_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default ./runs/<timestamp>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print the resolved config without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run a value × seed grid and aggregate medians per value.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Regenerate report files from a finished run directory.
    Report {
        #[arg(long)]
        log: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalFailure { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn resolve_seed(config_seed: u64, env: Option<&str>, flag: Option<u64>) -> Result<u64, Error> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("LLL_SEED={v:?} is not an unsigned integer"))),
        None => Ok(config_seed),
    }
}

fn default_out_dir() -> PathBuf {
    Path::new("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string())
}

fn cmd_gradcheck(options: GradcheckOptions, losses: &[String]) -> Result<u8, Error> {
    let targets = if losses.is_empty() {
        Target::all()
    } else {
        losses.iter().map(|s| s.parse()).collect::<Result<Vec<Target>, _>>()?
    };
    let report = gradcheck::run_targets(&targets, &options)?;
    print!("{}", report.render());
    if report.passed() {
        println!("gradcheck passed ({} checks)", report.outcomes.len());
        Ok(0)
    } else {
        println!("gradcheck FAILED ({} of {} checks)", report.failures().count(), report.outcomes.len());
        Ok(EXIT_GRADCHECK)
    }
}

fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>, dry_run: bool) -> Result<u8, Error> {
    let mut config = Config::load(config_path)?;
    let env = std::env::var("LLL_SEED").ok();
    config.run.seed = resolve_seed(config.run.seed, env.as_deref(), seed)?;
    let out = out
        .or_else(|| config.run.output_dir.clone())
        .unwrap_or_else(default_out_dir);
    if dry_run {
        print!("{}", config.to_toml_string());
        let (train_set, test_set) = config.datasets()?;
        println!("# train counts: {:?}", train_set.profile.counts());
        println!("# test size: {}", test_set.len());
        println!("# output: {}", out.display());
        return Ok(0);
    }
    let log = train(&config)?;
    let (report, fit) = analyze(&log, config.thresholds())?;
    let summary = emit_report(&log, &report, &fit, &config, &out)?;
    print!("{}", format_table(&[(config.loss.kind.name().to_string(), report)]));
    println!(
        "train acc {:.1}  gap slope {:.4} intercept {:.4}",
        100.0 * summary.train_all,
        summary.slope,
        summary.intercept
    );
    println!("report written to {}", out.display());
    Ok(0)
}

fn sweep_table(parameter: &str, rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
    let mut out = format!(
        "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
        parameter, "Many", "Medium", "Few", "All", "Train", "ok"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            r.value,
            cell(r.many),
            cell(r.medium),
            cell(r.few),
            cell(r.all),
            cell(r.train_all),
            format!("{}/{}", r.succeeded, r.succeeded + r.failed)
        ));
    }
    out
}

fn cmd_sweep(spec_path: &Path, jobs: usize) -> Result<u8, Error> {
    let spec = SweepSpec::load(spec_path)?;
    let result = run_sweep(&spec, jobs)?;
    print!("{}", sweep_table(&spec.parameter, &result.rows));
    for f in result.failures() {
        if let Err(e) = &f.result {
            eprintln!("cell {} seed {} failed: {e}", f.value, f.seed);
        }
    }
    println!("sweep written to {}", spec.output_dir.display());
    Ok(0)
}

fn cmd_report(dir: &Path) -> Result<u8, Error> {
    let record = read_run(dir)?;
    let (report, fit) = analyze(&record.log, record.config.thresholds())?;
    emit_report(&record.log, &report, &fit, &record.config, dir)?;
    print!("{}", format_table(&[(record.config.loss.kind.name().to_string(), report)]));
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gradcheck {
            trials,
            tolerance,
            step,
            seed,
            losses,
            inject_fault,
        } => cmd_gradcheck(
            GradcheckOptions {
                trials,
                step,
                tolerance,
                seed,
                inject_fault,
            },
            &losses,
        ),
        Command::Train {
            config,
            seed,
            out,
            dry_run,
        } => cmd_train(&config, seed, out, dry_run),
        Command::Sweep { spec, jobs } => cmd_sweep(&spec, jobs),
        Command::Report { log } => cmd_report(&log),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(1, None, None).unwrap(), 1);
        assert_eq!(resolve_seed(1, Some("7"), None).unwrap(), 7);
        assert_eq!(resolve_seed(1, Some("7"), Some(9)).unwrap(), 9);
        assert!(resolve_seed(1, Some("x"), None).is_err());
    }

    #[test]
    fn numerical_errors_map_to_exit_2() {
        assert_eq!(exit_code(&Error::NumericalFailure { epoch: 0, batch: 0 }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["lll", "train", "--config", "c.toml", "--seed", "3", "--dry-run"]).unwrap();
        assert!(matches!(cli.command, Command::Train { seed: Some(3), dry_run: true, .. }));
    }
}
