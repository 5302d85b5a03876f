//! `safeaoc`: run, replay and sweep closed-loop experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use safeaoc_core::harness::{
    diff_csv, load_config, run_experiment, ConfigError, CsvDiff, ExperimentConfig, RunError, RunOutput,
};
use safeaoc_core::harness::config::{parse_override, to_toml};

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 2;
const EXIT_FAULT: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

const TRAJECTORY: &str = "trajectory.csv";
const SUMMARY: &str = "summary.json";
const RESOLVED: &str = "config.resolved.toml";

#[derive(Parser)]
#[command(name = "safeaoc", version, about = "Safe output-feedback adaptive optimal control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment document; benchmark defaults fill anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Safety filter mode: robust_cbf, plain_cbf or no_cbf.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Dotted-path override, e.g. `safety.eps=0.35`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a previous experiment and compare trajectories bit for bit.
    Replay {
        /// Directory written by `run`.
        dir: PathBuf,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dotted config key to vary.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Run the sub-experiments on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Resolve and check a configuration, printing the result.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Robust runs of both benchmarks with default parameters.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SAFEAOC_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn collect_overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for raw in &args.overrides {
        out.push(parse_override(raw)?);
    }
    if let Some(mode) = &args.mode {
        out.push(("mode".into(), mode.clone()));
    }
    if let Some(seed) = args.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(d) = args.duration {
        out.push(("duration".into(), format!("{d:?}")));
    }
    Ok(out)
}

fn resolve(args: &ConfigArgs, extra: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let text = match &args.config {
        Some(path) => Some(
            fs::read_to_string(path).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let mut overrides = collect_overrides(args)?;
    overrides.extend_from_slice(extra);
    let mut cfg = load_config(text.as_deref(), &overrides)?;
    // weight documents are located relative to the config file
    if let (Some(file), Some(cfg_path)) = (&cfg.observer.weights_file, &args.config) {
        let p = Path::new(file);
        if p.is_relative() {
            let base = cfg_path.parent().unwrap_or(Path::new("."));
            let joined = base.join(p);
            cfg.observer.weights_file = Some(joined.canonicalize().unwrap_or(joined).display().to_string());
        }
    }
    Ok(cfg)
}

fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED), to_toml(cfg))?;
    let file = fs::File::create(dir.join(TRAJECTORY))?;
    out.log.write_csv(std::io::BufWriter::new(file)).map_err(std::io::Error::other)?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(std::io::Error::other)?;
    fs::write(dir.join(SUMMARY), summary)?;
    Ok(())
}

/// Runs and writes artifacts; returns the exit code.
fn run_one(cfg: &ExperimentConfig, dir: &Path) -> (u8, Option<RunOutput>) {
    let out = match run_experiment(cfg) {
        Ok(o) => o,
        Err(RunError::Config(e)) => {
            error!("{e}");
            eprintln!("error: {e}");
            return (EXIT_VALIDATION, None);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return (EXIT_FAULT, None);
        }
    };
    for w in &out.summary.warnings {
        warn!("{w}");
    }
    if let Err(e) = write_artifacts(dir, cfg, &out) {
        eprintln!("error: writing {}: {e}", dir.display());
        return (EXIT_FAULT, Some(out));
    }
    if let Some(f) = &out.summary.fault {
        eprintln!("error: run aborted at t = {}: {}", f.t, f.message);
        return (EXIT_FAULT, Some(out));
    }
    info!("wrote {}", dir.display());
    (EXIT_OK, Some(out))
}

fn print_metrics(label: &str, out: &RunOutput) {
    let m = &out.summary.metrics;
    let mut line = format!(
        "{label}: min h(x) = {:.6}, final |x| = {:.6}, max |x~| (2nd half) = {:.6}",
        m.min_h_x, m.final_x_norm, m.max_xtilde_second_half
    );
    if let Some(c) = m.min_obstacle_clearance {
        line.push_str(&format!(", min clearance = {c:.6}"));
    }
    line.push_str(&format!(", {:.2} s", out.summary.runtime_s));
    println!("{line}");
}

fn cmd_run(args: &ConfigArgs, out: &Path) -> u8 {
    let cfg = match resolve(args, &[]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    let (code, result) = run_one(&cfg, out);
    if let Some(r) = &result {
        print_metrics(cfg.benchmark.as_str(), r);
    }
    code
}

fn cmd_replay(dir: &Path) -> u8 {
    let text = match fs::read_to_string(dir.join(RESOLVED)) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", dir.join(RESOLVED).display());
            return EXIT_VALIDATION;
        }
    };
    let expected = match fs::read(dir.join(TRAJECTORY)) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", dir.join(TRAJECTORY).display());
            return EXIT_VALIDATION;
        }
    };
    let cfg = match load_config(Some(&text), &[]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    let out = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(RunError::Config(e)) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAULT;
        }
    };
    let actual = out.log.to_csv_string();
    match diff_csv(expected.as_slice(), actual.as_bytes()) {
        Ok(CsvDiff::Identical) => {
            println!("replay identical: {} rows", out.log.len());
            EXIT_OK
        }
        Ok(CsvDiff::Header) => {
            eprintln!("replay mismatch: header differs");
            EXIT_MISMATCH
        }
        Ok(CsvDiff::Row { index, column }) => {
            eprintln!("replay mismatch: first divergent row {index} (column {column})");
            EXIT_MISMATCH
        }
        Ok(CsvDiff::Length { index }) => {
            eprintln!("replay mismatch: first divergent row {index} (row count differs)");
            EXIT_MISMATCH
        }
        Err(e) => {
            eprintln!("replay mismatch: stored trajectory unreadable: {e}");
            EXIT_MISMATCH
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_sweep(args: &ConfigArgs, out: &Path, key: &str, values: &str, parallel: bool) -> u8 {
    let mut values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        eprintln!("error: sweep needs at least one value");
        return EXIT_VALIDATION;
    }
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        values = pairs.into_iter().map(|p| p.1).collect();
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in &values {
        match resolve(args, &[(key.to_string(), v.clone())]) {
            Ok(c) => configs.push(c),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_VALIDATION;
            }
        }
    }
    let dirs: Vec<PathBuf> = values.iter().map(|v| out.join(format!("{}={}", sanitize(key), sanitize(v)))).collect();
    let results: Vec<(u8, Option<RunOutput>)> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().zip(&dirs).map(|(c, d)| s.spawn(move || run_one(c, d))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or((EXIT_FAULT, None))).collect()
        })
    } else {
        configs.iter().zip(&dirs).map(|(c, d)| run_one(c, d)).collect()
    };
    if let Err(e) = write_comparison(out, key, &values, &results) {
        eprintln!("error: writing comparison: {e}");
        return EXIT_FAULT;
    }
    for (v, (_, r)) in values.iter().zip(&results) {
        if let Some(r) = r {
            print_metrics(&format!("{key}={v}"), r);
        }
    }
    if results.iter().any(|(code, _)| *code != EXIT_OK) {
        EXIT_FAULT
    } else {
        EXIT_OK
    }
}

fn write_comparison(out: &Path, key: &str, values: &[String], results: &[(u8, Option<RunOutput>)]) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv")).map_err(std::io::Error::other)?;
    let header = [
        key,
        "status",
        "min_h_x",
        "min_h_xhat",
        "min_obstacle_clearance",
        "final_xtilde_norm",
        "max_xtilde_second_half",
        "final_x_norm",
    ];
    w.write_record(header).map_err(std::io::Error::other)?;
    let f = |v: f64| format!("{v:.16e}");
    for (v, (code, r)) in values.iter().zip(results) {
        let mut row = vec![v.clone()];
        match r {
            Some(r) => {
                let m = &r.summary.metrics;
                row.push(if *code == EXIT_OK { "ok".into() } else { "fault".into() });
                row.extend([
                    f(m.min_h_x),
                    f(m.min_h_xhat),
                    m.min_obstacle_clearance.map(f).unwrap_or_default(),
                    f(m.final_xtilde_norm),
                    f(m.max_xtilde_second_half),
                    f(m.final_x_norm),
                ]);
            }
            None => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        w.write_record(&row).map_err(std::io::Error::other)?;
    }
    w.flush()
}

fn cmd_validate(args: &ConfigArgs) -> u8 {
    match resolve(args, &[]) {
        Ok(cfg) => {
            match cfg.validate() {
                Ok(warnings) => {
                    for w in warnings {
                        eprintln!("warning: {w}");
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_VALIDATION;
                }
            }
            print!("{}", to_toml(&cfg));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
    }
}

fn cmd_demo(out: &Path, duration: Option<f64>) -> u8 {
    let mut worst = EXIT_OK;
    for bench in ["convex_set", "obstacle"] {
        let args = ConfigArgs {
            config: None,
            mode: None,
            seed: None,
            duration,
            overrides: vec![format!("benchmark={bench}")],
        };
        let cfg = match resolve(&args, &[]) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_VALIDATION;
            }
        };
        let (code, r) = run_one(&cfg, &out.join(bench));
        if let Some(r) = &r {
            print_metrics(bench, r);
        }
        worst = worst.max(code);
    }
    worst
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    let code = match &cli.command {
        Command::Run { cfg, out } => cmd_run(cfg, out),
        Command::Replay { dir } => cmd_replay(dir),
        Command::Sweep { cfg, out, key, values, parallel } => cmd_sweep(cfg, out, key, values, *parallel),
        Command::ValidateConfig { cfg } => cmd_validate(cfg),
        Command::Demo { out, duration } => cmd_demo(out, *duration),
    };
    ExitCode::from(code)
}
