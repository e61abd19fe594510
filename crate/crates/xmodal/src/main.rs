use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use xmodal::ablate::{ablate, invalid_heavy_suite, summarize, SuiteResult};
use xmodal::formats::{
    self, join_run, load_model, load_run_config, load_scenario, read_records, read_track, save_model,
    sequence_path, summarize_run, write_metrics, write_sequence, write_track, SuiteFile,
};
use xmodal::gradcheck::{self, OPS};
use xmodal::harness::{run, MotionMode, RunConfig};
use xmodal::sim::{generate, Model};
use xmodal_core::metrics::{DEFAULT_PR_THRESHOLD, DEFAULT_SR_THRESHOLD};

/// Cross-modal tracking toolkit: synthetic sequences, tracking runs, metrics,
/// ablations and gradient checks.
///
/// Exit codes: 0 success, 1 usage error, 2 data error, 3 property-check failure.
#[derive(Debug, Parser)]
#[command(name = "xmodal", version)]
struct Cli {
    /// Directory holding ctp.json (covariance diagonals, theta, cap, epsilon,
    /// rho, motion, turn_rate). Flags take precedence over the file.
    #[arg(long, global = true, env = "XMODAL_CONFIG_DIR")]
    config_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a sequence (JSON lines plus PPM crops) from a scenario file.
    Simulate {
        scenario: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the observation noise in px.
        #[arg(long, value_parser = non_negative)]
        sigma: Option<f64>,
    },
    /// Track a generated sequence; writes track.json.
    Track {
        /// Sequence file or the directory containing sequence.jsonl.
        sequence: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Weights file; defaults to the fixture classifier with seeded adapter weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
        /// Measurement noise in px; sets every R diagonal entry to sigma².
        #[arg(long, value_parser = positive)]
        sigma: Option<f64>,
        /// Seed for the default adapter weights.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the gated adapter.
        #[arg(long)]
        no_adapter: bool,
    },
    /// Score a track against its sequence; writes metrics.csv and metrics.json.
    Eval {
        track: PathBuf,
        sequence: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Precision threshold in px (CLE strictly below).
        #[arg(long, default_value_t = DEFAULT_PR_THRESHOLD, value_parser = positive)]
        tau_pr: f64,
        /// Success threshold (IoU strictly above).
        #[arg(long, default_value_t = DEFAULT_SR_THRESHOLD, value_parser = unit_interval)]
        tau_sr: f64,
    },
    /// Compare off / kf / ekf / ctp over seeded suites; writes ablation.csv and ablation.json.
    Ablate {
        /// Suite file `{"seeds": [...], "scenarios": [...]}`; without it the
        /// built-in invalid-heavy suites are used.
        suite: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of built-in suites.
        #[arg(long, default_value_t = 50)]
        suites: u64,
        /// First built-in suite seed; also seeds the adapter weights.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Observation noise of the built-in suites in px.
        #[arg(long, default_value_t = 2.0, value_parser = non_negative)]
        sigma: f64,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Check analytic gradients of every differentiable op against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_bug: Option<String>,
    },
    /// Write the default weights to a file.
    ExportWeights {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct Tuning {
    /// Motion component [default: ctp]
    #[arg(long, value_enum)]
    motion: Option<MotionMode>,
    /// White-pixel ratio above which a frame is over-exposed [default: 0.4]
    #[arg(long, value_parser = unit_interval)]
    rho: Option<f64>,
    /// Process-noise growth per consecutive invalid frame [default: 1.5, or ctp.json].
    #[arg(long, value_parser = at_least_one)]
    theta: Option<f64>,
    /// Reliability floor [default: 0.001, or ctp.json].
    #[arg(long, value_parser = reliability_floor)]
    epsilon: Option<f64>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if v >= 0.0 { Ok(v) } else { Err("must be >= 0".into()) })
}

fn positive(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if v > 0.0 { Ok(v) } else { Err("must be > 0".into()) })
}

fn unit_interval(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if (0.0..=1.0).contains(&v) { Ok(v) } else { Err("must be in [0, 1]".into()) })
}

fn at_least_one(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if v >= 1.0 { Ok(v) } else { Err("must be >= 1".into()) })
}

fn reliability_floor(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| if v > 0.0 && v <= 1.0 { Ok(v) } else { Err("must be in (0, 1]".into()) })
}

enum Failure {
    Data(anyhow::Error),
    Property(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<xmodal_core::Error> for Failure {
    fn from(e: xmodal_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn run_config(config_dir: Option<&Path>, t: &Tuning, adapter: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = load_run_config(config_dir)?;
    if let Some(theta) = t.theta {
        cfg.filter.theta = theta;
    }
    if let Some(eps) = t.epsilon {
        cfg.filter.epsilon = eps;
    }
    if let Some(motion) = t.motion {
        cfg.motion = motion;
    }
    if let Some(rho) = t.rho {
        cfg.rho = rho;
    }
    cfg.adapter = adapter;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let config_dir = cli.config_dir.as_deref();
    match cli.command {
        Command::Simulate { scenario, out, seed, sigma } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(sigma) = sigma {
                s.sigma = sigma;
            }
            let seq = generate(&s).map_err(anyhow::Error::from)?;
            let path = write_sequence(&out, &seq)?;
            println!("{} frames -> {}", seq.frames.len(), path.display());
        }
        Command::Track {
            sequence,
            out,
            weights,
            tuning,
            sigma,
            seed,
            no_adapter,
        } => {
            let mut cfg = run_config(config_dir, &tuning, !no_adapter)?;
            if let Some(sigma) = sigma {
                cfg.filter.r_diag = [sigma * sigma; 4];
            }
            let model = match weights {
                Some(path) => load_model(&path)?,
                None => Model::seeded(seed),
            };
            let seq = formats::load_sequence(&sequence)?;
            let output = run(&seq, &model, &cfg)?;
            create_dir(&out)?;
            let path = out.join(formats::TRACK_FILE);
            write_track(&path, &output)?;
            println!("{} frames, motion {} -> {}", output.frames.len(), cfg.motion, path.display());
        }
        Command::Eval {
            track,
            sequence,
            out,
            tau_pr,
            tau_sr,
        } => {
            let output = read_track(&track)?;
            let (scenario, records) = read_records(&sequence_path(&sequence))?;
            let joined = join_run(&output, &records)?;
            let summary = summarize_run(&scenario.name, &joined, tau_pr, tau_sr);
            write_metrics(&out, &summary)?;
            print!("{}", formats::metrics_csv(&summary));
        }
        Command::Ablate {
            suite,
            out,
            suites,
            seed,
            sigma,
            tuning,
        } => {
            let cfg = run_config(config_dir, &tuning, true)?;
            let plan = match suite {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let file: SuiteFile =
                        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                    file.expand()?
                }
                None => (seed..seed + suites).map(|s| (s, invalid_heavy_suite(s, sigma))).collect(),
            };
            let results = ablate(&plan, &Model::seeded(seed), &cfg)?;
            let summary = summarize(&results);
            create_dir(&out)?;
            std::fs::write(out.join("ablation.csv"), ablation_csv(&results))?;
            formats::write_json_file(
                &out.join("ablation.json"),
                &serde_json::json!({ "summary": summary, "suites": results }),
            )?;
            println!("motion      PR      SR");
            for m in &summary.mean {
                println!("{:<6} {:>7.2} {:>7.2}", m.motion, m.pr, m.sr);
            }
            println!(
                "ordered on {:.0}% of {} suites; ctp > off on {:.0}%",
                100.0 * summary.ordered_fraction,
                summary.suites,
                100.0 * summary.ctp_beats_off_fraction
            );
        }
        Command::Gradcheck { seed, out, inject_bug } => {
            if let Some(op) = &inject_bug {
                if !OPS.contains(&op.as_str()) {
                    return Err(Failure::Data(anyhow::anyhow!("unknown op `{op}`")));
                }
            }
            let reports = gradcheck::run_all(seed, inject_bug.as_deref());
            for r in &reports {
                println!("{:<10} {:.3e} {}", r.op, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
            }
            if let Some(dir) = out {
                create_dir(&dir)?;
                formats::write_json_file(&dir.join("gradcheck.json"), &reports)?;
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Property(format!(
                    "gradient check failed for {} (tolerance {:e})",
                    failed.join(", "),
                    gradcheck::TOLERANCE
                )));
            }
        }
        Command::ExportWeights { out, seed } => {
            save_model(&out, &Model::seeded(seed))?;
            println!("weights -> {}", out.display());
        }
    }
    Ok(())
}

fn ablation_csv(results: &[SuiteResult]) -> String {
    let mut s = String::from("seed,motion,PR,SR,N\n");
    for r in results {
        for m in &r.scores {
            s.push_str(&format!("{},{},{:.2},{:.2},{}\n", r.seed, m.motion, m.pr, m.sr, r.frames));
        }
    }
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Property(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
