use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use confhit::sim::{Preset, SimulationConfig};
use confhit::ScoreKind;
use confhit_cli::config::{BaselineChoice, Command, DiagnoseMode, DEFAULT_PERMUTATIONS};
use confhit_cli::{config_from_report, execute, exit_code, InputError, RunConfig, WeightSource};

#[derive(Parser)]
#[command(name = "confhit", version, about = "Certify that a batch of generated candidates contains a hit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Calibration CSV (f0..f<d-1>, y, optional mu, optional group)
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Candidate CSV in generation order (f0..f<d-1>, mu, optional input, optional y)
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Monte Carlo permutations per p-value
    #[arg(long, short = 'B', default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    /// Conformity score: max, sum, ranksum or llr
    #[arg(long, default_value = "max", value_parser = parse_score)]
    score: ScoreKind,
    /// uniform, kde, analytic:mu=<list> or file:<path>
    #[arg(long, default_value = "uniform", value_parser = parse_weights)]
    weights: WeightSource,
    /// Drop candidates whose calibration density is below this quantile (0.05 if given without a value)
    #[arg(long, num_args = 0..=1, default_missing_value = "0.05")]
    ood_quantile: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; stdout if absent
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Record wall-clock time in the report (makes reports differ between runs)
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct Level {
    #[arg(long)]
    alpha: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Test whether the whole batch contains at least one hit
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        level: Level,
        /// Exit with code 3 when the batch is not certified
        #[arg(long)]
        strict: bool,
    },
    /// Shortest certified prefix of the batch
    Design {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        level: Level,
        /// Exit with code 3 when no prefix is certified
        #[arg(long)]
        strict: bool,
    },
    /// Comparison methods
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        level: Level,
        #[arg(long, value_enum)]
        method: BaselineChoice,
        /// Hit-rate estimate for the heuristic (default: calibration hit fraction)
        #[arg(long)]
        p_hat: Option<f64>,
    },
    /// Evaluate density-ratio weights for every row
    EstimateWeights {
        #[command(flatten)]
        common: Common,
        /// Also write a source,index,w table usable with --weights file:<path>
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Weight-quality and robustness diagnostics
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: DiagnoseMode,
        /// Exponents for the sensitivity sweep (must include 1)
        #[arg(long, default_value = "0.5,1,2,3", value_delimiter = ',')]
        gamma: Vec<f64>,
        #[arg(long, default_value = "0.05,0.1,0.2,0.3", value_delimiter = ',')]
        alphas: Vec<f64>,
        /// Cutoff for the robustness gap
        #[arg(long, default_value_t = 0.1)]
        t: f64,
        /// Reference weights for the robustness gap
        #[arg(long, value_parser = parse_weights)]
        true_weights: Option<WeightSource>,
        /// Most frequent groups forming the pseudo-test fold (shiftcheck)
        #[arg(long, default_value_t = 1)]
        top_groups: usize,
    },
    /// Split a validation budget across inputs (candidates grouped by the input column)
    Budget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value = "0.05,0.1,0.2,0.3,0.4,0.5", value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Run a synthetic experiment
    Simulate {
        #[arg(long, value_parser = parse_preset, required_unless_present = "config", conflicts_with = "config")]
        preset: Option<Preset>,
        /// TOML or JSON simulation config
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write raw certification p-values as CSV
        #[arg(long)]
        pvalues_csv: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        timings: bool,
    },
    /// Rerun the config embedded in a report
    Replay {
        report: PathBuf,
        /// Where to write the regenerated report; stdout if absent
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn parse_score(s: &str) -> Result<ScoreKind, String> {
    s.parse().map_err(|e: confhit::Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<WeightSource, String> {
    s.parse().map_err(|e: InputError| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown preset '{s}' (null, design, ablation, sensitivity, budget, robustness)"))
}

fn base_config(command: Command, common: Common, alpha: Option<f64>) -> Result<RunConfig> {
    if let Some(q) = common.ood_quantile {
        if !(0.0..1.0).contains(&q) {
            return Err(InputError::usage(format!("--ood-quantile must lie in [0, 1), got {q}")).into());
        }
    }
    Ok(RunConfig {
        alpha,
        permutations: common.permutations,
        score: common.score,
        weights: common.weights,
        ood_quantile: common.ood_quantile,
        seed: common.seed,
        calibration: common.calibration,
        candidates: common.candidates,
        output: common.output,
        timings: common.timings,
        ..RunConfig::new(command)
    })
}

fn load_simulation(path: &Path) -> Result<SimulationConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| InputError::file(&path.display().to_string(), format!("cannot read: {e}")))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| InputError::file(&path.display().to_string(), e).into())
}

fn resolve(cmd: Cmd) -> Result<(RunConfig, Option<PathBuf>)> {
    let cfg = match cmd {
        Cmd::Certify { common, level, strict } => RunConfig {
            strict,
            ..base_config(Command::Certify, common, Some(level.alpha))?
        },
        Cmd::Design { common, level, strict } => RunConfig {
            strict,
            ..base_config(Command::Design, common, Some(level.alpha))?
        },
        Cmd::Baseline {
            common,
            level,
            method,
            p_hat,
        } => base_config(Command::Baseline { method, p_hat }, common, Some(level.alpha))?,
        Cmd::EstimateWeights { common, table } => base_config(Command::EstimateWeights { table }, common, None)?,
        Cmd::Diagnose {
            common,
            mode,
            gamma,
            alphas,
            t,
            true_weights,
            top_groups,
        } => base_config(
                Command::Diagnose {
                    mode,
                    gamma_grid: gamma,
                    alpha_grid: alphas,
                    t,
                    true_weights,
                    top_groups,
                },
                common,
                None,
            )?,
        Cmd::Budget { common, total, alphas } => base_config(
                Command::Budget {
                    total,
                    alpha_grid: alphas,
                },
                common,
                None,
            )?,
        Cmd::Simulate {
            preset,
            config,
            pvalues_csv,
            output,
            timings,
        } => {
            let simulation = match (config, preset) {
                (Some(path), _) => load_simulation(&path)?,
                (None, Some(p)) => SimulationConfig::preset(p),
                (None, None) => return Err(InputError::usage("simulate needs --preset or --config").into()),
            };
            RunConfig {
                output,
                timings,
                ..RunConfig::new(Command::Simulate {
                    simulation,
                    pvalues_csv,
                })
            }
        }
        Cmd::Replay { report, output } => {
            let text = fs::read_to_string(&report)
                .map_err(|e| InputError::file(&report.display().to_string(), format!("cannot read: {e}")))?;
            return Ok((config_from_report(&text)?, output));
        }
    };
    let dest = cfg.output.clone();
    Ok((cfg, dest))
}

fn run(cli: Cli) -> Result<i32> {
    let (cfg, dest) = resolve(cli.command)?;
    let done = execute(&cfg)?;
    match &dest {
        Some(path) => fs::write(path, &done.report).with_context(|| format!("cannot write {}", path.display()))?,
        None => std::io::stdout().write_all(&done.report)?,
    }
    Ok(if cfg.strict && done.not_confident {
        confhit_cli::EXIT_NOT_CONFIDENT
    } else {
        confhit_cli::EXIT_OK
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
