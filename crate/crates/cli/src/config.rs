//! Resolved run configuration. Every report embeds one, and `replay` reruns
//! a report from it.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use confhit::baselines::BaselineMethod;
use confhit::sim::SimulationConfig;
use confhit::ScoreKind;
use serde::{Deserialize, Serialize};

use crate::error::InputError;

pub const DEFAULT_PERMUTATIONS: usize = confhit::pvalue::DEFAULT_PERMUTATIONS;

/// Where density-ratio weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightSource {
    Uniform,
    Kde,
    Analytic { mu: Vec<f64> },
    File { path: PathBuf },
}

impl FromStr for WeightSource {
    type Err = InputError;

    fn from_str(s: &str) -> Result<Self, InputError> {
        match s {
            "uniform" => return Ok(Self::Uniform),
            "kde" => return Ok(Self::Kde),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("analytic:") {
            let list = rest
                .strip_prefix("mu=")
                .ok_or_else(|| InputError::usage(format!("expected analytic:mu=<comma list>, got '{s}'")))?;
            let mu = parse_list(list).map_err(|e| InputError::usage(format!("weights '{s}': {e}")))?;
            return Ok(Self::Analytic { mu });
        }
        if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(InputError::usage("file: weights need a path"));
            }
            return Ok(Self::File { path: path.into() });
        }
        Err(InputError::usage(format!(
            "unknown weights '{s}' (expected uniform, kde, analytic:mu=<list> or file:<path>)"
        )))
    }
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => f.write_str("uniform"),
            Self::Kde => f.write_str("kde"),
            Self::Analytic { mu } => {
                let parts: Vec<String> = mu.iter().map(|v| crate::format::g17(*v)).collect();
                write!(f, "analytic:mu={}", parts.join(","))
            }
            Self::File { path } => write!(f, "file:{}", path.display()),
        }
    }
}

impl TryFrom<String> for WeightSource {
    type Error = InputError;

    fn try_from(s: String) -> Result<Self, InputError> {
        s.parse()
    }
}

impl From<WeightSource> for String {
    fn from(w: WeightSource) -> String {
        w.to_string()
    }
}

/// Comma-separated reals.
pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("'{p}' is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    Bonferroni,
    Certonly,
    Unweighted,
    Heuristic,
}

impl From<BaselineChoice> for BaselineMethod {
    fn from(c: BaselineChoice) -> Self {
        match c {
            BaselineChoice::Bonferroni => BaselineMethod::Bonferroni,
            BaselineChoice::Certonly => BaselineMethod::CertificationOnly,
            BaselineChoice::Unweighted => BaselineMethod::Unweighted,
            BaselineChoice::Heuristic => BaselineMethod::Heuristic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DiagnoseMode {
    Balance,
    Shiftcheck,
    Sensitivity,
    Gap,
}

/// Per-command settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    Certify,
    Design,
    Baseline {
        method: BaselineChoice,
        /// Hit-rate estimate for the heuristic; the pool's hit fraction if absent.
        p_hat: Option<f64>,
    },
    EstimateWeights {
        table: Option<PathBuf>,
    },
    Diagnose {
        mode: DiagnoseMode,
        gamma_grid: Vec<f64>,
        alpha_grid: Vec<f64>,
        t: f64,
        true_weights: Option<WeightSource>,
        top_groups: usize,
    },
    Budget {
        total: usize,
        alpha_grid: Vec<f64>,
    },
    Simulate {
        simulation: SimulationConfig,
        pvalues_csv: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Design => "design",
            Command::Baseline { .. } => "baseline",
            Command::EstimateWeights { .. } => "estimate-weights",
            Command::Diagnose { .. } => "diagnose",
            Command::Budget { .. } => "budget",
            Command::Simulate { .. } => "simulate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub alpha: Option<f64>,
    pub permutations: usize,
    pub score: ScoreKind,
    pub weights: WeightSource,
    /// Lower-tail density quantile for the out-of-distribution filter; off when absent.
    pub ood_quantile: Option<f64>,
    pub seed: u64,
    pub calibration: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub strict: bool,
    pub timings: bool,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            alpha: None,
            permutations: DEFAULT_PERMUTATIONS,
            score: ScoreKind::MaxPool,
            weights: WeightSource::Uniform,
            ood_quantile: None,
            seed: 0,
            calibration: None,
            candidates: None,
            output: None,
            strict: false,
            timings: false,
        }
    }

    pub fn require_alpha(&self) -> Result<f64, InputError> {
        self.alpha
            .ok_or_else(|| InputError::usage(format!("{} needs --alpha", self.command.name())))
    }

    pub fn require_calibration(&self) -> Result<&PathBuf, InputError> {
        self.calibration
            .as_ref()
            .ok_or_else(|| InputError::usage(format!("{} needs --calibration", self.command.name())))
    }

    pub fn require_candidates(&self) -> Result<&PathBuf, InputError> {
        self.candidates
            .as_ref()
            .ok_or_else(|| InputError::usage(format!("{} needs --candidates", self.command.name())))
    }
}
