//! Synthetic populations with a known density ratio and label model, and
//! Monte Carlo experiments built on them.
//!
//! Calibration rows come from `P = N(0, I)` and candidates from
//! `Q = N(mu, I)`, so `w(x) = exp(mu·x - |mu|²/2)` exactly. Labels follow
//! `P(Y = 1 | x) = logistic(beta·x + b)` under both, which keeps the shift
//! purely in the covariates. The predictor score is that same probability,
//! optionally corrupted.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bonferroni_select, one_sample_pvalues};
use crate::budget::{allocate_from_profiles, BudgetPlan};
use crate::data::{CandidateBatch, FeatureVector, HiddenLabels, LabeledPool};
use crate::diagnostics::{robustness_gap_pooled, SensitivityCase};
use crate::error::{invalid, Result};
use crate::nested::{design_from_profile, prefix_profile};
use crate::pvalue::{check_alpha, PooledSample, DEFAULT_ENUMERATION_CAP};
use crate::rng::RngStream;
use crate::scores::{ScoreKind, ScoreStatistic};
use crate::weights::{power_transform, WeightFn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    /// Candidate labels drawn from the label model.
    #[default]
    Mixed,
    /// Candidates conditioned on having no hit, by rejection sampling.
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorCorruption {
    #[default]
    Clean,
    /// `(p + z) / 2` with `z ~ N(0, 1)`, clamped to `[0, 1]`.
    Noisy,
    /// `1 - p`.
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub d: usize,
    pub shift_mu: Vec<f64>,
    pub label_coef: Vec<f64>,
    pub intercept: f64,
    pub n_calibration: usize,
    pub n_batch: usize,
    pub trials: usize,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub population: Population,
    #[serde(default)]
    pub predictor: PredictorCorruption,
    #[serde(default = "default_score")]
    pub score: ScoreKind,
}

fn default_permutations() -> usize {
    crate::pvalue::DEFAULT_PERMUTATIONS
}

fn default_score() -> ScoreKind {
    ScoreKind::MaxPool
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d: 2,
            shift_mu: vec![1.0, 0.0],
            label_coef: vec![1.0, 1.0],
            intercept: -2.0,
            n_calibration: 200,
            n_batch: 5,
            trials: 2000,
            permutations: default_permutations(),
            alpha_grid: vec![0.05, 0.1, 0.2, 0.3, 0.5],
            seed: 0,
            population: Population::Mixed,
            predictor: PredictorCorruption::Clean,
            score: default_score(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if self.shift_mu.len() != self.d || self.label_coef.len() != self.d {
            return Err(invalid(format!(
                "shift_mu and label_coef must have length d = {}",
                self.d
            )));
        }
        if self.shift_mu.iter().chain(&self.label_coef).any(|v| !v.is_finite()) || !self.intercept.is_finite() {
            return Err(invalid("spec parameters must be finite"));
        }
        if self.n_calibration == 0 || self.n_batch == 0 || self.trials == 0 || self.permutations == 0 {
            return Err(invalid("n_calibration, n_batch, trials and permutations must be positive"));
        }
        if self.alpha_grid.is_empty() {
            return Err(invalid("alpha grid is empty"));
        }
        for &a in &self.alpha_grid {
            check_alpha(a)?;
        }
        Ok(())
    }

    pub fn true_weights(&self) -> Result<WeightFn> {
        WeightFn::analytic(self.shift_mu.clone())
    }

    pub fn hit_probability(&self, x: &[f64]) -> f64 {
        logistic(x.iter().zip(&self.label_coef).map(|(a, b)| a * b).sum::<f64>() + self.intercept)
    }

    pub fn stat(&self) -> ScoreStatistic {
        ScoreStatistic::new(self.score)
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One synthetic draw. Hidden labels are kept apart from everything the
/// inference code sees.
#[derive(Debug, Clone)]
pub struct SyntheticDraw {
    pub pool: LabeledPool,
    pub batch: CandidateBatch,
    pub truth: HiddenLabels,
    pub weights: WeightFn,
}

const MAX_REJECTIONS: usize = 1_000_000;

pub fn generate(spec: &SyntheticSpec, rng: RngStream) -> Result<SyntheticDraw> {
    spec.validate()?;
    let normal_row = |r: &mut rand_chacha::ChaCha8Rng, shift: &[f64]| -> Vec<f64> {
        shift.iter().map(|m| m + r.sample::<f64, _>(StandardNormal)).collect()
    };

    let mut r = rng.named("calibration").rng();
    let zero = vec![0.0; spec.d];
    let mut feats = Vec::with_capacity(spec.n_calibration);
    let mut labels = Vec::with_capacity(spec.n_calibration);
    let mut probs = Vec::with_capacity(spec.n_calibration);
    for _ in 0..spec.n_calibration {
        let x = normal_row(&mut r, &zero);
        let p = spec.hit_probability(&x);
        labels.push(r.random::<f64>() < p);
        probs.push(p);
        feats.push(FeatureVector::new(x)?);
    }

    let mut r = rng.named("candidates").rng();
    let mut cand = Vec::with_capacity(spec.n_batch);
    let mut truth = Vec::with_capacity(spec.n_batch);
    let mut cand_probs = Vec::with_capacity(spec.n_batch);
    for _ in 0..spec.n_batch {
        let mut attempts = 0;
        loop {
            let x = normal_row(&mut r, &spec.shift_mu);
            let p = spec.hit_probability(&x);
            let y = r.random::<f64>() < p;
            if spec.population == Population::Null && y {
                attempts += 1;
                if attempts >= MAX_REJECTIONS {
                    return Err(invalid("null rejection sampler failed; hit probability too close to 1"));
                }
                continue;
            }
            truth.push(y);
            cand_probs.push(p);
            cand.push(FeatureVector::new(x)?);
            break;
        }
    }

    let noise = rng.named("predictor-noise");
    let cal_scores = corrupt_predictor(&probs, spec.predictor, noise.child(0));
    let cand_scores = corrupt_predictor(&cand_probs, spec.predictor, noise.child(1));
    Ok(SyntheticDraw {
        pool: LabeledPool::new(feats, labels, Some(cal_scores))?,
        batch: CandidateBatch::new(cand, cand_scores)?,
        truth: HiddenLabels::new(truth),
        weights: spec.true_weights()?,
    })
}

pub fn corrupt_predictor(scores: &[f64], mode: PredictorCorruption, rng: RngStream) -> Vec<f64> {
    match mode {
        PredictorCorruption::Clean => scores.to_vec(),
        PredictorCorruption::Inverse => scores.iter().map(|p| 1.0 - p).collect(),
        PredictorCorruption::Noisy => {
            let mut r = rng.rng();
            scores
                .iter()
                .map(|p| ((p + r.sample::<f64, _>(StandardNormal)) / 2.0).clamp(0.0, 1.0))
                .collect()
        }
    }
}

/// Standard error of a Monte Carlo proportion.
pub fn proportion_se(rate: f64, trials: usize) -> f64 {
    (rate * (1.0 - rate) / trials as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    /// Null: certification rate. Design: nonempty selection without a hit.
    pub empirical_error: f64,
    /// Null: certification rate. Design: selection containing a hit.
    pub power_or_rejection: f64,
    /// Mean selection size among nonempty selections.
    pub mean_set_size: Option<f64>,
    pub empty_fraction: f64,
    pub error_se: f64,
    pub power_se: f64,
    pub empty_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub method: String,
    pub trials: usize,
    pub spec: SyntheticSpec,
    pub per_alpha: Vec<AlphaRow>,
    /// Certification p-values of every trial (null experiments).
    pub p_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMethod {
    ConfhitRand,
    ConfhitDet,
    Unweighted,
    Bonferroni,
}

impl NullMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            NullMethod::ConfhitRand => "confhit_rand",
            NullMethod::ConfhitDet => "confhit_det",
            NullMethod::Unweighted => "unweighted",
            NullMethod::Bonferroni => "bonferroni",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMethod {
    Confhit,
    Unweighted,
    Bonferroni,
    CertificationOnly,
}

impl DesignMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignMethod::Confhit => "confhit",
            DesignMethod::Unweighted => "unweighted",
            DesignMethod::Bonferroni => "bonferroni",
            DesignMethod::CertificationOnly => "certification_only",
        }
    }
}

fn trial_streams(spec: &SyntheticSpec) -> impl IndexedParallelIterator<Item = (usize, RngStream)> {
    let master = RngStream::new(spec.seed);
    (0..spec.trials).into_par_iter().map(move |t| (t, master.child(t as u64)))
}

/// Certification p-value of the full batch for one null draw.
fn null_pvalue(spec: &SyntheticSpec, draw: &SyntheticDraw, method: NullMethod, rng: RngStream) -> Result<f64> {
    let stat = spec.stat();
    let perm = rng.named("permutations");
    match method {
        NullMethod::ConfhitRand => {
            Ok(PooledSample::from_pool(&draw.pool, &draw.batch, &draw.weights)?
                .randomized_pvalue(&stat, spec.permutations, perm)?
                .p_value)
        }
        NullMethod::ConfhitDet => Ok(PooledSample::from_pool(&draw.pool, &draw.batch, &draw.weights)?
            .deterministic_pvalue(&stat, DEFAULT_ENUMERATION_CAP)?
            .p_value),
        NullMethod::Unweighted => Ok(PooledSample::from_pool(&draw.pool, &draw.batch, &WeightFn::Uniform)?
            .randomized_pvalue(&stat, spec.permutations, perm)?
            .p_value),
        NullMethod::Bonferroni => {
            let p = one_sample_pvalues(&draw.pool, &draw.batch, &draw.weights)?;
            let min = p.iter().copied().fold(1.0, f64::min);
            Ok((min * p.len() as f64).min(1.0))
        }
    }
}

/// Certification on all-null batches: the rate of `p <= alpha`.
pub fn run_null_experiment(spec: &SyntheticSpec, method: NullMethod) -> Result<ExperimentReport> {
    let mut spec = spec.clone();
    spec.population = Population::Null;
    spec.validate()?;
    let p_values = trial_streams(&spec)
        .map(|(_, rng)| {
            let draw = generate(&spec, rng)?;
            null_pvalue(&spec, &draw, method, rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = spec.trials;
    let per_alpha = spec
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let rate = p_values.iter().filter(|&&p| p <= alpha).count() as f64 / n as f64;
            AlphaRow {
                alpha,
                empirical_error: rate,
                power_or_rejection: rate,
                mean_set_size: (rate > 0.0).then_some(spec.n_batch as f64),
                empty_fraction: 1.0 - rate,
                error_se: proportion_se(rate, n),
                power_se: proportion_se(rate, n),
                empty_se: proportion_se(rate, n),
            }
        })
        .collect();
    Ok(ExperimentReport {
        experiment: "null".into(),
        method: method.as_str().into(),
        trials: n,
        per_alpha,
        p_values: Some(p_values),
        spec,
    })
}

/// Selections of one trial at every grid level.
fn design_selections(
    spec: &SyntheticSpec,
    draw: &SyntheticDraw,
    method: DesignMethod,
    rng: RngStream,
) -> Result<Vec<Vec<usize>>> {
    let stat = spec.stat();
    let perm = rng.named("permutations");
    let n = draw.batch.len();
    match method {
        DesignMethod::Confhit | DesignMethod::Unweighted => {
            let w = if method == DesignMethod::Confhit {
                &draw.weights
            } else {
                &WeightFn::Uniform
            };
            let profile = prefix_profile(&draw.pool, &draw.batch, &stat, w, spec.permutations, perm)?;
            spec.alpha_grid
                .iter()
                .map(|&a| design_from_profile(&profile.monotone, a).map(|o| o.shortlist))
                .collect()
        }
        DesignMethod::CertificationOnly => {
            let p = PooledSample::from_pool(&draw.pool, &draw.batch, &draw.weights)?
                .randomized_pvalue(&stat, spec.permutations, perm.child(n as u64))?
                .p_value;
            Ok(spec
                .alpha_grid
                .iter()
                .map(|&a| if p <= a { (0..n).collect() } else { Vec::new() })
                .collect())
        }
        DesignMethod::Bonferroni => {
            let p = one_sample_pvalues(&draw.pool, &draw.batch, &draw.weights)?;
            spec.alpha_grid.iter().map(|&a| bonferroni_select(&p, a)).collect()
        }
    }
}

/// Design on the configured population; an error is a nonempty selection
/// with no hit in it.
pub fn run_design_experiment(spec: &SyntheticSpec, method: DesignMethod) -> Result<ExperimentReport> {
    spec.validate()?;
    let per_trial = trial_streams(spec)
        .map(|(_, rng)| {
            let draw = generate(spec, rng)?;
            let sel = design_selections(spec, &draw, method, rng)?;
            Ok(sel
                .into_iter()
                .map(|s| (s.len(), !s.is_empty() && draw.truth.hit_among(&s)))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<Vec<(usize, bool)>>>>()?;
    let n = spec.trials;
    let per_alpha = spec
        .alpha_grid
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let cells: Vec<(usize, bool)> = per_trial.iter().map(|t| t[a]).collect();
            let nonempty: Vec<usize> = cells.iter().filter(|c| c.0 > 0).map(|c| c.0).collect();
            let errors = cells.iter().filter(|c| c.0 > 0 && !c.1).count() as f64 / n as f64;
            let hits = cells.iter().filter(|c| c.1).count() as f64 / n as f64;
            let empty = 1.0 - nonempty.len() as f64 / n as f64;
            AlphaRow {
                alpha,
                empirical_error: errors,
                power_or_rejection: hits,
                mean_set_size: (!nonempty.is_empty())
                    .then(|| nonempty.iter().sum::<usize>() as f64 / nonempty.len() as f64),
                empty_fraction: empty,
                error_se: proportion_se(errors, n),
                power_se: proportion_se(hits, n),
                empty_se: proportion_se(empty, n),
            }
        })
        .collect();
    Ok(ExperimentReport {
        experiment: "design".into(),
        method: method.as_str().into(),
        trials: n,
        spec: spec.clone(),
        per_alpha,
        p_values: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub t: f64,
    /// Rate of `p̂ <= t` on null batches with the tempered weights.
    pub exceedance: f64,
    pub exceedance_se: f64,
    pub mean_bound: f64,
    pub bound_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub gamma: f64,
    pub trials: usize,
    pub spec: SyntheticSpec,
    pub rows: Vec<RobustnessRow>,
}

/// Null batches certified with `w^gamma` in place of the true weights,
/// against the trial-averaged inflation bound.
pub fn run_robustness_experiment(spec: &SyntheticSpec, gamma: f64, t_grid: &[f64]) -> Result<RobustnessReport> {
    let mut spec = spec.clone();
    spec.population = Population::Null;
    spec.validate()?;
    let stat = spec.stat();
    let est = power_transform(spec.true_weights()?, gamma)?;
    let per_trial = trial_streams(&spec)
        .map(|(_, rng)| {
            let draw = generate(&spec, rng)?;
            let truth = PooledSample::from_pool(&draw.pool, &draw.batch, &draw.weights)?;
            let est_w = PooledSample::from_pool(&draw.pool, &draw.batch, &est)?;
            t_grid
                .iter()
                .map(|&t| {
                    let g = robustness_gap_pooled(
                        &truth,
                        est_w.weights(),
                        &stat,
                        t,
                        spec.permutations,
                        rng.named("permutations"),
                    )?;
                    Ok((g.p_value_estimated <= t, g.bound))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = spec.trials as f64;
    let rows = t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let exc = per_trial.iter().filter(|r| r[i].0).count() as f64 / n;
            let bounds: Vec<f64> = per_trial.iter().map(|r| r[i].1).collect();
            let mean = bounds.iter().sum::<f64>() / n;
            let var = bounds.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            RobustnessRow {
                t,
                exceedance: exc,
                exceedance_se: proportion_se(exc, spec.trials),
                mean_bound: mean,
                bound_se: (var / n).sqrt(),
            }
        })
        .collect();
    Ok(RobustnessReport {
        gamma,
        trials: spec.trials,
        spec,
        rows,
    })
}

/// Independent draws packaged for a sensitivity sweep.
pub fn sensitivity_cases(spec: &SyntheticSpec) -> Result<Vec<SensitivityCase>> {
    spec.validate()?;
    trial_streams(spec)
        .map(|(_, rng)| {
            let d = generate(spec, rng)?;
            Ok(SensitivityCase {
                pool: d.pool,
                batch: d.batch,
                truth: d.truth,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetExperimentReport {
    pub spec: SyntheticSpec,
    pub total_budget: usize,
    pub plan: BudgetPlan,
    /// Fraction of inputs whose surviving shortlist contains a hit.
    pub realized_positives: f64,
    pub realized_se: f64,
}

/// Treats each trial as one input and allocates `total_budget` across them.
pub fn run_budget_experiment(spec: &SyntheticSpec, total_budget: usize) -> Result<BudgetExperimentReport> {
    spec.validate()?;
    let stat = spec.stat();
    let drawn = trial_streams(spec)
        .map(|(_, rng)| {
            let d = generate(spec, rng)?;
            let p = prefix_profile(&d.pool, &d.batch, &stat, &d.weights, spec.permutations, rng.named("permutations"))?;
            Ok((p, d.truth))
        })
        .collect::<Result<Vec<_>>>()?;
    let (profiles, truths): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();
    let plan = allocate_from_profiles(&profiles, &spec.alpha_grid, total_budget)?;
    let hits = plan
        .chosen_sets
        .iter()
        .zip(&truths)
        .filter(|(s, t)| !s.is_empty() && t.hit_among(s))
        .count() as f64
        / spec.trials as f64;
    Ok(BudgetExperimentReport {
        spec: spec.clone(),
        total_budget,
        realized_se: proportion_se(hits, spec.trials),
        realized_positives: hits,
        plan,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Null,
    Design,
    Ablation,
    Sensitivity,
    Budget,
    Robustness,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Null => "null",
            Preset::Design => "design",
            Preset::Ablation => "ablation",
            Preset::Sensitivity => "sensitivity",
            Preset::Budget => "budget",
            Preset::Robustness => "robustness",
        }
    }
}

/// A named experiment with its population and preset-specific knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub preset: Preset,
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub null_methods: Vec<NullMethod>,
    #[serde(default)]
    pub design_methods: Vec<DesignMethod>,
    #[serde(default)]
    pub gamma_grid: Vec<f64>,
    #[serde(default)]
    pub t_grid: Vec<f64>,
    #[serde(default)]
    pub total_budget: Option<usize>,
}

impl SimulationConfig {
    /// The built-in configuration of each preset at desk scale.
    pub fn preset(preset: Preset) -> Self {
        let spec = SyntheticSpec::default();
        let mut cfg = Self {
            preset,
            spec,
            null_methods: Vec::new(),
            design_methods: Vec::new(),
            gamma_grid: Vec::new(),
            t_grid: Vec::new(),
            total_budget: None,
        };
        match preset {
            Preset::Null => {
                cfg.spec.population = Population::Null;
                cfg.null_methods = vec![NullMethod::ConfhitRand, NullMethod::Unweighted, NullMethod::Bonferroni];
            }
            Preset::Design => {
                cfg.spec.label_coef = vec![2.0, 2.0];
                cfg.spec.intercept = -3.0;
                cfg.spec.score = ScoreKind::SumPred;
                cfg.spec.alpha_grid = vec![0.1, 0.2, 0.3];
                cfg.design_methods = vec![
                    DesignMethod::Confhit,
                    DesignMethod::Unweighted,
                    DesignMethod::Bonferroni,
                    DesignMethod::CertificationOnly,
                ];
            }
            Preset::Ablation => {
                cfg.spec.population = Population::Null;
                cfg.spec.shift_mu = vec![1.5, 0.0];
                cfg.spec.label_coef = vec![2.0, 0.0];
                cfg.null_methods = vec![NullMethod::ConfhitRand, NullMethod::Unweighted];
            }
            Preset::Sensitivity => {
                cfg.spec.trials = 500;
                cfg.spec.alpha_grid = vec![0.1, 0.3];
                cfg.gamma_grid = vec![0.0, 0.5, 1.0, 2.0, 3.0];
            }
            Preset::Budget => {
                cfg.spec.trials = 500;
                cfg.spec.alpha_grid = vec![0.1, 0.2, 0.3, 0.4, 0.5];
                cfg.total_budget = Some(400);
            }
            Preset::Robustness => {
                cfg.spec.population = Population::Null;
                cfg.gamma_grid = vec![2.0];
                cfg.t_grid = vec![0.1, 0.3];
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        match self.preset {
            Preset::Null | Preset::Ablation if self.null_methods.is_empty() => {
                Err(invalid("null_methods must name at least one method"))
            }
            Preset::Design if self.design_methods.is_empty() => {
                Err(invalid("design_methods must name at least one method"))
            }
            Preset::Sensitivity if !self.gamma_grid.contains(&1.0) => {
                Err(invalid("gamma_grid must contain 1"))
            }
            Preset::Robustness if self.gamma_grid.is_empty() || self.t_grid.is_empty() => {
                Err(invalid("robustness needs gamma_grid and t_grid"))
            }
            Preset::Budget if self.total_budget.unwrap_or(0) == 0 => Err(invalid("total_budget must be at least 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub experiments: Vec<ExperimentReport>,
    pub sensitivity: Option<crate::diagnostics::SensitivityReport>,
    pub robustness: Vec<RobustnessReport>,
    pub budget: Option<BudgetExperimentReport>,
}

pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationReport> {
    config.validate()?;
    let spec = &config.spec;
    let mut report = SimulationReport {
        config: config.clone(),
        experiments: Vec::new(),
        sensitivity: None,
        robustness: Vec::new(),
        budget: None,
    };
    match config.preset {
        Preset::Null | Preset::Ablation => {
            for &m in &config.null_methods {
                report.experiments.push(run_null_experiment(spec, m)?);
            }
        }
        Preset::Design => {
            for &m in &config.design_methods {
                report.experiments.push(run_design_experiment(spec, m)?);
            }
        }
        Preset::Sensitivity => {
            let cases = sensitivity_cases(spec)?;
            report.sensitivity = Some(crate::diagnostics::sensitivity_sweep(
                &cases,
                &spec.true_weights()?,
                &config.gamma_grid,
                &spec.stat(),
                &spec.alpha_grid,
                spec.permutations,
                RngStream::new(spec.seed).named("sensitivity"),
            )?);
        }
        Preset::Budget => {
            report.budget = Some(run_budget_experiment(spec, config.total_budget.unwrap_or(0))?);
        }
        Preset::Robustness => {
            for &g in &config.gamma_grid {
                report.robustness.push(run_robustness_experiment(spec, g, &config.t_grid)?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(population: Population) -> SyntheticSpec {
        SyntheticSpec {
            n_calibration: 50,
            n_batch: 4,
            trials: 20,
            permutations: 200,
            population,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn no_shift_means_unit_weights() {
        let spec = SyntheticSpec {
            shift_mu: vec![0.0, 0.0],
            ..SyntheticSpec::default()
        };
        let w = spec.true_weights().unwrap();
        for x in [[0.3, -2.0], [5.0, 1.0]] {
            assert_eq!(w.evaluate_slice(&x), 1.0);
        }
    }

    #[test]
    fn unit_shift_probe() {
        let spec = SyntheticSpec {
            shift_mu: vec![1.0, 0.0],
            ..SyntheticSpec::default()
        };
        let w = spec.true_weights().unwrap().evaluate_slice(&[1.0, 0.0]);
        assert!((w - 0.5f64.exp()).abs() < 1e-15);
        let pdf = |x: f64, m: f64| (-(x - m).powi(2) / 2.0).exp();
        assert!((w - pdf(1.0, 1.0) / pdf(1.0, 0.0)).abs() < 1e-14);
    }

    #[test]
    fn very_negative_intercept_gives_all_null() {
        let spec = SyntheticSpec {
            label_coef: vec![0.0, 0.0],
            intercept: -20.0,
            ..small(Population::Mixed)
        };
        for t in 0..10 {
            let d = generate(&spec, RngStream::new(t)).unwrap();
            assert!(!d.truth.any_hit());
            assert!(d.pool.labels().iter().all(|&y| !y));
        }
    }

    #[test]
    fn null_population_has_no_hits() {
        let spec = SyntheticSpec {
            intercept: 1.0,
            ..small(Population::Null)
        };
        for t in 0..20 {
            assert!(!generate(&spec, RngStream::new(t)).unwrap().truth.any_hit());
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = small(Population::Mixed);
        let a = generate(&spec, RngStream::new(5)).unwrap();
        let b = generate(&spec, RngStream::new(5)).unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.truth, b.truth);
        let c = generate(&spec, RngStream::new(6)).unwrap();
        assert_ne!(a.pool, c.pool);
    }

    #[test]
    fn corruption_modes() {
        let p = [0.7, 0.0, 1.0, 0.25];
        let inv = corrupt_predictor(&p, PredictorCorruption::Inverse, RngStream::new(0));
        assert!((inv[0] - 0.3).abs() < 1e-15);
        let back = corrupt_predictor(&inv, PredictorCorruption::Inverse, RngStream::new(0));
        assert_eq!(back, p.to_vec());
        let n1 = corrupt_predictor(&p, PredictorCorruption::Noisy, RngStream::new(3));
        let n2 = corrupt_predictor(&p, PredictorCorruption::Noisy, RngStream::new(3));
        assert_eq!(n1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), n2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(n1.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(n1, p.to_vec());
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::default();
        assert!(s.validate().is_ok());
        s.shift_mu = vec![1.0];
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            alpha_grid: vec![1.5],
            ..SyntheticSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn experiments_run_and_report_rates() {
        let spec = small(Population::Mixed);
        for m in [NullMethod::ConfhitRand, NullMethod::ConfhitDet, NullMethod::Unweighted, NullMethod::Bonferroni] {
            let r = run_null_experiment(&SyntheticSpec { n_calibration: 12, n_batch: 2, ..spec.clone() }, m).unwrap();
            assert_eq!(r.p_values.as_ref().unwrap().len(), 20);
            assert!(r.per_alpha.iter().all(|a| (0.0..=1.0).contains(&a.empirical_error)));
        }
        for m in [DesignMethod::Confhit, DesignMethod::Unweighted, DesignMethod::Bonferroni, DesignMethod::CertificationOnly] {
            let r = run_design_experiment(&spec, m).unwrap();
            for a in &r.per_alpha {
                assert!(a.empirical_error + a.power_or_rejection + a.empty_fraction <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn hit_rich_population_rarely_errs() {
        // 95% of candidates are hits, so an error needs a shortlist of misses
        let spec = SyntheticSpec {
            label_coef: vec![0.0, 0.0],
            intercept: 3.0,
            n_calibration: 300,
            ..small(Population::Mixed)
        };
        let r = run_design_experiment(&spec, DesignMethod::Confhit).unwrap();
        for a in &r.per_alpha {
            assert!(a.empirical_error <= 0.15);
        }
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = SyntheticSpec::default();
        let text = toml::to_string(&s).unwrap();
        let back: SyntheticSpec = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
