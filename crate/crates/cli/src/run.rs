//! Executes a resolved [`RunConfig`] and renders its report.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use confhit::baselines::{
    bonferroni_select, heuristic_batch_size, one_sample_pvalues, one_sample_pvalues_with_weights, unweighted_design,
    BaselineMethod,
};
use confhit::budget::{allocate_from_profiles, BudgetPlan};
use confhit::diagnostics::{
    balance_check, robustness_gap_pooled, sensitivity_sweep, validation_shift, SensitivityCase, ShiftCheckOptions,
};
use confhit::kde::{fit_kde_standardized, ood_filter, KdeDensity, Standardizer};
use confhit::nested::{design_from_profile, prefix_profile, prefix_profile_with_weights, PValueProfile};
use confhit::sim::{run_simulation, SimulationReport};
use confhit::weights::{build_ratio, KdeOptions};
use confhit::{CandidateBatch, HiddenLabels, LabeledPool, PooledSample, RngStream, ScoreStatistic, WeightFn};
use serde::Serialize;

use crate::config::{BaselineChoice, Command, DiagnoseMode, RunConfig, WeightSource};
use crate::csvio::{self, CalibrationData, CandidateData, RowWeights};
use crate::error::InputError;
use crate::format::to_report_json;

/// A finished run: the report bytes and whether the answer was "not
/// confident enough" (for `--strict`).
#[derive(Debug)]
pub struct Execution {
    pub report: Vec<u8>,
    pub not_confident: bool,
}

#[derive(Serialize)]
struct Timings {
    seconds: f64,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
    timings: Option<Timings>,
}

fn render<T: Serialize>(cfg: &RunConfig, body: T, started: Instant) -> Result<Vec<u8>> {
    let timings = cfg.timings.then(|| Timings {
        seconds: started.elapsed().as_secs_f64(),
    });
    Ok(to_report_json(&Report {
        config: cfg,
        body,
        timings,
    })?)
}

enum Weights {
    Function(WeightFn),
    Rows(RowWeights),
}

impl Weights {
    fn function(&self, what: &str) -> Result<&WeightFn, InputError> {
        match self {
            Weights::Function(w) => Ok(w),
            Weights::Rows(_) => Err(InputError::usage(format!(
                "{what} needs a weight function (uniform, kde or analytic), not a weight file"
            ))),
        }
    }

    fn pool_rows(&self, pool: &LabeledPool) -> Result<Vec<f64>> {
        Ok(match self {
            Weights::Function(w) => w.evaluate_rows(pool.features(), "calibration")?,
            Weights::Rows(r) => r.calibration.clone(),
        })
    }

    fn batch_rows(&self, batch: &CandidateBatch) -> Result<Vec<f64>> {
        Ok(match self {
            Weights::Function(w) => w.evaluate_rows(batch.features(), "candidate")?,
            Weights::Rows(r) => r.candidates.clone(),
        })
    }

    /// Restricts per-candidate weights to `kept`.
    fn select(self, kept: &[usize]) -> Self {
        match self {
            Weights::Rows(r) => Weights::Rows(RowWeights {
                calibration: r.calibration,
                candidates: kept.iter().map(|&i| r.candidates[i]).collect(),
            }),
            w => w,
        }
    }

    fn pooled(&self, pool: &LabeledPool, batch: &CandidateBatch) -> Result<PooledSample> {
        Ok(match self {
            Weights::Function(w) => PooledSample::from_pool(pool, batch, w)?,
            Weights::Rows(r) => PooledSample::from_pool_with_weights(pool, batch, &r.calibration, &r.candidates)?,
        })
    }

    fn profile(
        &self,
        pool: &LabeledPool,
        batch: &CandidateBatch,
        stat: &ScoreStatistic,
        b: usize,
        rng: RngStream,
    ) -> Result<PValueProfile> {
        Ok(match self {
            Weights::Function(w) => prefix_profile(pool, batch, stat, w, b, rng)?,
            Weights::Rows(r) => prefix_profile_with_weights(pool, batch, stat, &r.calibration, &r.candidates, b, rng)?,
        })
    }
}

fn resolve_weights(src: &WeightSource, pool: &LabeledPool, batch: &CandidateBatch, rng: RngStream) -> Result<Weights> {
    Ok(match src {
        WeightSource::Uniform => Weights::Function(WeightFn::Uniform),
        WeightSource::Analytic { mu } => {
            let w = WeightFn::analytic(mu.clone()).map_err(InputError::from)?;
            w.check_dimension(pool.dimension()).map_err(InputError::from)?;
            Weights::Function(w)
        }
        WeightSource::Kde => Weights::Function(
            build_ratio(pool.features(), batch.features(), &KdeOptions::default(), rng).map_err(InputError::from)?,
        ),
        WeightSource::File { path } => Weights::Rows(csvio::parse_weights_csv(path, pool.len(), batch.len())?),
    })
}

struct Loaded {
    cal: CalibrationData,
    cand: CandidateData,
    weights: Weights,
    /// Original indices of the candidates that passed the OOD filter.
    kept: Option<Vec<usize>>,
}

impl Loaded {
    /// Candidates that survived the filter, or `None` if none did.
    fn batch(&self) -> Result<Option<CandidateBatch>> {
        match &self.kept {
            None => Ok(Some(self.cand.batch.clone())),
            Some(k) if k.is_empty() => Ok(None),
            Some(k) => Ok(Some(self.cand.batch.select(k)?)),
        }
    }

    fn original(&self, i: usize) -> usize {
        self.kept.as_ref().map_or(i, |k| k[i])
    }
}

fn load(cfg: &RunConfig, root: &RngStream, allow_ood: bool) -> Result<Loaded> {
    let cal = csvio::parse_calibration_csv(cfg.require_calibration()?)?;
    let cand = csvio::parse_candidates_csv(cfg.require_candidates()?)?;
    if cal.pool.dimension() != cand.batch.dimension() {
        return Err(InputError::usage(format!(
            "calibration has {} feature columns but candidates have {}",
            cal.pool.dimension(),
            cand.batch.dimension()
        ))
        .into());
    }
    let weights = resolve_weights(&cfg.weights, &cal.pool, &cand.batch, root.named("kde"))?;
    let kept = match cfg.ood_quantile {
        None => None,
        Some(_) if !allow_ood => {
            return Err(InputError::usage(format!("{} does not support --ood-quantile", cfg.command.name())).into())
        }
        Some(q) => {
            let density = match &weights {
                Weights::Function(WeightFn::KdeRatio(m)) => m.fit_p.clone(),
                _ => calibration_density(&cal.pool, root.named("ood"))?,
            };
            Some(ood_filter(&density, cal.pool.features(), cand.batch.features(), q).map_err(InputError::from)?)
        }
    };
    let weights = match &kept {
        Some(k) => weights.select(k),
        None => weights,
    };
    Ok(Loaded {
        cal,
        cand,
        weights,
        kept,
    })
}

fn calibration_density(pool: &LabeledPool, rng: RngStream) -> Result<KdeDensity> {
    let opts = KdeOptions::default();
    let scaler = Standardizer::fit(pool.features()).map_err(InputError::from)?;
    Ok(fit_kde_standardized(pool.features(), scaler, &opts.bandwidth_grid, opts.folds, rng).map_err(InputError::from)?)
}

fn check_alpha(alpha: f64) -> Result<f64, InputError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(InputError::usage(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

pub fn execute(cfg: &RunConfig) -> Result<Execution> {
    let started = Instant::now();
    let root = RngStream::new(cfg.seed);
    let stat = ScoreStatistic::new(cfg.score);
    if cfg.permutations == 0 {
        return Err(InputError::usage("--permutations must be at least 1").into());
    }
    match &cfg.command {
        Command::Certify => certify(cfg, &root, &stat, started),
        Command::Design => design(cfg, &root, &stat, started),
        Command::Baseline { method, p_hat } => baseline(cfg, &root, &stat, *method, *p_hat, started),
        Command::EstimateWeights { table } => estimate_weights(cfg, &root, table.as_deref(), started),
        Command::Diagnose { mode, .. } => diagnose(cfg, &root, &stat, *mode, started),
        Command::Budget { total, alpha_grid } => budget(cfg, &root, &stat, *total, alpha_grid, started),
        Command::Simulate {
            simulation,
            pvalues_csv,
        } => simulate(cfg, simulation, pvalues_csv.as_deref(), started),
    }
}

fn certify(cfg: &RunConfig, root: &RngStream, stat: &ScoreStatistic, started: Instant) -> Result<Execution> {
    let alpha = check_alpha(cfg.require_alpha()?)?;
    let data = load(cfg, root, true)?;
    let p_value = match data.batch()? {
        None => 1.0,
        Some(batch) => {
            // same stream as the full-batch prefix of `design`
            let pooled = data.weights.pooled(&data.cal.pool, &batch)?;
            pooled
                .randomized_pvalue(stat, cfg.permutations, root.named("inference").child(batch.len() as u64))?
                .p_value
        }
    };
    #[derive(Serialize)]
    struct Body {
        p_value: f64,
        certified: bool,
    }
    let certified = p_value <= alpha;
    Ok(Execution {
        report: render(cfg, Body { p_value, certified }, started)?,
        not_confident: !certified,
    })
}

fn design(cfg: &RunConfig, root: &RngStream, stat: &ScoreStatistic, started: Instant) -> Result<Execution> {
    let alpha = check_alpha(cfg.require_alpha()?)?;
    let data = load(cfg, root, true)?;
    let profile = match data.batch()? {
        None => PValueProfile::from_raw(Vec::new())?,
        Some(batch) => data
            .weights
            .profile(&data.cal.pool, &batch, stat, cfg.permutations, root.named("inference"))?,
    };
    let outcome = design_from_profile(&profile.monotone, alpha)?;
    #[derive(Serialize)]
    struct Body {
        raw_p: Vec<f64>,
        monotone_p: Vec<f64>,
        n_hat: usize,
        shortlist: Vec<usize>,
        status: &'static str,
        #[serde(skip_serializing_if = "Option::is_none")]
        ood_kept: Option<Vec<usize>>,
    }
    let body = Body {
        shortlist: outcome.shortlist.iter().map(|&i| data.original(i)).collect(),
        raw_p: profile.raw,
        monotone_p: profile.monotone,
        n_hat: outcome.n_hat,
        status: outcome.status.as_str(),
        ood_kept: data.kept.clone(),
    };
    Ok(Execution {
        report: render(cfg, body, started)?,
        not_confident: outcome.n_hat == 0,
    })
}

fn baseline(
    cfg: &RunConfig,
    root: &RngStream,
    stat: &ScoreStatistic,
    method: BaselineChoice,
    p_hat: Option<f64>,
    started: Instant,
) -> Result<Execution> {
    let alpha = check_alpha(cfg.require_alpha()?)?;
    let data = load(cfg, root, true)?;
    let pool = &data.cal.pool;
    let rng = root.named("inference");
    let (selected, n_required, certified, p_values): (Vec<usize>, Option<u64>, bool, Vec<f64>) = match data.batch()? {
        None if method != BaselineChoice::Heuristic => (Vec::new(), None, false, Vec::new()),
        batch => match method {
            BaselineChoice::Bonferroni => {
                let batch = batch.expect("nonempty");
                let p = match &data.weights {
                    Weights::Function(w) => one_sample_pvalues(pool, &batch, w)?,
                    Weights::Rows(r) => one_sample_pvalues_with_weights(pool, &batch, &r.calibration, &r.candidates)?,
                };
                let sel = bonferroni_select(&p, alpha)?;
                (sel.clone(), None, !sel.is_empty(), p)
            }
            BaselineChoice::Certonly => {
                let batch = batch.expect("nonempty");
                let pooled = data.weights.pooled(pool, &batch)?;
                let p = pooled
                    .randomized_pvalue(stat, cfg.permutations, rng.child(batch.len() as u64))?
                    .p_value;
                let ok = p <= alpha;
                (if ok { (0..batch.len()).collect() } else { Vec::new() }, None, ok, vec![p])
            }
            BaselineChoice::Unweighted => {
                let batch = batch.expect("nonempty");
                let (profile, o) = unweighted_design(pool, &batch, stat, alpha, cfg.permutations, rng)?;
                (o.shortlist.clone(), None, o.is_certified(), profile.monotone)
            }
            BaselineChoice::Heuristic => {
                let p_hat = p_hat.unwrap_or_else(|| {
                    pool.labels().iter().filter(|&&y| y).count() as f64 / pool.len() as f64
                });
                let n = heuristic_batch_size(p_hat, alpha)?;
                let available = batch.as_ref().map_or(0, CandidateBatch::len);
                let take = (n.min(available as u64)) as usize;
                ((0..take).collect(), Some(n), false, Vec::new())
            }
        },
    };
    #[derive(Serialize)]
    struct Body {
        method: BaselineMethod,
        selected: Vec<usize>,
        n_required: Option<u64>,
        certified: bool,
        p_values: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ood_kept: Option<Vec<usize>>,
    }
    let body = Body {
        method: method.into(),
        selected: selected.iter().map(|&i| data.original(i)).collect(),
        n_required,
        certified,
        p_values,
        ood_kept: data.kept.clone(),
    };
    Ok(Execution {
        report: render(cfg, body, started)?,
        not_confident: false,
    })
}

fn estimate_weights(cfg: &RunConfig, root: &RngStream, table: Option<&Path>, started: Instant) -> Result<Execution> {
    if matches!(cfg.weights, WeightSource::File { .. }) {
        return Err(InputError::usage("estimate-weights needs uniform, kde or analytic weights").into());
    }
    let data = load(cfg, root, true)?;
    let rows = RowWeights {
        calibration: data.weights.pool_rows(&data.cal.pool)?,
        candidates: data.weights.batch_rows(&data.cand.batch)?,
    };
    let (bandwidth_p, bandwidth_q) = match &data.weights {
        Weights::Function(WeightFn::KdeRatio(m)) => (Some(m.bandwidth_p()), Some(m.bandwidth_q())),
        _ => (None, None),
    };
    if let Some(path) = table {
        let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        csvio::write_weights(file, &rows).with_context(|| format!("cannot write {}", path.display()))?;
    }
    #[derive(Serialize)]
    struct Body {
        bandwidth_p: Option<f64>,
        bandwidth_q: Option<f64>,
        calibration_weights: Vec<f64>,
        candidate_weights: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ood_kept: Option<Vec<usize>>,
    }
    let body = Body {
        bandwidth_p,
        bandwidth_q,
        calibration_weights: rows.calibration,
        candidate_weights: rows.candidates,
        ood_kept: data.kept,
    };
    Ok(Execution {
        report: render(cfg, body, started)?,
        not_confident: false,
    })
}

fn diagnose(
    cfg: &RunConfig,
    root: &RngStream,
    stat: &ScoreStatistic,
    mode: DiagnoseMode,
    started: Instant,
) -> Result<Execution> {
    let Command::Diagnose {
        gamma_grid,
        alpha_grid,
        t,
        true_weights,
        top_groups,
        ..
    } = &cfg.command
    else {
        unreachable!("diagnose settings")
    };
    #[derive(Serialize)]
    struct Body<T: Serialize> {
        mode: DiagnoseMode,
        result: T,
    }
    let rng = root.named("diagnose");
    let report = match mode {
        DiagnoseMode::Shiftcheck => {
            if cfg.ood_quantile.is_some() {
                return Err(InputError::usage("diagnose does not support --ood-quantile").into());
            }
            let cal = csvio::parse_calibration_csv(cfg.require_calibration()?)?;
            let groups = cal
                .groups
                .as_ref()
                .ok_or_else(|| InputError::usage("shiftcheck needs a 'group' column in the calibration file"))?;
            let opts = ShiftCheckOptions {
                top_groups: *top_groups,
                kde: KdeOptions::default(),
                alpha_grid: alpha_grid.clone(),
                permutations: cfg.permutations,
            };
            let r = validation_shift(&cal.pool, groups, stat, &opts, rng).map_err(InputError::from)?;
            render(cfg, Body { mode, result: r }, started)?
        }
        DiagnoseMode::Balance => {
            let data = load(cfg, root, false)?;
            let w = data.weights.function("balance")?;
            let r = balance_check(&data.cal.pool, &data.cand.batch, w).map_err(InputError::from)?;
            render(cfg, Body { mode, result: r }, started)?
        }
        DiagnoseMode::Sensitivity => {
            let data = load(cfg, root, false)?;
            let labels = data.cand.labels.as_ref().ok_or_else(|| {
                InputError::usage("sensitivity needs evaluation labels: a 'y' column in the candidates file")
            })?;
            let cases = data
                .cand
                .split_inputs()
                .into_iter()
                .map(|(_, idx)| {
                    Ok(SensitivityCase {
                        pool: data.cal.pool.clone(),
                        batch: data.cand.batch.select(&idx)?,
                        truth: HiddenLabels::new(idx.iter().map(|&i| labels[i]).collect()),
                    })
                })
                .collect::<Result<Vec<_>, confhit::Error>>()?;
            let base = data.weights.function("sensitivity")?;
            let r = sensitivity_sweep(&cases, base, gamma_grid, stat, alpha_grid, cfg.permutations, rng)
                .map_err(InputError::from)?;
            render(cfg, Body { mode, result: r }, started)?
        }
        DiagnoseMode::Gap => {
            let data = load(cfg, root, false)?;
            let truth_src = true_weights
                .as_ref()
                .ok_or_else(|| InputError::usage("gap needs --true-weights"))?;
            let truth = resolve_weights(truth_src, &data.cal.pool, &data.cand.batch, root.named("kde-true"))?;
            let true_pooled = truth.pooled(&data.cal.pool, &data.cand.batch)?;
            let est_pooled = data.weights.pooled(&data.cal.pool, &data.cand.batch)?;
            let r = robustness_gap_pooled(&true_pooled, est_pooled.weights(), stat, *t, cfg.permutations, rng)
                .map_err(InputError::from)?;
            render(cfg, Body { mode, result: r }, started)?
        }
    };
    Ok(Execution {
        report,
        not_confident: false,
    })
}

fn budget(
    cfg: &RunConfig,
    root: &RngStream,
    stat: &ScoreStatistic,
    total: usize,
    alpha_grid: &[f64],
    started: Instant,
) -> Result<Execution> {
    let data = load(cfg, root, false)?;
    let groups = data.cand.split_inputs();
    let rng = root.named("inference");
    let profiles = groups
        .iter()
        .enumerate()
        .map(|(i, (_, idx))| {
            let batch = data.cand.batch.select(idx)?;
            let weights = match &data.weights {
                Weights::Function(w) => Weights::Function(w.clone()),
                Weights::Rows(r) => Weights::Rows(RowWeights {
                    calibration: r.calibration.clone(),
                    candidates: idx.iter().map(|&j| r.candidates[j]).collect(),
                }),
            };
            weights.profile(&data.cal.pool, &batch, stat, cfg.permutations, rng.child(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = allocate_from_profiles(&profiles, alpha_grid, total).map_err(InputError::from)?;
    #[derive(Serialize)]
    struct Body {
        inputs: Vec<String>,
        plan: BudgetPlan,
    }
    let body = Body {
        inputs: groups.into_iter().map(|(k, _)| k).collect(),
        plan,
    };
    Ok(Execution {
        report: render(cfg, body, started)?,
        not_confident: false,
    })
}

fn simulate(
    cfg: &RunConfig,
    sim: &confhit::sim::SimulationConfig,
    pvalues_csv: Option<&Path>,
    started: Instant,
) -> Result<Execution> {
    let report: SimulationReport = run_simulation(sim).map_err(InputError::from)?;
    if let Some(path) = pvalues_csv {
        let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["experiment", "method", "trial", "p_value"])?;
        for e in &report.experiments {
            for (t, p) in e.p_values.iter().flatten().enumerate() {
                w.write_record([&e.experiment, &e.method, &t.to_string(), &crate::format::g17(*p)])?;
            }
        }
        w.flush()?;
    }
    #[derive(Serialize)]
    struct Body {
        simulation: SimulationReport,
    }
    Ok(Execution {
        report: render(cfg, Body { simulation: report }, started)?,
        not_confident: false,
    })
}
