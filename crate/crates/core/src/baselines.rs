//! Comparison procedures: Bonferroni over one-sample p-values,
//! certification without pruning, unweighted design, and the heuristic
//! batch-size rule.

use serde::{Deserialize, Serialize};

use crate::data::{check_len, CandidateBatch, LabeledPool};
use crate::error::{invalid, Result};
use crate::nested::{design, DesignOutcome, PValueProfile};
use crate::pvalue::{check_alpha, randomized_pvalue, CalibrationSide, PooledSample};
use crate::rng::RngStream;
use crate::scores::ScoreStatistic;
use crate::weights::WeightFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Bonferroni,
    CertificationOnly,
    Unweighted,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineOutcome {
    pub method: BaselineMethod,
    /// 0-based candidate indices.
    pub selected_indices: Vec<usize>,
    pub n_required: Option<u64>,
    pub certified: bool,
    /// Per-candidate one-sample p-values (Bonferroni) or the full-batch
    /// p-value (certification-only).
    pub p_values: Vec<f64>,
}

/// One-sample weighted p-value of every candidate against the inactive rows.
pub fn one_sample_pvalues(pool: &LabeledPool, batch: &CandidateBatch, wfn: &WeightFn) -> Result<Vec<f64>> {
    let side = CalibrationSide::new(pool, wfn)?;
    let w = wfn.evaluate_rows(batch.features(), "candidate")?;
    one_sample_from_side(&side, batch, &w)
}

/// [`one_sample_pvalues`] with precomputed weights, one per pool row and
/// one per candidate.
pub fn one_sample_pvalues_with_weights(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    pool_weights: &[f64],
    batch_weights: &[f64],
) -> Result<Vec<f64>> {
    let side = CalibrationSide::from_row_weights(pool, pool_weights)?;
    check_len("candidate weights", batch.len(), batch_weights.len())?;
    one_sample_from_side(&side, batch, batch_weights)
}

fn one_sample_from_side(side: &CalibrationSide, batch: &CandidateBatch, w: &[f64]) -> Result<Vec<f64>> {
    side.check_batch(batch)?;
    batch
        .predictor_scores()
        .iter()
        .zip(w)
        .map(|(&s, &wt)| PooledSample::new(&side.scores, &side.weights, &[s], &[wt])?.one_sample_pvalue())
        .collect()
}

/// Selects candidates whose p-value is at most `alpha / N`.
pub fn bonferroni_select(p_values: &[f64], alpha: f64) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    if p_values.is_empty() {
        return Err(invalid("Bonferroni needs at least one candidate"));
    }
    let threshold = alpha / p_values.len() as f64;
    Ok((0..p_values.len()).filter(|&j| p_values[j] <= threshold).collect())
}

pub fn bonferroni(pool: &LabeledPool, batch: &CandidateBatch, wfn: &WeightFn, alpha: f64) -> Result<BaselineOutcome> {
    check_alpha(alpha)?;
    let p_values = one_sample_pvalues(pool, batch, wfn)?;
    let selected_indices = bonferroni_select(&p_values, alpha)?;
    Ok(BaselineOutcome {
        method: BaselineMethod::Bonferroni,
        certified: !selected_indices.is_empty(),
        selected_indices,
        n_required: None,
        p_values,
    })
}

/// Certifies the whole batch; draws from `rng.child(N)` so the p-value
/// matches the last prefix of [`design`] under the same seed.
pub fn certification_only(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    wfn: &WeightFn,
    alpha: f64,
    b: usize,
    rng: RngStream,
) -> Result<BaselineOutcome> {
    check_alpha(alpha)?;
    let n = batch.len();
    let p = randomized_pvalue(pool, batch, stat, wfn, b, rng.child(n as u64))?.p_value;
    let certified = p <= alpha;
    Ok(BaselineOutcome {
        method: BaselineMethod::CertificationOnly,
        selected_indices: if certified { (0..n).collect() } else { Vec::new() },
        n_required: None,
        certified,
        p_values: vec![p],
    })
}

/// Smallest `n` with `(1 - p_hat)^n <= alpha`.
pub fn heuristic_batch_size(p_hat: f64, alpha: f64) -> Result<u64> {
    check_alpha(alpha)?;
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(invalid(format!(
            "hit-rate estimate {p_hat} must lie strictly inside (0, 1); with a degenerate rate use certification instead"
        )));
    }
    let q = 1.0 - p_hat;
    let mut n = (alpha.ln() / q.ln()).ceil().max(1.0) as u64;
    // the closed form can land one off near exact boundaries
    while n > 1 && q.powf((n - 1) as f64) <= alpha {
        n -= 1;
    }
    while q.powf(n as f64) > alpha {
        n += 1;
    }
    Ok(n)
}

/// Design with `w ≡ 1`, ignoring any covariate shift.
pub fn unweighted_design(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    alpha: f64,
    b: usize,
    rng: RngStream,
) -> Result<(PValueProfile, DesignOutcome)> {
    design(pool, batch, stat, &WeightFn::Uniform, alpha, b, rng)
}
