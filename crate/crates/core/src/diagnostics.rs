//! Checks on the quality of density-ratio weights: covariate balance,
//! validation under an artificial group shift, sensitivity to tempering the
//! weights, and the error-inflation bound for estimated weights.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{CandidateBatch, FeatureVector, HiddenLabels, LabeledPool};
use crate::error::{invalid, Error, Result};
use crate::nested::{design_from_profile, prefix_profile, DesignOutcome};
use crate::pvalue::{check_alpha, PooledSample};
use crate::rng::RngStream;
use crate::scores::ScoreStatistic;
use crate::weights::{build_ratio, power_transform, KdeOptions, WeightFn};

pub const KL_BINS: usize = 20;

/// KL divergence of a 20-bin histogram of `p_values` (add-one smoothed)
/// from the uniform distribution on `[0, 1]`.
pub fn kl_from_uniform(p_values: &[f64]) -> f64 {
    let mut counts = [0usize; KL_BINS];
    for &p in p_values {
        let bin = ((p * KL_BINS as f64).floor() as usize).min(KL_BINS - 1);
        counts[bin] += 1;
    }
    let total = (p_values.len() + KL_BINS) as f64;
    counts
        .iter()
        .map(|&c| {
            let q = (c + 1) as f64 / total;
            q * (KL_BINS as f64 * q).ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    /// `|mean_I0 f - mean_test f|` with unit weights.
    pub imbalance_before: Vec<f64>,
    /// `|(1/n0) Σ w f - mean_test f|`.
    pub imbalance_after: Vec<f64>,
    /// Same with the self-normalized mean `Σ w f / Σ w`.
    pub imbalance_after_self_normalized: Vec<f64>,
    /// Standard error of `(1/n0) Σ w f`.
    pub weighted_mean_standard_error: Vec<f64>,
    pub cosine_distance_before: f64,
    pub cosine_distance_after: f64,
    pub cosine_distance_after_self_normalized: f64,
}

/// Scalar function of a feature row used in balance checks.
pub type FeatureMap<'a> = &'a (dyn Fn(&FeatureVector) -> f64 + Sync);

/// Balance check on the coordinate projections.
pub fn balance_check(pool: &LabeledPool, batch: &CandidateBatch, wfn: &WeightFn) -> Result<BalanceReport> {
    let d = pool.dimension();
    let projections: Vec<Box<dyn Fn(&FeatureVector) -> f64 + Sync>> = (0..d)
        .map(|c| Box::new(move |x: &FeatureVector| x.as_slice()[c]) as Box<dyn Fn(&FeatureVector) -> f64 + Sync>)
        .collect();
    let maps: Vec<FeatureMap> = projections.iter().map(|b| b.as_ref()).collect();
    balance_check_with(pool, batch, wfn, &maps)
}

pub fn balance_check_with(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    wfn: &WeightFn,
    maps: &[FeatureMap],
) -> Result<BalanceReport> {
    if batch.dimension() != pool.dimension() {
        return Err(Error::DimensionMismatch {
            expected: pool.dimension(),
            found: batch.dimension(),
        });
    }
    wfn.check_dimension(pool.dimension())?;
    let inactive: Vec<&FeatureVector> = pool.inactive_indices().into_iter().map(|i| &pool.features()[i]).collect();
    if inactive.is_empty() {
        return Err(Error::EmptyInactiveSet);
    }
    if batch.is_empty() {
        return Err(invalid("candidate batch is empty"));
    }
    let w: Vec<f64> = inactive.iter().map(|x| wfn.evaluate(x)).collect();
    let n0 = inactive.len() as f64;
    let w_sum: f64 = w.iter().sum();

    let mut cal_plain = Vec::new();
    let mut cal_weighted = Vec::new();
    let mut cal_self = Vec::new();
    let mut test_mean = Vec::new();
    let mut se = Vec::new();
    for f in maps {
        let fx: Vec<f64> = inactive.iter().map(|x| f(x)).collect();
        let wf: Vec<f64> = fx.iter().zip(&w).map(|(a, b)| a * b).collect();
        let mean_wf = wf.iter().sum::<f64>() / n0;
        cal_plain.push(fx.iter().sum::<f64>() / n0);
        cal_weighted.push(mean_wf);
        cal_self.push(wf.iter().sum::<f64>() / w_sum);
        test_mean.push(batch.features().iter().map(|x| f(x)).sum::<f64>() / batch.len() as f64);
        let var = if wf.len() > 1 {
            wf.iter().map(|v| (v - mean_wf).powi(2)).sum::<f64>() / (n0 - 1.0)
        } else {
            0.0
        };
        se.push((var / n0).sqrt());
    }
    let gap = |a: &[f64]| a.iter().zip(&test_mean).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>();
    Ok(BalanceReport {
        imbalance_before: gap(&cal_plain),
        imbalance_after: gap(&cal_weighted),
        imbalance_after_self_normalized: gap(&cal_self),
        weighted_mean_standard_error: se,
        cosine_distance_before: cosine_distance(&cal_plain, &test_mean),
        cosine_distance_after: cosine_distance(&cal_weighted, &test_mean),
        cosine_distance_after_self_normalized: cosine_distance(&cal_self, &test_mean),
    })
}

/// `1 - cos(a, b)`; zero vectors count as aligned only with each other.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    1.0 - dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftAlphaRow {
    pub alpha: f64,
    pub error_weighted: f64,
    pub error_unweighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftCheckReport {
    pub test_groups: Vec<String>,
    pub n_calibration: usize,
    pub n_test_null: usize,
    pub bandwidth_p: f64,
    pub bandwidth_q: f64,
    pub kl_weighted: f64,
    pub kl_unweighted: f64,
    pub per_alpha: Vec<ShiftAlphaRow>,
    pub p_values_weighted: Vec<f64>,
    pub p_values_unweighted: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ShiftCheckOptions {
    pub top_groups: usize,
    pub kde: KdeOptions,
    pub alpha_grid: Vec<f64>,
    pub permutations: usize,
}

/// Splits labeled data by group: the `top_groups` most frequent groups
/// (ties by key) form a pseudo-test fold, the rest pseudo-calibration.
/// Each inactive pseudo-test row is a true null, so its single-point
/// p-value should look uniform once the fold shift is weighted away.
pub fn validation_shift(
    pool: &LabeledPool,
    group_keys: &[String],
    stat: &ScoreStatistic,
    opts: &ShiftCheckOptions,
    rng: RngStream,
) -> Result<ShiftCheckReport> {
    if group_keys.len() != pool.len() {
        return Err(Error::LengthMismatch {
            context: "group keys".into(),
            expected: pool.len(),
            found: group_keys.len(),
        });
    }
    for &a in &opts.alpha_grid {
        check_alpha(a)?;
    }
    let mu = pool.predictor_scores().ok_or(Error::MissingScores("calibration pool"))?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in group_keys {
        *counts.entry(g.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(invalid(format!("need at least 2 distinct groups, found {}", counts.len())));
    }
    if opts.top_groups == 0 || opts.top_groups >= counts.len() {
        return Err(invalid(format!(
            "top_groups must lie in 1..{}, got {}",
            counts.len() - 1,
            opts.top_groups
        )));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let test_groups: Vec<String> = ranked[..opts.top_groups].iter().map(|g| g.0.to_string()).collect();
    let in_test = |i: usize| test_groups.iter().any(|g| g == &group_keys[i]);

    let cal_rows: Vec<usize> = (0..pool.len()).filter(|&i| !in_test(i)).collect();
    let test_rows: Vec<usize> = (0..pool.len()).filter(|&i| in_test(i)).collect();
    let cal_inactive: Vec<usize> = cal_rows.iter().copied().filter(|&i| !pool.labels()[i]).collect();
    if cal_inactive.is_empty() {
        return Err(Error::EmptyInactiveSet);
    }
    let test_null: Vec<usize> = test_rows.iter().copied().filter(|&i| !pool.labels()[i]).collect();
    if test_null.is_empty() {
        return Err(invalid("pseudo-test fold has no inactive rows"));
    }

    let feats = |rows: &[usize]| rows.iter().map(|&i| pool.features()[i].clone()).collect::<Vec<_>>();
    let cal_feats = feats(&cal_rows);
    let test_feats = feats(&test_rows);
    let wfn = build_ratio(&cal_feats, &test_feats, &opts.kde, rng.named("kde"))?;
    let (bandwidth_p, bandwidth_q) = match &wfn {
        WeightFn::KdeRatio(m) => (m.bandwidth_p(), m.bandwidth_q()),
        _ => (f64::NAN, f64::NAN),
    };

    let cal_scores: Vec<f64> = cal_inactive.iter().map(|&i| mu[i]).collect();
    let cal_w = wfn.evaluate_rows(&feats(&cal_inactive), "pseudo-calibration")?;
    let ones = vec![1.0; cal_scores.len()];
    let draws = rng.named("pvalues");
    let pairs = test_null
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let w = wfn.evaluate(&pool.features()[i]);
            let stream = draws.child(j as u64);
            let weighted = PooledSample::new(&cal_scores, &cal_w, &[mu[i]], &[w])?
                .randomized_pvalue(stat, opts.permutations, stream)?
                .p_value;
            let plain = PooledSample::new(&cal_scores, &ones, &[mu[i]], &[1.0])?
                .randomized_pvalue(stat, opts.permutations, stream)?
                .p_value;
            Ok((weighted, plain))
        })
        .collect::<Result<Vec<_>>>()?;
    let (p_w, p_u): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let rate = |p: &[f64], a: f64| p.iter().filter(|&&x| x <= a).count() as f64 / p.len() as f64;
    Ok(ShiftCheckReport {
        test_groups,
        n_calibration: cal_rows.len(),
        n_test_null: test_null.len(),
        bandwidth_p,
        bandwidth_q,
        kl_weighted: kl_from_uniform(&p_w),
        kl_unweighted: kl_from_uniform(&p_u),
        per_alpha: opts
            .alpha_grid
            .iter()
            .map(|&a| ShiftAlphaRow {
                alpha: a,
                error_weighted: rate(&p_w, a),
                error_unweighted: rate(&p_u, a),
            })
            .collect(),
        p_values_weighted: p_w,
        p_values_unweighted: p_u,
    })
}

/// One input of a sensitivity sweep: its own pool, batch and hidden truth.
#[derive(Debug, Clone)]
pub struct SensitivityCase {
    pub pool: LabeledPool,
    pub batch: CandidateBatch,
    pub truth: HiddenLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityAlphaRow {
    pub alpha: f64,
    pub error_rate: f64,
    /// Fraction of inputs left with an empty shortlist.
    pub rejection_rate: f64,
    /// Inputs whose certified/empty decision differs from `gamma = 1`.
    pub decision_flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub gamma: f64,
    /// KL from uniform of the full-batch p-values of inputs without hits;
    /// `None` when no input is a null.
    pub kl_from_uniform_of_null_pvalues: Option<f64>,
    pub per_alpha: Vec<SensitivityAlphaRow>,
    pub worst_case_decision_flips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub gamma_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub rows: Vec<SensitivityRow>,
}

/// Reruns design with `w^gamma` for every gamma; input `i` always draws
/// from `rng.child(i)`, so the `gamma = 1` row reproduces the base run.
pub fn sensitivity_sweep(
    cases: &[SensitivityCase],
    base: &WeightFn,
    gamma_grid: &[f64],
    stat: &ScoreStatistic,
    alpha_grid: &[f64],
    b: usize,
    rng: RngStream,
) -> Result<SensitivityReport> {
    if gamma_grid.is_empty() || !gamma_grid.contains(&1.0) {
        return Err(invalid("gamma grid must be nonempty and contain 1"));
    }
    if cases.is_empty() {
        return Err(invalid("no inputs to sweep"));
    }
    if alpha_grid.is_empty() {
        return Err(invalid("alpha grid is empty"));
    }
    for &a in alpha_grid {
        check_alpha(a)?;
    }
    for c in cases {
        if c.truth.len() != c.batch.len() {
            return Err(Error::LengthMismatch {
                context: "hidden labels".into(),
                expected: c.batch.len(),
                found: c.truth.len(),
            });
        }
    }
    let wfns = gamma_grid
        .iter()
        .map(|&g| power_transform(base.clone(), g))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..gamma_grid.len())
        .flat_map(|g| (0..cases.len()).map(move |c| (g, c)))
        .collect();
    let profiles = cells
        .par_iter()
        .map(|&(g, c)| {
            let case = &cases[c];
            prefix_profile(&case.pool, &case.batch, stat, &wfns[g], b, rng.child(c as u64))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = cases.len();
    let outcomes = |g: usize| -> Result<Vec<Vec<DesignOutcome>>> {
        alpha_grid
            .iter()
            .map(|&a| {
                (0..n)
                    .map(|c| design_from_profile(&profiles[g * n + c].monotone, a))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    };
    let base_g = gamma_grid.iter().position(|&g| g == 1.0).unwrap_or(0);
    let base_outcomes = outcomes(base_g)?;

    let mut rows = Vec::with_capacity(gamma_grid.len());
    for (g, &gamma) in gamma_grid.iter().enumerate() {
        let null_p: Vec<f64> = (0..n)
            .filter(|&c| !cases[c].truth.any_hit())
            .map(|c| *profiles[g * n + c].raw.last().unwrap())
            .collect();
        let per_alpha: Vec<SensitivityAlphaRow> = outcomes(g)?
            .iter()
            .zip(&base_outcomes)
            .zip(alpha_grid)
            .map(|((outs, base_outs), &alpha)| {
                let errors = outs
                    .iter()
                    .zip(cases)
                    .filter(|(o, c)| o.n_hat > 0 && !c.truth.hit_in_prefix(o.n_hat))
                    .count();
                let empty = outs.iter().filter(|o| o.n_hat == 0).count();
                let flips = outs
                    .iter()
                    .zip(base_outs)
                    .filter(|(o, b)| o.is_certified() != b.is_certified())
                    .count();
                SensitivityAlphaRow {
                    alpha,
                    error_rate: errors as f64 / n as f64,
                    rejection_rate: empty as f64 / n as f64,
                    decision_flips: flips,
                }
            })
            .collect();
        rows.push(SensitivityRow {
            gamma,
            kl_from_uniform_of_null_pvalues: (!null_p.is_empty()).then(|| kl_from_uniform(&null_p)),
            worst_case_decision_flips: per_alpha.iter().map(|r| r.decision_flips).max().unwrap_or(0),
            per_alpha,
        });
    }
    Ok(SensitivityReport {
        gamma_grid: gamma_grid.to_vec(),
        alpha_grid: alpha_grid.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RobustnessGap {
    pub t: f64,
    /// Estimated-weight p-value at the cutoff; equals `t` if nothing qualifies.
    pub t_hat: f64,
    /// Smallest drawn score whose estimated-weight p-value is at most `t`.
    pub v_hat: Option<f64>,
    pub delta_plus: f64,
    pub delta_minus: f64,
    /// Sum of true joint weights over the draws, same scale as the deltas.
    pub true_weight_total: f64,
    pub bound: f64,
    /// Randomized p-values of the actual arrangement over the same draws.
    pub p_value_estimated: f64,
    pub p_value_true: f64,
}

/// Per-draw error-inflation bound for estimated weights.
///
/// Over the identity plus `B` drawn arrangements, with `p̂(v)` the
/// estimated-weight tail mass above `v`, `v̂` the smallest drawn score with
/// `p̂(v̂) <= t` and `t̂ = p̂(v̂)`:
///
/// ```text
/// bound = t + (t̂ Δ⁺ + (1 - t̂) Δ⁻) / Σ_b w̄_b
/// Δ⁺ = Σ_b [ŵ̄_b - w̄_b]₊ 1{V_b < v̂},   Δ⁻ = Σ_b [ŵ̄_b - w̄_b]₋ 1{V_b >= v̂}
/// ```
///
/// Averaging `bound` over null replicates bounds the null exceedance
/// probability of the estimated-weight p-value. Both weight functions are
/// divided by one common constant first, which leaves `bound` unchanged.
pub fn robustness_gap(
    pool: &LabeledPool,
    batch_prefix: &CandidateBatch,
    stat: &ScoreStatistic,
    true_wfn: &WeightFn,
    est_wfn: &WeightFn,
    t: f64,
    b: usize,
    rng: RngStream,
) -> Result<RobustnessGap> {
    let truth = PooledSample::from_pool(pool, batch_prefix, true_wfn)?;
    let est = PooledSample::from_pool(pool, batch_prefix, est_wfn)?;
    robustness_gap_pooled(&truth, est.weights(), stat, t, b, rng)
}

/// [`robustness_gap`] on an already pooled sample with true weights and a
/// parallel vector of estimated weights.
pub fn robustness_gap_pooled(
    truth: &PooledSample,
    est_weights: &[f64],
    stat: &ScoreStatistic,
    t: f64,
    b: usize,
    rng: RngStream,
) -> Result<RobustnessGap> {
    if !(t > 0.0 && t < 1.0) {
        return Err(invalid(format!("t must lie in (0, 1), got {t}")));
    }
    if b == 0 {
        return Err(invalid("need at least one sampled permutation"));
    }
    let scale = truth
        .weights()
        .iter()
        .chain(est_weights)
        .copied()
        .fold(0.0, f64::max);
    let true_w = truth.with_weights(truth.weights().iter().map(|w| w / scale).collect())?;
    let est_w = truth.with_weights(est_weights.iter().map(|w| w / scale).collect())?;
    let prepared = stat.prepare(truth.scores())?;

    let n0 = truth.n_calibration();
    let identity: Vec<usize> = (n0..truth.len()).collect();
    let mut draws = vec![identity];
    draws.extend(
        true_w
            .draw_permutations(crate::pvalue::Sampler::Subset, b, rng)
            .into_iter()
            .map(|d| d.test_occupants),
    );
    let joint = |w: &[f64], occ: &[usize]| occ.iter().map(|&i| w[i]).product::<f64>();
    let v: Vec<f64> = draws.iter().map(|o| prepared.score_sorted(o)).collect();
    let wt: Vec<f64> = draws.iter().map(|o| joint(true_w.weights(), o)).collect();
    let we: Vec<f64> = draws.iter().map(|o| joint(est_w.weights(), o)).collect();
    let total_t: f64 = wt.iter().sum();
    let total_e: f64 = we.iter().sum();
    let tail = |w: &[f64], cut: f64| v.iter().zip(w).filter(|(s, _)| cut <= **s).map(|(_, w)| w).sum::<f64>();

    let p_value_estimated = tail(&we, v[0]) / total_e;
    let p_value_true = tail(&wt, v[0]) / total_t;

    // p̂ is non-increasing in the cutoff, so the qualifying scores form an
    // upper set; its smallest member is the last crossing going downward.
    let mut distinct = v.clone();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut v_hat = None;
    let mut acc = 0.0;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let mut pos = 0;
    for &cut in &distinct {
        while pos < order.len() && v[order[pos]] >= cut {
            acc += we[order[pos]];
            pos += 1;
        }
        if acc / total_e <= t {
            v_hat = Some(cut);
        } else {
            break;
        }
    }
    let Some(cut) = v_hat else {
        return Ok(RobustnessGap {
            t,
            t_hat: t,
            v_hat: None,
            delta_plus: 0.0,
            delta_minus: 0.0,
            true_weight_total: total_t,
            bound: t,
            p_value_estimated,
            p_value_true,
        });
    };
    let t_hat = tail(&we, cut) / total_e;
    let mut delta_plus = 0.0;
    let mut delta_minus = 0.0;
    for i in 0..v.len() {
        let diff = we[i] - wt[i];
        if v[i] < cut {
            delta_plus += diff.max(0.0);
        } else {
            delta_minus += (-diff).max(0.0);
        }
    }
    Ok(RobustnessGap {
        t,
        t_hat,
        v_hat: Some(cut),
        delta_plus,
        delta_minus,
        true_weight_total: total_t,
        bound: t + (t_hat * delta_plus + (1.0 - t_hat) * delta_minus) / total_t,
        p_value_estimated,
        p_value_true,
    })
}
