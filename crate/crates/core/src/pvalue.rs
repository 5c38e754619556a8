//! Weighted multi-sample conformal p-values.
//!
//! The pooled array holds the inactive calibration rows followed by the `k`
//! test rows. A permutation of the pooled array places some `k` elements in
//! the test positions; its joint weight is the product of those elements'
//! weights. With `V` the conformity score and `π⁰` the identity,
//!
//! ```text
//! p = Σ_b w̄(π_b) · 1{V(π⁰) ≤ V(π_b)} / Σ_b w̄(π_b)
//! ```
//!
//! where the sum runs over the identity plus `B` uniformly drawn
//! permutations (randomized variant) or over every permutation
//! (deterministic variant). Every shipped score depends only on the set of
//! test occupants, so a uniform permutation is realized as a uniform
//! `k`-subset, and full enumeration collapses to the `C(n0 + k, k)` subsets.
//!
//! Weights are divided by the largest pooled weight before forming
//! products. The division leaves the p-value unchanged and makes rescaling
//! every weight by a power of two a bitwise no-op. If products still
//! underflow, the computation is repeated in log space.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_len, CandidateBatch, FeatureVector, LabeledPool};
use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::scores::{PreparedScores, ScoreStatistic};
use crate::weights::WeightFn;

pub const DEFAULT_PERMUTATIONS: usize = 2000;
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

/// How uniform permutations are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Partial Fisher–Yates: a uniform `k`-subset of the pooled indices.
    #[default]
    Subset,
    /// Full shuffle of the pooled array; test positions are the last `k`.
    FullPermutation,
}

/// One sampled arrangement: the pooled elements sitting in test positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationDraw {
    pub test_occupants: Vec<usize>,
    pub joint_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PValueEstimate {
    pub p_value: f64,
    pub k: usize,
    /// Sampled permutations (randomized) or enumerated subsets (deterministic).
    pub permutations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertificationResult {
    pub p_value: f64,
    pub certified: bool,
    pub alpha: f64,
    pub k: usize,
    pub b_used: u64,
}

impl CertificationResult {
    pub fn new(estimate: PValueEstimate, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            p_value: estimate.p_value,
            certified: estimate.p_value <= alpha,
            alpha,
            k: estimate.k,
            b_used: estimate.permutations,
        })
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_weight(w: f64, context: &str) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::NonPositiveWeight {
            context: context.into(),
            value: w,
        });
    }
    Ok(())
}

/// Scores and weights of the pooled array: `n0` calibration entries, then
/// `k` test entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample {
    scores: Vec<f64>,
    weights: Vec<f64>,
    n_calibration: usize,
}

impl PooledSample {
    pub fn new(
        calibration_scores: &[f64],
        calibration_weights: &[f64],
        test_scores: &[f64],
        test_weights: &[f64],
    ) -> Result<Self> {
        if calibration_scores.is_empty() {
            return Err(Error::EmptyInactiveSet);
        }
        if test_scores.is_empty() {
            return Err(invalid("no test rows"));
        }
        for (name, a, b) in [
            ("calibration weights", calibration_scores.len(), calibration_weights.len()),
            ("test weights", test_scores.len(), test_weights.len()),
        ] {
            if a != b {
                return Err(Error::LengthMismatch {
                    context: name.into(),
                    expected: a,
                    found: b,
                });
            }
        }
        let scores: Vec<f64> = calibration_scores.iter().chain(test_scores).copied().collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: "predictor scores".into(),
            });
        }
        let weights: Vec<f64> = calibration_weights.iter().chain(test_weights).copied().collect();
        for (i, &w) in weights.iter().enumerate() {
            check_weight(w, &format!("pooled element {i}"))?;
        }
        Ok(Self {
            scores,
            weights,
            n_calibration: calibration_scores.len(),
        })
    }

    /// Inactive calibration rows of `pool` followed by every row of `batch`.
    pub fn from_pool(pool: &LabeledPool, batch: &CandidateBatch, wfn: &WeightFn) -> Result<Self> {
        let parts = CalibrationSide::new(pool, wfn)?;
        parts.check_batch(batch)?;
        let test_weights = wfn.evaluate_rows(batch.features(), "candidate")?;
        Self::new(&parts.scores, &parts.weights, batch.predictor_scores(), &test_weights)
    }

    /// Like [`from_pool`](Self::from_pool) with precomputed weights: one per
    /// pool row (rows with label 1 are skipped) and one per candidate.
    pub fn from_pool_with_weights(
        pool: &LabeledPool,
        batch: &CandidateBatch,
        pool_weights: &[f64],
        batch_weights: &[f64],
    ) -> Result<Self> {
        let parts = CalibrationSide::from_row_weights(pool, pool_weights)?;
        parts.check_batch(batch)?;
        check_len("candidate weights", batch.len(), batch_weights.len())?;
        Self::new(&parts.scores, &parts.weights, batch.predictor_scores(), batch_weights)
    }

    pub fn n_calibration(&self) -> usize {
        self.n_calibration
    }

    pub fn k(&self) -> usize {
        self.scores.len() - self.n_calibration
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same pooled array with different weights (e.g. estimated vs. true).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::LengthMismatch {
                context: "replacement weights".into(),
                expected: self.len(),
                found: weights.len(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            check_weight(w, &format!("pooled element {i}"))?;
        }
        Ok(Self {
            scores: self.scores.clone(),
            weights,
            n_calibration: self.n_calibration,
        })
    }

    fn identity_occupants(&self) -> Vec<usize> {
        (self.n_calibration..self.len()).collect()
    }

    fn normalized_weights(&self) -> Vec<f64> {
        let max = self.weights.iter().copied().fold(0.0, f64::max);
        self.weights.iter().map(|w| w / max).collect()
    }

    fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    /// `B` sampled arrangements (identity excluded), occupants sorted.
    pub fn draw_permutations(&self, sampler: Sampler, b: usize, rng: RngStream) -> Vec<PermutationDraw> {
        let mut draws = Vec::with_capacity(b);
        let mut gen = DrawGenerator::new(self.len(), self.k(), sampler);
        let mut r = rng.rng();
        for _ in 0..b {
            let occ = gen.next(&mut r);
            let joint_weight = occ.iter().map(|&i| self.weights[i]).product();
            draws.push(PermutationDraw {
                test_occupants: occ.to_vec(),
                joint_weight,
            });
        }
        draws
    }

    pub fn randomized_pvalue(&self, stat: &ScoreStatistic, b: usize, rng: RngStream) -> Result<PValueEstimate> {
        self.randomized_pvalue_with(stat, b, Sampler::Subset, rng)
    }

    pub fn randomized_pvalue_with(
        &self,
        stat: &ScoreStatistic,
        b: usize,
        sampler: Sampler,
        rng: RngStream,
    ) -> Result<PValueEstimate> {
        if b == 0 {
            return Err(invalid("need at least one sampled permutation"));
        }
        let prepared = stat.prepare(&self.scores)?;
        let identity = self.identity_occupants();
        let v0 = prepared.score_sorted(&identity);

        let w = self.normalized_weights();
        let mut num = identity.iter().map(|&i| w[i]).product::<f64>();
        let mut den = num;
        let mut gen = DrawGenerator::new(self.len(), self.k(), sampler);
        let mut r = rng.rng();
        for _ in 0..b {
            let occ = gen.next(&mut r);
            let jw: f64 = occ.iter().map(|&i| w[i]).product();
            den += jw;
            if v0 <= prepared.score_sorted(occ) {
                num += jw;
            }
        }
        let p_value = if num > 0.0 && den.is_finite() {
            num / den
        } else {
            self.randomized_log_space(&prepared, v0, b, sampler, rng)
        };
        Ok(PValueEstimate {
            p_value,
            k: self.k(),
            permutations: b as u64,
        })
    }

    fn randomized_log_space(
        &self,
        prepared: &PreparedScores,
        v0: f64,
        b: usize,
        sampler: Sampler,
        rng: RngStream,
    ) -> f64 {
        let lw = self.log_weights();
        let identity = self.identity_occupants();
        let mut terms = Vec::with_capacity(b + 1);
        terms.push((identity.iter().map(|&i| lw[i]).sum::<f64>(), true));
        let mut gen = DrawGenerator::new(self.len(), self.k(), sampler);
        let mut r = rng.rng();
        for _ in 0..b {
            let occ = gen.next(&mut r);
            terms.push((occ.iter().map(|&i| lw[i]).sum(), v0 <= prepared.score_sorted(occ)));
        }
        log_space_ratio(&terms)
    }

    /// Exact p-value over every arrangement, collapsed to `k`-subsets.
    pub fn deterministic_pvalue(&self, stat: &ScoreStatistic, cap: u128) -> Result<PValueEstimate> {
        let subsets = binomial(self.len() as u128, self.k() as u128);
        if subsets > cap {
            return Err(Error::EnumerationCapExceeded { subsets, cap });
        }
        let prepared = stat.prepare(&self.scores)?;
        let identity = self.identity_occupants();
        let v0 = prepared.score_sorted(&identity);
        let w = self.normalized_weights();
        let (mut num, mut den) = (0.0, 0.0);
        for_each_subset(self.len(), self.k(), |occ| {
            let jw: f64 = occ.iter().map(|&i| w[i]).product();
            den += jw;
            if v0 <= prepared.score_sorted(occ) {
                num += jw;
            }
        });
        let w0: f64 = identity.iter().map(|&i| w[i]).product();
        let p_value = if w0 > 0.0 && den.is_finite() {
            num / den
        } else {
            let lw = self.log_weights();
            let mut terms = Vec::new();
            for_each_subset(self.len(), self.k(), |occ| {
                terms.push((occ.iter().map(|&i| lw[i]).sum(), v0 <= prepared.score_sorted(occ)));
            });
            log_space_ratio(&terms)
        };
        Ok(PValueEstimate {
            p_value,
            k: self.k(),
            permutations: subsets as u64,
        })
    }

    /// Single-test-point weighted p-value; requires `k = 1`.
    pub fn one_sample_pvalue(&self) -> Result<f64> {
        if self.k() != 1 {
            return Err(invalid(format!("one-sample p-value needs k = 1, got {}", self.k())));
        }
        let w = self.normalized_weights();
        let test = self.n_calibration;
        let s_test = self.scores[test];
        let mut num = w[test];
        let mut den = w[test];
        for i in 0..self.n_calibration {
            den += w[i];
            if self.scores[i] >= s_test {
                num += w[i];
            }
        }
        Ok(num / den)
    }
}

fn log_space_ratio(terms: &[(f64, bool)]) -> f64 {
    let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for &(lw, hit) in terms {
        let e = (lw - max).exp();
        den += e;
        if hit {
            num += e;
        }
    }
    num / den
}

/// Generates sorted occupant sets for one sampler, reusing its buffers.
struct DrawGenerator {
    pool: Vec<usize>,
    occupants: Vec<usize>,
    k: usize,
    sampler: Sampler,
}

impl DrawGenerator {
    fn new(n: usize, k: usize, sampler: Sampler) -> Self {
        Self {
            pool: (0..n).collect(),
            occupants: vec![0; k],
            k,
            sampler,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> &[usize] {
        let n = self.pool.len();
        match self.sampler {
            Sampler::Subset => {
                // partial Fisher–Yates; any starting order of `pool` works
                for i in 0..self.k {
                    let j = rng.random_range(i..n);
                    self.pool.swap(i, j);
                }
                self.occupants.copy_from_slice(&self.pool[..self.k]);
            }
            Sampler::FullPermutation => {
                self.pool.shuffle(rng);
                self.occupants.copy_from_slice(&self.pool[n - self.k..]);
            }
        }
        self.occupants.sort_unstable();
        &self.occupants
    }
}

pub(crate) fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
        if acc == u128::MAX {
            return acc;
        }
    }
    acc
}

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
pub(crate) fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k == 0 || k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Scores and weights of the inactive calibration rows, computed once and
/// shared by every prefix of a batch.
#[derive(Debug, Clone)]
pub(crate) struct CalibrationSide {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    dimension: usize,
}

impl CalibrationSide {
    pub fn new(pool: &LabeledPool, wfn: &WeightFn) -> Result<Self> {
        wfn.check_dimension(pool.dimension())?;
        let (inactive, scores) = Self::inactive_scores(pool)?;
        let rows: Vec<FeatureVector> = inactive.iter().map(|&i| pool.features()[i].clone()).collect();
        let weights = wfn.evaluate_rows(&rows, "inactive calibration")?;
        Ok(Self {
            scores,
            weights,
            dimension: pool.dimension(),
        })
    }

    pub fn from_row_weights(pool: &LabeledPool, pool_weights: &[f64]) -> Result<Self> {
        check_len("calibration weights", pool.len(), pool_weights.len())?;
        let (inactive, scores) = Self::inactive_scores(pool)?;
        let weights = inactive.iter().map(|&i| pool_weights[i]).collect();
        Ok(Self {
            scores,
            weights,
            dimension: pool.dimension(),
        })
    }

    fn inactive_scores(pool: &LabeledPool) -> Result<(Vec<usize>, Vec<f64>)> {
        let all_scores = pool.predictor_scores().ok_or(Error::MissingScores("calibration pool"))?;
        let inactive = pool.inactive_indices();
        if inactive.is_empty() {
            return Err(Error::EmptyInactiveSet);
        }
        let scores = inactive.iter().map(|&i| all_scores[i]).collect();
        Ok((inactive, scores))
    }

    pub fn check_batch(&self, batch: &CandidateBatch) -> Result<()> {
        if batch.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: batch.dimension(),
            });
        }
        Ok(())
    }
}

/// Randomized p-value for the batch against the pool's inactive rows.
pub fn randomized_pvalue(
    pool: &LabeledPool,
    batch_prefix: &CandidateBatch,
    stat: &ScoreStatistic,
    wfn: &WeightFn,
    b: usize,
    rng: RngStream,
) -> Result<PValueEstimate> {
    PooledSample::from_pool(pool, batch_prefix, wfn)?.randomized_pvalue(stat, b, rng)
}

/// Exact p-value by subset enumeration, subject to the default cap.
pub fn deterministic_pvalue(
    pool: &LabeledPool,
    batch_prefix: &CandidateBatch,
    stat: &ScoreStatistic,
    wfn: &WeightFn,
) -> Result<PValueEstimate> {
    PooledSample::from_pool(pool, batch_prefix, wfn)?.deterministic_pvalue(stat, DEFAULT_ENUMERATION_CAP)
}

/// Weighted conformal p-value of one candidate: large scores give small p.
pub fn one_sample_pvalue(
    pool: &LabeledPool,
    candidate: &FeatureVector,
    score: f64,
    wfn: &WeightFn,
) -> Result<f64> {
    let side = CalibrationSide::new(pool, wfn)?;
    if candidate.dim() != pool.dimension() {
        return Err(Error::DimensionMismatch {
            expected: pool.dimension(),
            found: candidate.dim(),
        });
    }
    let w = wfn.evaluate(candidate);
    PooledSample::new(&side.scores, &side.weights, &[score], &[w])?.one_sample_pvalue()
}

/// Certifies the batch at level `alpha` with the randomized p-value.
pub fn certify(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    wfn: &WeightFn,
    alpha: f64,
    b: usize,
    rng: RngStream,
) -> Result<CertificationResult> {
    check_alpha(alpha)?;
    CertificationResult::new(randomized_pvalue(pool, batch, stat, wfn, b, rng)?, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::ScoreKind;
    use proptest::prelude::*;

    fn max_stat() -> ScoreStatistic {
        ScoreStatistic::new(ScoreKind::MaxPool)
    }

    fn sample(cal: &[f64], test: &[f64]) -> PooledSample {
        PooledSample::new(cal, &vec![1.0; cal.len()], test, &vec![1.0; test.len()]).unwrap()
    }

    #[test]
    fn only_identity_fires_gives_one_over_b_plus_one() {
        // test score beats every calibration score, so every sampled subset
        // not equal to the identity scores strictly lower
        let s = sample(&[0.1, 0.2, 0.3, 0.25, 0.15, 0.05, 0.12, 0.22, 0.18, 0.11], &[0.9]);
        let prepared = max_stat().prepare(s.scores()).unwrap();
        // pick a seed whose 4 draws avoid the test element
        let seed = (0..1000)
            .find(|&seed| {
                s.draw_permutations(Sampler::Subset, 4, RngStream::new(seed))
                    .iter()
                    .all(|d| prepared.score_sorted(&d.test_occupants) < 0.9)
            })
            .unwrap();
        let p = s.randomized_pvalue(&max_stat(), 4, RngStream::new(seed)).unwrap();
        assert_eq!(p.p_value, 0.2);
    }

    #[test]
    fn constant_scores_give_one() {
        let s = PooledSample::new(&[0.5, 0.5, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.5], &[7.0, 0.1]).unwrap();
        for kind in ScoreKind::ALL {
            let p = s.randomized_pvalue(&ScoreStatistic::new(kind), 50, RngStream::new(1)).unwrap();
            assert_eq!(p.p_value, 1.0);
        }
    }

    #[test]
    fn small_example_enumeration_and_randomized() {
        let s = sample(&[0.1, 0.4, 0.2], &[0.3]);
        let det = s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(det.p_value, 0.5);
        assert_eq!(det.permutations, 4);
        // 0.05 is ~4.5 standard errors at B = 2000
        let mut far = 0;
        for seed in 0..200 {
            let r = s.randomized_pvalue(&max_stat(), 2000, RngStream::new(seed)).unwrap();
            if (r.p_value - 0.5).abs() > 0.05 {
                far += 1;
            }
        }
        assert_eq!(far, 0);
    }

    #[test]
    fn weighted_test_element_example() {
        let s = PooledSample::new(&[0.1, 0.4, 0.2], &[1.0; 3], &[0.3], &[2.0]).unwrap();
        let det = s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((det.p_value - 0.6).abs() < 1e-15);
        assert!((s.one_sample_pvalue().unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn two_test_points_max_pool_is_five_sixths() {
        let s = sample(&[0.9, 0.1], &[0.5, 0.6]);
        let det = s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((det.p_value - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(det.permutations, 6);
    }

    #[test]
    fn uniform_k1_is_classical_conformal_pvalue() {
        let cal = [0.3, 0.8, 0.1, 0.5, 0.5, 0.9, 0.2];
        for &t in &[0.0, 0.1, 0.5, 0.55, 0.95] {
            let s = sample(&cal, &[t]);
            let det = s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP).unwrap();
            let classical = (1 + cal.iter().filter(|&&c| c >= t).count()) as f64 / (cal.len() + 1) as f64;
            assert!((det.p_value - classical).abs() < 1e-15);
        }
    }

    #[test]
    fn one_sample_examples() {
        let s = sample(&[0.1, 0.4, 0.2], &[0.3]);
        assert_eq!(s.one_sample_pvalue().unwrap(), 0.5);
        let s = sample(&[0.1, 0.4, 0.2], &[0.01]);
        assert_eq!(s.one_sample_pvalue().unwrap(), 1.0);
        // test weight dominating both sums drives p to 1
        let s = PooledSample::new(&[0.9, 0.8], &[1.0, 1.0], &[0.95], &[1e12]).unwrap();
        assert!(s.one_sample_pvalue().unwrap() > 1.0 - 1e-11);
        assert!(sample(&[0.1], &[0.2, 0.3]).one_sample_pvalue().is_err());
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let cal: Vec<f64> = (0..60).map(|i| i as f64 / 60.0).collect();
        let s = sample(&cal, &[0.5; 5]);
        match s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP) {
            Err(Error::EnumerationCapExceeded { subsets, .. }) => assert_eq!(subsets, binomial(65, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            PooledSample::new(&[], &[], &[0.1], &[1.0]),
            Err(Error::EmptyInactiveSet)
        ));
        assert!(matches!(
            PooledSample::new(&[0.1], &[0.0], &[0.1], &[1.0]),
            Err(Error::NonPositiveWeight { .. })
        ));
        assert!(matches!(
            PooledSample::new(&[0.1], &[1.0], &[0.1], &[f64::INFINITY]),
            Err(Error::NonPositiveWeight { .. })
        ));
        let s = sample(&[0.1], &[0.2]);
        assert!(s.randomized_pvalue(&max_stat(), 0, RngStream::new(0)).is_err());
    }

    #[test]
    fn subset_enumeration_counts() {
        let mut seen = Vec::new();
        for_each_subset(5, 2, |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), 10);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[9], vec![3, 4]);
        assert_eq!(binomial(65, 5), 8_259_888);
        assert_eq!(binomial(4, 2), 6);
    }

    #[test]
    fn underflowing_products_fall_back_to_log_space() {
        // per-element ratios of e^-300 make k = 3 products underflow
        let tiny = (-300.0f64).exp();
        let s = PooledSample::new(&[0.1, 0.9, 0.4], &[1.0, 1.0, 1.0], &[0.5, 0.6, 0.7], &[tiny; 3]).unwrap();
        let det = s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(det.p_value > 0.0 && det.p_value <= 1.0);
        let r = s.randomized_pvalue(&max_stat(), 100, RngStream::new(3)).unwrap();
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn draws_report_consistent_joint_weights() {
        let s = PooledSample::new(&[0.1, 0.2, 0.3, 0.4], &[0.5, 2.0, 1.5, 0.7], &[0.6, 0.7], &[3.0, 0.2]).unwrap();
        for sampler in [Sampler::Subset, Sampler::FullPermutation] {
            for d in s.draw_permutations(sampler, 200, RngStream::new(9)) {
                assert_eq!(d.test_occupants.len(), 2);
                assert!(d.test_occupants[0] < d.test_occupants[1] && d.test_occupants[1] < 6);
                let w: f64 = d.test_occupants.iter().map(|&i| s.weights()[i]).product();
                assert!(((w - d.joint_weight) / w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p_value_floor_is_identity_share() {
        let s = PooledSample::new(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0], &[0.9, 0.8], &[0.5, 0.25]).unwrap();
        let r = s.randomized_pvalue(&max_stat(), 30, RngStream::new(4)).unwrap();
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let det = s.deterministic_pvalue(&max_stat(), DEFAULT_ENUMERATION_CAP).unwrap();
        let mut total = 0.0;
        for_each_subset(5, 2, |o| total += o.iter().map(|&i| s.weights()[i]).product::<f64>());
        assert!(det.p_value >= 0.5 * 0.25 / total - 1e-15);
    }

    proptest! {
        #[test]
        fn power_of_two_rescaling_is_bitwise_invisible(
            cal in prop::collection::vec((0.0f64..1.0, 0.05f64..20.0), 1..8),
            test in prop::collection::vec((0.0f64..1.0, 0.05f64..20.0), 1..4),
            exp in -20i32..20,
            seed in any::<u64>(),
        ) {
            let c = 2f64.powi(exp);
            let (cs, cw): (Vec<f64>, Vec<f64>) = cal.iter().copied().unzip();
            let (ts, tw): (Vec<f64>, Vec<f64>) = test.iter().copied().unzip();
            let a = PooledSample::new(&cs, &cw, &ts, &tw).unwrap();
            let scale = |v: &[f64]| v.iter().map(|w| w * c).collect::<Vec<_>>();
            let b = PooledSample::new(&cs, &scale(&cw), &ts, &scale(&tw)).unwrap();
            for kind in ScoreKind::ALL {
                let stat = ScoreStatistic::new(kind);
                let ra = a.randomized_pvalue(&stat, 64, RngStream::new(seed)).unwrap();
                let rb = b.randomized_pvalue(&stat, 64, RngStream::new(seed)).unwrap();
                prop_assert_eq!(ra.p_value.to_bits(), rb.p_value.to_bits());
                let da = a.deterministic_pvalue(&stat, DEFAULT_ENUMERATION_CAP).unwrap();
                let db = b.deterministic_pvalue(&stat, DEFAULT_ENUMERATION_CAP).unwrap();
                prop_assert_eq!(da.p_value.to_bits(), db.p_value.to_bits());
            }
            if ts.len() == 1 {
                prop_assert_eq!(a.one_sample_pvalue().unwrap().to_bits(), b.one_sample_pvalue().unwrap().to_bits());
            }
        }

        #[test]
        fn p_values_lie_in_unit_interval(
            cal in prop::collection::vec((0.0f64..1.0, 0.01f64..100.0), 1..10),
            test in prop::collection::vec((0.0f64..1.0, 0.01f64..100.0), 1..4),
            seed in any::<u64>(),
        ) {
            let (cs, cw): (Vec<f64>, Vec<f64>) = cal.iter().copied().unzip();
            let (ts, tw): (Vec<f64>, Vec<f64>) = test.iter().copied().unzip();
            let s = PooledSample::new(&cs, &cw, &ts, &tw).unwrap();
            for kind in ScoreKind::ALL {
                let stat = ScoreStatistic::new(kind);
                let r = s.randomized_pvalue(&stat, 20, RngStream::new(seed)).unwrap().p_value;
                prop_assert!(r > 0.0 && r <= 1.0);
                let d = s.deterministic_pvalue(&stat, DEFAULT_ENUMERATION_CAP).unwrap().p_value;
                prop_assert!(d > 0.0 && d <= 1.0 + 1e-15);
            }
        }
    }
}
