//! Smallest certified prefix of a ranked batch.
//!
//! For each prefix length `k` the randomized p-value tests "none of the
//! first `k` candidates is a hit". The sequence is made non-increasing by a
//! backward running maximum and the design stops at the first `k` whose
//! monotone p-value is at most `alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_len, CandidateBatch, LabeledPool};
use crate::error::{invalid, Result};
use crate::pvalue::{check_alpha, CalibrationSide, PooledSample};
use crate::rng::RngStream;
use crate::scores::ScoreStatistic;
use crate::weights::WeightFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignStatus {
    Certified,
    NotConfidentEnough,
}

impl DesignStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignStatus::Certified => "certified",
            DesignStatus::NotConfidentEnough => "not_confident_enough",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PValueProfile {
    pub raw: Vec<f64>,
    pub monotone: Vec<f64>,
}

impl PValueProfile {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let monotone = monotonize(&raw)?;
        Ok(Self { raw, monotone })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignOutcome {
    pub n_hat: usize,
    /// 0-based candidate indices, always `0..n_hat`.
    pub shortlist: Vec<usize>,
    pub status: DesignStatus,
    pub alpha: f64,
}

impl DesignOutcome {
    pub fn is_certified(&self) -> bool {
        self.status == DesignStatus::Certified
    }
}

/// Backward running maximum: entry `k` becomes `max(raw[k..])`.
pub fn monotonize(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = raw.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("p-value {p} outside [0, 1]")));
    }
    let mut out = raw.to_vec();
    for i in (0..out.len().saturating_sub(1)).rev() {
        out[i] = out[i].max(out[i + 1]);
    }
    Ok(out)
}

/// First-crossing stopping rule on a monotone sequence.
pub fn design_from_profile(monotone: &[f64], alpha: f64) -> Result<DesignOutcome> {
    check_alpha(alpha)?;
    let n_hat = monotone.iter().position(|&p| p <= alpha).map_or(0, |k| k + 1);
    let status = if n_hat > 0 {
        DesignStatus::Certified
    } else {
        DesignStatus::NotConfidentEnough
    };
    Ok(DesignOutcome {
        n_hat,
        shortlist: (0..n_hat).collect(),
        status,
        alpha,
    })
}

/// Raw and monotone p-values for every prefix `k = 1..N`. Prefix `k` draws
/// from `rng.child(k)`, so extending the batch leaves earlier entries alone.
pub fn prefix_profile(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    wfn: &WeightFn,
    b: usize,
    rng: RngStream,
) -> Result<PValueProfile> {
    if batch.is_empty() {
        return Err(invalid("candidate batch is empty"));
    }
    let side = CalibrationSide::new(pool, wfn)?;
    let test_weights = wfn.evaluate_rows(batch.features(), "candidate")?;
    profile_from_side(&side, batch, stat, &test_weights, b, rng)
}

/// [`prefix_profile`] with precomputed weights, one per pool row and one
/// per candidate.
pub fn prefix_profile_with_weights(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    pool_weights: &[f64],
    batch_weights: &[f64],
    b: usize,
    rng: RngStream,
) -> Result<PValueProfile> {
    if batch.is_empty() {
        return Err(invalid("candidate batch is empty"));
    }
    let side = CalibrationSide::from_row_weights(pool, pool_weights)?;
    check_len("candidate weights", batch.len(), batch_weights.len())?;
    profile_from_side(&side, batch, stat, batch_weights, b, rng)
}

fn profile_from_side(
    side: &CalibrationSide,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    test_weights: &[f64],
    b: usize,
    rng: RngStream,
) -> Result<PValueProfile> {
    side.check_batch(batch)?;
    let scores = batch.predictor_scores();
    let raw = (1..=batch.len())
        .into_par_iter()
        .map(|k| {
            PooledSample::new(&side.scores, &side.weights, &scores[..k], &test_weights[..k])?
                .randomized_pvalue(stat, b, rng.child(k as u64))
                .map(|e| e.p_value)
        })
        .collect::<Result<Vec<f64>>>()?;
    PValueProfile::from_raw(raw)
}

pub fn design(
    pool: &LabeledPool,
    batch: &CandidateBatch,
    stat: &ScoreStatistic,
    wfn: &WeightFn,
    alpha: f64,
    b: usize,
    rng: RngStream,
) -> Result<(PValueProfile, DesignOutcome)> {
    check_alpha(alpha)?;
    let profile = prefix_profile(pool, batch, stat, wfn, b, rng)?;
    let outcome = design_from_profile(&profile.monotone, alpha)?;
    Ok((profile, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureVector;
    use crate::scores::ScoreKind;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn monotonize_examples() {
        assert_eq!(monotonize(&[0.9, 0.5, 0.2]).unwrap(), vec![0.9, 0.5, 0.2]);
        assert_eq!(monotonize(&[0.2, 0.5, 0.1]).unwrap(), vec![0.5, 0.5, 0.1]);
        assert_eq!(monotonize(&[0.3]).unwrap(), vec![0.3]);
        assert!(monotonize(&[]).unwrap().is_empty());
        assert!(monotonize(&[0.2, 1.5]).is_err());
        assert!(monotonize(&[-0.1]).is_err());
        assert!(monotonize(&[f64::NAN]).is_err());
    }

    #[test]
    fn first_crossing_examples() {
        let m = [0.4, 0.15, 0.08, 0.03];
        let o = design_from_profile(&m, 0.1).unwrap();
        assert_eq!((o.n_hat, o.shortlist.clone(), o.status), (3, vec![0, 1, 2], DesignStatus::Certified));
        assert_eq!(design_from_profile(&m, 0.5).unwrap().n_hat, 1);
        let o = design_from_profile(&[0.4, 0.35, 0.3], 0.1).unwrap();
        assert_eq!(o.n_hat, 0);
        assert!(o.shortlist.is_empty());
        assert_eq!(o.status, DesignStatus::NotConfidentEnough);
        assert!(design_from_profile(&m, 0.0).is_err());
        assert!(design_from_profile(&m, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn monotonize_is_idempotent_and_dominating(raw in prop::collection::vec(0.0f64..=1.0, 0..30)) {
            let m = monotonize(&raw).unwrap();
            prop_assert_eq!(monotonize(&m).unwrap(), m.clone());
            for k in 0..raw.len() {
                prop_assert!(m[k] >= raw[k]);
                prop_assert_eq!(m[k], raw[k..].iter().copied().fold(0.0, f64::max));
                if k + 1 < raw.len() {
                    prop_assert!(m[k] >= m[k + 1]);
                }
            }
        }

        #[test]
        fn certification_is_monotone_in_alpha(
            raw in prop::collection::vec(0.0f64..=1.0, 1..20),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m = monotonize(&raw).unwrap();
            let o_lo = design_from_profile(&m, lo).unwrap();
            let o_hi = design_from_profile(&m, hi).unwrap();
            if o_lo.n_hat > 0 {
                prop_assert!(o_hi.n_hat > 0);
            }
            prop_assert_eq!(o_lo.n_hat == 0, *m.last().unwrap() > lo);
            if o_lo.n_hat > 0 {
                prop_assert!(m[o_lo.n_hat - 1] <= lo);
                prop_assert!(o_lo.n_hat == 1 || m[o_lo.n_hat - 2] > lo);
            }
        }
    }

    fn toy(seed: u64, n: usize, k: usize) -> (LabeledPool, CandidateBatch) {
        let mut r = RngStream::new(seed).rng();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut mu = Vec::new();
        for _ in 0..n {
            let x: f64 = r.random_range(-2.0..2.0);
            feats.push(FeatureVector::new(vec![x]).unwrap());
            labels.push(r.random_bool(0.2));
            mu.push(r.random::<f64>());
        }
        let pool = LabeledPool::new(feats, labels, Some(mu)).unwrap();
        let cf = (0..k).map(|_| FeatureVector::new(vec![r.random_range(-1.0..3.0)]).unwrap()).collect();
        let cs = (0..k).map(|_| 0.5 + 0.5 * r.random::<f64>()).collect();
        (pool, CandidateBatch::new(cf, cs).unwrap())
    }

    #[test]
    fn prefix_draws_do_not_depend_on_later_candidates() {
        let (pool, batch) = toy(5, 40, 6);
        let stat = ScoreStatistic::new(ScoreKind::MaxPool);
        let w = WeightFn::analytic(vec![0.7]).unwrap();
        let full = prefix_profile(&pool, &batch, &stat, &w, 300, RngStream::new(8)).unwrap();
        let part = prefix_profile(&pool, &batch.prefix(3).unwrap(), &stat, &w, 300, RngStream::new(8)).unwrap();
        assert_eq!(&full.raw[..3], &part.raw[..]);
    }

    #[test]
    fn row_weights_match_weight_function() {
        let (pool, batch) = toy(3, 40, 4);
        let stat = ScoreStatistic::new(ScoreKind::MaxPool);
        let w = WeightFn::analytic(vec![0.7]).unwrap();
        let pw = w.evaluate_rows(pool.features(), "pool").unwrap();
        let bw = w.evaluate_rows(batch.features(), "batch").unwrap();
        let a = prefix_profile(&pool, &batch, &stat, &w, 200, RngStream::new(2)).unwrap();
        let b = prefix_profile_with_weights(&pool, &batch, &stat, &pw, &bw, 200, RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(prefix_profile_with_weights(&pool, &batch, &stat, &pw[1..], &bw, 200, RngStream::new(2)).is_err());
        assert!(prefix_profile_with_weights(&pool, &batch, &stat, &pw, &bw[1..], 200, RngStream::new(2)).is_err());
    }

    #[test]
    fn design_is_idempotent_on_its_shortlist() {
        let stat = ScoreStatistic::new(ScoreKind::SumPred);
        let w = WeightFn::analytic(vec![0.5]).unwrap();
        let mut checked = 0;
        for seed in 0..30 {
            let (pool, batch) = toy(seed, 60, 5);
            let (_, o) = design(&pool, &batch, &stat, &w, 0.3, 200, RngStream::new(seed)).unwrap();
            if o.n_hat == 0 {
                continue;
            }
            let short = batch.prefix(o.n_hat).unwrap();
            let (_, again) = design(&pool, &short, &stat, &w, 0.3, 200, RngStream::new(seed)).unwrap();
            assert_eq!(again.shortlist, o.shortlist);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn design_rejects_empty_batch_and_bad_alpha() {
        let (pool, batch) = toy(1, 10, 2);
        let stat = ScoreStatistic::default();
        assert!(design(&pool, &batch, &stat, &WeightFn::Uniform, 1.2, 10, RngStream::new(0)).is_err());
        let empty = CandidateBatch::new(vec![], vec![]);
        if let Ok(empty) = empty {
            assert!(design(&pool, &empty, &stat, &WeightFn::Uniform, 0.1, 10, RngStream::new(0)).is_err());
        }
    }
}
