//! Conformity scores over a pooled arrangement.
//!
//! Each statistic reads only the entries that occupy test positions, so a
//! score is a function of the occupant *set*. Internally every kind reduces
//! to a per-element value (the prediction, its rank, or its clamped logit)
//! aggregated by max or by sum. Sums are taken in ascending index order so
//! the floating-point result does not depend on how the occupants were
//! listed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// Largest prediction among test occupants.
    #[serde(rename = "max")]
    MaxPool,
    /// Sum of predictions.
    #[serde(rename = "sum")]
    SumPred,
    /// Sum of average ranks among all pooled predictions.
    #[serde(rename = "ranksum")]
    RankSum,
    /// Sum of log-odds of clamped predictions.
    #[serde(rename = "llr")]
    LogLikelihoodRatio,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [
        ScoreKind::MaxPool,
        ScoreKind::SumPred,
        ScoreKind::RankSum,
        ScoreKind::LogLikelihoodRatio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::MaxPool => "max",
            ScoreKind::SumPred => "sum",
            ScoreKind::RankSum => "ranksum",
            ScoreKind::LogLikelihoodRatio => "llr",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ScoreKind::MaxPool),
            "sum" => Ok(ScoreKind::SumPred),
            "ranksum" => Ok(ScoreKind::RankSum),
            "llr" => Ok(ScoreKind::LogLikelihoodRatio),
            other => Err(Error::InvalidParameter(format!(
                "unknown score '{other}' (expected max, sum, ranksum or llr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStatistic {
    pub kind: ScoreKind,
    /// Clamp for the log-likelihood ratio: predictions are moved into
    /// `[eps, 1 - eps]` before taking log-odds.
    pub clamp_epsilon: f64,
}

impl ScoreStatistic {
    pub fn new(kind: ScoreKind) -> Self {
        Self {
            kind,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
        }
    }

    /// Scores the arrangement whose test positions are `test_positions`.
    pub fn evaluate(&self, pooled_scores: &[f64], test_positions: &[usize]) -> Result<f64> {
        let n = pooled_scores.len();
        if test_positions.is_empty() {
            return Err(Error::InvalidParameter("no test positions".into()));
        }
        let mut positions = test_positions.to_vec();
        positions.sort_unstable();
        for w in positions.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateIndex(w[0]));
            }
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidIndex {
                index: bad,
                size: n,
            });
        }
        let prepared = self.prepare(pooled_scores)?;
        Ok(prepared.score_sorted(&positions))
    }

    /// Precomputes per-element values for repeated scoring of subsets of
    /// the same pooled array.
    pub fn prepare(&self, pooled_scores: &[f64]) -> Result<PreparedScores> {
        if let Some(v) = pooled_scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("pooled score {v}"),
            });
        }
        let (values, aggregate) = match self.kind {
            ScoreKind::MaxPool => (pooled_scores.to_vec(), Aggregate::Max),
            ScoreKind::SumPred => (pooled_scores.to_vec(), Aggregate::Sum),
            ScoreKind::RankSum => (average_ranks(pooled_scores), Aggregate::Sum),
            ScoreKind::LogLikelihoodRatio => {
                if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon < 0.5) {
                    return Err(Error::InvalidParameter(format!(
                        "clamp epsilon {} outside (0, 0.5)",
                        self.clamp_epsilon
                    )));
                }
                let eps = self.clamp_epsilon;
                let mut out = Vec::with_capacity(pooled_scores.len());
                for &s in pooled_scores {
                    if !(0.0..=1.0).contains(&s) {
                        return Err(Error::ScoreOutOfRange { value: s });
                    }
                    let p = s.clamp(eps, 1.0 - eps);
                    out.push((p / (1.0 - p)).ln());
                }
                (out, Aggregate::Sum)
            }
        };
        Ok(PreparedScores { values, aggregate })
    }
}

impl Default for ScoreStatistic {
    fn default() -> Self {
        Self::new(ScoreKind::MaxPool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Aggregate {
    Max,
    Sum,
}

/// Per-element score contributions for one pooled array.
#[derive(Debug, Clone)]
pub struct PreparedScores {
    values: Vec<f64>,
    aggregate: Aggregate,
}

impl PreparedScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Score of the occupant set; `positions` must be sorted ascending and
    /// in range.
    #[inline]
    pub fn score_sorted(&self, positions: &[usize]) -> f64 {
        match self.aggregate {
            Aggregate::Max => positions
                .iter()
                .map(|&i| self.values[i])
                .fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Sum => positions.iter().map(|&i| self.values[i]).sum(),
        }
    }
}

/// Ascending ranks starting at 1; tied values share their average rank.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    const POOLED: [f64; 4] = [0.1, 0.4, 0.2, 0.3];

    fn eval(kind: ScoreKind, pooled: &[f64], pos: &[usize]) -> f64 {
        ScoreStatistic::new(kind).evaluate(pooled, pos).unwrap()
    }

    #[test]
    fn max_pool_single_entry() {
        assert_eq!(eval(ScoreKind::MaxPool, &POOLED, &[3]), 0.3);
    }

    #[test]
    fn sum_pred_two_entries() {
        assert!((eval(ScoreKind::SumPred, &POOLED, &[1, 3]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn rank_sum_matches_sort_oracle() {
        // sorted: 0.1, 0.2, 0.3, 0.4 -> rank(0.4) = 4, rank(0.3) = 3
        assert_eq!(eval(ScoreKind::RankSum, &POOLED, &[1, 3]), 7.0);
    }

    #[test]
    fn llr_at_one_half_is_zero() {
        assert_eq!(eval(ScoreKind::LogLikelihoodRatio, &[0.5, 0.5], &[0, 1]), 0.0);
    }

    #[test]
    fn llr_clamps_boundaries() {
        let v = eval(ScoreKind::LogLikelihoodRatio, &[0.0, 1.0], &[1]);
        assert!(v.is_finite() && v > 20.0);
        let v = eval(ScoreKind::LogLikelihoodRatio, &[0.0, 1.0], &[0]);
        assert!(v.is_finite() && v < -20.0);
    }

    #[test]
    fn llr_rejects_out_of_range() {
        let err = ScoreStatistic::new(ScoreKind::LogLikelihoodRatio).evaluate(&[1.5, 0.2], &[1]);
        assert!(matches!(err, Err(Error::ScoreOutOfRange { .. })));
    }

    #[test]
    fn invalid_positions_rejected() {
        let s = ScoreStatistic::new(ScoreKind::MaxPool);
        assert!(matches!(s.evaluate(&POOLED, &[4]), Err(Error::InvalidIndex { .. })));
        assert!(matches!(s.evaluate(&POOLED, &[1, 1]), Err(Error::DuplicateIndex(1))));
        assert!(s.evaluate(&POOLED, &[]).is_err());
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(average_ranks(&[0.2, 0.1, 0.2, 0.3]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn score_kind_round_trips_through_str() {
        for k in ScoreKind::ALL {
            assert_eq!(k.as_str().parse::<ScoreKind>().unwrap(), k);
        }
        assert!("median".parse::<ScoreKind>().is_err());
    }

    #[test]
    fn symmetric_under_shuffles_of_test_positions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pooled: Vec<f64> = (0..12).map(|i| ((i * 37) % 11) as f64 / 11.0 + 0.01).collect();
        for kind in ScoreKind::ALL {
            let mut pos = vec![0, 3, 5, 7, 8, 11];
            let reference = eval(kind, &pooled, &pos);
            for _ in 0..100 {
                pos.shuffle(&mut rng);
                assert_eq!(eval(kind, &pooled, &pos).to_bits(), reference.to_bits(), "{kind}");
            }
        }
    }

    fn brute_rank_sum(pooled: &[f64], pos: &[usize]) -> f64 {
        let mut sorted = pooled.to_vec();
        sorted.sort_by(f64::total_cmp);
        pos.iter()
            .map(|&i| (sorted.iter().position(|&v| v == pooled[i]).unwrap() + 1) as f64)
            .sum()
    }

    proptest! {
        #[test]
        fn rank_sum_equals_brute_force(
            raw in prop::collection::hash_set(0u32..100_000, 2..=12),
            kseed in any::<u64>(),
        ) {
            let pooled: Vec<f64> = raw.into_iter().map(|v| v as f64 / 100_000.0).collect();
            let n = pooled.len();
            let k = 1 + (kseed as usize % n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(kseed));
            let pos = &idx[..k];
            prop_assert_eq!(eval(ScoreKind::RankSum, &pooled, pos), brute_rank_sum(&pooled, pos));
        }

        #[test]
        fn raising_a_test_score_never_lowers_v(
            pooled in prop::collection::vec(0.0f64..1.0, 3..10),
            bump in 0.0f64..0.5,
            which in any::<prop::sample::Index>(),
        ) {
            let n = pooled.len();
            let pos: Vec<usize> = (n / 2..n).collect();
            let target = pos[which.index(pos.len())];
            for kind in [ScoreKind::MaxPool, ScoreKind::SumPred, ScoreKind::LogLikelihoodRatio] {
                let before = eval(kind, &pooled, &pos);
                let mut raised = pooled.clone();
                raised[target] = (raised[target] + bump).min(1.0);
                prop_assert!(eval(kind, &raised, &pos) >= before);
            }
        }
    }
}
