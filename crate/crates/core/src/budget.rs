//! Splitting a fixed validation budget across many inputs.
//!
//! For each level on a grid, every input gets its designed shortlist. If the
//! shortlists together exceed the budget, the largest are dropped (earliest
//! input first among equal sizes) until the total fits. The level with the
//! best estimate `(1 - alpha) - E - D` wins, where `E` is the fraction of
//! empty shortlists and `D` the fraction dropped.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{CandidateBatch, LabeledPool};
use crate::error::{invalid, Result};
use crate::nested::{design_from_profile, prefix_profile, PValueProfile};
use crate::pvalue::check_alpha;
use crate::rng::RngStream;
use crate::scores::ScoreStatistic;
use crate::weights::WeightFn;

#[derive(Debug, Clone, Copy)]
pub struct BudgetInput<'a> {
    pub pool: &'a LabeledPool,
    pub batch: &'a CandidateBatch,
    pub weights: &'a WeightFn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub alpha: f64,
    pub cost_before_pruning: usize,
    pub cost: usize,
    pub empty_fraction: f64,
    pub deleted_fraction: f64,
    pub estimated_positives: f64,
    /// Inputs whose shortlist was dropped, in deletion order.
    pub deleted_inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetPlan {
    pub alpha_grid: Vec<f64>,
    pub total_budget: usize,
    pub per_input_cap: usize,
    pub chosen_alpha: f64,
    /// Surviving shortlist of each input (0-based candidate indices).
    pub chosen_sets: Vec<Vec<usize>>,
    pub estimated_positives: f64,
    pub empty_fraction: f64,
    pub deleted_fraction: f64,
    pub rows: Vec<BudgetRow>,
    pub warnings: Vec<String>,
}

/// `(1 - alpha) - empty_fraction - deleted_fraction`, unclipped.
pub fn estimated_positives(alpha: f64, empty_fraction: f64, deleted_fraction: f64) -> f64 {
    (1.0 - alpha) - empty_fraction - deleted_fraction
}

/// Drops the largest sets (earliest index among ties) until the total size
/// fits in `budget`; returns the dropped indices in order.
pub fn prune_to_budget(sizes: &[usize], budget: usize) -> Vec<usize> {
    let mut cost: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] > 0).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut deleted = Vec::new();
    for i in order {
        if cost <= budget {
            break;
        }
        cost -= sizes[i];
        deleted.push(i);
    }
    deleted
}

/// Evaluates one level from per-input profiles.
fn evaluate_level(profiles: &[PValueProfile], alpha: f64, budget: usize) -> Result<(BudgetRow, Vec<Vec<usize>>)> {
    let t = profiles.len() as f64;
    let mut sets = profiles
        .iter()
        .map(|p| design_from_profile(&p.monotone, alpha).map(|o| o.shortlist))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    let empty = sizes.iter().filter(|&&s| s == 0).count();
    let deleted = prune_to_budget(&sizes, budget);
    for &i in &deleted {
        sets[i].clear();
    }
    let e = empty as f64 / t;
    let d = deleted.len() as f64 / t;
    let row = BudgetRow {
        alpha,
        cost_before_pruning: sizes.iter().sum(),
        cost: sets.iter().map(Vec::len).sum(),
        empty_fraction: e,
        deleted_fraction: d,
        estimated_positives: estimated_positives(alpha, e, d),
        deleted_inputs: deleted,
    };
    Ok((row, sets))
}

/// Chooses the level with the largest estimate; ties go to the smaller level.
pub fn allocate_from_profiles(profiles: &[PValueProfile], alpha_grid: &[f64], total_budget: usize) -> Result<BudgetPlan> {
    if total_budget == 0 {
        return Err(invalid("total budget must be at least 1"));
    }
    if profiles.is_empty() {
        return Err(invalid("no inputs to allocate over"));
    }
    if alpha_grid.is_empty() {
        return Err(invalid("alpha grid is empty"));
    }
    for &a in alpha_grid {
        check_alpha(a)?;
    }
    let evaluated = alpha_grid
        .par_iter()
        .map(|&a| evaluate_level(profiles, a, total_budget))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (row, _)) in evaluated.iter().enumerate().skip(1) {
        let b = &evaluated[best].0;
        if row.estimated_positives > b.estimated_positives
            || (row.estimated_positives == b.estimated_positives && row.alpha < b.alpha)
        {
            best = i;
        }
    }
    let rows: Vec<BudgetRow> = evaluated.iter().map(|(r, _)| r.clone()).collect();
    let (chosen, sets) = evaluated.into_iter().nth(best).unwrap();
    let mut warnings = Vec::new();
    if chosen.estimated_positives < 0.0 {
        warnings.push(format!(
            "best estimated positive fraction is negative ({}); the budget is too small for these inputs",
            chosen.estimated_positives
        ));
    }
    Ok(BudgetPlan {
        alpha_grid: alpha_grid.to_vec(),
        total_budget,
        per_input_cap: profiles.iter().map(PValueProfile::len).max().unwrap_or(0),
        chosen_alpha: chosen.alpha,
        chosen_sets: sets,
        estimated_positives: chosen.estimated_positives,
        empty_fraction: chosen.empty_fraction,
        deleted_fraction: chosen.deleted_fraction,
        rows,
        warnings,
    })
}

/// Designs every input once (input `i` draws from `rng.child(i)`) and
/// sweeps the level grid.
pub fn allocate(
    inputs: &[BudgetInput],
    stat: &ScoreStatistic,
    alpha_grid: &[f64],
    total_budget: usize,
    b: usize,
    rng: RngStream,
) -> Result<BudgetPlan> {
    if total_budget == 0 {
        return Err(invalid("total budget must be at least 1"));
    }
    let profiles = inputs
        .par_iter()
        .enumerate()
        .map(|(i, inp)| prefix_profile(inp.pool, inp.batch, stat, inp.weights, b, rng.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    allocate_from_profiles(&profiles, alpha_grid, total_budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(monotone: &[f64]) -> PValueProfile {
        PValueProfile::from_raw(monotone.to_vec()).unwrap()
    }

    #[test]
    fn formula_example() {
        assert!((estimated_positives(0.2, 0.1, 0.05) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn ten_inputs_one_empty_one_deleted() {
        // nine inputs certify at k = 2 (one of them at k = 5), one never does
        let mut profiles: Vec<PValueProfile> = (0..8).map(|_| profile(&[0.5, 0.1, 0.05])).collect();
        profiles.push(profile(&[0.9, 0.8, 0.7, 0.6, 0.1]));
        profiles.push(profile(&[0.9, 0.9, 0.9]));
        let plan = allocate_from_profiles(&profiles, &[0.2], 16).unwrap();
        let row = &plan.rows[0];
        assert_eq!(row.cost_before_pruning, 8 * 2 + 5);
        assert_eq!(row.deleted_inputs, vec![8]);
        assert!((row.empty_fraction - 0.1).abs() < 1e-15);
        assert!((row.deleted_fraction - 0.1).abs() < 1e-15);
        assert!((plan.estimated_positives - 0.6).abs() < 1e-12);
        assert!(plan.chosen_sets[8].is_empty());
    }

    #[test]
    fn roomy_budget_deletes_nothing() {
        let profiles = vec![profile(&[0.5, 0.1]), profile(&[0.05, 0.01])];
        let plan = allocate_from_profiles(&profiles, &[0.05, 0.1, 0.3], 100).unwrap();
        assert!(plan.rows.iter().all(|r| r.deleted_fraction == 0.0));
    }

    #[test]
    fn zero_budget_is_rejected_and_tiny_budget_goes_negative() {
        let profiles = vec![profile(&[0.5, 0.05]), profile(&[0.5, 0.05]), profile(&[0.9, 0.9])];
        assert!(allocate_from_profiles(&profiles, &[0.1], 0).is_err());
        let plan = allocate_from_profiles(&profiles, &[0.1], 1).unwrap();
        let e = 1.0 / 3.0;
        assert!((plan.estimated_positives - ((1.0 - 0.1) - e - (1.0 - e))).abs() < 1e-12);
        assert!((plan.estimated_positives + 0.1).abs() < 1e-12);
        assert_eq!(plan.warnings.len(), 1);
        assert!(plan.chosen_sets.iter().all(Vec::is_empty));
    }

    #[test]
    fn ties_prefer_smaller_alpha_and_earlier_deletion() {
        assert_eq!(prune_to_budget(&[2, 3, 3, 1], 5), vec![1, 2]);
        assert_eq!(prune_to_budget(&[2, 2, 2], 4), vec![0]);
        // all levels certify everything at k = 1 with no deletions: 1 - alpha
        // favours the smallest level anyway; equal estimates need equal alpha
        let profiles = vec![profile(&[0.01])];
        let plan = allocate_from_profiles(&profiles, &[0.3, 0.1, 0.2], 10).unwrap();
        assert_eq!(plan.chosen_alpha, 0.1);
    }

    proptest! {
        #[test]
        fn plans_fit_the_budget(
            raws in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..8), 1..12),
            budget in 1usize..30,
        ) {
            let profiles: Vec<PValueProfile> = raws.iter().map(|r| profile(r)).collect();
            let plan = allocate_from_profiles(&profiles, &[0.05, 0.1, 0.2, 0.4], budget).unwrap();
            prop_assert!(plan.chosen_sets.iter().map(Vec::len).sum::<usize>() <= budget);
            for r in &plan.rows {
                prop_assert!(r.cost <= budget);
                prop_assert!((r.estimated_positives - estimated_positives(r.alpha, r.empty_fraction, r.deleted_fraction)).abs() < 1e-15);
            }
            let again = allocate_from_profiles(&profiles, &[0.05, 0.1, 0.2, 0.4], budget).unwrap();
            prop_assert_eq!(plan, again);
        }
    }
}
