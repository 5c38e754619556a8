//! Isotropic Gaussian kernel density estimation with cross-validated
//! bandwidth selection.

use rand::seq::SliceRandom;

use crate::data::FeatureVector;
use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

/// Bandwidths tried by default during cross-validation.
pub const DEFAULT_BANDWIDTH_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_FOLDS: usize = 5;

/// Per-coordinate z-scoring with statistics taken from a reference set.
/// Coordinates with zero spread are left unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(points: &[FeatureVector]) -> Result<Self> {
        let d = points
            .first()
            .map(FeatureVector::dim)
            .ok_or_else(|| invalid("cannot standardize an empty point set"))?;
        let m = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            check_dim(d, p.dim())?;
            for (acc, v) in mean.iter_mut().zip(p.as_slice()) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; d];
        for p in points {
            for ((acc, v), mu) in var.iter_mut().zip(p.as_slice()).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / m).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.scale[i];
        }
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `density(x) = (1/m) Σ (2π h²)^(-d/2) exp(-‖x - x_i‖² / (2h²))`.
///
/// When a [`Standardizer`] is attached, queries and support points live in
/// standardized coordinates and the density is with respect to those.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeDensity {
    support: Vec<f64>,
    m: usize,
    dim: usize,
    bandwidth: f64,
    scaler: Option<Standardizer>,
}

impl KdeDensity {
    pub fn new(points: &[FeatureVector], bandwidth: f64) -> Result<Self> {
        Self::build(points, bandwidth, None)
    }

    pub fn with_standardizer(
        points: &[FeatureVector],
        bandwidth: f64,
        scaler: Standardizer,
    ) -> Result<Self> {
        Self::build(points, bandwidth, Some(scaler))
    }

    fn build(points: &[FeatureVector], bandwidth: f64, scaler: Option<Standardizer>) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        let dim = points
            .first()
            .map(FeatureVector::dim)
            .ok_or_else(|| invalid("KDE needs at least one support point"))?;
        let mut support = vec![0.0; points.len() * dim];
        for (row, p) in support.chunks_exact_mut(dim).zip(points) {
            check_dim(dim, p.dim())?;
            match &scaler {
                Some(s) => s.apply(p.as_slice(), row),
                None => row.copy_from_slice(p.as_slice()),
            }
        }
        Ok(Self {
            support,
            m: points.len(),
            dim,
            bandwidth,
            scaler,
        })
    }

    fn from_flat(support: Vec<f64>, dim: usize, bandwidth: f64) -> Self {
        Self {
            m: support.len() / dim,
            support,
            dim,
            bandwidth,
            scaler: None,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn support_size(&self) -> usize {
        self.m
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.scaler {
            Some(s) => {
                let mut z = vec![0.0; self.dim];
                s.apply(x, &mut z);
                self.log_density_raw(&z)
            }
            None => self.log_density_raw(x),
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    fn log_density_raw(&self, z: &[f64]) -> f64 {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        // log-sum-exp over kernel exponents keeps far-away queries finite
        let mut max = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(self.m);
        for row in self.support.chunks_exact(self.dim) {
            let sq: f64 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = -sq * inv;
            max = max.max(e);
            exps.push(e);
        }
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        let log_norm = 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * self.bandwidth.powi(2)).ln();
        max + sum.ln() - (self.m as f64).ln() - log_norm
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("bandwidth must be positive and finite, got {h}")));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(invalid("bandwidth grid is empty"));
    }
    for &h in grid {
        check_bandwidth(h)?;
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    Ok(sorted)
}

fn flatten(points: &[FeatureVector], scaler: Option<&Standardizer>) -> Result<(Vec<f64>, usize)> {
    let dim = points
        .first()
        .map(FeatureVector::dim)
        .ok_or_else(|| invalid("no points"))?;
    let mut flat = vec![0.0; points.len() * dim];
    for (row, p) in flat.chunks_exact_mut(dim).zip(points) {
        check_dim(dim, p.dim())?;
        match scaler {
            Some(s) => s.apply(p.as_slice(), row),
            None => row.copy_from_slice(p.as_slice()),
        }
    }
    Ok((flat, dim))
}

/// Mean held-out log-likelihood for each grid bandwidth (in grid order)
/// under a seeded `folds`-fold split.
pub fn bandwidth_cv_scores(
    points: &[FeatureVector],
    bandwidth_grid: &[f64],
    folds: usize,
    rng: RngStream,
) -> Result<Vec<f64>> {
    cv_scores(points, None, bandwidth_grid, folds, rng)
}

fn cv_scores(
    points: &[FeatureVector],
    scaler: Option<&Standardizer>,
    bandwidth_grid: &[f64],
    folds: usize,
    rng: RngStream,
) -> Result<Vec<f64>> {
    if folds < 2 {
        return Err(invalid(format!("need at least 2 folds, got {folds}")));
    }
    if points.len() < folds {
        return Err(Error::TooFewPoints {
            points: points.len(),
            folds,
        });
    }
    if bandwidth_grid.is_empty() {
        return Err(invalid("bandwidth grid is empty"));
    }
    for &h in bandwidth_grid {
        check_bandwidth(h)?;
    }
    let (flat, dim) = flatten(points, scaler)?;
    let m = points.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng.rng());
    let mut fold_of = vec![0; m];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let mut scores = vec![0.0; bandwidth_grid.len()];
    for fold in 0..folds {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for i in 0..m {
            let row = &flat[i * dim..(i + 1) * dim];
            if fold_of[i] == fold {
                held.extend_from_slice(row);
            } else {
                train.extend_from_slice(row);
            }
        }
        for (score, &h) in scores.iter_mut().zip(bandwidth_grid) {
            let kde = KdeDensity::from_flat(train.clone(), dim, h);
            *score += held
                .chunks_exact(dim)
                .map(|z| kde.log_density_raw(z))
                .sum::<f64>();
        }
    }
    scores.iter_mut().for_each(|s| *s /= m as f64);
    Ok(scores)
}

fn select_bandwidth(
    points: &[FeatureVector],
    scaler: Option<&Standardizer>,
    bandwidth_grid: &[f64],
    folds: usize,
    rng: RngStream,
) -> Result<f64> {
    let grid = check_grid(bandwidth_grid)?;
    let scores = cv_scores(points, scaler, &grid, folds, rng)?;
    // grid is ascending; strict comparison keeps the smaller bandwidth on ties
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(grid[best])
}

/// Fits a KDE on `points`, picking the grid bandwidth with the best mean
/// held-out log-likelihood. Ties go to the smaller bandwidth.
pub fn fit_kde(
    points: &[FeatureVector],
    bandwidth_grid: &[f64],
    folds: usize,
    rng: RngStream,
) -> Result<KdeDensity> {
    let h = select_bandwidth(points, None, bandwidth_grid, folds, rng)?;
    KdeDensity::new(points, h)
}

/// Same as [`fit_kde`] but in coordinates standardized by `scaler`.
pub fn fit_kde_standardized(
    points: &[FeatureVector],
    scaler: Standardizer,
    bandwidth_grid: &[f64],
    folds: usize,
    rng: RngStream,
) -> Result<KdeDensity> {
    let h = select_bandwidth(points, Some(&scaler), bandwidth_grid, folds, rng)?;
    KdeDensity::with_standardizer(points, h, scaler)
}

/// Linear-interpolation empirical quantile of an unsorted sample.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Indices of `candidates` whose density is at least the `quantile`-th
/// quantile of the density over `reference`, in their original order.
/// A level of 0 disables the filter.
pub fn ood_filter(
    density: &KdeDensity,
    reference: &[FeatureVector],
    candidates: &[FeatureVector],
    quantile_level: f64,
) -> Result<Vec<usize>> {
    if reference.is_empty() {
        return Err(invalid("OOD filter needs a nonempty reference set"));
    }
    if !(0.0..1.0).contains(&quantile_level) {
        return Err(invalid(format!("OOD quantile {quantile_level} outside [0, 1)")));
    }
    for p in reference.iter().chain(candidates) {
        check_dim(density.dimension(), p.dim())?;
    }
    if quantile_level == 0.0 {
        return Ok((0..candidates.len()).collect());
    }
    let ref_density: Vec<f64> = reference.iter().map(|p| density.density(p.as_slice())).collect();
    let threshold = quantile(&ref_density, quantile_level);
    Ok(candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| density.density(c.as_slice()) >= threshold)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pts(v: &[f64]) -> Vec<FeatureVector> {
        v.iter().map(|&x| FeatureVector::new(vec![x]).unwrap()).collect()
    }

    fn normal_sample(n: usize, shift: f64, seed: u64) -> Vec<FeatureVector> {
        let mut rng = RngStream::new(seed).rng();
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                FeatureVector::new(vec![z + shift]).unwrap()
            })
            .collect()
    }

    #[test]
    fn kernel_at_center() {
        let kde = KdeDensity::new(&pts(&[0.0]), 1.0).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((kde.density(&[0.0]) - expected).abs() < 1e-15);
        assert!((kde.density(&[0.0]) - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn two_point_kernel_sum() {
        let kde = KdeDensity::new(&pts(&[-1.0, 1.0]), 1.0).unwrap();
        let expected = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((kde.density(&[0.0]) - expected).abs() < 1e-15);
        assert!((kde.density(&[0.0]) - 0.241971).abs() < 1e-6);
    }

    #[test]
    fn density_in_2d_matches_direct_formula() {
        let support = vec![
            FeatureVector::new(vec![0.0, 1.0]).unwrap(),
            FeatureVector::new(vec![2.0, -1.0]).unwrap(),
        ];
        let h = 0.7;
        let kde = KdeDensity::new(&support, h).unwrap();
        let x = [0.5, 0.25];
        let direct: f64 = support
            .iter()
            .map(|s| {
                let sq: f64 = s.as_slice().iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                (-sq / (2.0 * h * h)).exp() / (2.0 * std::f64::consts::PI * h * h)
            })
            .sum::<f64>()
            / 2.0;
        assert!((kde.density(&x) - direct).abs() < 1e-15);
    }

    #[test]
    fn cv_selects_the_argmax_of_held_out_likelihood() {
        let points = normal_sample(500, 0.0, 11);
        let grid = DEFAULT_BANDWIDTH_GRID;
        let rng = RngStream::new(3);
        let kde = fit_kde(&points, &grid, 5, rng).unwrap();
        let scores = bandwidth_cv_scores(&points, &grid, 5, rng).unwrap();
        let chosen = grid.iter().position(|&h| h == kde.bandwidth()).unwrap();
        for s in &scores {
            assert!(scores[chosen] >= *s);
        }
        // 400 training points resolve a unit normal well at h = 0.1
        assert_eq!(kde.bandwidth(), 0.1);

        // stretched by 30, the same draws favour the widest kernel
        let wide: Vec<FeatureVector> = points
            .iter()
            .map(|p| FeatureVector::new(vec![30.0 * p.as_slice()[0]]).unwrap())
            .collect();
        assert_eq!(fit_kde(&wide, &grid, 5, rng).unwrap().bandwidth(), 10.0);
    }

    #[test]
    fn cv_ties_go_to_smaller_bandwidth() {
        // Degenerate grid entries collapse; duplicates score identically.
        let points = normal_sample(20, 0.0, 1);
        let kde = fit_kde(&points, &[0.5, 0.5], 2, RngStream::new(0)).unwrap();
        assert_eq!(kde.bandwidth(), 0.5);
    }

    #[test]
    fn too_few_points_for_folds() {
        let err = fit_kde(&pts(&[0.0, 1.0]), &[1.0], 5, RngStream::new(0));
        assert_eq!(err.unwrap_err(), Error::TooFewPoints { points: 2, folds: 5 });
        assert!(fit_kde(&pts(&[0.0, 1.0]), &[], 2, RngStream::new(0)).is_err());
        assert!(fit_kde(&pts(&[0.0, 1.0]), &[-1.0], 2, RngStream::new(0)).is_err());
    }

    #[test]
    fn integrates_to_one_in_one_dimension() {
        let points = normal_sample(300, 0.0, 4);
        let kde = fit_kde(&points, &DEFAULT_BANDWIDTH_GRID, 5, RngStream::new(8)).unwrap();
        // sample sd is ~1; integrate over [-10, 10] plus the kernel reach
        let (a, b) = (-10.0 - 5.0 * kde.bandwidth(), 10.0 + 5.0 * kde.bandwidth());
        let steps = 20_000;
        let dx = (b - a) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let x = a + i as f64 * dx;
            let wgt = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += wgt * kde.density(&[x]);
        }
        total *= dx;
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn far_queries_stay_positive_in_log_space() {
        let kde = KdeDensity::new(&pts(&[0.0]), 0.1).unwrap();
        let l = kde.log_density(&[50.0]);
        assert!(l.is_finite());
    }

    #[test]
    fn standardizer_handles_constant_columns() {
        let s = Standardizer::fit(&pts(&[2.0, 2.0, 2.0])).unwrap();
        let mut out = [0.0];
        s.apply(&[3.0], &mut out);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn ood_quantile_zero_keeps_everything() {
        let reference = normal_sample(200, 0.0, 2);
        let kde = KdeDensity::new(&reference, 1.0).unwrap();
        let cands = pts(&[0.0, 3.0, -4.0, 100.0]);
        let kept = ood_filter(&kde, &reference, &cands, 0.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3]);
        // any positive level drops the far-out point
        let kept = ood_filter(&kde, &reference, &cands, 0.01).unwrap();
        assert!(!kept.contains(&3));
    }

    #[test]
    fn ood_median_on_reference_keeps_upper_half() {
        let reference = normal_sample(101, 0.0, 6);
        let kde = KdeDensity::new(&reference, 1.0).unwrap();
        let kept = ood_filter(&kde, &reference, &reference, 0.5).unwrap();
        let dens: Vec<f64> = reference.iter().map(|p| kde.density(p.as_slice())).collect();
        let med = quantile(&dens, 0.5);
        let expected: Vec<usize> = (0..101).filter(|&i| dens[i] >= med).collect();
        assert_eq!(kept, expected);
        assert_eq!(kept.len(), 51);
    }

    #[test]
    fn ood_drops_eight_sigma_candidate() {
        let reference = normal_sample(1000, 0.0, 12);
        let kde = fit_kde(&reference, &DEFAULT_BANDWIDTH_GRID, 5, RngStream::new(1)).unwrap();
        let dens: Vec<f64> = reference.iter().map(|p| kde.density(p.as_slice())).collect();
        let threshold = quantile(&dens, 0.05);
        assert!(kde.density(&[8.0]) < threshold);
        assert!(kde.density(&[0.0]) >= threshold);
        let kept = ood_filter(&kde, &reference, &pts(&[0.0, 8.0]), 0.05).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn ood_empty_candidates_and_bad_inputs() {
        let reference = pts(&[0.0, 1.0]);
        let kde = KdeDensity::new(&reference, 1.0).unwrap();
        assert!(ood_filter(&kde, &reference, &[], 0.3).unwrap().is_empty());
        assert!(ood_filter(&kde, &[], &reference, 0.3).is_err());
        assert!(ood_filter(&kde, &reference, &reference, 1.0).is_err());
    }
}
