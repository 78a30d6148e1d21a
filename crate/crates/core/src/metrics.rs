//! Distribution-level scores for particle sets: sliced Wasserstein-1, RBF
//! MMD, mode coverage, and the mean/mode distances used by collapse checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(param("point sets must be nonempty"));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|p| p.len() != d) {
        return Err(param("point sets must share one positive dimension"));
    }
    Ok(d)
}

/// Exact Wasserstein-1 between two empirical distributions on the line:
/// the integral of `|F_a - F_b|`. Both slices must be sorted ascending.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let take_a = j == b.len() || (i < a.len() && a[i] <= b[j]);
        let x = if take_a { a[i] } else { b[j] };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        if take_a {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Random unit directions in `d` dimensions, deterministic under `seed`.
pub fn unit_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn project_sorted(points: &[Vec<f64>], dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = points
        .iter()
        .map(|x| x.iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over `projections` random unit directions of the 1-D Wasserstein-1
/// distance between the projected sets.
pub fn sliced_wasserstein(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    let d = check_sets(a, b)?;
    if projections == 0 {
        return Err(param("need at least one projection"));
    }
    let dirs = unit_directions(d, projections, seed);
    let total: f64 = dirs
        .iter()
        .map(|u| wasserstein_1d_sorted(&project_sorted(a, u), &project_sorted(b, u)))
        .sum();
    Ok(total / projections as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Unbiased squared MMD with kernel `exp(-|x - y|^2 / (2 h^2))`, clipped at 0.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    check_sets(a, b)?;
    if !(bandwidth > 0.0) {
        return Err(param("bandwidth must be positive"));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(param("unbiased MMD needs at least two points per set"));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    let est = within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64;
    Ok(est.max(0.0))
}

/// Median pairwise distance over the union of both sets.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(param("bandwidth heuristic needs two points"));
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(if *m > 0.0 { *m } else { 1.0 })
}

/// Share of points that must sit near a center for it to count as covered.
pub const COVERAGE_FRACTION: f64 = 0.05;

/// Counts points within `radius` of each center; a center is covered when it
/// holds at least [`COVERAGE_FRACTION`] of the points.
pub fn mode_coverage(
    points: &[Vec<f64>],
    centers: &[Vec<f64>],
    radius: f64,
) -> Result<(usize, Vec<usize>)> {
    if !(radius > 0.0) {
        return Err(param("radius must be positive"));
    }
    if points.is_empty() {
        return Ok((0, vec![0; centers.len()]));
    }
    let r2 = radius * radius;
    let counts: Vec<usize> = centers
        .iter()
        .map(|c| points.iter().filter(|p| sq_dist(p, c) <= r2).count())
        .collect();
    let need = COVERAGE_FRACTION * points.len() as f64;
    let covered = counts
        .iter()
        .filter(|&&c| c as f64 >= need && c > 0)
        .count();
    Ok((covered, counts))
}

/// Default coverage radius: a quarter of the smallest inter-center distance.
pub fn default_mode_radius(centers: &[Vec<f64>]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.min(sq_dist(&centers[i], &centers[j]).sqrt());
        }
    }
    if !best.is_finite() || best <= 0.0 {
        return Err(param("need at least two distinct mode centers"));
    }
    Ok(0.25 * best)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over particles of the distance to `mean` and to the nearest of
/// `modes`.
pub fn collapse_distances(
    points: &[Vec<f64>],
    mean: &[f64],
    modes: &[Vec<f64>],
) -> Result<(f64, f64)> {
    if points.is_empty() || modes.is_empty() {
        return Err(param("collapse distances need points and modes"));
    }
    let to_mean = median(points.iter().map(|p| sq_dist(p, mean).sqrt()).collect());
    let to_mode = median(
        points
            .iter()
            .map(|p| {
                modes
                    .iter()
                    .map(|m| sq_dist(p, m))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect(),
    );
    Ok((to_mean, to_mode))
}

/// Cosine of the angle between two vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Settings shared by every metric evaluation in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub projections: usize,
    pub seed: u64,
    /// Kernel bandwidth; `None` selects the median-distance heuristic.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    /// Coverage radius; `None` selects a quarter of the minimum mode spacing.
    #[serde(default)]
    pub mode_radius: Option<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            projections: 64,
            seed: 0,
            bandwidth: None,
            mode_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    pub mmd_rbf: f64,
    pub modes_covered: usize,
    pub mode_counts: Vec<usize>,
    pub median_to_mean: f64,
    pub median_to_mode: f64,
}

/// Reference sample and mode geometry a particle set is scored against.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub target: Vec<Vec<f64>>,
    pub modes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub config: MetricConfig,
}

impl Evaluator {
    pub fn report(&self, points: &[Vec<f64>]) -> Result<MetricReport> {
        let sw = sliced_wasserstein(
            points,
            &self.target,
            self.config.projections,
            self.config.seed,
        )?;
        let bw = match self.config.bandwidth {
            Some(h) => h,
            None => median_bandwidth(points, &self.target)?,
        };
        let mmd = if points.len() >= 2 {
            mmd_rbf(points, &self.target, bw)?
        } else {
            f64::NAN
        };
        let radius = match self.config.mode_radius {
            Some(r) => r,
            None if self.modes.len() >= 2 => default_mode_radius(&self.modes)?,
            None => 0.25,
        };
        let (covered, counts) = mode_coverage(points, &self.modes, radius)?;
        let (to_mean, to_mode) = collapse_distances(points, &self.mean, &self.modes)?;
        Ok(MetricReport {
            sliced_wasserstein: sw,
            mmd_rbf: mmd,
            modes_covered: covered,
            mode_counts: counts,
            median_to_mean: to_mean,
            median_to_mode: to_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian_cloud(mean: [f64; 2], std: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..2)
                    .map(|k| mean[k] + std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn sliced_wasserstein_cases() {
        let a = gaussian_cloud([0.0, 0.0], 1.0, 200, 1);
        assert_eq!(sliced_wasserstein(&a, &a, 16, 0).unwrap(), 0.0);
        assert_eq!(
            sliced_wasserstein(&[vec![0.0]], &[vec![1.0]], 8, 3).unwrap(),
            1.0
        );
        assert!(sliced_wasserstein(&a, &[vec![0.0]], 8, 3).is_err());
    }

    #[test]
    fn one_d_matches_sorted_difference_for_equal_sizes() {
        let a = [0.0, 1.0, 5.0];
        let b = [-1.0, 2.0, 2.5];
        let direct = (1.0 + 1.0 + 2.5) / 3.0;
        assert!((wasserstein_1d_sorted(&a, &b) - direct).abs() < 1e-15);
        // unequal sizes: {0} vs {0, 2} moves half the mass by 2
        assert!((wasserstein_1d_sorted(&[0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shifted_gaussians_match_projection_average() {
        // Each projected pair differs by a pure shift |<dmu, u>|; averaged over
        // the circle that is 3 * 2 / pi.
        let a = gaussian_cloud([0.0, 0.0], 1.0, 10_000, 5);
        let b = gaussian_cloud([3.0, 0.0], 1.0, 10_000, 6);
        let sw = sliced_wasserstein(&a, &b, 64, 11).unwrap();
        let expect = 3.0 * 2.0 / std::f64::consts::PI;
        assert!((sw - expect).abs() <= 0.1 * expect, "{sw} vs {expect}");
    }

    #[test]
    fn mmd_cases() {
        let a = gaussian_cloud([0.0, 0.0], 1.0, 1000, 2);
        let b = gaussian_cloud([0.0, 0.0], 1.0, 1000, 3);
        assert!(mmd_rbf(&a, &b, 1.0).unwrap() <= 0.01);
        let far = gaussian_cloud([50.0, 0.0], 0.1, 200, 4);
        let near = gaussian_cloud([0.0, 0.0], 0.1, 200, 5);
        assert!(mmd_rbf(&near, &far, 1.0).unwrap() >= 0.5);
        assert!(mmd_rbf(&near, &far, 1e9).unwrap() < 1e-9);
        assert!(mmd_rbf(&near, &far, 0.0).is_err());
    }

    #[test]
    fn coverage_cases() {
        let centers = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let r = default_mode_radius(&centers).unwrap();
        assert_eq!(r, 0.5);
        let at_zero = vec![vec![-1.0, 0.0]; 20];
        assert_eq!(
            mode_coverage(&at_zero, &centers, r).unwrap(),
            (1, vec![20, 0])
        );
        let split: Vec<Vec<f64>> = (0..20).map(|i| centers[i % 2].clone()).collect();
        assert_eq!(
            mode_coverage(&split, &centers, r).unwrap(),
            (2, vec![10, 10])
        );
        // one point in 40 is below the 5% share
        let mut sparse = vec![vec![-1.0, 0.0]; 39];
        sparse.push(vec![1.0, 0.0]);
        assert_eq!(mode_coverage(&sparse, &centers, r).unwrap().0, 1);
    }

    #[test]
    fn collapse_distance_cases() {
        let modes = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
        let (m, d) = collapse_distances(&[vec![0.0, 0.0]], &[0.0, 0.0], &modes).unwrap();
        assert_eq!((m, d), (0.0, 1.0));
        let (m, d) =
            collapse_distances(&[vec![1.0, 0.0], vec![-1.0, 0.1]], &[0.0, 0.0], &modes).unwrap();
        assert!((d - 0.05).abs() < 1e-15 && m > 1.0);
    }

    #[test]
    fn bandwidth_heuristic() {
        let a = vec![vec![0.0], vec![1.0]];
        let b = vec![vec![3.0]];
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 2.0);
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_nonnegative(seed in 0u64..1000, n in 2usize..30, m in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let b: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let ab = sliced_wasserstein(&a, &b, 8, seed).unwrap();
            let ba = sliced_wasserstein(&b, &a, 8, seed).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            let k1 = mmd_rbf(&a, &b, 1.0).unwrap();
            let k2 = mmd_rbf(&b, &a, 1.0).unwrap();
            prop_assert!(k1 >= 0.0);
            prop_assert!((k1 - k2).abs() <= 1e-12);
            prop_assert_eq!(sliced_wasserstein(&a, &a, 8, seed).unwrap(), 0.0);
        }
    }
}
