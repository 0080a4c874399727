//! Separation statistics, numerical checks of the one-step quantization
//! bounds, and the adversarial point clouds used as fixtures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::geom2d::{ConvexPolygon, Point2, PointCloud};
use crate::sdot::{quantization, SolverConfig};

/// Volume of the unit ball in ℝ¹.
pub const OMEGA_1: f64 = 2.0;
/// Volume of the unit ball in ℝ².
pub const OMEGA_2: f64 = std::f64::consts::PI;
/// Largest number of points pairwise at least `ε` apart inside an open
/// ball of radius `ε` in the plane.
pub const PACKING_C2: usize = 5;

/// `C_{2,Ω} = (2^{2d−1} / ω_{d−1}) (diam Ω + 1)^{d+1}` with `d = 2`.
pub fn domain_constant(domain: &ConvexPolygon) -> f64 {
    8.0 / OMEGA_1 * (domain.diameter() + 1.0).powi(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub slack: f64,
}

impl BoundCheck {
    /// `lhs ≤ rhs` up to `1e−12 · max(1, |rhs|)`.
    pub fn new(lhs: f64, rhs: f64) -> Self {
        BoundCheck {
            lhs,
            rhs,
            satisfied: lhs <= rhs + 1e-12 * rhs.abs().max(1.0),
            slack: rhs - lhs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub epsilon: f64,
    /// `I_ε(Y)`: indices at distance at least `ε` from every other site.
    pub isolated: Vec<usize>,
    pub kappa: f64,
    pub min_pairwise: f64,
}

/// Exact `I_ε(Y)` by pairwise distances, accelerated with a bucket grid of
/// cell size `ε`.
pub fn separation_stats(sites: &[Point2], epsilon: f64) -> SeparationStats {
    let n = sites.len();
    let mut nearest = vec![f64::INFINITY; n];
    if n > 1 {
        if epsilon > 0.0 && n > 64 {
            near_pairs(sites, epsilon, &mut nearest);
        } else {
            for i in 0..n {
                for j in i + 1..n {
                    let d = sites[i].dist(sites[j]);
                    nearest[i] = nearest[i].min(d);
                    nearest[j] = nearest[j].min(d);
                }
            }
        }
    }
    let isolated: Vec<usize> = (0..n).filter(|&i| nearest[i] >= epsilon).collect();
    let min_pairwise = if isolated.len() == n {
        PointCloud::new(sites.to_vec()).min_pairwise_distance()
    } else {
        nearest.iter().copied().fold(f64::INFINITY, f64::min)
    };
    SeparationStats {
        epsilon,
        kappa: if n == 0 {
            1.0
        } else {
            isolated.len() as f64 / n as f64
        },
        isolated,
        min_pairwise,
    }
}

/// Fills `nearest[i]` with the distance to the closest other site whenever
/// that distance is below `epsilon`.
fn near_pairs(sites: &[Point2], epsilon: f64, nearest: &mut [f64]) {
    use std::collections::HashMap;
    let key = |p: Point2| {
        (
            (p.x / epsilon).floor() as i64,
            (p.y / epsilon).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in sites.iter().enumerate() {
        buckets.entry(key(*p)).or_default().push(i);
    }
    for (i, p) in sites.iter().enumerate() {
        let (kx, ky) = key(*p);
        for bx in kx - 1..=kx + 1 {
            for by in ky - 1..=ky + 1 {
                if let Some(list) = buckets.get(&(bx, by)) {
                    for &j in list {
                        if j != i {
                            nearest[i] = nearest[i].min(p.dist(sites[j]));
                        }
                    }
                }
            }
        }
    }
}

/// `W₂²(ρ, δ_{B_N(Y)}) ≤ C_{2,Ω}(ε^{−1}/N + 1 − κ)`.
pub fn barycenter_bound(
    sites: &PointCloud,
    rho: &Density,
    epsilon: f64,
    cfg: &SolverConfig,
) -> Result<BoundCheck> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon} outside (0, 1]"
        )));
    }
    let q = quantization(sites, rho, cfg)?;
    let at_b = quantization(&q.barycenters, rho, cfg)?;
    let n = sites.len() as f64;
    let kappa = separation_stats(sites, epsilon).kappa;
    let c = domain_constant(&rho.domain());
    Ok(BoundCheck::new(
        at_b.cost,
        c * (1.0 / (epsilon * n) + 1.0 - kappa),
    ))
}

/// `F_N(Y) − C_{2,Ω}/(N ε) ≤ N ‖∇F_N(Y)‖²`, for `Y` at least `ε`-separated.
pub fn pl_check(
    sites: &PointCloud,
    rho: &Density,
    epsilon: f64,
    cfg: &SolverConfig,
) -> Result<BoundCheck> {
    let min_pairwise = sites.min_pairwise_distance();
    if min_pairwise < epsilon * (1.0 - 1e-12) {
        return Err(Error::EpsilonTooLarge {
            epsilon,
            min_pairwise,
        });
    }
    let q = quantization(sites, rho, cfg)?;
    let n = sites.len() as f64;
    let c = domain_constant(&rho.domain());
    Ok(BoundCheck::new(
        q.f_value - c / (n * epsilon),
        q.grad_norm_sq_scaled(),
    ))
}

/// `((2i − 1)/(2N), ½)` for `i = 1..N`: a critical point of `F_N` for the
/// uniform density that is far from optimal.
pub fn midline_cloud(n: usize) -> PointCloud {
    (1..=n)
        .map(|i| Point2::new((2 * i - 1) as f64 / (2 * n) as f64, 0.5))
        .collect()
}

/// The vertical counterpart of [`midline_cloud`]: `N` points on `x = ½`.
pub fn hyperplane_cloud(n: usize) -> PointCloud {
    (1..=n)
        .map(|i| Point2::new(0.5, (2 * i - 1) as f64 / (2 * n) as f64))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperplaneReport {
    /// `max_i |b_i.x − ½|`.
    pub max_offset: f64,
    /// `W₂²(ρ, δ_{B_N(Y)}) ≥ 1/12`, encoded as `1/12 − 1e−6 ≤ W₂²`.
    pub check: BoundCheck,
}

/// Points on the line `x = ½` keep their barycenters on it, so the
/// transport cost after a Lloyd step stays at least `1/12` (uniform ρ).
pub fn hyperplane_bound_check(
    n: usize,
    rho_uniform: &Density,
    cfg: &SolverConfig,
) -> Result<HyperplaneReport> {
    let y = hyperplane_cloud(n);
    let q = quantization(&y, rho_uniform, cfg)?;
    let max_offset = q
        .barycenters
        .iter()
        .map(|b| (b.x - 0.5).abs())
        .fold(0.0, f64::max);
    let at_b = quantization(&q.barycenters, rho_uniform, cfg)?;
    Ok(HyperplaneReport {
        max_offset,
        check: BoundCheck::new(1.0 / 12.0 - 1e-6, at_b.cost),
    })
}

fn draw_cloud(sigma: &Density, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sigma.sample(&mut rng)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KappaReport {
    pub mean: f64,
    pub std_error: f64,
    pub samples: Vec<f64>,
    /// `(1 − ‖σ‖_∞ π ε²)^{N−1} ≤ mean + 3 SE`.
    pub check: BoundCheck,
}

/// Monte Carlo check of `E[κ] ≥ (1 − ‖σ‖_∞ ω₂ ε²)^{N−1}` over i.i.d.
/// samples from `σ`. Trial `t` uses seed `seed + t`.
pub fn kappa_expectation_check(
    sigma: &Density,
    n: usize,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<KappaReport> {
    let hit = sigma.max_value() * OMEGA_2 * epsilon * epsilon;
    if trials < 2 || !(hit < 1.0) {
        return Err(Error::InvalidInput(
            "need at least two trials and ‖σ‖∞ π ε² < 1".into(),
        ));
    }
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| separation_stats(&draw_cloud(sigma, n, seed + t as u64), epsilon).kappa)
        .collect();
    let (mean, std_error) = mean_and_se(&samples);
    let bound = (1.0 - hit).powi(n as i32 - 1);
    Ok(KappaReport {
        mean,
        std_error,
        samples,
        check: BoundCheck::new(bound, mean + 3.0 * std_error),
    })
}

pub(crate) fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub constant: f64,
    pub threshold: f64,
    pub costs: Vec<f64>,
    pub fraction: f64,
    /// `0.95 ≤ fraction`.
    pub check: BoundCheck,
}

/// Default constant for the probabilistic one-step bound: with
/// `ε_N = N^{−2/3}`, `E[1 − κ] ≤ π‖σ‖_∞ N^{−1/3}`, so the barycenter bound
/// reads `C_{2,Ω}(1 + π‖σ‖_∞) N^{−1/3}`.
pub fn default_concentration_constant(sigma: &Density, domain: &ConvexPolygon) -> f64 {
    domain_constant(domain) * (1.0 + OMEGA_2 * sigma.max_value())
}

/// Draws clouds from `σ`, takes one Lloyd step towards `ρ`, and reports the
/// fraction of trials with `W₂²(ρ, δ_B) ≤ K N^{−1/3}`.
pub fn concentration_check(
    sigma: &Density,
    rho: &Density,
    n: usize,
    trials: usize,
    seed: u64,
    constant: Option<f64>,
    cfg: &SolverConfig,
) -> Result<ConcentrationReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    let k = constant.unwrap_or_else(|| default_concentration_constant(sigma, &rho.domain()));
    let threshold = k * (n as f64).powf(-1.0 / 3.0);
    let costs = (0..trials)
        .map(|t| {
            let y = draw_cloud(sigma, n, seed + t as u64);
            let q = quantization(&y, rho, cfg)?;
            Ok(quantization(&q.barycenters, rho, cfg)?.cost)
        })
        .collect::<Result<Vec<f64>>>()?;
    let fraction = costs.iter().filter(|c| **c <= threshold).count() as f64 / trials as f64;
    Ok(ConcentrationReport {
        constant: k,
        threshold,
        costs,
        fraction,
        check: BoundCheck::new(0.95, fraction),
    })
}

/// Empirical bounded-difference constant of `κ`: resamples one point of a
/// cloud drawn from `σ` and records `N · max |Δκ|`, to be compared with
/// `2c₂ + 1`.
pub fn kappa_bounded_difference_check(
    sigma: &Density,
    n: usize,
    epsilon: f64,
    resamples: usize,
    seed: u64,
) -> BoundCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Point2> = (0..n).map(|_| sigma.sample(&mut rng)).collect();
    let kappa0 = separation_stats(&base, epsilon).kappa;
    let mut worst: f64 = 0.0;
    let mut cloud = base.clone();
    for r in 0..resamples {
        let i = r % n;
        cloud[i] = sigma.sample(&mut rng);
        let k = separation_stats(&cloud, epsilon).kappa;
        worst = worst.max((k - kappa0).abs());
        cloud[i] = base[i];
    }
    BoundCheck::new(worst * n as f64, (2 * PACKING_C2 + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_for_unit_square() {
        let c = domain_constant(&ConvexPolygon::unit_square());
        let expected = 4.0 * (2f64.sqrt() + 1.0).powi(3);
        assert!((c - expected).abs() < 1e-12);
        assert!((c - 56.28).abs() < 0.01);
    }

    #[test]
    fn separation_on_a_line() {
        let y = [
            Point2::new(0.0, 0.5),
            Point2::new(0.5, 0.5),
            Point2::new(0.6, 0.5),
        ];
        let s = separation_stats(&y, 0.2);
        assert_eq!(s.isolated, vec![0]);
        assert!((s.kappa - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.min_pairwise - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ties_count_as_isolated() {
        let y = PointCloud::grid(8, Point2::ZERO, Point2::new(1.0, 1.0));
        let h = y[1].x - y[0].x;
        assert_eq!(separation_stats(&y, h).kappa, 1.0);
        assert_eq!(separation_stats(&[Point2::new(0.3, 0.3)], 0.5).kappa, 1.0);
    }

    #[test]
    fn bucketed_and_brute_force_agree() {
        let sigma = Density::uniform();
        let y = draw_cloud(&sigma, 300, 5);
        for eps in [0.01, 0.03, 0.1] {
            let fast = separation_stats(&y, eps);
            let mut nearest = vec![f64::INFINITY; y.len()];
            for i in 0..y.len() {
                for j in 0..y.len() {
                    if i != j {
                        nearest[i] = nearest[i].min(y[i].dist(y[j]));
                    }
                }
            }
            let brute: Vec<usize> = (0..y.len()).filter(|&i| nearest[i] >= eps).collect();
            assert_eq!(fast.isolated, brute);
        }
    }

    #[test]
    fn midline_fixture() {
        let y = midline_cloud(2);
        assert_eq!(y[0], Point2::new(0.25, 0.5));
        assert_eq!(y[1], Point2::new(0.75, 0.5));
    }

    #[test]
    fn pl_rejects_oversized_epsilon() {
        let y = midline_cloud(4);
        let r = pl_check(&y, &Density::uniform(), 0.5, &SolverConfig::default());
        assert!(matches!(r, Err(Error::EpsilonTooLarge { .. })));
    }

    #[test]
    fn pl_single_point() {
        let y = PointCloud::new(vec![Point2::new(0.8, 0.3)]);
        let c = pl_check(&y, &Density::uniform(), 1.0, &SolverConfig::default()).unwrap();
        assert!(c.satisfied && c.lhs < 0.0);
    }

    #[test]
    fn hyperplane_small_cases() {
        let rho = Density::uniform();
        let cfg = SolverConfig::with_tol(1e-10);
        let r = hyperplane_bound_check(2, &rho, &cfg).unwrap();
        assert!(r.max_offset < 1e-12);
        assert!(r.check.satisfied);
        let r = hyperplane_bound_check(1, &rho, &cfg).unwrap();
        assert!((r.check.rhs - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn kappa_is_one_for_tiny_epsilon() {
        let r = kappa_expectation_check(&Density::uniform(), 100, 1e-6, 30, 1).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.check.satisfied);
        assert!((r.check.lhs - 1.0).abs() < 1e-8);
    }

    #[test]
    fn trivial_concentration_constant() {
        // W₂² never exceeds diam² = 2 on the unit square
        let rho = Density::uniform();
        let n: usize = 50;
        let k = 2.0 * (n as f64).powf(1.0 / 3.0);
        let r =
            concentration_check(&rho, &rho, n, 3, 11, Some(k), &SolverConfig::default()).unwrap();
        assert_eq!(r.fraction, 1.0);
    }

    #[test]
    fn bounded_difference_of_kappa() {
        let c = kappa_bounded_difference_check(&Density::uniform(), 200, 0.05, 1000, 9);
        assert!(c.satisfied, "{c:?}");
        assert!(c.lhs > 0.0);
    }

    #[test]
    fn kappa_for_two_uniform_points() {
        // P(|X1 − X2| ≥ ε) from the density (1−|u|)(1−|v|) of X1 − X2
        let eps: f64 = 0.1;
        let m = 2000;
        let h = 2.0 * eps / m as f64;
        let mut close = 0.0;
        for a in 0..m {
            let u = -eps + (a as f64 + 0.5) * h;
            for b in 0..m {
                let v = -eps + (b as f64 + 0.5) * h;
                if u * u + v * v < eps * eps {
                    close += (1.0 - u.abs()) * (1.0 - v.abs()) * h * h;
                }
            }
        }
        let exact = 1.0 - close;
        let closed_form =
            1.0 - (std::f64::consts::PI * eps * eps - 8.0 * eps.powi(3) / 3.0 + eps.powi(4) / 2.0);
        assert!((exact - closed_form).abs() < 1e-5);
        let r = kappa_expectation_check(&Density::uniform(), 2, eps, 4000, 21).unwrap();
        assert!(
            (r.mean - exact).abs() <= 3.0 * r.std_error,
            "{} vs {exact}",
            r.mean
        );
        assert!(r.check.satisfied);
    }
}
