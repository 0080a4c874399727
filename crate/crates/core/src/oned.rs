//! Exact one-dimensional semidiscrete transport to uniform quantiles, the
//! truncated-Gaussian family and separable grid costs.

use std::f64::consts::{PI, SQRT_2};
use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::BoundCheck;

/// A probability density on a bounded interval.
pub trait Density1D: Sync {
    fn support(&self) -> (f64, f64);
    fn pdf(&self, x: f64) -> f64;
    fn cdf(&self, x: f64) -> f64;
    /// `∫_a^b x ρ(x) dx`.
    fn first_moment(&self, a: f64, b: f64) -> f64;

    /// Typical length over which `pdf` varies; sets the quadrature panel size.
    fn length_scale(&self) -> f64 {
        let (lo, hi) = self.support();
        hi - lo
    }

    fn quantile(&self, t: f64) -> f64 {
        let (lo, hi) = self.support();
        quantile_in(self, t, lo, hi)
    }
}

fn quantile_in<D: Density1D + ?Sized>(rho: &D, t: f64, mut lo: f64, mut hi: f64) -> f64 {
    if t <= 0.0 {
        return rho.support().0;
    }
    if t >= 1.0 {
        return rho.support().1;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = rho.cdf(x) - t;
        if r.abs() <= 1e-16 * t {
            break;
        }
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1e-300) {
            break;
        }
        let p = rho.pdf(x);
        let newton = x - r / p;
        x = if p > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    x
}

/// Centered normal density restricted to `[−1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncGauss1D {
    sigma: f64,
    m_sigma: f64,
    /// `erfc(1 / (σ√2))`.
    tail: f64,
}

impl TruncGauss1D {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive");
        let z = 1.0 / (sigma * SQRT_2);
        let m_sigma = 1.0 / (sigma * (2.0 * PI).sqrt() * libm::erf(z));
        TruncGauss1D {
            sigma,
            m_sigma,
            tail: libm::erfc(z),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalisation: `m_σ⁻¹ = ∫_{−1}^{1} e^{−x²/(2σ²)} dx`.
    pub fn m_sigma(&self) -> f64 {
        self.m_sigma
    }

    /// `∫_{−1}^{x} ρ` for `x ≤ 0`, by differences of `erfc`.
    fn lower_mass(&self, x: f64) -> f64 {
        let z = -x / (self.sigma * SQRT_2);
        (libm::erfc(z) - self.tail) / (2.0 - 2.0 * self.tail)
    }

    fn gauss(&self, x: f64) -> f64 {
        (-x * x / (2.0 * self.sigma * self.sigma)).exp()
    }
}

impl Density1D for TruncGauss1D {
    fn support(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn pdf(&self, x: f64) -> f64 {
        if (-1.0..=1.0).contains(&x) {
            self.m_sigma * self.gauss(x)
        } else {
            0.0
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(-1.0, 1.0);
        if x <= 0.0 {
            self.lower_mass(x)
        } else {
            1.0 - self.lower_mass(-x)
        }
    }

    fn first_moment(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.clamp(-1.0, 1.0), b.clamp(-1.0, 1.0));
        let s2 = self.sigma * self.sigma;
        // σ²(e^{−a²/2σ²} − e^{−b²/2σ²}) without cancellation
        let diff = if a.abs() <= b.abs() {
            -self.gauss(a) * (-(b * b - a * a) / (2.0 * s2)).exp_m1()
        } else {
            self.gauss(b) * (-(a * a - b * b) / (2.0 * s2)).exp_m1()
        };
        self.m_sigma * s2 * diff
    }

    fn length_scale(&self) -> f64 {
        self.sigma.min(2.0)
    }

    fn quantile(&self, t: f64) -> f64 {
        if t > 0.5 {
            -quantile_in(self, 1.0 - t, -1.0, 0.0)
        } else {
            quantile_in(self, t, -1.0, 0.0)
        }
    }
}

/// Uniform density on `[−1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Uniform1D;

impl Density1D for Uniform1D {
    fn support(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn pdf(&self, x: f64) -> f64 {
        if (-1.0..=1.0).contains(&x) {
            0.5
        } else {
            0.0
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        0.5 * (x.clamp(-1.0, 1.0) + 1.0)
    }

    fn first_moment(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.clamp(-1.0, 1.0), b.clamp(-1.0, 1.0));
        0.25 * (b * b - a * a)
    }

    fn quantile(&self, t: f64) -> f64 {
        2.0 * t.clamp(0.0, 1.0) - 1.0
    }
}

/// A density on `[−1, 1]` pushed forward affinely onto `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescaled<D> {
    pub inner: D,
    pub lo: f64,
    pub hi: f64,
}

impl<D: Density1D> Rescaled<D> {
    pub fn new(inner: D, lo: f64, hi: f64) -> Self {
        assert!(hi > lo, "empty interval");
        Rescaled { inner, lo, hi }
    }

    fn half(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    fn to_inner(&self, x: f64) -> f64 {
        (x - self.lo) / self.half() - 1.0
    }

    fn to_outer(&self, u: f64) -> f64 {
        self.lo + (u + 1.0) * self.half()
    }
}

impl<D: Density1D> Density1D for Rescaled<D> {
    fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn pdf(&self, x: f64) -> f64 {
        self.inner.pdf(self.to_inner(x)) / self.half()
    }

    fn cdf(&self, x: f64) -> f64 {
        self.inner.cdf(self.to_inner(x))
    }

    fn first_moment(&self, a: f64, b: f64) -> f64 {
        let (ua, ub) = (self.to_inner(a), self.to_inner(b));
        let mass = self.inner.cdf(ub) - self.inner.cdf(ua);
        (self.lo + self.half()) * mass + self.half() * self.inner.first_moment(ua, ub)
    }

    fn length_scale(&self) -> f64 {
        self.inner.length_scale() * self.half()
    }

    fn quantile(&self, t: f64) -> f64 {
        self.to_outer(self.inner.quantile(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cells1D {
    /// `F⁻¹(i/N)` for `i = 0..=N`.
    pub breakpoints: Vec<f64>,
    pub barycenters: Vec<f64>,
    pub masses: Vec<f64>,
    /// `∫_{P_i} (x − b_i)² dρ` per cell.
    pub cell_costs: Vec<f64>,
    pub cost: f64,
}

impl Cells1D {
    pub fn len(&self) -> usize {
        self.barycenters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.barycenters.is_empty()
    }
}

const GL_DEGREE: usize = 16;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(GL_DEGREE).unwrap()))
}

/// `∫_a^b (x − c)² ρ(x) dx` by composite Gauss–Legendre with panels no
/// wider than a quarter of the density's length scale.
fn central_second_moment<D: Density1D + ?Sized>(rho: &D, a: f64, b: f64, c: f64) -> f64 {
    let panel = 0.25 * rho.length_scale();
    let k = ((b - a) / panel).ceil().max(1.0) as usize;
    let h = (b - a) / k as f64;
    let gl = rule();
    (0..k)
        .map(|j| {
            let lo = a + j as f64 * h;
            gl.integrate(lo, lo + h, |x| (x - c) * (x - c) * rho.pdf(x))
        })
        .sum()
}

/// The `N` cells between consecutive `N`-quantiles, with their barycenters
/// and the exact transport cost to the uniform measure on the barycenters.
pub fn quantile_cells<D: Density1D + ?Sized>(rho: &D, n: usize) -> Cells1D {
    assert!(n >= 1, "need at least one cell");
    let breakpoints: Vec<f64> = (0..=n)
        .into_par_iter()
        .map(|i| match i {
            0 => rho.support().0,
            i if i == n => rho.support().1,
            i => rho.quantile(i as f64 / n as f64),
        })
        .collect();
    let per_cell: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (breakpoints[i], breakpoints[i + 1]);
            let mass = rho.cdf(b) - rho.cdf(a);
            let bary = if mass > 0.0 {
                (rho.first_moment(a, b) / mass).clamp(a, b)
            } else {
                0.5 * (a + b)
            };
            (mass, bary, central_second_moment(rho, a, b, bary))
        })
        .collect();
    let masses = per_cell.iter().map(|c| c.0).collect();
    let barycenters = per_cell.iter().map(|c| c.1).collect();
    let cell_costs: Vec<f64> = per_cell.iter().map(|c| c.2).collect();
    Cells1D {
        breakpoints,
        barycenters,
        masses,
        cost: cell_costs.iter().sum(),
        cell_costs,
    }
}

/// `σ` with `e^{1/(2σ²)} = N^α`.
pub fn sigma_for_alpha(n: usize, alpha: f64) -> f64 {
    1.0 / (2.0 * alpha * (n as f64).ln()).sqrt()
}

/// The exponent choice `α = (1 + δ)/2 + 0.05`.
pub fn alpha_for_delta(delta: f64) -> f64 {
    0.5 * (1.0 + delta) + 0.05
}

/// Sum over axes of the 1D quantile-cell costs: the cost of the tensor
/// grid with `n_per_axis` points per axis for a product density.
pub fn separable_grid_cost(axes: &[&dyn Density1D], n_per_axis: usize) -> f64 {
    axes.iter()
        .map(|rho| quantile_cells(*rho, n_per_axis).cost)
        .sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianSweepPoint {
    pub n: usize,
    pub sigma: f64,
    pub cost: f64,
    pub first_cell_cost: f64,
    /// `cost · N^{2−δ}`.
    pub scaled_cost: f64,
    /// `lhs = c N^{−(2−δ)}`, `rhs = cost`.
    pub check: BoundCheck,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianSweep {
    pub delta: f64,
    pub alpha: f64,
    /// Calibrated at the smallest `N` so that the bound is tight there.
    pub constant: f64,
    pub points: Vec<GaussianSweepPoint>,
    pub monotone: bool,
    pub satisfied: bool,
}

/// Lower bound `W₂² ≥ c N^{−(2−δ)}` for `ρ_{σ_N}`, with `σ_N` from
/// [`sigma_for_alpha`]. The constant is fitted at the smallest `N` and must
/// persist at every larger one.
pub fn gaussian_lower_bound_check(ns: &[usize], delta: f64, alpha: Option<f64>) -> GaussianSweep {
    let alpha = alpha.unwrap_or_else(|| alpha_for_delta(delta));
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    let raw: Vec<(usize, f64, Cells1D)> = ns
        .par_iter()
        .map(|&n| {
            let sigma = sigma_for_alpha(n, alpha);
            (n, sigma, quantile_cells(&TruncGauss1D::new(sigma), n))
        })
        .collect();
    let scale = |n: usize| (n as f64).powf(2.0 - delta);
    let constant = raw.first().map_or(0.0, |(n, _, c)| c.cost * scale(*n));
    let points: Vec<GaussianSweepPoint> = raw
        .into_iter()
        .map(|(n, sigma, cells)| GaussianSweepPoint {
            n,
            sigma,
            cost: cells.cost,
            first_cell_cost: cells.cell_costs[0],
            scaled_cost: cells.cost * scale(n),
            check: BoundCheck::new(constant / scale(n), cells.cost),
        })
        .collect();
    let monotone = points
        .windows(2)
        .all(|w| w[1].scaled_cost >= w[0].scaled_cost);
    GaussianSweep {
        delta,
        alpha,
        constant,
        satisfied: points.iter().all(|p| p.check.satisfied),
        monotone,
        points,
    }
}

/// The proof's first-cell estimate `N^{2α−3} / ln N`, up to a constant.
pub fn first_cell_rate(n: usize, alpha: f64) -> f64 {
    let n = n as f64;
    n.powf(2.0 * alpha - 3.0) / n.ln()
}

/// Checks that the first cell alone carries at least `c′ N^{2α−3}/ln N`,
/// with `c′` calibrated at the smallest `N`.
pub fn first_cell_check(sweep: &GaussianSweep) -> Vec<BoundCheck> {
    let Some(first) = sweep.points.first() else {
        return Vec::new();
    };
    let c = first.first_cell_cost / first_cell_rate(first.n, sweep.alpha);
    sweep
        .points
        .iter()
        .map(|p| BoundCheck::new(c * first_cell_rate(p.n, sweep.alpha), p.first_cell_cost))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, k: usize) -> f64 {
        let h = (b - a) / k as f64;
        let mut s = f(a) + f(b);
        for i in 1..k {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn normalisation() {
        for sigma in [0.05, 0.3, 1.0, 5.0] {
            let g = TruncGauss1D::new(sigma);
            let integral = simpson(|x| (-x * x / (2.0 * sigma * sigma)).exp(), -1.0, 1.0, 20000);
            assert!((1.0 / g.m_sigma() - integral).abs() < 1e-12 * integral);
        }
    }

    #[test]
    fn cdf_endpoints_and_symmetry() {
        let g = TruncGauss1D::new(0.3);
        assert_eq!(g.cdf(-1.0), 0.0);
        assert!((g.cdf(1.0) - 1.0).abs() < 1e-15);
        assert!((g.cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((g.cdf(0.4) + g.cdf(-0.4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_matches_quadrature() {
        let g = TruncGauss1D::new(0.2);
        for x in [-0.9, -0.5, -0.1, 0.3, 0.8] {
            let direct = simpson(|t| g.pdf(t), -1.0, x, 20000);
            assert!((g.cdf(x) - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let g = TruncGauss1D::new(0.3);
        for i in 0..1000 {
            let x = -1.0 + 2.0 * (i as f64 + 0.5) / 1000.0;
            assert!((g.quantile(g.cdf(x)) - x).abs() < 1e-10, "{x}");
        }
        // lower tail of a narrow profile, where cdf keeps full relative precision
        let g = TruncGauss1D::new(0.15);
        for i in 0..500 {
            let x = -1.0 + (i as f64 + 0.5) / 500.0;
            assert!((g.quantile(g.cdf(x)) - x).abs() < 1e-10, "{x}");
        }
        for t in [1e-12, 1e-6, 0.3, 0.7, 1.0 - 1e-9] {
            assert!((g.cdf(g.quantile(t)) - t).abs() <= 1e-13);
        }
    }

    #[test]
    fn uniform_quantile_is_linear() {
        for t in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert_eq!(Uniform1D.quantile(t), 2.0 * t - 1.0);
        }
        // the generic root finder agrees
        assert!((quantile_in(&Uniform1D, 0.3, -1.0, 1.0) + 0.4).abs() < 1e-14);
    }

    #[test]
    fn uniform_four_cells() {
        let c = quantile_cells(&Uniform1D, 4);
        let expect = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for (b, e) in c.breakpoints.iter().zip(expect) {
            assert!((b - e).abs() < 1e-15);
        }
        for (b, e) in c.barycenters.iter().zip([-0.75, -0.25, 0.25, 0.75]) {
            assert!((b - e).abs() < 1e-15);
        }
        assert!((c.cost - 1.0 / 48.0).abs() < 1e-15);
    }

    #[test]
    fn single_cell_is_variance() {
        let g = TruncGauss1D::new(0.4);
        let c = quantile_cells(&g, 1);
        let var = simpson(|x| x * x * g.pdf(x), -1.0, 1.0, 20000);
        assert!(c.barycenters[0].abs() < 1e-15);
        assert!((c.cost - var).abs() < 1e-13);
    }

    #[test]
    fn gaussian_cell_masses() {
        let g = TruncGauss1D::new(0.5);
        let c = quantile_cells(&g, 16);
        for i in 0..16 {
            let (a, b) = (c.breakpoints[i], c.breakpoints[i + 1]);
            let m = simpson(|x| g.pdf(x), a, b, 2000);
            assert!((m - 1.0 / 16.0).abs() < 1e-10);
            assert!((c.masses[i] - 1.0 / 16.0).abs() < 1e-10);
            assert!(a < c.barycenters[i] && c.barycenters[i] < b);
            let bary = simpson(|x| x * g.pdf(x), a, b, 2000) / m;
            assert!((bary - c.barycenters[i]).abs() < 1e-12);
            let cost = simpson(|x| (x - bary).powi(2) * g.pdf(x), a, b, 2000);
            assert!((cost - c.cell_costs[i]).abs() < 1e-14);
        }
        for i in 0..8 {
            assert!((c.barycenters[i] + c.barycenters[15 - i]).abs() < 1e-13);
            assert!((c.breakpoints[i] + c.breakpoints[16 - i]).abs() < 1e-13);
        }
    }

    #[test]
    fn rescaled_uniform() {
        let r = Rescaled::new(Uniform1D, 0.0, 1.0);
        let c = quantile_cells(&r, 4);
        for (b, e) in c.barycenters.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert!((b - e).abs() < 1e-15);
        }
        assert!((c.cost - 1.0 / 192.0).abs() < 1e-16);
        let g = TruncGauss1D::new(0.5);
        let cg = quantile_cells(&g, 8).cost;
        let cr = quantile_cells(&Rescaled::new(g, 0.0, 1.0), 8).cost;
        assert!((cr - cg / 4.0).abs() < 1e-15);
    }

    #[test]
    fn sigma_closed_form() {
        let n = 2f64.exp().round() as usize;
        assert!((sigma_for_alpha(n, 0.5) - 1.0 / (n as f64).ln().sqrt()).abs() < 1e-15);
        assert!((1.0 / (2.0 * 0.5 * 2.0f64).sqrt() - 1.0 / SQRT_2).abs() < 1e-15);
        assert!(
            (sigma_for_alpha(10_000, 0.75) - 1.0 / (1.5 * 10_000f64.ln()).sqrt()).abs() < 1e-15
        );
        assert!((sigma_for_alpha(10_000, 0.75) - 0.26907).abs() < 1e-4);
        let d = 0.5;
        let a = alpha_for_delta(d);
        assert!(a < 1.0 && 2.0 * a > 1.0 + d);
    }

    #[test]
    fn separable_uniform_grid() {
        let u: &dyn Density1D = &Uniform1D;
        assert!((separable_grid_cost(&[u, u], 4) - 2.0 / 48.0).abs() < 1e-15);
        let g = TruncGauss1D::new(0.3);
        assert_eq!(separable_grid_cost(&[&g], 7), quantile_cells(&g, 7).cost);
    }

    #[test]
    fn fixed_sigma_rate() {
        let g = TruncGauss1D::new(0.3);
        let pts: Vec<(f64, f64)> = [256usize, 1024, 4096]
            .iter()
            .map(|&n| ((n as f64).ln(), quantile_cells(&g, n).cost.ln()))
            .collect();
        let slope = (pts[2].1 - pts[0].1) / (pts[2].0 - pts[0].0);
        assert!((-2.2..=-1.8).contains(&slope), "{slope}");
    }
}
