//! Semidiscrete optimal transport from a density to the uniform measure on a
//! point cloud.
//!
//! The Kantorovich dual
//! `Φ(φ) = Σ_i [φ_i/N + ∫_{P_i(φ)} (‖x − y_i‖² − φ_i) dρ]`
//! is concave with gradient `1/N − ρ(P_i(φ))`; its maximizers are exactly
//! the potentials whose power cells all carry mass `1/N`. We maximize it
//! with a damped Newton method. The Hessian is minus a weighted graph
//! Laplacian over adjacent cells, with weights
//! `∫_{P_i ∩ P_j} ρ ds / (2‖y_i − y_j‖)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::{FillInReduction, SymmetryCheck, TriMat};
use sprs_ldl::Ldl;

use crate::density::{Density, PolygonMoments};
use crate::error::{Error, Result};
use crate::geom2d::{power_diagram, Point2, PointCloud, PowerDiagram};

/// One potential per site, in squared-distance units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Potentials(pub Vec<f64>);

impl Potentials {
    pub fn zeros(n: usize) -> Self {
        Potentials(vec![0.0; n])
    }

    /// Shifts all entries so that the first one is zero.
    pub fn gauge_fixed(mut self) -> Self {
        if let Some(&p0) = self.0.first() {
            self.0.iter_mut().for_each(|p| *p -= p0);
        }
        self
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `N · max_i |mass_i − 1/N|` at the returned potentials.
    pub final_residual: f64,
    pub newton_steps: usize,
    pub fallback_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Convergence threshold on `N · max_i |mass_i − 1/N|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        SolverConfig {
            tol,
            ..Default::default()
        }
    }
}

/// Solved transport state for a point cloud.
#[derive(Clone, Debug)]
pub struct Quantization {
    pub sites: PointCloud,
    /// Gauge-fixed optimal potentials.
    pub phi: Potentials,
    pub diagram: PowerDiagram,
    pub moments: Vec<PolygonMoments>,
    pub masses: Vec<f64>,
    /// `B_N(Y)`: the density barycenters of the cells.
    pub barycenters: PointCloud,
    /// `W₂²(ρ, δ_Y)`.
    pub cost: f64,
    /// `F_N(Y) = cost / 2`.
    pub f_value: f64,
    pub report: SolveReport,
}

impl Quantization {
    /// `N ‖∇F_N(Y)‖² = (1/N) Σ_i ‖y_i − b_i‖²`.
    pub fn grad_norm_sq_scaled(&self) -> f64 {
        let n = self.sites.len() as f64;
        self.sites
            .iter()
            .zip(self.barycenters.iter())
            .map(|(y, b)| (*y - *b).norm_sq())
            .sum::<f64>()
            / n
    }

    /// `∇F_N(Y) = (Y − B_N(Y)) / N`.
    pub fn gradient(&self) -> Vec<Point2> {
        let n = self.sites.len() as f64;
        self.sites
            .iter()
            .zip(self.barycenters.iter())
            .map(|(y, b)| (*y - *b) / n)
            .collect()
    }
}

struct Evaluation {
    diagram: PowerDiagram,
    moments: Vec<PolygonMoments>,
    dual: f64,
}

impl Evaluation {
    fn masses(&self) -> Vec<f64> {
        self.moments.iter().map(|m| m.mass).collect()
    }

    fn min_mass(&self) -> f64 {
        self.moments
            .iter()
            .map(|m| m.mass)
            .fold(f64::INFINITY, f64::min)
    }

    fn residual(&self) -> f64 {
        let n = self.moments.len() as f64;
        let target = 1.0 / n;
        n * self
            .moments
            .iter()
            .map(|m| (m.mass - target).abs())
            .fold(0.0, f64::max)
    }
}

fn evaluate(sites: &[Point2], phi: &[f64], rho: &Density) -> Result<Evaluation> {
    let diagram = power_diagram(sites, phi, &rho.domain())?;
    let moments: Vec<PolygonMoments> = diagram
        .cells
        .par_iter()
        .map(|c| rho.polygon_moments(c))
        .collect();
    let n = sites.len() as f64;
    let dual = moments
        .iter()
        .zip(sites)
        .zip(phi)
        .map(|((m, y), p)| p / n + m.cost_to(*y) - p * m.mass)
        .sum();
    Ok(Evaluation {
        diagram,
        moments,
        dual,
    })
}

/// `Σ_i [φ_i/N + ∫_{P_i} (‖x − y_i‖² − φ_i) dρ]`.
pub fn dual_value(sites: &[Point2], phi: &[f64], rho: &Density) -> Result<f64> {
    Ok(evaluate(sites, phi, rho)?.dual)
}

/// Gradient of the dual, `1/N − ρ(P_i)`.
pub fn mass_gradient(sites: &[Point2], phi: &[f64], rho: &Density) -> Result<Vec<f64>> {
    let ev = evaluate(sites, phi, rho)?;
    let target = 1.0 / sites.len() as f64;
    Ok(ev.moments.iter().map(|m| target - m.mass).collect())
}

/// Laplacian weights `∫ρ ds / (2‖y_i − y_j‖)` per facet, with the diagonal.
fn laplacian(
    sites: &[Point2],
    ev: &Evaluation,
    rho: &Density,
) -> (Vec<(usize, usize, f64)>, Vec<f64>) {
    let weights: Vec<(usize, usize, f64)> = ev
        .diagram
        .facets
        .par_iter()
        .map(|f| {
            let w = rho.segment_integral(f.a, f.b) / (2.0 * sites[f.i].dist(sites[f.j]));
            (f.i, f.j, w)
        })
        .collect();
    let mut diag = vec![0.0; sites.len()];
    for &(i, j, w) in &weights {
        diag[i] += w;
        diag[j] += w;
    }
    (weights, diag)
}

/// Solves `L d = g` on the gauge-reduced system (`d_0 = 0`). `None` when the
/// reduced Laplacian is singular.
fn newton_direction(weights: &[(usize, usize, f64)], diag: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let m = n - 1;
    if m == 1 {
        // the factorization needs at least two unknowns
        return (diag[1] > 0.0).then(|| vec![0.0, g[1] / diag[1]]);
    }
    let mut tri = TriMat::with_capacity((m, m), m + 2 * weights.len());
    for (i, &d) in diag.iter().enumerate().skip(1) {
        tri.add_triplet(i - 1, i - 1, d);
    }
    for &(i, j, w) in weights {
        if i > 0 && j > 0 && w != 0.0 {
            tri.add_triplet(i - 1, j - 1, -w);
            tri.add_triplet(j - 1, i - 1, -w);
        }
    }
    let mat = tri.to_csc::<usize>();
    let ldl = Ldl::new()
        .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
        .check_symmetry(SymmetryCheck::DontCheckSymmetry)
        .numeric(mat.view())
        .ok()?;
    let dmax = ldl.d().iter().copied().fold(0.0, f64::max);
    if !(dmax > 0.0) || ldl.d().iter().any(|&d| !(d > 1e-13 * dmax)) {
        return None;
    }
    let rhs: Vec<f64> = g[1..].to_vec();
    let sol = ldl.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut dir = Vec::with_capacity(n);
    dir.push(0.0);
    dir.extend(sol);
    Some(dir)
}

/// Halves the step from `t = 1` until the dual does not decrease (up to
/// round-off) and, if given, the smallest cell mass stays above `floor`.
fn line_search(
    sites: &[Point2],
    rho: &Density,
    phi: &[f64],
    dir: &[f64],
    current: &Evaluation,
    floor: Option<f64>,
) -> Result<Option<(Vec<f64>, Evaluation)>> {
    let n = phi.len() as f64;
    let scale = current.dual.abs() + phi.iter().map(|p| p.abs()).sum::<f64>() / n;
    let dual_tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut t = 1.0;
    for _ in 0..40 {
        let cand: Vec<f64> = phi.iter().zip(dir).map(|(p, d)| p + t * d).collect();
        let ev = evaluate(sites, &cand, rho)?;
        let mass_ok = floor.is_none_or(|f| ev.min_mass() >= f);
        if mass_ok && ev.dual >= current.dual - dual_tol {
            return Ok(Some((cand, ev)));
        }
        t *= 0.5;
    }
    Ok(None)
}

fn solve_impl(
    sites: &[Point2],
    rho: &Density,
    phi0: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport, Evaluation)> {
    let n = sites.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty point cloud".into()));
    }
    if phi0.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} sites but {} initial potentials",
            n,
            phi0.len()
        )));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidInput(
            "solver tolerance must be positive".into(),
        ));
    }
    let target = 1.0 / n as f64;
    let mut phi = phi0;
    let mut ev = evaluate(sites, &phi, rho)?;
    let mut report = SolveReport::default();

    // Pre-phase: plain gradient ascent until no cell is massless.
    let mut step = rho.domain().area();
    while ev.min_mass() <= 0.0 {
        if report.iterations >= cfg.max_iter {
            report.final_residual = ev.residual();
            return Err(Error::NotConverged(report));
        }
        report.iterations += 1;
        let dir: Vec<f64> = ev
            .moments
            .iter()
            .map(|m| step * (target - m.mass))
            .collect();
        match line_search(sites, rho, &phi, &dir, &ev, None)? {
            Some((p, e)) => {
                phi = p;
                ev = e;
                report.fallback_steps += 1;
                step *= 2.0;
            }
            None => {
                report.final_residual = ev.residual();
                return Err(Error::NotConverged(report));
            }
        }
    }

    let floor = 0.5 * ev.min_mass().min(target);
    loop {
        report.final_residual = ev.residual();
        if report.final_residual <= cfg.tol {
            break;
        }
        if report.iterations >= cfg.max_iter {
            return Err(Error::NotConverged(report));
        }
        report.iterations += 1;

        let masses = ev.masses();
        let g: Vec<f64> = masses.iter().map(|m| target - m).collect();
        let (weights, diag) = laplacian(sites, &ev, rho);

        if let Some(dir) = newton_direction(&weights, &diag, &g) {
            if let Some((p, e)) = line_search(sites, rho, &phi, &dir, &ev, Some(floor))? {
                phi = p;
                ev = e;
                report.newton_steps += 1;
                continue;
            }
        }

        let dir: Vec<f64> = g
            .iter()
            .zip(&diag)
            .map(|(gi, d)| if *d > 0.0 { gi / d } else { 0.0 })
            .collect();
        match line_search(sites, rho, &phi, &dir, &ev, Some(floor))? {
            Some((p, e)) => {
                phi = p;
                ev = e;
                report.fallback_steps += 1;
            }
            None => return Err(Error::NotConverged(report)),
        }
    }
    Ok((phi, report, ev))
}

/// Potentials equalizing all cell masses, starting from `φ = 0`.
pub fn solve_potentials(
    sites: &[Point2],
    rho: &Density,
    cfg: &SolverConfig,
) -> Result<(Potentials, SolveReport)> {
    solve_potentials_from(sites, rho, &Potentials::zeros(sites.len()), cfg)
}

/// As [`solve_potentials`], warm-started from `phi0`.
pub fn solve_potentials_from(
    sites: &[Point2],
    rho: &Density,
    phi0: &Potentials,
    cfg: &SolverConfig,
) -> Result<(Potentials, SolveReport)> {
    let (phi, report, _) = solve_impl(sites, rho, phi0.0.clone(), cfg)?;
    Ok((Potentials(phi).gauge_fixed(), report))
}

/// Solves the transport problem and assembles cells, masses, barycenters and
/// the transport cost.
pub fn quantization(sites: &PointCloud, rho: &Density, cfg: &SolverConfig) -> Result<Quantization> {
    quantization_from(sites, rho, &Potentials::zeros(sites.len()), cfg)
}

pub fn quantization_from(
    sites: &PointCloud,
    rho: &Density,
    phi0: &Potentials,
    cfg: &SolverConfig,
) -> Result<Quantization> {
    let (phi, report, ev) = solve_impl(sites, rho, phi0.0.clone(), cfg)?;
    let mut barycenters = Vec::with_capacity(sites.len());
    for (i, m) in ev.moments.iter().enumerate() {
        barycenters.push(m.barycenter().ok_or(Error::EmptyCell(i))?);
    }
    let cost = ev
        .moments
        .iter()
        .zip(sites.iter())
        .map(|(m, y)| m.cost_to(*y))
        .sum::<f64>();
    Ok(Quantization {
        sites: sites.clone(),
        phi: Potentials(phi).gauge_fixed(),
        masses: ev.masses(),
        diagram: ev.diagram,
        moments: ev.moments,
        barycenters: PointCloud::new(barycenters),
        cost,
        f_value: 0.5 * cost,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom2d::ConvexPolygon;

    fn pair(a: f64, b: f64) -> PointCloud {
        PointCloud::new(vec![Point2::new(a, 0.5), Point2::new(b, 0.5)])
    }

    #[test]
    fn dual_single_site_ignores_potential() {
        let rho = Density::uniform();
        let y = [Point2::new(0.5, 0.5)];
        for p in [-3.0, 0.0, 2.5] {
            let v = dual_value(&y, &[p], &rho).unwrap();
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dual_symmetric_pair() {
        let v = dual_value(&pair(0.25, 0.75), &[0.0, 0.0], &Density::uniform()).unwrap();
        assert!((v - 5.0 / 48.0).abs() < 1e-15);
    }

    #[test]
    fn mass_gradient_of_asymmetric_pair() {
        let g = mass_gradient(&pair(0.25, 0.5), &[0.0, 0.0], &Density::uniform()).unwrap();
        assert!((g[0] - 0.125).abs() < 1e-15 && (g[1] + 0.125).abs() < 1e-15);
        assert!((g[0] + g[1]).abs() < 1e-12);
        let g = mass_gradient(&pair(0.25, 0.75), &[0.0, 0.0], &Density::uniform()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn symmetric_pair_needs_no_iteration() {
        let (phi, rep) = solve_potentials(
            &pair(0.25, 0.75),
            &Density::uniform(),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(phi.0, vec![0.0, 0.0]);
        assert!(rep.iterations <= 1);
    }

    #[test]
    fn asymmetric_pair_closed_form() {
        let cfg = SolverConfig::with_tol(1e-12);
        let (phi, _) = solve_potentials(&pair(0.25, 0.5), &Density::uniform(), &cfg).unwrap();
        // cells split at x = 1/2: φ_1 − φ_0 = ‖y_1‖² − ‖y_0‖² − 2(y_1 − y_0)·(½, 0)
        assert_eq!(phi.0[0], 0.0);
        assert!((phi.0[1] - (-0.0625)).abs() < 1e-12, "{:?}", phi);
        let q = quantization(&pair(0.25, 0.5), &Density::uniform(), &cfg).unwrap();
        let cell = &q.diagram.cells[0];
        let (_, hi) = cell.bbox().unwrap();
        assert!((hi.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_site_quantization() {
        let y = PointCloud::new(vec![Point2::new(0.5, 0.5)]);
        let q = quantization(&y, &Density::uniform(), &SolverConfig::default()).unwrap();
        assert!((q.cost - 1.0 / 6.0).abs() < 1e-15);
        assert!((q.f_value - 1.0 / 12.0).abs() < 1e-15);
        assert!(q.barycenters[0].dist(Point2::new(0.5, 0.5)) < 1e-15);
    }

    #[test]
    fn symmetric_pair_quantization() {
        let q = quantization(
            &pair(0.25, 0.75),
            &Density::uniform(),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!((q.cost - 5.0 / 48.0).abs() < 1e-15);
        assert!(q.barycenters[0].dist(Point2::new(0.25, 0.5)) < 1e-15);
        assert!(q.barycenters[1].dist(Point2::new(0.75, 0.5)) < 1e-15);
    }

    #[test]
    fn regular_grid_is_already_optimal() {
        let y = PointCloud::grid(20, Point2::ZERO, Point2::new(1.0, 1.0));
        let (phi, rep) =
            solve_potentials(&y, &Density::uniform(), &SolverConfig::default()).unwrap();
        assert!(phi.0.iter().all(|p| p.abs() < 1e-12));
        assert!(rep.final_residual <= 1e-6);
    }

    #[test]
    fn duplicate_sites_error() {
        let y = pair(0.5, 0.5);
        assert!(matches!(
            quantization(&y, &Density::uniform(), &SolverConfig::default()),
            Err(Error::DuplicateSites(0, 1))
        ));
    }

    #[test]
    fn zero_mass_voronoi_cells_are_recovered() {
        // all mass in the left column; sites on the right start massless
        let mut values = vec![0.0; 16 * 16];
        for r in 0..16 {
            for c in 0..4 {
                values[r * 16 + c] = 1.0;
            }
        }
        let rho = Density::from_values(16, 16, 1.0 / 16.0, 1.0 / 16.0, values).unwrap();
        let y = PointCloud::grid(3, Point2::ZERO, Point2::new(1.0, 1.0));
        let q = quantization(&y, &rho, &SolverConfig::with_tol(1e-9)).unwrap();
        assert!(q.masses.iter().all(|m| (m - 1.0 / 9.0).abs() < 1e-9 / 9.0));
        assert!(q.report.fallback_steps > 0);
        assert!((q.masses.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(rho.domain(), ConvexPolygon::unit_square());
    }
}
