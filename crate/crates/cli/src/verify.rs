//! Named suites of numerical checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use sdot_core::diagnostics::{
    barycenter_bound, concentration_check, hyperplane_bound_check, kappa_bounded_difference_check,
    kappa_expectation_check, midline_cloud, pl_check,
};
use sdot_core::oned::{first_cell_check, gaussian_lower_bound_check, quantile_cells, TruncGauss1D};
use sdot_core::quantize::run_descent;
use sdot_core::{
    BoundCheck, ConvexPolygon, Density, DescentConfig, Point2, PointCloud, SolverConfig,
};

use crate::error::{CliError, Result};
use crate::experiment::{generate_points, InitKind, RateFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Bounds,
    Lemmas,
    Gaussian1d,
    Proba,
}

impl FromStr for Suite {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bounds" => Ok(Suite::Bounds),
            "lemmas" => Ok(Suite::Lemmas),
            "gaussian1d" => Ok(Suite::Gaussian1d),
            "proba" => Ok(Suite::Proba),
            _ => Err(CliError::Parse(format!(
                "unknown suite {s:?} (expected bounds, lemmas, gaussian1d or proba)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Bounds => "bounds",
            Suite::Lemmas => "lemmas",
            Suite::Gaussian1d => "gaussian1d",
            Suite::Proba => "proba",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte Carlo trials for the κ expectation check.
    pub trials: usize,
    pub delta: f64,
    pub solver: SolverConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 7,
            trials: 200,
            delta: 0.5,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub satisfied: bool,
}

impl NamedCheck {
    pub fn new(name: impl Into<String>, c: BoundCheck) -> Self {
        NamedCheck {
            name: name.into(),
            lhs: c.lhs,
            rhs: c.rhs,
            slack: c.slack,
            satisfied: c.satisfied,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<NamedCheck>,
    pub failures: usize,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Bounds => bounds(opts)?,
        Suite::Lemmas => lemmas(opts)?,
        Suite::Gaussian1d => gaussian1d(opts),
        Suite::Proba => proba(opts)?,
    };
    Ok(SuiteReport {
        suite,
        failures: checks.iter().filter(|c| !c.satisfied).count(),
        checks,
    })
}

fn random_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    generate_points(&InitKind::Random, n, &ConvexPolygon::unit_square(), seed)
}

fn bounds(opts: &VerifyOptions) -> Result<Vec<NamedCheck>> {
    let cfg = &opts.solver;
    let uniform = Density::uniform();
    let gauss = Density::analytic_gaussian2(8.0, 512)?;
    let mut out = Vec::new();

    let grid = PointCloud::grid(20, Point2::ZERO, Point2::new(1.0, 1.0));
    out.push(NamedCheck::new(
        "barycenter_bound/uniform_grid_400",
        barycenter_bound(&grid, &uniform, 1.0 / 20.0, cfg)?,
    ));
    out.push(NamedCheck::new(
        "barycenter_bound/gaussian_grid_400",
        barycenter_bound(&grid, &gauss, 1.0 / 20.0, cfg)?,
    ));
    for t in 0..5 {
        let y = random_cloud(100, opts.seed + t)?;
        let eps = y.min_pairwise_distance();
        out.push(NamedCheck::new(
            format!("barycenter_bound/random_100/seed_{}", opts.seed + t),
            barycenter_bound(&y, &gauss, eps, cfg)?,
        ));
        out.push(NamedCheck::new(
            format!("pl_check/random_100/seed_{}", opts.seed + t),
            pl_check(&y, &gauss, eps, cfg)?,
        ));
    }
    let mid = midline_cloud(16);
    out.push(NamedCheck::new(
        "pl_check/midline_16",
        pl_check(&mid, &uniform, 1.0 / 16.0, cfg)?,
    ));
    for n in [4, 16, 64] {
        let r = hyperplane_bound_check(n, &uniform, cfg)?;
        out.push(NamedCheck::new(
            format!("hyperplane/barycenters_on_line_{n}"),
            BoundCheck::new(r.max_offset, 1e-9),
        ));
        out.push(NamedCheck::new(
            format!("hyperplane/w2_at_least_1_12_{n}"),
            r.check,
        ));
    }
    Ok(out)
}

fn lemmas(opts: &VerifyOptions) -> Result<Vec<NamedCheck>> {
    let gauss = Density::analytic_gaussian2(8.0, 256)?;
    let mut out = Vec::new();

    let y = random_cloud(100, opts.seed)?;
    let lloyd = run_descent(
        &y,
        &gauss,
        &DescentConfig {
            tau: 1.0,
            max_steps: 20,
            solver: opts.solver,
            ..DescentConfig::default()
        },
    )?;
    for w in lloyd.records.windows(2) {
        out.push(NamedCheck::new(
            format!("lloyd/energy_decreases/step_{}", w[1].k),
            BoundCheck::new(w[1].f_value, w[0].f_value),
        ));
        out.push(NamedCheck::new(
            format!("lloyd/gradient_identity/step_{}", w[0].k),
            BoundCheck::new(
                w[0].grad_norm_sq,
                2.0 * (w[0].f_value - w[1].f_value) + 1e-10,
            ),
        ));
    }

    let y = random_cloud(64, opts.seed + 1)?;
    let stretch = run_descent(
        &y,
        &gauss,
        &DescentConfig {
            tau: 0.5,
            max_steps: 10,
            solver: opts.solver,
            ..DescentConfig::default()
        },
    )?;
    for w in stretch.records.windows(2) {
        out.push(NamedCheck::new(
            format!("stretch/tau_0.5/step_{}", w[1].k),
            BoundCheck::new(
                0.5 * w[0].min_pairwise_distance - 1e-12,
                w[1].min_pairwise_distance,
            ),
        ));
    }

    let grid = PointCloud::grid(10, Point2::ZERO, Point2::new(1.0, 1.0));
    for tau in [0.1, 0.3] {
        let t = run_descent(
            &grid,
            &gauss,
            &DescentConfig {
                tau,
                max_steps: 15,
                solver: opts.solver,
                ..DescentConfig::default()
            },
        )?;
        for r in &t.records {
            out.push(NamedCheck::new(
                format!("descent_bound/tau_{tau}/step_{}", r.k),
                BoundCheck::new(r.f_value, r.lemma_gf_bound),
            ));
        }
        out.push(NamedCheck::new(
            format!("descent_bound/tau_{tau}/final_w2"),
            BoundCheck::new(t.final_cost, t.final_cost_bound),
        ));
    }
    Ok(out)
}

/// `N ∈ {2⁸, 2¹⁰, …, 2¹⁶}`.
pub fn gaussian_sweep_sizes() -> Vec<usize> {
    (8..=16).step_by(2).map(|k| 1usize << k).collect()
}

fn gaussian1d(opts: &VerifyOptions) -> Vec<NamedCheck> {
    let ns = gaussian_sweep_sizes();
    let sweep = gaussian_lower_bound_check(&ns, opts.delta, None);
    let mut out = Vec::new();
    for p in &sweep.points {
        out.push(NamedCheck::new(
            format!("gaussian_lower_bound/n_{}", p.n),
            p.check,
        ));
    }
    for w in sweep.points.windows(2) {
        out.push(NamedCheck::new(
            format!("scaled_cost_nondecreasing/n_{}", w[1].n),
            BoundCheck::new(w[0].scaled_cost, w[1].scaled_cost),
        ));
    }
    for (p, c) in sweep.points.iter().zip(first_cell_check(&sweep)) {
        out.push(NamedCheck::new(format!("first_cell/n_{}", p.n), c));
    }
    let fixed = TruncGauss1D::new(0.3);
    let costs: Vec<f64> = ns.iter().map(|&n| quantile_cells(&fixed, n).cost).collect();
    if let Some(fit) = RateFit::fit(&ns, &costs) {
        out.push(NamedCheck::new(
            "fixed_sigma_slope/lower",
            BoundCheck::new(-2.2, fit.slope),
        ));
        out.push(NamedCheck::new(
            "fixed_sigma_slope/upper",
            BoundCheck::new(fit.slope, -1.8),
        ));
    }
    out
}

fn proba(opts: &VerifyOptions) -> Result<Vec<NamedCheck>> {
    let uniform = Density::uniform();
    let mut out = Vec::new();
    let n = 1000;
    let eps = (n as f64).powf(-2.0 / 3.0);
    let k = kappa_expectation_check(&uniform, n, eps, opts.trials, opts.seed)?;
    out.push(NamedCheck::new("kappa_expectation/n_1000", k.check));
    let c = concentration_check(&uniform, &uniform, 400, 20, opts.seed, None, &opts.solver)?;
    out.push(NamedCheck::new("concentration/n_400", c.check));
    out.push(NamedCheck::new(
        "kappa_bounded_difference/n_1000",
        kappa_bounded_difference_check(&uniform, n, eps, 1000, opts.seed),
    ));
    Ok(out)
}
