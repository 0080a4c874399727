//! The uniform quantization energy `F_N(Y) = ½ W₂²(ρ, δ_Y)`, its gradient
//! `(Y − B_N(Y))/N`, Lloyd steps and fixed-step gradient descent.

use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::diagnostics::domain_constant;
use crate::error::{Error, Result};
use crate::geom2d::{Point2, PointCloud};
use crate::sdot::{quantization, quantization_from, Quantization, SolverConfig};

/// Spatial dimension of the geometric engine.
pub const DIM: i32 = 2;

pub fn energy(sites: &PointCloud, rho: &Density, cfg: &SolverConfig) -> Result<f64> {
    Ok(quantization(sites, rho, cfg)?.f_value)
}

pub fn gradient(sites: &PointCloud, rho: &Density, cfg: &SolverConfig) -> Result<Vec<Point2>> {
    Ok(quantization(sites, rho, cfg)?.gradient())
}

/// `Y ↦ B_N(Y)`.
pub fn lloyd_step(sites: &PointCloud, rho: &Density, cfg: &SolverConfig) -> Result<PointCloud> {
    Ok(quantization(sites, rho, cfg)?.barycenters)
}

/// `Y + τ (B_N(Y) − Y)`.
pub fn descent_step(
    sites: &PointCloud,
    rho: &Density,
    tau: f64,
    cfg: &SolverConfig,
) -> Result<PointCloud> {
    check_tau(tau, true)?;
    if tau == 0.0 {
        return Ok(sites.clone());
    }
    let q = quantization(sites, rho, cfg)?;
    Ok(step_from(&q, tau))
}

fn step_from(q: &Quantization, tau: f64) -> PointCloud {
    if tau == 1.0 {
        q.barycenters.clone()
    } else {
        q.sites.interpolate(&q.barycenters, tau)
    }
}

fn check_tau(tau: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero {
        (0.0..=1.0).contains(&tau)
    } else {
        tau > 0.0 && tau <= 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "step size {tau} outside (0, 1]"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Run exactly `max_steps` steps.
    FixedSteps,
    /// Run `k_N = ⌊ln(F_N(Y⁰) N ε^{d−1}) / (d τ)⌋` steps.
    KnSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub tau: f64,
    pub max_steps: usize,
    /// Initial separation `ε_N`; defaults to the minimum pairwise distance
    /// of `Y⁰`.
    pub epsilon0: Option<f64>,
    pub schedule: Schedule,
    pub solver: SolverConfig,
    /// Reuse the previous step's potentials as the solver's starting point.
    pub warm_start: bool,
    /// Keep every `stride`-th position snapshot (0 disables snapshots).
    pub snapshot_stride: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            tau: 1.0,
            max_steps: 50,
            epsilon0: None,
            schedule: Schedule::FixedSteps,
            solver: SolverConfig::default(),
            warm_start: true,
            snapshot_stride: 0,
        }
    }
}

/// Quantities monitored at iterate `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub f_value: f64,
    /// `N ‖∇F_N(Y^k)‖²`.
    pub grad_norm_sq: f64,
    pub min_pairwise_distance: f64,
    /// Right side of the descent bound at step `k` (`+∞` when `τ = 1`).
    pub lemma_gf_bound: f64,
    /// `F_N(Y^k) − C_{2,Ω} / (N ε_k)` with `ε_k = min(1, min pairwise distance)`.
    pub pl_lhs: f64,
    /// `N ‖∇F_N(Y^k)‖²`.
    pub pl_rhs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DescentTrace {
    pub tau: f64,
    pub n: usize,
    pub epsilon: f64,
    /// `η = 1 − (τ/2)(2 − τ)`.
    pub eta: f64,
    /// `A = (1 − τ)^{1−d}`.
    pub a_factor: f64,
    pub domain_constant: f64,
    /// Number of steps actually taken.
    pub steps_taken: usize,
    /// Set when the step-count schedule evaluates to zero or less.
    pub schedule_underflow: bool,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<(usize, PointCloud)>,
    pub final_positions: PointCloud,
    /// `W₂²(ρ, δ_{Y^K})` at the last iterate.
    pub final_cost: f64,
    /// Explicit bound on the final cost:
    /// `W₂²(Y⁰) η^K + 2C(1 − η)(A^K − η^K) / ((A − η) N ε^{d−1})`.
    pub final_cost_bound: f64,
}

impl DescentTrace {
    pub fn f_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.f_value).collect()
    }
}

pub fn eta(tau: f64) -> f64 {
    1.0 - 0.5 * tau * (2.0 - tau)
}

pub fn a_factor(tau: f64) -> f64 {
    (1.0 - tau).powi(1 - DIM)
}

/// `F_N(Y⁰) η^k + 2C(1−η)(ε^{1−d}/N)(A^k − η^k)/(A − η)`.
pub fn lemma_gf_bound(f0: f64, tau: f64, epsilon: f64, n: usize, c: f64, k: usize) -> f64 {
    let eta = eta(tau);
    let a = a_factor(tau);
    if !a.is_finite() {
        return f64::INFINITY;
    }
    let k = k as i32;
    let geometric = if k == 0 {
        0.0
    } else {
        (a.powi(k) - eta.powi(k)) / (a - eta)
    };
    f0 * eta.powi(k) + 2.0 * c * (1.0 - eta) * epsilon.powi(1 - DIM) / n as f64 * geometric
}

/// Bound on `W₂²(ρ, δ_{Y^k})` stated directly in terms of the initial cost:
/// `W₀ η^k + 2C (1 − η)/(A − η) · (A^k − η^k)/(N ε^{d−1})`.
pub fn explicit_final_bound(w0: f64, tau: f64, epsilon: f64, n: usize, c: f64, k: usize) -> f64 {
    let eta = eta(tau);
    let a = a_factor(tau);
    if !a.is_finite() {
        return f64::INFINITY;
    }
    let k = k as i32;
    let geometric = if k == 0 {
        0.0
    } else {
        (a.powi(k) - eta.powi(k)) / (a - eta)
    };
    w0 * eta.powi(k) + 2.0 * c * (1.0 - eta) * geometric / (n as f64 * epsilon.powi(DIM - 1))
}

/// `k_N = ⌊ln(F_N(Y⁰) N ε^{d−1}) / (d τ)⌋`; `None` when the logarithm's
/// argument is at most one.
pub fn kn_schedule(f0: f64, n: usize, epsilon: f64, tau: f64) -> Option<usize> {
    let arg = f0 * n as f64 * epsilon.powi(DIM - 1);
    if !(arg > 1.0) {
        return None;
    }
    let k = (arg.ln() / (f64::from(DIM) * tau)).floor();
    (k >= 1.0).then_some(k as usize)
}

/// Fixed-step gradient descent `Y^{k+1} = Y^k + τ(B_N(Y^k) − Y^k)`.
pub fn run_descent(y0: &PointCloud, rho: &Density, cfg: &DescentConfig) -> Result<DescentTrace> {
    check_tau(cfg.tau, false)?;
    let n = y0.len();
    let min0 = y0.min_pairwise_distance();
    let epsilon = match cfg.epsilon0 {
        Some(e) if e > 0.0 => e,
        Some(e) => return Err(Error::InvalidInput(format!("epsilon {e} must be positive"))),
        None => min0,
    };
    let c = domain_constant(&rho.domain());

    let mut q = quantization(y0, rho, &cfg.solver)?;
    let f0 = q.f_value;
    let (steps, underflow) = match cfg.schedule {
        Schedule::FixedSteps => (cfg.max_steps, false),
        Schedule::KnSchedule => match kn_schedule(f0, n, epsilon, cfg.tau) {
            Some(k) => (k, false),
            None => (0, true),
        },
    };

    let record = |k: usize, q: &Quantization| {
        let mp = q.sites.min_pairwise_distance();
        let eps_k = mp.min(1.0);
        let g = q.grad_norm_sq_scaled();
        StepRecord {
            k,
            f_value: q.f_value,
            grad_norm_sq: g,
            min_pairwise_distance: mp,
            lemma_gf_bound: lemma_gf_bound(f0, cfg.tau, epsilon, n, c, k),
            pl_lhs: q.f_value - c / (n as f64 * eps_k.powi(DIM - 1)),
            pl_rhs: g,
        }
    };

    let mut records = vec![record(0, &q)];
    let mut snapshots = Vec::new();
    if cfg.snapshot_stride > 0 {
        snapshots.push((0, y0.clone()));
    }
    for k in 1..=steps {
        let next = step_from(&q, cfg.tau);
        q = if cfg.warm_start {
            quantization_from(&next, rho, &q.phi, &cfg.solver)?
        } else {
            quantization(&next, rho, &cfg.solver)?
        };
        records.push(record(k, &q));
        if cfg.snapshot_stride > 0 && k % cfg.snapshot_stride == 0 {
            snapshots.push((k, next));
        }
    }

    let eta = eta(cfg.tau);
    let a = a_factor(cfg.tau);
    let final_cost_bound = explicit_final_bound(2.0 * f0, cfg.tau, epsilon, n, c, steps);
    Ok(DescentTrace {
        tau: cfg.tau,
        n,
        epsilon,
        eta,
        a_factor: a,
        domain_constant: c,
        steps_taken: steps,
        schedule_underflow: underflow,
        records,
        snapshots,
        final_cost: q.cost,
        final_positions: q.sites,
        final_cost_bound,
    })
}
