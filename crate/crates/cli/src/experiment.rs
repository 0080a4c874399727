//! Experiment specifications, point generation and log-log rate fits.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sdot_core::quantize::{lloyd_step, run_descent};
use sdot_core::sdot::quantization;
use sdot_core::{
    ConvexPolygon, Density, DescentConfig, Point2, PointCloud, Schedule, SolverConfig,
};

use crate::error::{CliError, Result};
use crate::io::{load_pgm, read_points_csv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensitySource {
    Pgm(PathBuf),
    /// `exp(−k((x−½)² + (y−½)²))` on the unit square.
    Gauss2(f64),
    Uniform,
}

impl FromStr for DensitySource {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("pgm", path)) => Ok(DensitySource::Pgm(path.into())),
            Some(("gauss2", k)) => k
                .parse()
                .map(DensitySource::Gauss2)
                .map_err(|_| CliError::Parse(format!("bad gaussian coefficient {k:?}"))),
            None if s == "uniform" => Ok(DensitySource::Uniform),
            _ => Err(CliError::Parse(format!(
                "unknown density {s:?} (expected pgm:PATH, gauss2:COEFF or uniform)"
            ))),
        }
    }
}

impl fmt::Display for DensitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensitySource::Pgm(p) => write!(f, "pgm:{}", p.display()),
            DensitySource::Gauss2(k) => write!(f, "gauss2:{k}"),
            DensitySource::Uniform => f.write_str("uniform"),
        }
    }
}

impl DensitySource {
    /// `resolution` only applies to analytic densities.
    pub fn load(&self, resolution: usize) -> Result<Density> {
        match self {
            DensitySource::Pgm(path) => load_pgm(path),
            DensitySource::Gauss2(k) => Ok(Density::analytic_gaussian2(*k, resolution)?),
            DensitySource::Uniform => Ok(Density::uniform()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Grid,
    Random,
    Csv(PathBuf),
}

impl FromStr for InitKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("csv", path)) => Ok(InitKind::Csv(path.into())),
            None if s == "grid" => Ok(InitKind::Grid),
            None if s == "random" => Ok(InitKind::Random),
            _ => Err(CliError::Parse(format!(
                "unknown init {s:?} (expected grid, random or csv:PATH)"
            ))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitKind::Grid => f.write_str("grid"),
            InitKind::Random => f.write_str("random"),
            InitKind::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl InitKind {
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, InitKind::Random)
    }
}

/// Initial point cloud in the bounding box of `domain`.
///
/// `grid` places `n × n` cell centers and needs `N = n²`; `random` draws
/// i.i.d. uniform points from a ChaCha8 stream seeded with `seed`.
pub fn generate_points(
    kind: &InitKind,
    n: usize,
    domain: &ConvexPolygon,
    seed: u64,
) -> Result<PointCloud> {
    let (lo, hi) = domain
        .bbox()
        .ok_or_else(|| CliError::Parse("empty domain".into()))?;
    match kind {
        InitKind::Grid => {
            let k = (n as f64).sqrt().round() as usize;
            if k * k != n || n == 0 {
                return Err(sdot_core::Error::NonSquareN(n).into());
            }
            Ok(PointCloud::grid(k, lo, hi))
        }
        InitKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let (u, v): (f64, f64) = (rng.random(), rng.random());
                    Point2::new(lo.x + u * (hi.x - lo.x), lo.y + v * (hi.y - lo.y))
                })
                .collect())
        }
        InitKind::Csv(path) => read_points_csv(path),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mode {
    /// `F_N(B_N(Y⁰))`.
    OneLloyd,
    /// `F_N(Y^k)` after `steps` Lloyd steps.
    LloydIterate { steps: usize },
    /// `F_N(Y^K)` after damped descent.
    Descent {
        tau: f64,
        steps: usize,
        kn_schedule: bool,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub density: DensitySource,
    pub resolution: usize,
    pub init: InitKind,
    pub ns: Vec<usize>,
    pub mode: Mode,
    pub trials: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

/// Least-squares line through `(ln N, ln value)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

impl RateFit {
    pub fn fit(ns: &[usize], values: &[f64]) -> Option<RateFit> {
        let points: Vec<(f64, f64)> = ns
            .iter()
            .zip(values)
            .map(|(n, v)| ((*n as f64).ln(), v.ln()))
            .collect();
        if points.len() < 2 || points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return None;
        }
        let m = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
        let my = points.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let r_squared = if syy == 0.0 {
            1.0
        } else {
            (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
        };
        Some(RateFit {
            slope,
            intercept,
            r_squared,
            points,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub value: f64,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatesReport {
    /// Trials actually run per `N`; deterministic inits run once.
    pub effective_trials: usize,
    pub rows: Vec<RateRow>,
    pub means: Vec<(usize, f64)>,
    pub fit: Option<RateFit>,
}

/// The monitored value of one run: `F_N(B_N(Y⁰))`, or the terminal `F_N`.
pub fn run_mode(
    y0: &PointCloud,
    rho: &Density,
    mode: &Mode,
    solver: &SolverConfig,
) -> sdot_core::Result<f64> {
    match *mode {
        Mode::OneLloyd => {
            let b = lloyd_step(y0, rho, solver)?;
            Ok(quantization(&b, rho, solver)?.f_value)
        }
        Mode::LloydIterate { steps } => {
            let cfg = DescentConfig {
                tau: 1.0,
                max_steps: steps,
                solver: *solver,
                ..DescentConfig::default()
            };
            Ok(run_descent(y0, rho, &cfg)?.final_cost / 2.0)
        }
        Mode::Descent {
            tau,
            steps,
            kn_schedule,
        } => {
            let cfg = DescentConfig {
                tau,
                max_steps: steps,
                schedule: if kn_schedule {
                    Schedule::KnSchedule
                } else {
                    Schedule::FixedSteps
                },
                solver: *solver,
                ..DescentConfig::default()
            };
            Ok(run_descent(y0, rho, &cfg)?.final_cost / 2.0)
        }
    }
}

/// Runs every `(N, trial)` pair, then fits the per-`N` means.
pub fn run_rates(spec: &ExperimentSpec, rho: &Density) -> Result<RatesReport> {
    let mut ns = spec.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(CliError::Parse(
            "rates needs at least three distinct N values".into(),
        ));
    }
    if spec.trials == 0 {
        return Err(CliError::Parse("trials must be at least 1".into()));
    }
    let trials = if spec.init.is_deterministic() {
        1
    } else {
        spec.trials
    };
    let domain = rho.domain();
    let jobs: Vec<(usize, usize)> = ns
        .iter()
        .flat_map(|&n| (0..trials).map(move |t| (n, t)))
        .collect();
    let rows: Vec<RateRow> = jobs
        .par_iter()
        .map(|&(n, trial)| {
            let seed = spec.seed + trial as u64;
            let outcome = generate_points(&spec.init, n, &domain, seed)
                .and_then(|y| Ok(run_mode(&y, rho, &spec.mode, &spec.solver)?));
            let (value, status) = match outcome {
                Ok(v) => (v, "ok".to_string()),
                Err(e) => (f64::NAN, e.to_string()),
            };
            RateRow {
                n,
                trial,
                seed,
                value,
                status,
            }
        })
        .collect();
    let mut means = Vec::new();
    for &n in &ns {
        let ok: Vec<f64> = rows
            .iter()
            .filter(|r| r.n == n && r.status == "ok")
            .map(|r| r.value)
            .collect();
        if !ok.is_empty() {
            means.push((n, ok.iter().sum::<f64>() / ok.len() as f64));
        }
    }
    let fit = if means.len() >= 3 {
        let (xs, ys): (Vec<usize>, Vec<f64>) = means.iter().copied().unzip();
        RateFit::fit(&xs, &ys)
    } else {
        None
    };
    Ok(RatesReport {
        effective_trials: trials,
        rows,
        means,
        fit,
    })
}

pub fn write_rows_csv<W: std::io::Write>(writer: W, rows: &[RateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "trial", "seed", "value", "status"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            format!("{:.16e}", r.value),
            r.status.clone(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sources() {
        assert_eq!(
            "uniform".parse::<DensitySource>().unwrap(),
            DensitySource::Uniform
        );
        assert_eq!(
            "gauss2:8".parse::<DensitySource>().unwrap(),
            DensitySource::Gauss2(8.0)
        );
        assert_eq!(
            "pgm:a/b.pgm".parse::<DensitySource>().unwrap(),
            DensitySource::Pgm("a/b.pgm".into())
        );
        assert!("gauss2:x".parse::<DensitySource>().is_err());
        assert!("png:x".parse::<DensitySource>().is_err());
        assert_eq!(
            "csv:p.csv".parse::<InitKind>().unwrap(),
            InitKind::Csv("p.csv".into())
        );
        assert!("hex".parse::<InitKind>().is_err());
    }

    #[test]
    fn grid_points() {
        let dom = ConvexPolygon::unit_square();
        let y = generate_points(&InitKind::Grid, 4, &dom, 0).unwrap();
        let expect = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        assert_eq!(y.len(), 4);
        for (p, (x, y)) in y.iter().zip(expect) {
            assert_eq!(*p, Point2::new(x, y));
        }
        let y = generate_points(&InitKind::Grid, 400, &dom, 0).unwrap();
        assert!((y.min_pairwise_distance() - 0.05).abs() < 1e-12);
        assert!(matches!(
            generate_points(&InitKind::Grid, 5, &dom, 0),
            Err(CliError::Core(sdot_core::Error::NonSquareN(5)))
        ));
    }

    #[test]
    fn random_points_are_reproducible() {
        let dom = ConvexPolygon::unit_square();
        let a = generate_points(&InitKind::Random, 3, &dom, 42).unwrap();
        let b = generate_points(&InitKind::Random, 3, &dom, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| dom.contains(*p, 0.0)));
        assert_ne!(a, generate_points(&InitKind::Random, 3, &dom, 43).unwrap());
    }

    #[test]
    fn fit_recovers_power_law() {
        let ns = [100, 400, 1600, 6400];
        for s in [0.5, 0.95, 2.0] {
            let v: Vec<f64> = ns.iter().map(|n| 3.0 * (*n as f64).powf(-s)).collect();
            let f = RateFit::fit(&ns, &v).unwrap();
            assert!((f.slope + s).abs() < 1e-9);
            assert!((f.intercept - 3f64.ln()).abs() < 1e-9);
            assert!((f.r_squared - 1.0).abs() < 1e-12);
        }
        assert!(RateFit::fit(&[4], &[1.0]).is_none());
    }
}
