use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sdot_cli::error::{CliError, Result};
use sdot_cli::experiment::{
    run_rates, write_rows_csv, DensitySource, ExperimentSpec, InitKind, Mode,
};
use sdot_cli::generate_points;
use sdot_cli::io::{write_points, write_points_csv};
use sdot_cli::report::Envelope;
use sdot_cli::verify::{run_suite, Suite, VerifyOptions};
use sdot_core::quantize::run_descent;
use sdot_core::sdot::quantization;
use sdot_core::{Density, DescentConfig, Point2, PointCloud, Schedule, SolveReport, SolverConfig};

#[derive(Parser)]
#[command(name = "sdot", version = sdot_cli::report::VERSION, about = "Uniform optimal quantization of 2D densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the transport problem for one point cloud.
    Solve(Opts),
    /// Fit the decay rate of the quantization error over several N.
    Rates(Opts),
    /// Run a named suite of numerical checks.
    Verify {
        suite: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// Write an initial point cloud as CSV.
    Points(Opts),
    /// Iterate Lloyd steps.
    Lloyd(Opts),
    /// Damped gradient descent on the quantization energy.
    Descent(Opts),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScheduleArg {
    Fixed,
    Kn,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    OneLloyd,
    Lloyd,
    Descent,
}

#[derive(Args, Clone, Debug, Serialize)]
struct Opts {
    /// pgm:PATH, gauss2:COEFF or uniform.
    #[arg(long, default_value = "uniform")]
    density: String,
    /// Grid resolution for analytic densities.
    #[arg(long, default_value_t = 1024)]
    resolution: usize,
    /// grid, random or csv:PATH.
    #[arg(long, default_value = "grid")]
    init: String,
    /// Number of points; repeat for several values.
    #[arg(long = "n")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Fixed)]
    schedule: ScheduleArg,
    /// Rates: value monitored per run.
    #[arg(long, value_enum, default_value_t = ModeArg::OneLloyd)]
    mode: ModeArg,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exponent parameter of the 1D Gaussian suite.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report on stdout.
    #[arg(long)]
    json: bool,
}

impl Opts {
    fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    fn density(&self) -> Result<(DensitySource, Density)> {
        let src: DensitySource = self.density.parse()?;
        let rho = src.load(self.resolution)?;
        Ok((src, rho))
    }

    fn init(&self) -> Result<InitKind> {
        self.init.parse()
    }

    fn single_n(&self) -> Result<usize> {
        match self.n.as_slice() {
            [n] => Ok(*n),
            [] => Err(CliError::Parse("--n is required".into())),
            _ => Err(CliError::Parse("expected a single --n".into())),
        }
    }

    /// Initial cloud; `--n` may be omitted for CSV input.
    fn points(&self, rho: &Density) -> Result<PointCloud> {
        let init = self.init()?;
        let n = match (&init, self.n.as_slice()) {
            (InitKind::Csv(_), []) => 0,
            _ => self.single_n()?,
        };
        let y = generate_points(&init, n, &rho.domain(), self.seed)?;
        if n > 0 && y.len() != n {
            return Err(CliError::Parse(format!(
                "expected {n} points, read {}",
                y.len()
            )));
        }
        Ok(y)
    }
}

fn emit<C: Serialize, R: Serialize>(
    command: &str,
    opts: &Opts,
    config: &C,
    result: &R,
    summary: &str,
) -> Result<()> {
    let env = Envelope::new(command, config, result);
    if let Some(path) = &opts.out {
        env.write(&json_path(path))?;
    }
    if opts.json {
        println!("{}", env.to_json()?);
    } else {
        println!("{summary}");
    }
    Ok(())
}

fn json_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.to_path_buf()
    } else {
        out.with_extension("json")
    }
}

#[derive(Serialize)]
struct SolveOutput {
    n: usize,
    phi: Vec<f64>,
    masses: Vec<f64>,
    barycenters: Vec<Point2>,
    cost: f64,
    f_value: f64,
    solver: SolveReport,
}

fn cmd_solve(opts: &Opts) -> Result<()> {
    let (_, rho) = opts.density()?;
    let y = opts.points(&rho)?;
    let q = quantization(&y, &rho, &opts.solver())?;
    let out = SolveOutput {
        n: y.len(),
        phi: q.phi.0.clone(),
        masses: q.masses.clone(),
        barycenters: q.barycenters.as_slice().to_vec(),
        cost: q.cost,
        f_value: q.f_value,
        solver: q.report,
    };
    let summary = format!(
        "N={} cost={:.12e} F={:.12e} iterations={} residual={:.3e}",
        out.n, out.cost, out.f_value, q.report.iterations, q.report.final_residual
    );
    emit("solve", opts, opts, &out, &summary)
}

fn cmd_points(opts: &Opts) -> Result<()> {
    let (_, rho) = opts.density()?;
    let y = opts.points(&rho)?;
    match &opts.out {
        Some(path) => write_points_csv(path, &y),
        None => write_points(std::io::stdout().lock(), &y),
    }
}

#[derive(Serialize)]
struct LloydOutput {
    steps: usize,
    f_values: Vec<f64>,
    grad_norm_sq: Vec<f64>,
    final_cost: f64,
    final_positions: PointCloud,
}

fn write_final_points(opts: &Opts, y: &PointCloud) -> Result<()> {
    if let Some(path) = &opts.out {
        write_points_csv(&path.with_extension("csv"), y)?;
    }
    Ok(())
}

fn cmd_lloyd(opts: &Opts) -> Result<()> {
    let (_, rho) = opts.density()?;
    let y = opts.points(&rho)?;
    let steps = opts.steps.unwrap_or(1);
    let cfg = DescentConfig {
        tau: 1.0,
        max_steps: steps,
        solver: opts.solver(),
        ..DescentConfig::default()
    };
    let t = run_descent(&y, &rho, &cfg)?;
    write_final_points(opts, &t.final_positions)?;
    let out = LloydOutput {
        steps: t.steps_taken,
        f_values: t.f_values(),
        grad_norm_sq: t.records.iter().map(|r| r.grad_norm_sq).collect(),
        final_cost: t.final_cost,
        final_positions: t.final_positions,
    };
    let summary = format!(
        "N={} steps={} F0={:.12e} F={:.12e}",
        y.len(),
        out.steps,
        out.f_values.first().copied().unwrap_or(f64::NAN),
        out.final_cost / 2.0
    );
    emit("lloyd", opts, opts, &out, &summary)
}

fn cmd_descent(opts: &Opts) -> Result<()> {
    let (_, rho) = opts.density()?;
    let y = opts.points(&rho)?;
    let cfg = DescentConfig {
        tau: opts.tau,
        max_steps: opts.steps.unwrap_or(50),
        epsilon0: opts.epsilon,
        schedule: match opts.schedule {
            ScheduleArg::Fixed => Schedule::FixedSteps,
            ScheduleArg::Kn => Schedule::KnSchedule,
        },
        solver: opts.solver(),
        ..DescentConfig::default()
    };
    let t = run_descent(&y, &rho, &cfg)?;
    write_final_points(opts, &t.final_positions)?;
    let violations = t
        .records
        .iter()
        .filter(|r| r.f_value > r.lemma_gf_bound)
        .count();
    let summary = format!(
        "N={} tau={} steps={}{} final W2^2={:.6e} bound={:.6e} bound violations={}",
        t.n,
        t.tau,
        t.steps_taken,
        if t.schedule_underflow {
            " (schedule underflow)"
        } else {
            ""
        },
        t.final_cost,
        t.final_cost_bound,
        violations
    );
    emit("descent", opts, &(opts, cfg), &t, &summary)
}

fn cmd_rates(opts: &Opts) -> Result<()> {
    let (src, rho) = opts.density()?;
    let mode = match opts.mode {
        ModeArg::OneLloyd => Mode::OneLloyd,
        ModeArg::Lloyd => Mode::LloydIterate {
            steps: opts.steps.unwrap_or(10),
        },
        ModeArg::Descent => Mode::Descent {
            tau: opts.tau,
            steps: opts.steps.unwrap_or(50),
            kn_schedule: matches!(opts.schedule, ScheduleArg::Kn),
        },
    };
    let spec = ExperimentSpec {
        density: src,
        resolution: opts.resolution,
        init: opts.init()?,
        ns: opts.n.clone(),
        mode,
        trials: opts.trials.unwrap_or(20),
        seed: opts.seed,
        solver: opts.solver(),
    };
    let report = run_rates(&spec, &rho)?;
    if let Some(path) = &opts.out {
        let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        write_rows_csv(f, &report.rows)?;
    }
    let mut summary = String::new();
    for (n, m) in &report.means {
        summary += &format!("N={n} mean={m:.6e}\n");
    }
    summary += &match &report.fit {
        Some(f) => format!("slope={:.4} r_squared={:.4}", f.slope, f.r_squared),
        None => "fit unavailable: fewer than three N values succeeded".to_string(),
    };
    emit("rates", opts, &spec, &report, &summary)
}

fn cmd_verify(suite: &str, opts: &Opts) -> Result<()> {
    let suite: Suite = suite.parse()?;
    let vopts = VerifyOptions {
        seed: opts.seed,
        trials: opts.trials.unwrap_or(200),
        delta: opts.delta,
        solver: opts.solver(),
    };
    let report = run_suite(suite, &vopts)?;
    let mut summary = String::new();
    for c in &report.checks {
        summary += &format!(
            "{} {}: lhs={:.6e} rhs={:.6e}\n",
            if c.satisfied { "PASS" } else { "FAIL" },
            c.name,
            c.lhs,
            c.rhs
        );
    }
    summary += &format!(
        "{} of {} checks passed",
        report.checks.len() - report.failures,
        report.checks.len()
    );
    emit("verify", opts, &vopts, &report, &summary)?;
    if report.failures > 0 {
        return Err(CliError::VerifyFailed(report.failures));
    }
    Ok(())
}

fn configure_threads() {
    let threads = std::env::var("SDOT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        // fails only if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Solve(o) => cmd_solve(o),
        Command::Rates(o) => cmd_rates(o),
        Command::Verify { suite, opts } => cmd_verify(suite, opts),
        Command::Points(o) => cmd_points(o),
        Command::Lloyd(o) => cmd_lloyd(o),
        Command::Descent(o) => cmd_descent(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
