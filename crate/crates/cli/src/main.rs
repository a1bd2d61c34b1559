use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ptdf_admm::baseline::run_distributed_angle;
use ptdf_admm::case::{load_network, Network};
use ptdf_admm::central::{solve_central_angle, solve_central_ptdf};
use ptdf_admm::dist::{run_distributed_ptdf, DistConfig};
use ptdf_admm::kron::{kron_reduce, wls_accompanying, wls_blocks, WlsConfig};
use ptdf_admm::netmatrix::{build_susceptance, compute_ptdf};
use ptdf_admm::partition::{build_area_topology, partition_fallback, partition_from_areas, Partition};
use ptdf_admm::{ConvergenceReport, TraceRow};

const SCHEMA: u32 = 1;
/// Areas used when a case carries a single area tag and `--areas` is absent.
const DEFAULT_AREAS: usize = 5;

#[derive(Parser)]
#[command(name = "ptdf-admm", version, about = "Central and distributed DC optimal power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the whole network in one QP.
    Central {
        case: PathBuf,
        #[arg(long, value_enum, default_value_t = Formulation::Ptdf)]
        formulation: Formulation,
        /// Add line limits only once they are violated (PTDF formulation).
        #[arg(long)]
        lazy: bool,
    },
    /// Run a distributed ADMM solve.
    Dist {
        case: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Ptdf)]
        method: Method,
        #[command(flatten)]
        opts: DistOpts,
        /// Write the JSON report and CSV trace here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print each area's accompanying matrix.
    Ptdf {
        case: PathBuf,
        /// Also compute it by consensus least squares and compare.
        #[arg(long)]
        distributed: bool,
        #[arg(long)]
        areas: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run both distributed methods on every case in a directory.
    Bench {
        dir: PathBuf,
        #[command(flatten)]
        opts: DistOpts,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Formulation {
    Ptdf,
    Angle,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Ptdf,
    Angle,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Ptdf => "ptdf",
            Method::Angle => "angle",
        }
    }
}

#[derive(clap::Args, Clone)]
struct DistOpts {
    #[arg(long, default_value_t = 1000.0)]
    rho: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Seconds.
    #[arg(long, default_value_t = 3600.0)]
    time_budget: f64,
    /// Split into this many areas instead of using the case's area tags.
    #[arg(long)]
    areas: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DistOpts {
    fn config(&self) -> Result<DistConfig> {
        if !(self.rho > 0.0 && self.tol > 0.0 && self.time_budget > 0.0) {
            bail!("--rho, --tol and --time-budget must be positive");
        }
        Ok(DistConfig {
            rho: self.rho,
            tol: self.tol,
            max_iter: self.max_iter,
            time_budget: Some(Duration::from_secs_f64(self.time_budget)),
            ..DistConfig::default()
        })
    }
}

#[derive(Serialize)]
struct Report {
    schema: u32,
    case: String,
    method: String,
    objective: f64,
    relative_gap_pct: f64,
    iterations: usize,
    wall_seconds: f64,
    converged: bool,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    details: Option<Details>,
}

#[derive(Serialize)]
struct Details {
    central_objective: f64,
    serial_seconds: f64,
    offline_seconds: f64,
    areas: usize,
    shared_entries: usize,
    max_line_violation: f64,
    consistency_violation: f64,
    angle_disagreement: f64,
    max_zero_sum: f64,
}

impl Report {
    fn from_run(case: &str, r: &ConvergenceReport) -> Self {
        Self {
            schema: SCHEMA,
            case: case.to_string(),
            method: r.method.clone(),
            objective: r.objective,
            relative_gap_pct: r.relative_gap_pct,
            iterations: r.iterations,
            wall_seconds: r.wall_seconds,
            converged: r.converged,
            details: Some(Details {
                central_objective: r.central_objective,
                serial_seconds: r.serial_seconds,
                offline_seconds: r.offline_seconds,
                areas: r.areas,
                shared_entries: r.shared_entries,
                max_line_violation: r.max_line_violation,
                consistency_violation: r.consistency_violation,
                angle_disagreement: r.angle_disagreement,
                max_zero_sum: r.max_zero_sum,
            }),
        }
    }
}

/// Errors that should end with exit code 1 rather than 2.
struct InputError(anyhow::Error);

type Outcome = std::result::Result<bool, InputError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Central { case, formulation, lazy } => central(&case, formulation, lazy),
        Command::Dist { case, method, opts, out_dir } => dist(&case, method, &opts, out_dir.as_deref()),
        Command::Ptdf { case, distributed, areas, seed } => ptdf(&case, distributed, areas, seed),
        Command::Bench { dir, opts, out_dir } => bench(&dir, &opts, out_dir.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(InputError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn input<T>(r: Result<T>) -> std::result::Result<T, InputError> {
    r.map_err(InputError)
}

fn case_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn load(path: &Path) -> Result<Network> {
    let net = load_network(path).with_context(|| format!("loading {}", path.display()))?;
    for w in &net.warnings {
        eprintln!("warning: {w}");
    }
    Ok(net)
}

fn choose_partition(net: &Network, areas: Option<usize>, seed: u64) -> Result<Partition> {
    let part = match areas {
        Some(k) => partition_fallback(net, k, seed)?,
        None => match partition_from_areas(net) {
            Ok(p) if p.areas.len() > 1 => p,
            _ => partition_fallback(net, DEFAULT_AREAS, seed)?,
        },
    };
    Ok(part)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn central(path: &Path, formulation: Formulation, lazy: bool) -> Outcome {
    let net = input(load(path))?;
    let t = Instant::now();
    let (method, sol) = match formulation {
        Formulation::Ptdf => {
            let mats = build_susceptance(&net);
            let h = input(compute_ptdf(&mats, net.reference_bus).map_err(Into::into))?;
            ("central-ptdf", solve_central_ptdf(&net, &h, lazy, 1e-8))
        }
        Formulation::Angle => ("central-angle", solve_central_angle(&net, 1e-8)),
    };
    let sol = match sol {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(false);
        }
    };
    let report = Report {
        schema: SCHEMA,
        case: case_name(path),
        method: method.into(),
        objective: sol.objective,
        relative_gap_pct: 0.0,
        iterations: 0,
        wall_seconds: t.elapsed().as_secs_f64(),
        converged: true,
        details: None,
    };
    input(print_json(&report))?;
    Ok(true)
}

fn run_method(net: &Network, part: &Partition, method: Method, cfg: &DistConfig) -> Result<ConvergenceReport, String> {
    let r = match method {
        Method::Ptdf => run_distributed_ptdf(net, part, cfg),
        Method::Angle => run_distributed_angle(net, part, cfg),
    };
    r.map_err(|e| e.to_string())
}

fn write_outputs(dir: &Path, case: &str, report: &ConvergenceReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = format!("{case}_{}", report.method);
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&Report::from_run(case, report))? + "\n")?;
    write_trace(&dir.join(format!("{stem}_trace.csv")), &report.trace)
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn dist(path: &Path, method: Method, opts: &DistOpts, out_dir: Option<&Path>) -> Outcome {
    let cfg = input(opts.config())?;
    let net = input(load(path))?;
    let part = input(choose_partition(&net, opts.areas, opts.seed))?;
    let report = match run_method(&net, &part, method, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(false);
        }
    };
    let case = case_name(path);
    if let Some(dir) = out_dir {
        input(write_outputs(dir, &case, &report))?;
    }
    input(print_json(&Report::from_run(&case, &report)))?;
    Ok(report.converged)
}

#[derive(Serialize)]
struct AreaMatrix {
    area: u32,
    kept: Vec<u32>,
    eliminated: Vec<u32>,
    direct: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distributed_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frobenius_difference: Option<f64>,
}

fn ptdf(path: &Path, distributed: bool, areas: Option<usize>, seed: u64) -> Outcome {
    let net = input(load(path))?;
    let part = input(choose_partition(&net, areas, seed))?;
    let mats = build_susceptance(&net);
    let topos = input(build_area_topology(&net, &part, net.reference_bus).map_err(Into::into))?;
    let mut out = Vec::new();
    let mut ok = true;
    for topo in &topos {
        let red = input(kron_reduce(&mats, &topo.alpha, &topo.beta).map_err(Into::into))?;
        let a = &red.accompanying;
        let mut entry = AreaMatrix {
            area: topo.area.0,
            kept: topo.alpha.iter().map(|b| b.0).collect(),
            eliminated: topo.beta.iter().map(|b| b.0).collect(),
            direct: a.row_iter().map(|r| r.iter().copied().collect()).collect(),
            distributed_iterations: None,
            frobenius_difference: None,
        };
        if distributed {
            let blocks = wls_blocks(&mats, topo, &part);
            let w = input(
                wls_accompanying(blocks, topo.alpha.len(), topo.beta.len(), &WlsConfig::default()).map_err(Into::into),
            )?;
            ok &= w.converged;
            entry.distributed_iterations = Some(w.iterations);
            entry.frobenius_difference = Some((&w.accompanying - a).norm());
        }
        out.push(entry);
    }
    input(print_json(&out))?;
    Ok(ok)
}

#[derive(Serialize)]
struct BenchRow {
    case: String,
    method: String,
    objective: f64,
    central_objective: f64,
    relative_gap_pct: f64,
    iterations: usize,
    wall_seconds: f64,
    converged: bool,
}

fn bench(dir: &Path, opts: &DistOpts, out_dir: Option<&Path>) -> Outcome {
    let cfg = input(opts.config())?;
    let mut cases: Vec<PathBuf> = input(
        fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "m")).collect()),
    )?;
    cases.sort();
    if cases.is_empty() {
        return Err(InputError(anyhow::anyhow!("no .m cases in {}", dir.display())));
    }
    let mut rows = Vec::new();
    for path in &cases {
        let case = case_name(path);
        let net = input(load(path))?;
        let part = input(choose_partition(&net, opts.areas, opts.seed))?;
        let central = input(solve_central_angle(&net, 1e-8).map_err(Into::into))?.objective;
        let cfg = DistConfig { central_objective: Some(central), ..cfg };
        for method in [Method::Ptdf, Method::Angle] {
            let row = match run_method(&net, &part, method, &cfg) {
                Ok(r) => {
                    if let Some(d) = out_dir {
                        input(write_outputs(d, &case, &r))?;
                    }
                    BenchRow {
                        case: case.clone(),
                        method: r.method,
                        objective: r.objective,
                        central_objective: central,
                        relative_gap_pct: r.relative_gap_pct,
                        iterations: r.iterations,
                        wall_seconds: r.wall_seconds,
                        converged: r.converged,
                    }
                }
                Err(e) => {
                    eprintln!("{case} {}: {e}", method.name());
                    BenchRow {
                        case: case.clone(),
                        method: method.name().into(),
                        objective: f64::NAN,
                        central_objective: central,
                        relative_gap_pct: f64::NAN,
                        iterations: 0,
                        wall_seconds: 0.0,
                        converged: false,
                    }
                }
            };
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        input(w.serialize(r).map_err(Into::into))?;
    }
    input(w.flush().map_err(Into::into))?;
    if let Some(d) = out_dir {
        let path = d.join("summary.csv");
        let mut w = input(csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display())))?;
        for r in &rows {
            input(w.serialize(r).map_err(Into::into))?;
        }
        input(w.flush().map_err(Into::into))?;
    }
    Ok(rows.iter().all(|r| r.converged))
}
