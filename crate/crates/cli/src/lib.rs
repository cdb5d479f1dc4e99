//! Command implementations behind the `impham` binary.
//!
//! Every command loads a scenario, runs inside its own rayon pool and writes
//! its artifacts into the output directory. Floats in CSV files carry 17
//! significant digits.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use impham::critical::{GeometrySummary, OrbitOutcome, Phase};
use impham::impulse::{analytic_b_bound, estimate_b, write_orbits_csv, BEstimate, SampleOrbit};
use impham::numeric::fmt_f64;
use impham::scenario::{load, GeometryOutcome, Scenario, SolveOutcome};
use impham::space::{write_process_csv, EnsembleProcess};
use impham::verification::{BatteryReport, ResidualReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_HYPOTHESES: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] impham::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Artifact(String),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "impham", version, about = "Stochastic impulsive Hamiltonian systems via the dual action")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample impulse orbits, propagate paths and estimate B.
    Simulate(CommonArgs),
    /// Check the growth, superquadraticity and impulse-size hypotheses.
    Hypotheses(CommonArgs),
    /// Check the mountain-pass geometry of the dual action.
    Geometry(CommonArgs),
    /// Run the mountain-pass search and verify the recovered solution.
    Solve(CommonArgs),
    /// Re-verify `solution.csv` in the output directory.
    Verify(CommonArgs),
    /// Summarize the artifacts of earlier runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Scenario JSON file or builtin name.
    #[arg(long, default_value = "example-4.1")]
    pub config: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `ensemble.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `ensemble.n_orbits`.
    #[arg(long)]
    pub orbits: Option<usize>,
    /// Run the search even when preconditions fail.
    #[arg(long)]
    pub force: bool,
    /// Overrides `optimizer.gtol`.
    #[arg(long)]
    pub tol_gtol: Option<f64>,
    /// Worker threads; rayon's default when absent.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => in_pool(&a, cmd_simulate),
        Command::Hypotheses(a) => in_pool(&a, cmd_hypotheses),
        Command::Geometry(a) => in_pool(&a, cmd_geometry),
        Command::Solve(a) => in_pool(&a, cmd_solve),
        Command::Verify(a) => in_pool(&a, cmd_verify),
        Command::Report(a) => cmd_report(&a.out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn in_pool(args: &CommonArgs, f: fn(&CommonArgs) -> CliResult<i32>) -> CliResult<i32> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        builder = builder.num_threads(n);
    }
    builder.build()?.install(|| f(args))
}

/// Loads the scenario and applies command-line overrides.
pub fn scenario(args: &CommonArgs) -> CliResult<Scenario> {
    let mut cfg = load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(n) = args.orbits {
        cfg.ensemble.n_orbits = n;
    }
    if let Some(g) = args.tol_gtol {
        cfg.optimizer.gtol = g;
    }
    Ok(Scenario::new(cfg)?)
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    write_with(path, |w| writeln!(w, "{text}"))
}

fn read_json(path: &Path) -> CliResult<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

fn labels(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|k| format!("{prefix}_{k}")).collect()
}

#[derive(Serialize)]
struct BFile {
    #[serde(flatten)]
    estimate: BEstimate,
    analytic_bound: Option<f64>,
    analytic_bound_error: Option<String>,
    seed: u64,
}

pub fn cmd_simulate(args: &CommonArgs) -> CliResult<i32> {
    let s = scenario(args)?;
    prepare_out(&args.out)?;
    let orbits = s.orbits();
    write_with(&args.out.join("orbits.csv"), |w| write_orbits_csv(&orbits, w))?;
    let (paths, _) = s.propagate(&orbits)?;
    let names = labels("u", paths.dim);
    write_with(&args.out.join("paths.csv"), |w| write_process_csv(&[&paths], &names, w))?;
    let estimate = estimate_b(&s.spec, s.config.ensemble.n_orbits, s.seed())?;
    let (analytic_bound, analytic_bound_error) = match analytic_b_bound(&s.spec) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    write_json(&args.out.join("B.json"), &BFile { estimate, analytic_bound, analytic_bound_error, seed: s.seed() })?;
    Ok(EXIT_OK)
}

pub fn cmd_hypotheses(args: &CommonArgs) -> CliResult<i32> {
    let s = scenario(args)?;
    prepare_out(&args.out)?;
    let report = s.hypotheses()?;
    write_json(&args.out.join("hypotheses.json"), &report)?;
    Ok(if report.all_pass { EXIT_OK } else { EXIT_HYPOTHESES })
}

fn write_geometry(out: &Path, geometry: &GeometryOutcome) -> CliResult<()> {
    write_json(&out.join("geometry.json"), geometry)?;
    let rim = geometry.report.as_ref().map(|r| r.rim.as_slice()).unwrap_or(&[]);
    write_with(&out.join("rim.csv"), |w| {
        writeln!(w, "index,pc1_norm,chi")?;
        for r in rim {
            writeln!(w, "{},{},{}", r.index, fmt_f64(r.pc1_norm), fmt_f64(r.chi))?;
        }
        Ok(())
    })
}

pub fn cmd_geometry(args: &CommonArgs) -> CliResult<i32> {
    let s = scenario(args)?;
    prepare_out(&args.out)?;
    let problem = s.problem()?;
    let pre = s.preconditions(&problem);
    write_geometry(&args.out, &pre.geometry)?;
    if let Some(e) = &pre.geometry.error {
        eprintln!("geometry: {e}");
    }
    Ok(if pre.geometry.passed() { EXIT_OK } else { EXIT_HYPOTHESES })
}

#[derive(Serialize)]
struct ResultFile<'a> {
    scenario: &'a str,
    seed: u64,
    chi_at_vstar: f64,
    gradient_norm: f64,
    gtol: f64,
    iterations: usize,
    converged: bool,
    above_endpoints: bool,
    preconditions_passed: bool,
    precondition_failure: Option<String>,
    forced: bool,
    geometry: &'a GeometrySummary,
    candidate_distance: f64,
    battery: &'a BatteryReport,
    residuals_pass: bool,
    orbits: &'a [OrbitOutcome],
}

fn write_solution(out: &Path, v: &EnsembleProcess, u: &EnsembleProcess, u_j: &EnsembleProcess) -> CliResult<()> {
    let mut names = labels("v", v.dim);
    names.extend(labels("u", u.dim));
    names.extend(labels("uJ", u_j.dim));
    write_with(&out.join("solution.csv"), |w| write_process_csv(&[v, u, u_j], &names, w))
}

pub fn cmd_solve(args: &CommonArgs) -> CliResult<i32> {
    let s = scenario(args)?;
    prepare_out(&args.out)?;
    let problem = s.problem()?;
    let pre = s.preconditions(&problem);
    if let Some(h) = &pre.hypotheses {
        write_json(&args.out.join("hypotheses.json"), h)?;
    }
    write_geometry(&args.out, &pre.geometry)?;
    let failure = pre.failure();
    if let Some(f) = &failure {
        if s.config.require_preconditions && !args.force {
            eprintln!("solve: {f}; pass --force to run anyway");
            return Ok(EXIT_HYPOTHESES);
        }
        if s.config.require_preconditions {
            eprintln!("solve: {f}; continuing because of --force");
        }
    }
    let o: SolveOutcome = s.search(&problem, pre, None)?;
    write_with(&args.out.join("convergence.csv"), |w| {
        writeln!(w, "orbit,iteration,phase,max_chi,gradient_norm")?;
        for h in &o.result.path_history {
            let phase = match h.phase {
                Phase::Path => "path",
                Phase::Refine => "refine",
            };
            writeln!(w, "{},{},{phase},{},{}", h.orbit, h.iteration, fmt_f64(h.max_chi), fmt_f64(h.gradient_norm))?;
        }
        Ok(())
    })?;
    write_solution(&args.out, &o.result.v_star, &o.recovered.u_star, &o.recovered.u_j)?;
    write_residuals(&args.out, &o.residuals, &problem.orbits)?;
    let file = ResultFile {
        scenario: &s.config.name,
        seed: s.seed(),
        chi_at_vstar: o.result.chi_at_vstar,
        gradient_norm: o.result.gradient_norm,
        gtol: s.config.optimizer.gtol,
        iterations: o.result.iterations,
        converged: o.result.converged,
        above_endpoints: o.result.above_endpoints,
        preconditions_passed: failure.is_none(),
        precondition_failure: failure,
        forced: args.force,
        geometry: &o.result.geometry,
        candidate_distance: o.recovered.distance,
        battery: &o.battery,
        residuals_pass: o.residuals.all_pass,
        orbits: &o.result.orbits,
    };
    write_json(&args.out.join("result.json"), &file)?;
    report_residuals(&o.residuals);
    Ok(if o.success() { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn write_residuals(out: &Path, r: &ResidualReport, orbits: &[SampleOrbit]) -> CliResult<()> {
    write_json(&out.join("residuals.json"), r)?;
    write_with(&out.join("jump_residuals.csv"), |w| {
        writeln!(w, "orbit_id,j,xi,residual")?;
        for (o, orbit) in r.orbits.iter().zip(orbits) {
            for (j, (res, xi)) in o.jump_residuals.iter().zip(&orbit.times).enumerate() {
                writeln!(w, "{},{},{},{}", o.orbit, j + 1, fmt_f64(*xi), fmt_f64(*res))?;
            }
        }
        Ok(())
    })
}

fn report_residuals(r: &ResidualReport) {
    if !r.all_pass {
        eprintln!(
            "residuals: ode {:.3e} jump {:.3e} boundary {:.3e} pairing {:?}",
            r.ode_residual_sup, r.jump_residual_max, r.boundary_residual, r.pairing_residual
        );
    }
}

/// Reads the `v_*` columns of a `solution.csv` into the layout of `template`.
pub fn read_solution(path: &Path, template: &EnsembleProcess) -> CliResult<EnsembleProcess> {
    let csv_err = |source| CliError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let cols: Vec<usize> = (0..template.dim)
        .map(|k| {
            let name = format!("v_{k}");
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Artifact(format!("{}: missing column {name}", path.display())))
        })
        .collect::<CliResult<_>>()?;
    let t_col = headers
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| CliError::Artifact(format!("{}: missing column t", path.display())))?;
    let mut v = template.clone();
    let d = v.dim;
    let mut rows = reader.records();
    let mismatch = || CliError::Artifact(format!("{}: rows do not match the scenario grid", path.display()));
    let parse = |s: &str| s.parse::<f64>().map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())));
    for orbit in &mut v.orbits {
        for seg in &mut orbit.segments {
            for i in 0..seg.times.len() {
                let rec = rows.next().ok_or_else(mismatch)?.map_err(csv_err)?;
                let t = parse(rec.get(t_col).ok_or_else(mismatch)?)?;
                if t != seg.times[i] {
                    return Err(mismatch());
                }
                for (k, &c) in cols.iter().enumerate() {
                    seg.values[i * d + k] = parse(rec.get(c).ok_or_else(mismatch)?)?;
                }
            }
        }
    }
    if rows.next().is_some() {
        return Err(mismatch());
    }
    Ok(v)
}

pub fn cmd_verify(args: &CommonArgs) -> CliResult<i32> {
    let s = scenario(args)?;
    let problem = s.problem()?;
    let path = args.out.join("solution.csv");
    if !path.exists() {
        return Err(CliError::Artifact(format!("{} not found; run `solve` first", path.display())));
    }
    let v = read_solution(&path, &problem.zeros())?;
    let (_, battery, residuals) = s.verify(&problem, &v)?;
    write_residuals(&args.out, &residuals, &problem.orbits)?;
    write_json(&args.out.join("battery.json"), &battery)?;
    report_residuals(&residuals);
    Ok(if residuals.all_pass { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn read_rows(path: &Path) -> CliResult<Option<(csv::StringRecord, Vec<csv::StringRecord>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let csv_err = |source| CliError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let rows = reader.records().collect::<Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok(Some((headers, rows)))
}

/// Writes rows as whitespace-separated columns, with a blank line wherever
/// the value of column `block` changes so gnuplot draws separate curves.
fn write_dat(path: &Path, headers: &csv::StringRecord, rows: &[csv::StringRecord], block: &[usize]) -> CliResult<()> {
    write_with(path, |w| {
        writeln!(w, "# {}", headers.iter().collect::<Vec<_>>().join(" "))?;
        let mut prev: Option<Vec<&str>> = None;
        for r in rows {
            let key: Vec<&str> = block.iter().map(|&i| r.get(i).unwrap_or("")).collect();
            if prev.as_ref().is_some_and(|p| *p != key) {
                writeln!(w)?;
            }
            writeln!(w, "{}", r.iter().collect::<Vec<_>>().join(" "))?;
            prev = Some(key);
        }
        Ok(())
    })
}

pub fn cmd_report(out: &Path) -> CliResult<i32> {
    let result = read_json(&out.join("result.json"))?;
    let geometry = read_json(&out.join("geometry.json"))?;
    let hypotheses = read_json(&out.join("hypotheses.json"))?;
    let residuals = read_json(&out.join("residuals.json"))?;
    let b = read_json(&out.join("B.json"))?;
    let convergence = read_rows(&out.join("convergence.csv"))?;
    let solution = read_rows(&out.join("solution.csv"))?;
    let paths = read_rows(&out.join("paths.csv"))?;
    let rim = read_rows(&out.join("rim.csv"))?;
    if [&result, &geometry, &hypotheses, &residuals, &b].iter().all(|x| x.is_none())
        && [&convergence, &solution, &paths, &rim].iter().all(|x| x.is_none())
    {
        return Err(CliError::Artifact(format!("{}: no run artifacts found", out.display())));
    }
    let pick = |v: &Option<Value>, key: &str| v.as_ref().and_then(|v| v.get(key)).cloned().unwrap_or(Value::Null);
    let report = geometry.as_ref().and_then(|g| g.get("report")).cloned();
    let summary = json!({
        "geometry": {
            "rho": pick(&report, "rho"),
            "rim_lower_bound": pick(&report, "rim_lower_bound"),
            "chi_at_v1": pick(&report, "chi_at_v1"),
            "e_norm_used": pick(&report, "e_norm_used"),
            "passed": pick(&report, "passed"),
            "error": pick(&geometry, "error"),
        },
        "hypotheses": {
            "condition_value": pick(&hypotheses, "condition_value"),
            "all_pass": pick(&hypotheses, "all_pass"),
        },
        "B": {
            "mc_mean": pick(&b, "mc_mean"),
            "mc_stderr": pick(&b, "mc_stderr"),
            "analytic_bound": pick(&b, "analytic_bound"),
        },
        "solve": {
            "chi_at_vstar": pick(&result, "chi_at_vstar"),
            "gradient_norm": pick(&result, "gradient_norm"),
            "iterations": pick(&result, "iterations"),
            "converged": pick(&result, "converged"),
            "candidate_distance": pick(&result, "candidate_distance"),
        },
        "residuals": {
            "ode_residual_sup": pick(&residuals, "ode_residual_sup"),
            "jump_residual_max": pick(&residuals, "jump_residual_max"),
            "boundary_residual": pick(&residuals, "boundary_residual"),
            "pairing_residual": pick(&residuals, "pairing_residual"),
            "all_pass": pick(&residuals, "all_pass"),
        },
    });
    write_json(&out.join("summary.json"), &summary)?;
    if let Some((h, rows)) = &convergence {
        write_dat(&out.join("chi_iteration.dat"), h, rows, &[0])?;
    }
    if let Some((h, rows)) = solution.as_ref().or(paths.as_ref()) {
        write_dat(&out.join("orbit_paths.dat"), h, rows, &[0, 1])?;
    }
    if let Some((h, rows)) = &rim {
        write_dat(&out.join("rim.dat"), h, rows, &[])?;
    }
    Ok(EXIT_OK)
}
