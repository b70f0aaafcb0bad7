//! Batch CLI: load a model file, run one computation, emit a
//! machine-readable report on stdout. Every output embeds a run
//! manifest; all randomness is controlled by --seed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use progeny::graph::{self, KernelGraphSpec};
use progeny::model::{self, OffspringModel};
use progeny::rate;
use progeny::series::{self, graded_exponents, ORACLE_BUDGET};
use progeny::sim::{self, SimConfig};
use progeny::{Error, Result};

/// Entries of rho must stay this far from the simplex boundary.
const RHO_MARGIN: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "progeny", version, about = "Total-progeny laws of multi-type branching processes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OracleChoice {
    None,
    Recursion,
    Lagrange,
    Arborescent,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a model file against the schema rules and classify it.
    Validate { model: PathBuf },
    /// Exact progeny table by the fixed-point solver, optionally
    /// cross-checked against independent oracles.
    Exact {
        model: PathBuf,
        #[arg(long)]
        nmax: usize,
        #[arg(long, value_enum, default_value_t = OracleChoice::None)]
        oracle: OracleChoice,
    },
    /// Rate function at one direction or on a simplex grid.
    Gamma {
        model: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "grid")]
        rho: Option<Vec<f64>>,
        /// Interior grid resolution: directions with coordinates i/k.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Minimize the rate function over the simplex.
    Rhostar {
        model: PathBuf,
        /// Also verify rho* against the left Perron eigenvector
        /// (right-stochastic mean matrices only).
        #[arg(long)]
        check_eigenvector: bool,
    },
    /// Exponential-decay convergence table along a ray.
    Converge {
        model: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        rho: Vec<f64>,
        #[arg(long)]
        nmax: usize,
    },
    /// Monte Carlo batch with optional exponential tilting.
    Simulate {
        model: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 100_000)]
        cap: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// "auto" resolves the tilt from the rate-function minimizer;
        /// otherwise a comma-separated lambda list; omit for plain MC.
        #[arg(long)]
        tilt: Option<String>,
    },
    /// Sample an inhomogeneous random graph and compare component
    /// statistics with the local-limit branching process.
    Graphdemo {
        spec: PathBuf,
        /// Overrides the seed recorded in the spec file.
        #[arg(long)]
        seed: Option<u64>,
        /// Components at least this large enter the composition summary.
        #[arg(long, default_value_t = 20)]
        min_size: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap already formats usage; route everything to stderr
            eprintln!("{e}");
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let start = Instant::now();
    if let Err(e) = run(cli, start) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Io(_) | Error::Json(_) => {
                let mut cmd = Cli::command();
                let _ = cmd.print_help();
                1
            }
            Error::Underflow(_)
            | Error::RateDiverged(_)
            | Error::RateNotConverged(_)
            | Error::MgfOverflow(_)
            | Error::PowerIterationDiverged(_)
            | Error::TiltDegenerate { .. }
            | Error::ZeroConstantTerm => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn load_model(path: &Path) -> Result<OffspringModel> {
    let text = std::fs::read_to_string(path)?;
    OffspringModel::from_json(&text)
}

/// Loads and enforces the schema rules; any violation is a validation
/// failure for commands other than `validate`.
fn load_valid_model(path: &Path) -> Result<OffspringModel> {
    let model = load_model(path)?;
    let violations = model.validate();
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidModel(text.join("; ")));
    }
    Ok(model)
}

fn manifest(
    command: &str,
    file: &Path,
    params: serde_json::Value,
    seed: Option<u64>,
    start: Instant,
) -> String {
    serde_json::json!({
        "command": command,
        "file": file.display().to_string(),
        "params": params,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_ms": start.elapsed().as_millis() as u64,
    })
    .to_string()
}

fn check_interior(rho: &[f64]) -> Result<()> {
    if rho.iter().any(|&r| r < RHO_MARGIN) {
        return Err(Error::BoundaryRho { rho: rho.to_vec(), margin: RHO_MARGIN });
    }
    Ok(())
}

fn run(cli: Cli, start: Instant) -> Result<()> {
    let out = std::io::stdout();
    let mut w = out.lock();
    match cli.cmd {
        Cmd::Validate { model } => cmd_validate(&mut w, &model, start),
        Cmd::Exact { model, nmax, oracle } => cmd_exact(&mut w, &model, nmax, oracle, start),
        Cmd::Gamma { model, rho, grid } => cmd_gamma(&mut w, &model, rho, grid, start),
        Cmd::Rhostar { model, check_eigenvector } => {
            cmd_rhostar(&mut w, &model, check_eigenvector, start)
        }
        Cmd::Converge { model, rho, nmax } => cmd_converge(&mut w, &model, &rho, nmax, start),
        Cmd::Simulate { model, samples, cap, seed, tilt } => {
            cmd_simulate(&mut w, &model, samples, cap, seed, tilt, start)
        }
        Cmd::Graphdemo { spec, seed, min_size } => {
            cmd_graphdemo(&mut w, &spec, seed, min_size, start)
        }
    }
}

fn cmd_validate<W: Write>(w: &mut W, path: &Path, start: Instant) -> Result<()> {
    let model = load_model(path)?;
    let violations = model.validate();
    writeln!(w, "types: {}", model.m())?;
    writeln!(w, "fingerprint: {:016x}", model.fingerprint())?;
    if violations.is_empty() {
        let class = model.classify()?;
        let root = model::perron_root(&model.mean_matrix())?;
        writeln!(w, "classification: {class:?} (perron root {root:.6})")?;
        writeln!(w, "status: ok")?;
        writeln!(w, "# {}", manifest("validate", path, serde_json::json!({}), None, start))?;
        Ok(())
    } else {
        for v in &violations {
            writeln!(w, "violation: {v}")?;
        }
        writeln!(w, "status: invalid")?;
        writeln!(w, "# {}", manifest("validate", path, serde_json::json!({}), None, start))?;
        Err(Error::InvalidModel(format!("{} violation(s)", violations.len())))
    }
}

fn cmd_exact<W: Write>(
    w: &mut W,
    path: &Path,
    nmax: usize,
    oracle: OracleChoice,
    start: Instant,
) -> Result<()> {
    let model = load_valid_model(path)?;
    let table = series::solve_progeny(&model, nmax)?;
    table.write_csv(w)?;

    if oracle != OracleChoice::None {
        let mut report = serde_json::Map::new();
        let mut max_diff = 0.0f64;
        let budget = nmax.min(ORACLE_BUDGET);
        if matches!(oracle, OracleChoice::Recursion | OracleChoice::All) {
            let rec = series::recursion_oracle(&model, nmax)?;
            let d = table.mixed.max_abs_diff(&rec.mixed)?;
            max_diff = max_diff.max(d);
            report.insert("recursion".into(), d.into());
        }
        if matches!(oracle, OracleChoice::Lagrange | OracleChoice::All) {
            let mut d = 0.0f64;
            for n in graded_exponents(model.m(), budget) {
                if n.iter().all(|&v| v == 0) {
                    continue;
                }
                let p = series::lagrange_good_oracle(&model, &n)?;
                d = d.max((p - table.mixed(&n)).abs());
            }
            max_diff = max_diff.max(d);
            report.insert("lagrange".into(), d.into());
        }
        if matches!(oracle, OracleChoice::Arborescent | OracleChoice::All) {
            let mut d = 0.0f64;
            for n in graded_exponents(model.m(), budget) {
                if n.contains(&0) {
                    continue;
                }
                let p = series::arborescent_oracle(&model, &n)?;
                d = d.max((p - table.mixed(&n)).abs());
            }
            max_diff = max_diff.max(d);
            report.insert("arborescent".into(), d.into());
        }
        report.insert("max".into(), max_diff.into());
        writeln!(w, "# oracle_report {}", serde_json::Value::Object(report))?;
    }
    let params = serde_json::json!({"nmax": nmax});
    writeln!(w, "# {}", manifest("exact", path, params, None, start))?;
    Ok(())
}

fn cmd_gamma<W: Write>(
    w: &mut W,
    path: &Path,
    rho: Option<Vec<f64>>,
    grid: Option<usize>,
    start: Instant,
) -> Result<()> {
    let model = load_valid_model(path)?;
    let m = model.m();
    let directions: Vec<Vec<f64>> = match (&rho, grid) {
        (Some(r), None) => vec![r.clone()],
        (None, Some(k)) => interior_grid(m, k),
        _ => {
            return Err(Error::InvalidModel(
                "pass exactly one of --rho or --grid".into(),
            ))
        }
    };
    let rho_cols: Vec<String> = (1..=m).map(|j| format!("rho_{j}")).collect();
    let lam_cols: Vec<String> = (1..=m).map(|j| format!("lambda_{j}")).collect();
    writeln!(w, "{},gamma,{},iterations", rho_cols.join(","), lam_cols.join(","))?;
    for r in &directions {
        check_interior(r)?;
        let res = rate::gamma(&model, r)?;
        let rs: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        let ls: Vec<String> = res.lambda.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", rs.join(","), res.gamma, ls.join(","), res.iterations)?;
    }
    let params = serde_json::json!({"rho": rho, "grid": grid});
    writeln!(w, "# {}", manifest("gamma", path, params, None, start))?;
    Ok(())
}

/// Directions with coordinates i/k, all strictly positive.
fn interior_grid(m: usize, k: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut parts = vec![1usize; m];
    fn rec(parts: &mut Vec<usize>, level: usize, left: usize, k: usize, out: &mut Vec<Vec<f64>>) {
        let m = parts.len();
        if level == m - 1 {
            parts[level] = left;
            out.push(parts.iter().map(|&c| c as f64 / k as f64).collect());
            return;
        }
        let reserve = m - 1 - level;
        for c in 1..=left.saturating_sub(reserve) {
            parts[level] = c;
            rec(parts, level + 1, left - c, k, out);
        }
    }
    if k >= m {
        rec(&mut parts, 0, k, k, &mut out);
    }
    out
}

fn cmd_rhostar<W: Write>(
    w: &mut W,
    path: &Path,
    check_eigenvector: bool,
    start: Instant,
) -> Result<()> {
    let model = load_valid_model(path)?;
    let res = rate::rho_star(&model)?;
    let mut report = serde_json::json!({
        "rho": res.rho,
        "lambda": res.lambda,
        "gamma": res.gamma,
    });
    if check_eigenvector {
        let check = rate::principal_eigenvector_check(&model)?;
        let diff = res
            .rho
            .iter()
            .zip(&check.rho)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report["eigenvector_check"] = serde_json::json!({
            "rho": check.rho,
            "irreducible": check.irreducible,
            "max_abs_diff": diff,
        });
    }
    report["manifest"] = serde_json::Value::String(manifest(
        "rhostar",
        path,
        serde_json::json!({"check_eigenvector": check_eigenvector}),
        None,
        start,
    ));
    writeln!(w, "{report}")?;
    Ok(())
}

fn cmd_converge<W: Write>(
    w: &mut W,
    path: &Path,
    rho: &[f64],
    nmax: usize,
    start: Instant,
) -> Result<()> {
    let model = load_valid_model(path)?;
    check_interior(rho)?;
    let res = rate::gamma(&model, rho)?;
    let table = series::solve_progeny(&model, nmax)?;
    writeln!(w, "total_size,log_p_over_n,neg_gamma,gap")?;
    for t in 1..=nmax {
        let n = model::ray(rho, t);
        let p = table.mixed(&n);
        let (lp, gap) = if p > 0.0 {
            let lp = p.ln() / t as f64;
            (lp, lp + res.gamma)
        } else {
            (f64::NAN, f64::NAN)
        };
        writeln!(w, "{},{},{},{}", t, lp, -res.gamma, gap)?;
    }
    let params = serde_json::json!({"rho": rho, "nmax": nmax});
    writeln!(w, "# {}", manifest("converge", path, params, None, start))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate<W: Write>(
    w: &mut W,
    path: &Path,
    samples: usize,
    cap: u64,
    seed: u64,
    tilt: Option<String>,
    start: Instant,
) -> Result<()> {
    let model = load_valid_model(path)?;
    let m = model.m();
    let lambda = match tilt.as_deref() {
        None => vec![0.0; m],
        Some("auto") => rate::rho_star(&model)?.lambda,
        Some(list) => {
            let parsed: std::result::Result<Vec<f64>, _> =
                list.split(',').map(str::trim).map(str::parse).collect();
            parsed.map_err(|_| {
                Error::InvalidModel(format!("--tilt expects 'auto' or a float list, got '{list}'"))
            })?
        }
    };
    let config = SimConfig { replicates: samples, seed, cap, lambda };
    let batch = sim::sample(&model, &config)?;
    batch.write_csv(w)?;

    let censored = batch.records.iter().filter(|r| r.censored).count();
    let mut summary = serde_json::json!({ "censored": censored });
    let live: Vec<_> = batch.records.iter().filter(|r| !r.censored).collect();
    if !live.is_empty() {
        let wsum: f64 = live.iter().map(|r| r.log_weight.exp()).sum();
        let wsq: f64 = live.iter().map(|r| r.log_weight.exp().powi(2)).sum();
        let mean_totals: Vec<f64> = (0..m)
            .map(|k| {
                live.iter()
                    .map(|r| r.log_weight.exp() * r.totals[k] as f64)
                    .sum::<f64>()
                    / wsum
            })
            .collect();
        summary["ess"] = serde_json::json!(wsum * wsum / wsq);
        summary["mean_totals"] = serde_json::json!(mean_totals);
        if let Ok(comp) = sim::composition_stats(&batch) {
            summary["composition"] = serde_json::json!(comp);
        }
    }
    writeln!(w, "# summary {summary}")?;
    let params = serde_json::json!({"samples": samples, "cap": cap, "tilt": tilt});
    writeln!(w, "# {}", manifest("simulate", path, params, Some(seed), start))?;
    Ok(())
}

fn cmd_graphdemo<W: Write>(
    w: &mut W,
    path: &Path,
    seed: Option<u64>,
    min_size: usize,
    start: Instant,
) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut spec: KernelGraphSpec = serde_json::from_str(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let sample = graph::sample_components(&spec)?;
    sample.write_csv(w)?;

    let model = graph::local_limit_model(&spec)?;
    let m = spec.q.len();
    // observed vs predicted counts of small components by type census:
    // about n P(T = n) / |n| components of census n are expected
    let table = series::solve_progeny(&model, 4)?;
    let mut rows = Vec::new();
    for n in graded_exponents(m, 4) {
        let total: u32 = n.iter().sum();
        if total == 0 {
            continue;
        }
        let predicted = spec.n as f64 * table.mixed(&n) / total as f64;
        let observed = sample.count_matching(&n);
        rows.push(serde_json::json!({
            "census": n,
            "observed": observed,
            "predicted": predicted,
        }));
    }
    let largest = sample.largest();
    let mut summary = serde_json::json!({
        "largest_component": largest,
        "giant": largest as f64 > 0.05 * spec.n as f64,
        "small_component_counts": rows,
    });
    // tail composition of large components against the minimizing ray
    let big: Vec<_> = sample.components.iter().filter(|c| c.size >= min_size).collect();
    if !big.is_empty() {
        let mut acc = vec![0.0; m];
        for c in &big {
            for k in 0..m {
                acc[k] += c.counts[k] as f64;
            }
        }
        let total: f64 = acc.iter().sum();
        let comp: Vec<f64> = acc.iter().map(|a| a / total).collect();
        summary["qualifying_components"] = serde_json::json!(big.len());
        summary["tail_composition"] = serde_json::json!(comp);
        if let Ok(rs) = rate::rho_star(&model) {
            summary["rho_star"] = serde_json::json!(rs.rho);
        }
    }
    writeln!(w, "# summary {summary}")?;
    let params = serde_json::json!({"min_size": min_size});
    writeln!(w, "# {}", manifest("graphdemo", path, params, seed.or(Some(spec.seed)), start))?;
    Ok(())
}
