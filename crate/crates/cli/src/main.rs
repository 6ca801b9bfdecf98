use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use branchlab::bbm::{many_to_few_lhs, run, BbmConfig, Harmonics, Observables, ReversedProcess};
use branchlab::csbp::{csbp_moments, entrance_law_check, genealogy_at, martingale, simulate_reduced, LaplaceFlow, ReducedRates};
use branchlab::functional::Functional;
use branchlab::harness::{self, parse_mechanism, parse_potential, ExperimentSpec, Report, CATALOG};
use branchlab::rng::stream;
use branchlab::spectral::{gap_scaling, green_function, solve_slp, LimitSolution, Potential};
use branchlab::spine::{jump_moment, jump_moment_limit, k_spine, mixing_diagnostics, KSpineBudget, ReversedMomentTable, SpineConfig};
use branchlab::stats::{bonferroni_threshold, Accumulator};
use branchlab::ultrametric::matrices_to_csv;

/// Environment variable naming the default output directory.
const OUTPUT_ENV: &str = "LAB_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "lab", version, about = "Branching Brownian motion, spine and CSBP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Principal eigenpair on [0, L], with optional gap regression and Green function values.
    Spectral(SpectralArgs),
    /// Continuous-state branching processes.
    #[command(subcommand)]
    Csbp(CsbpCommand),
    /// Forward branching Brownian motion on [0, L].
    Bbm(BbmArgs),
    /// Spine diffusion and k-spine measures.
    #[command(subcommand)]
    Spine(SpineCommand),
    /// Runs every experiment of a spec file.
    Run {
        spec: PathBuf,
        /// Output directory for sections without `output` (default: $LAB_OUTPUT_DIR, else ./lab-output).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Lists the experiment catalog with parameter defaults.
    List,
    /// Re-checks the verdicts of a JSON report.
    Verify { report: PathBuf },
}

#[derive(Args)]
struct SpectralArgs {
    /// `zero`, `step:H[:edge]` or `alpha:A`.
    #[arg(long, default_value = "zero")]
    potential: String,
    #[arg(long = "length", short = 'L', default_value_t = 10.0)]
    l: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Lengths for the gap regression, e.g. `10,14,18,22`.
    #[arg(long, value_delimiter = ',')]
    gap: Vec<f64>,
    /// Green function points `x:y` (repeatable) at resolvent parameter `--xi`.
    #[arg(long)]
    green: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
}

#[derive(Subcommand)]
enum CsbpCommand {
    /// k-th moment measure mass of the CSBP genealogy by recursion.
    Moments {
        /// `feller:d`, `stable:c:alpha`, `cutoff:a:alpha` or `linear:b`.
        #[arg(long, default_value = "feller:1")]
        mechanism: String,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Restrict to genealogies whose first split separates every leaf.
        #[arg(long)]
        off_diagonal: bool,
    },
    /// Simulates reduced trees and reports `Z_{s,t}` and `W_{s,t}`.
    Simulate {
        #[arg(long, default_value = "feller:1")]
        mechanism: String,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value_t = 0.5)]
        s: f64,
        #[arg(long, default_value_t = 10_000)]
        replicates: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Writes the genealogies at `s` of the first N trees as CSV.
        #[arg(long, default_value_t = 0)]
        genealogies: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Entrance-law Laplace identity at several theta.
    EntranceCheck {
        #[arg(long, default_value = "feller:1")]
        mechanism: String,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        thetas: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
    },
}

#[derive(Args)]
struct BbmArgs {
    #[arg(long, default_value = "zero")]
    potential: String,
    #[arg(long = "length", short = 'L', default_value_t = 5.0)]
    l: f64,
    #[arg(long, default_value_t = 2.0)]
    x: f64,
    #[arg(long, default_value_t = 2.0)]
    t: f64,
    /// Observation times (the horizon is always observed).
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
}

#[derive(Subcommand)]
enum SpineCommand {
    /// Total-variation distance to Pi over time.
    Mix {
        #[arg(long, default_value = "zero")]
        potential: String,
        #[arg(long = "length", short = 'L', default_value_t = 4.0)]
        l: f64,
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,4")]
        times: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Nested Monte Carlo estimate of `M^{k,t}_x[1]`.
    Kspine {
        #[arg(long, default_value = "zero")]
        potential: String,
        #[arg(long = "length", short = 'L', default_value_t = 4.0)]
        l: f64,
        #[arg(long, default_value_t = 2.0)]
        x: f64,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value_t = 10_000)]
        outer: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Limit jump moments, their A-scaling, and optional finite-L estimates.
    JumpMoments {
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        /// Domain lengths for finite-L estimates, e.g. `8,12`.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn output_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("lab-output"))
}

fn print(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Runs a subcommand; `Ok(false)` means a verdict failed.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Spectral(a) => spectral(a),
        Command::Csbp(c) => csbp(c),
        Command::Bbm(a) => bbm(a),
        Command::Spine(c) => spine(c),
        Command::Run { spec, output } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut specs = ExperimentSpec::parse_file(&text)?;
            let default_dir = output_dir(output);
            for s in &mut specs {
                if s.output.is_none() {
                    s.output = Some(default_dir.clone());
                }
            }
            let reports = harness::run_suite(&specs)?;
            for r in &reports {
                println!("{:<22} pass {:>3}  fail {:>3}", r.experiment, r.pass, r.fail);
                for rec in r.records.iter().filter(|rec| rec.verdict == harness::Verdict::Fail) {
                    println!("  FAIL {}: lhs {} rhs {} z {:.3} (threshold {:.3}) {}", rec.label, rec.lhs, rec.rhs, rec.z, rec.threshold, rec.note);
                }
            }
            Ok(reports.iter().all(Report::all_pass))
        }
        Command::List => {
            for e in CATALOG {
                println!("{:<22} {}", e.name, e.summary);
                println!("{:<22} targets: {}; replicates: {}", "", e.targets.join(", "), e.default_replicates);
                let params: Vec<String> = e.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{:<22} params: {}", "", params.join("; "));
            }
            Ok(true)
        }
        Command::Verify { report } => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let v = harness::verify(&text)?;
            print(&serde_json::to_value(&v)?)?;
            Ok(v.ok())
        }
    }
}

fn spectral(a: SpectralArgs) -> Result<bool> {
    let pot = parse_potential(&a.potential)?;
    let sol = solve_slp(&pot, a.l, a.tol)?;
    let limit = LimitSolution::new(&pot)?;
    let mut out = json!({
        "potential": a.potential,
        "L": a.l,
        "lambda1": sol.lambda1,
        "w": sol.w,
        "mu": sol.mu,
        "regime": format!("{:?}", sol.regime()),
        "lambda_inf": limit.lambda_inf,
        "beta": limit.beta,
        "alpha": limit.alpha,
        "ode_residual": sol.ode_residual(),
    });
    if !a.gap.is_empty() {
        let g = gap_scaling(&pot, &a.gap)?;
        out["gap"] = serde_json::to_value(&g)?;
        out["gap"]["relative_error"] = json!(g.relative_error());
    }
    let mut greens = Vec::new();
    for p in &a.green {
        let (x, y) = p.split_once(':').context("green points are written x:y")?;
        let (x, y): (f64, f64) = (x.parse()?, y.parse()?);
        greens.push(json!({"x": x, "y": y, "xi": a.xi, "value": green_function(&sol, a.xi, x, y)?}));
    }
    if !greens.is_empty() {
        out["green"] = Value::Array(greens);
    }
    print(&out)?;
    Ok(true)
}

fn csbp(c: CsbpCommand) -> Result<bool> {
    match c {
        CsbpCommand::Moments { mechanism, k, t, off_diagonal } => {
            let mech = parse_mechanism(&mechanism)?;
            let g = if off_diagonal { Functional::indicator(branchlab::ultrametric::Composition(vec![1; k]), 0.0)? } else { Functional::one(k) };
            let value = csbp_moments(&mech, k, t, &g)?;
            print(&json!({"mechanism": mechanism, "k": k, "t": t, "off_diagonal": off_diagonal, "value": value}))?;
            Ok(true)
        }
        CsbpCommand::Simulate { mechanism, t, s, replicates, seed, genealogies, output } => {
            let mech = parse_mechanism(&mechanism)?;
            let flow = LaplaceFlow::new(&mech)?;
            let rates = ReducedRates::new(&flow, t)?;
            let (mut z, mut w) = (Accumulator::new(), Accumulator::new());
            let mut matrices = Vec::new();
            for i in 0..replicates {
                let tree = simulate_reduced(&rates, s, &mut stream(seed, "cli-reduced", i))?;
                z.push(tree.count_alive(s) as f64);
                w.push(martingale(&tree, &rates, s));
                if (i as usize) < genealogies {
                    matrices.push(genealogy_at(&tree, &rates, s)?.matrix.into_matrix());
                }
            }
            let mut out = json!({
                "mechanism": mechanism, "t": t, "s": s, "replicates": replicates,
                "mean_z": z.mean, "mean_z_se": z.stderr(),
                "ubar_ratio": flow.ubar(s)? / flow.ubar(t)?,
                "mean_w": w.mean, "mean_w_se": w.stderr(),
            });
            if !matrices.is_empty() {
                let dir = output_dir(output);
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("genealogies.csv");
                std::fs::write(&path, matrices_to_csv(&matrices)?)?;
                out["genealogies"] = json!(path.display().to_string());
            }
            print(&out)?;
            Ok(true)
        }
        CsbpCommand::EntranceCheck { mechanism, t, thetas, replicates, seed, threshold } => {
            let mech = parse_mechanism(&mechanism)?;
            let rows = entrance_law_check(&mech, t, &thetas, replicates, seed)?;
            let thr = bonferroni_threshold(threshold, rows.len());
            let ok = rows.iter().all(|r| r.z.abs() <= thr);
            print(&json!({"threshold": thr, "rows": rows, "pass": ok}))?;
            Ok(ok)
        }
    }
}

fn bbm(a: BbmArgs) -> Result<bool> {
    let pot = parse_potential(&a.potential)?;
    let sol = solve_slp(&pot, a.l, 1e-12)?;
    let cfg = BbmConfig::from_solution(&sol)?;
    let h = Harmonics::new(&sol);
    let mut times: Vec<f64> = a.times.iter().copied().filter(|&s| s < a.t).collect();
    times.push(a.t);
    let mut size = vec![Accumulator::new(); times.len()];
    let mut mart = vec![Accumulator::new(); times.len()];
    for i in 0..a.replicates {
        let obs = Observables { harmonics: Some(&h), ..Default::default() };
        let out = run(&cfg, a.x, a.t, &times, &obs, &mut stream(a.seed, "cli-bbm", i as u64))?;
        for (j, o) in out.series.iter().enumerate().take(times.len()) {
            size[j].push(o.z as f64);
            mart[j].push(o.w_additive * (sol.w * o.t).exp() / h.h(a.x));
        }
    }
    let thr = bonferroni_threshold(a.threshold, times.len());
    let rows: Vec<Value> = times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let z = (mart[j].mean - 1.0) / mart[j].stderr();
            json!({"t": t, "mean_size": size[j].mean, "normalized_martingale": mart[j].mean, "se": mart[j].stderr(), "z": z, "pass": z.abs() <= thr})
        })
        .collect();
    let ok = rows.iter().all(|r| r["pass"].as_bool() == Some(true));
    let pairs = many_to_few_lhs(&cfg, &h, a.x, 2, a.t, &Functional::one(2), a.replicates, a.seed ^ 0x5eed)?;
    print(&json!({"w": sol.w, "h_x": h.h(a.x), "threshold": thr, "rows": rows, "distinct_pairs": pairs.mean, "distinct_pairs_se": pairs.stderr(), "pass": ok}))?;
    Ok(ok)
}

fn spine(c: SpineCommand) -> Result<bool> {
    match c {
        SpineCommand::Mix { potential, l, x0, times, replicates, bins, seed } => {
            let sol = solve_slp(&parse_potential(&potential)?, l, 1e-12)?;
            let cfg = SpineConfig::new(&sol)?;
            let rows = mixing_diagnostics(&cfg, x0, &times, replicates, bins, seed)?;
            print(&json!({"rows": rows}))?;
            Ok(true)
        }
        SpineCommand::Kspine { potential, l, x, k, t, outer, seed } => {
            let sol = solve_slp(&parse_potential(&potential)?, l, 1e-12)?;
            let cfg = SpineConfig::new(&sol)?;
            let est = k_spine(&cfg, x, k, t, &Functional::one(k), &KSpineBudget::with_outer(outer), seed)?;
            print(&serde_json::to_value(&est)?)?;
            Ok(true)
        }
        SpineCommand::JumpMoments { alpha, k, a, lengths, replicates, seed } => {
            let pot = Potential::step_for_alpha(alpha, 1.0)?;
            if lengths.is_empty() {
                let lim = LimitSolution::new(&pot)?;
                let proc = ReversedProcess::from_limit(&lim)?;
                let table = ReversedMomentTable::new(&proc, k, 1.0, 1.0 / 256.0)?;
                let m1 = jump_moment_limit(&proc, k, a, &table)?;
                let m2 = jump_moment_limit(&proc, k, 2.0 * a, &table)?;
                let target = 2f64.powf(k as f64 - proc.alpha);
                let ok = (m2 / m1 - target).abs() <= 1e-6 * target;
                print(&json!({"k": k, "a": a, "limit": m1, "limit_2a": m2, "ratio": m2 / m1, "expected_ratio": target, "pass": ok}))?;
                return Ok(ok);
            }
            if lengths.iter().any(|&l| !(l > 1.0)) {
                bail!("lengths must exceed the step width 1");
            }
            let sols: Result<Vec<_>, _> = lengths.iter().map(|&l| solve_slp(&pot, l, 1e-12)).collect();
            let table = jump_moment(k, a, &sols?, replicates, seed)?;
            print(&serde_json::to_value(&table)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
