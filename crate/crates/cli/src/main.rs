//! `balance` — command-line front end for the nonlocal balance-equation
//! solvers: distance queries, lattice inspection, the three solvers, and the
//! convergence/cross-validation harness.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use balance_core::harness::{
    convergence_study, cross_validate, project_initial, RefSpec,
};
use balance_core::lattice::{
    build_lattice, check_qs, epsilon_for, upwind_matrix, ProblemRates,
};
use balance_core::measures::{prw_augmented, prw_direct, DiscreteMeasure};
use balance_core::ode::{self, LatticeFlow};
use balance_core::problem::{scenario, BalanceProblem, SCENARIO_NAMES};
use balance_core::stochastic::{simulate_chain, simulate_coupled};
use balance_core::superposition::{picard_solve, MeasureFlow};

#[derive(Parser)]
#[command(name = "balance", about = "nonlocal balance equation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distance between two measure files
    Prw {
        measure1: PathBuf,
        measure2: PathBuf,
        /// creation/destruction cost
        #[arg(long)]
        b: f64,
        /// augmented total mass (required for the augmented method)
        #[arg(long, short = 'R')]
        r: Option<f64>,
        #[arg(long, default_value = "direct")]
        method: Method,
    },
    /// Lattice and rate-matrix reports
    Lattice {
        #[command(subcommand)]
        action: LatticeAction,
    },
    /// Integrate the lattice ODE system
    SolveLattice {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// track the remote point and conserve the augmented total
        #[arg(long)]
        extended: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve by weighted-particle fixed-point iteration
    SolveParticles {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long, short = 'N')]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// where to write the per-iteration residual log
        #[arg(long)]
        residual_log: Option<PathBuf>,
    },
    /// Simulate the mean-field jump chain
    SimulateMc {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, short = 'N')]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the coupled pair process and report the gap diagnostic
    SimulateCoupled {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, short = 'N')]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lattice-spacing convergence study against a reference flow
    Convergence {
        #[command(flatten)]
        scn: ScenarioArgs,
        /// comma-separated spacings, strictly decreasing
        #[arg(long, value_delimiter = ',')]
        h_list: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        ref_n: usize,
        #[arg(long, default_value_t = 2000)]
        ref_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three solvers and compare them pairwise
    CrossValidate {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, short = 'N')]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// comma-separated chain seeds
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// error constant for the deterministic tolerance class
        #[arg(long, default_value_t = 2.0)]
        c_hat: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LatticeAction {
    /// Emit the lattice, its consistency report, and optionally the rate matrix
    Inspect {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        /// write the movement matrix as sparse triplets (row, col, rate)
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
}

#[derive(Clone, clap::ValueEnum)]
enum Method {
    Direct,
    Augmented,
    Both,
}

#[derive(Args)]
struct ScenarioArgs {
    /// catalog scenario name
    #[arg(long)]
    scenario: Option<String>,
    /// JSON file: {"scenario": name, "overrides": {"T": .., "h": .., ...}}
    #[arg(long)]
    scenario_file: Option<PathBuf>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct Overrides {
    #[serde(rename = "T")]
    t: Option<f64>,
    h: Option<f64>,
    #[serde(rename = "N")]
    n: Option<usize>,
    seed: Option<u64>,
    b: Option<f64>,
    steps: Option<usize>,
    tol: Option<f64>,
    replicas: Option<usize>,
}

#[derive(Deserialize)]
struct ScenarioFile {
    scenario: String,
    #[serde(default)]
    overrides: Overrides,
}

impl ScenarioArgs {
    fn load(&self) -> Result<(BalanceProblem, Overrides), String> {
        let (name, ov) = match (&self.scenario, &self.scenario_file) {
            (Some(n), None) => (n.clone(), Overrides::default()),
            (None, Some(path)) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                let sf: ScenarioFile =
                    serde_json::from_str(&text).map_err(|e| format!("bad scenario file: {e}"))?;
                (sf.scenario, sf.overrides)
            }
            (Some(_), Some(_)) => {
                return Err("pass either --scenario or --scenario-file, not both".into())
            }
            (None, None) => {
                return Err(format!(
                    "a scenario is required; known: {}",
                    SCENARIO_NAMES.join(", ")
                ))
            }
        };
        let mut p = scenario(&name).map_err(|e| e.to_string())?;
        if let Some(t) = ov.t {
            if !(t > 0.0) {
                return Err("override T must be positive".into());
            }
            p.horizon = t;
        }
        Ok((p, ov))
    }
}

fn read_measure(path: &Path) -> Result<DiscreteMeasure, String> {
    #[derive(Deserialize)]
    struct Record {
        point: Vec<f64>,
        weight: f64,
    }
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let records: Vec<Record> =
        serde_json::from_str(&text).map_err(|e| format!("bad measure file: {e}"))?;
    let dim = records
        .first()
        .map(|r| r.point.len())
        .ok_or_else(|| format!("{}: empty measure file", path.display()))?;
    DiscreteMeasure::new(dim, records.into_iter().map(|r| (r.point, r.weight)))
        .map_err(|e| e.to_string())
}

fn write_lattice_flow(path: &Path, flow: &LatticeFlow) -> Result<(), String> {
    let mut out = String::from("t,state,weight\n");
    for (k, t) in flow.time_grid.iter().enumerate() {
        let s = &flow.states[k];
        for (i, w) in s.values.iter().enumerate() {
            if *w != 0.0 {
                out.push_str(&format!("{t},{i},{w}\n"));
            }
        }
        if let Some(star) = s.star {
            out.push_str(&format!("{t},⋆,{star}\n"));
        }
    }
    fs::write(path, out).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_measure_flow(path: &Path, flow: &MeasureFlow) -> Result<(), String> {
    let mut out = String::from("t,state,weight\n");
    for (k, t) in flow.time_grid.iter().enumerate() {
        for (i, a) in flow.measures[k].atoms().iter().enumerate() {
            out.push_str(&format!("{t},{i},{}\n", a.weight));
        }
    }
    fs::write(path, out).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Default integrator step count obeying the stability guards for spacing h.
fn default_steps(p: &BalanceProblem, h: f64) -> usize {
    balance_core::harness::steps_for(p, h)
}

fn chain_steps(p: &BalanceProblem, h: f64) -> usize {
    default_steps(p, h) * 5
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Prw { measure1, measure2, b, r, method } => {
            let m1 = read_measure(&measure1)?;
            let m2 = read_measure(&measure2)?;
            let direct = || prw_direct(&m1, &m2, b).map_err(|e| e.to_string());
            let augmented = || -> Result<f64, String> {
                let r = r.unwrap_or_else(|| 2.0 * m1.total_mass().max(m2.total_mass()) + 1.0);
                prw_augmented(&m1, &m2, b, r).map_err(|e| e.to_string())
            };
            match method {
                Method::Direct => println!("direct {}", direct()?),
                Method::Augmented => println!("augmented {}", augmented()?),
                Method::Both => {
                    let (d, a) = (direct()?, augmented()?);
                    println!("direct {d}");
                    println!("augmented {a}");
                    println!("difference {:e}", (d - a).abs());
                }
            }
            Ok(())
        }

        Command::Lattice { action: LatticeAction::Inspect { scn, h, probes, matrix_out } } => {
            let (p, ov) = scn.load()?;
            let h = h.or(ov.h).unwrap_or(0.1);
            let lat = build_lattice(&p.domain, h).map_err(|e| e.to_string())?;
            println!("scenario {}", p.name);
            println!("points {}", lat.len());
            println!("spacing {h}");
            println!("fineness {}", lat.fineness());
            println!("diameter {}", lat.diameter());
            let eps = epsilon_for(&p, h);
            let rates = ProblemRates { problem: &p, lattice: &lat };
            let rep =
                check_qs(&p, &lat, &rates, eps, probes, ov.seed.unwrap_or(0)).map_err(|e| e.to_string())?;
            println!("epsilon {eps}");
            println!("covering worst {} pass {}", rep.qs1_worst, rep.qs1_pass);
            println!("drift worst {} pass {}", rep.qs2_worst, rep.qs2_pass);
            println!("variation worst {} pass {}", rep.qs3_worst, rep.qs3_pass);
            if let Some(path) = matrix_out {
                let beta = project_initial(&p.initial, &lat);
                let q = upwind_matrix(&p, &lat, 0.0, &beta).map_err(|e| e.to_string())?;
                let mut out = String::from("row,col,rate\n");
                for i in 0..q.n() {
                    for &(j, v) in q.row(i) {
                        out.push_str(&format!("{i},{j},{v}\n"));
                    }
                }
                fs::write(&path, out)
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            if !rep.pass() {
                return Err("lattice consistency report failed".into());
            }
            Ok(())
        }

        Command::SolveLattice { scn, h, steps, extended, out } => {
            let (p, ov) = scn.load()?;
            let h = h.or(ov.h).unwrap_or(0.1);
            let steps = steps.or(ov.steps).unwrap_or_else(|| default_steps(&p, h));
            let lat = build_lattice(&p.domain, h).map_err(|e| e.to_string())?;
            let beta0 = project_initial(&p.initial, &lat);
            let r = p.choose_r();
            let flow =
                ode::integrate(&p, &lat, &beta0, steps, extended, r).map_err(|e| e.to_string())?;
            write_lattice_flow(&out, &flow)?;
            println!("final mass {}", flow.final_state().lattice_mass());
            Ok(())
        }

        Command::SolveParticles { scn, n, steps, tol, out, residual_log } => {
            let (p, ov) = scn.load()?;
            let n = n.or(ov.n).unwrap_or(1000);
            let steps = steps.or(ov.steps).unwrap_or(400);
            let tol = tol.or(ov.tol).unwrap_or(0.0);
            let outcome = picard_solve(&p, n, steps, tol, 50).map_err(|e| e.to_string())?;
            write_measure_flow(&out, &outcome.flow)?;
            if let Some(path) = residual_log {
                let mut log = String::from("iteration,residual\n");
                for (i, r) in outcome.residual_history.iter().enumerate() {
                    log.push_str(&format!("{},{r}\n", i + 1));
                }
                fs::write(&path, log)
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            println!("iterations {}", outcome.iterations);
            println!("residual {}", outcome.residual);
            println!("final mass {}", outcome.flow.final_measure().total_mass());
            Ok(())
        }

        Command::SimulateMc { scn, h, n, steps, seed, replicas, out } => {
            let (p, ov) = scn.load()?;
            let h = h.or(ov.h).unwrap_or(0.1);
            let n = n.or(ov.n).unwrap_or(10_000);
            let steps = steps.or(ov.steps).unwrap_or_else(|| chain_steps(&p, h));
            let seed = seed.or(ov.seed).unwrap_or(0);
            let replicas = ov.replicas.unwrap_or(replicas).max(1);
            let lat = build_lattice(&p.domain, h).map_err(|e| e.to_string())?;
            let beta0 = project_initial(&p.initial, &lat);
            let r = p.choose_r();
            let flows: Vec<LatticeFlow> = (0..replicas)
                .map(|k| simulate_chain(&p, &lat, &beta0, n, steps, r, seed + k as u64))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let mut csv = String::from("t,state,mean_weight,stderr\n");
            let grid = &flows[0].time_grid;
            for (k, t) in grid.iter().enumerate() {
                for i in 0..=lat.len() {
                    let samples: Vec<f64> = flows
                        .iter()
                        .map(|f| {
                            let s = &f.states[k];
                            if i < lat.len() { s.values[i] } else { s.star.unwrap_or(0.0) }
                        })
                        .collect();
                    let (mean, se) = mean_stderr(&samples);
                    if mean != 0.0 || se != 0.0 {
                        let label =
                            if i < lat.len() { i.to_string() } else { "⋆".to_string() };
                        csv.push_str(&format!("{t},{label},{mean},{se}\n"));
                    }
                }
            }
            fs::write(&out, csv).map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            let final_mass = flows.iter().map(|f| f.final_state().lattice_mass()).sum::<f64>()
                / replicas as f64;
            println!("replicas {replicas}");
            println!("final mass {final_mass}");
            Ok(())
        }

        Command::SimulateCoupled { scn, h, n, steps, seed, replicas, out } => {
            let (p, ov) = scn.load()?;
            let h = h.or(ov.h).unwrap_or(0.1);
            let n = n.or(ov.n).unwrap_or(10_000);
            let steps = steps.or(ov.steps).unwrap_or_else(|| chain_steps(&p, h));
            let seed = seed.or(ov.seed).unwrap_or(0);
            let replicas = ov.replicas.unwrap_or(replicas).max(1);
            let lat = build_lattice(&p.domain, h).map_err(|e| e.to_string())?;
            let beta0 = project_initial(&p.initial, &lat);
            let r = p.choose_r();
            let eps = epsilon_for(&p, h);
            let flow_ref = picard_solve(&p, 64, steps, 0.0, 50).map_err(|e| e.to_string())?.flow;
            let runs: Vec<_> = (0..replicas)
                .map(|k| {
                    simulate_coupled(&p, &lat, &flow_ref, &beta0, n, steps, r, eps, seed + k as u64)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let mut csv = String::from("t,gap_mean,gap_stderr,gap_reg_mean,gap_reg_stderr\n");
            for (k, t) in runs[0].time_grid.iter().enumerate() {
                let gaps: Vec<f64> = runs.iter().map(|r| r.gap[k]).collect();
                let regs: Vec<f64> = runs.iter().map(|r| r.gap_regularized[k]).collect();
                let (gm, gs) = mean_stderr(&gaps);
                let (rm, rs) = mean_stderr(&regs);
                csv.push_str(&format!("{t},{gm},{gs},{rm},{rs}\n"));
            }
            fs::write(&out, csv).map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            let last = runs[0].time_grid.len() - 1;
            println!("final gap {}", runs.iter().map(|r| r.gap[last]).sum::<f64>() / replicas as f64);
            Ok(())
        }

        Command::Convergence { scn, h_list, ref_n, ref_steps, out } => {
            let (p, ov) = scn.load()?;
            let b = ov.b.unwrap_or_else(|| p.default_b());
            let reference = RefSpec { particles: ref_n, steps: ref_steps };
            let report = convergence_study(&p, &h_list, &reference, b).map_err(|e| e.to_string())?;
            let mut csv = String::from("h,epsilon,initial_error,error_T,error_sup,runtime_s\n");
            for row in &report.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.h, row.epsilon, row.initial_error, row.error_t, row.error_sup, row.runtime_s
                ));
            }
            csv.push_str(&format!("# slope,{}\n# c_hat,{}\n", report.slope, report.c_hat));
            fs::write(&out, csv).map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            println!("slope {}", report.slope);
            println!("c_hat {}", report.c_hat);
            // the study only has a meaningful order estimate past two rows
            if report.rows.len() >= 3 && !(0.8..=1.2).contains(&report.slope) {
                return Err(format!("fitted slope {} outside [0.8, 1.2]", report.slope));
            }
            Ok(())
        }

        Command::CrossValidate { scn, h, n, steps, seeds, c_hat, out } => {
            let (p, ov) = scn.load()?;
            let h = h.or(ov.h).unwrap_or(0.1);
            let n = n.or(ov.n).unwrap_or(10_000);
            let steps = steps.or(ov.steps).unwrap_or(200);
            let seeds = if seeds.is_empty() { vec![ov.seed.unwrap_or(1)] } else { seeds };
            let report =
                cross_validate(&p, h, n, steps, &seeds, c_hat).map_err(|e| e.to_string())?;
            let mut csv = String::from("t,pair,distance,tolerance,pass\n");
            for row in &report.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.t, row.pair, row.distance, row.tolerance, row.pass
                ));
            }
            match out {
                Some(path) => fs::write(&path, &csv)
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?,
                None => print!("{csv}"),
            }
            if !report.pass() {
                return Err("cross-validation exceeded its tolerance classes".into());
            }
            Ok(())
        }
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            let _ = writeln!(std::io::stderr(), "error: {msg}");
            ExitCode::FAILURE
        }
    }
}
