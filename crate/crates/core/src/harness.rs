//! Convergence studies and cross-solver comparisons: transport-distance error
//! of the lattice flow against a reference solution as the spacing shrinks,
//! and three-way solver agreement with per-pair tolerance classes.

use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

use crate::error::{BalanceError, Result};
use crate::lattice::{build_lattice, epsilon_for, to_measure, Lattice, WeightVector};
use crate::measures::{prw_direct, DiscreteMeasure};
use crate::ode;
use crate::problem::BalanceProblem;
use crate::stochastic::simulate_chain;
use crate::superposition::{picard_solve, MeasureFlow};

/// Assigns each atom of m₀ to its nearest lattice point (ties toward the
/// lexicographically smallest), so the projection error is at most the
/// covering radius times ‖m₀‖.
pub fn project_initial(m0: &DiscreteMeasure, lattice: &Lattice) -> WeightVector {
    let mut beta = WeightVector::zeros(lattice.len());
    for a in m0.atoms() {
        beta.values[lattice.nearest(&a.point)] += a.weight;
    }
    beta
}

/// Reference solution: a closed form when the scenario has one, otherwise a
/// high-resolution particle solve.
pub enum Reference {
    Closed(Box<dyn Fn(f64) -> Result<DiscreteMeasure> + Send + Sync>),
    Sampled(MeasureFlow),
}

impl Reference {
    pub fn at(&self, t: f64) -> Result<DiscreteMeasure> {
        match self {
            Reference::Closed(f) => f(t),
            Reference::Sampled(flow) => flow.interpolate(t),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefSpec {
    pub particles: usize,
    pub steps: usize,
}

impl Default for RefSpec {
    fn default() -> Self {
        Self { particles: 1000, steps: 2000 }
    }
}

/// Builds the reference for a problem: exact flows for the catalog scenarios
/// with closed forms, the Picard solver otherwise.
pub fn reference_for(problem: &BalanceProblem, spec: &RefSpec) -> Result<Reference> {
    let m0 = problem.initial.clone();
    match problem.name.as_str() {
        // δ₀ moving right with unit speed (the taper is out of reach on [0, T])
        "advection1d" => Ok(Reference::Closed(Box::new(move |t| {
            DiscreteMeasure::dirac(vec![t], m0.total_mass())
        }))),
        // mass e^{γt}, γ = 0.5, support fixed
        "pure_growth" => Ok(Reference::Closed(Box::new(move |t| {
            m0.scaled((0.5 * t).exp() / m0.total_mass())
        }))),
        // logistic mass 1/(1 + e^{−t}(‖m₀‖⁻¹ − 1)), support fixed
        "logistic_growth" => {
            let c = 1.0 / m0.total_mass() - 1.0;
            Ok(Reference::Closed(Box::new(move |t| {
                let mass = 1.0 / (1.0 + (-t).exp() * c);
                m0.scaled(mass / m0.total_mass())
            })))
        }
        // unit mass stays; symmetric atoms contract as ±e^{−t}
        "attraction_opinion" => Ok(Reference::Closed(Box::new(move |t| {
            let scale = (-t).exp();
            DiscreteMeasure::new(
                1,
                m0.atoms()
                    .iter()
                    .map(|a| (vec![a.point[0] * scale], a.weight)),
            )
        }))),
        _ => {
            let out = picard_solve(problem, spec.particles, spec.steps, 0.0, 50)?;
            Ok(Reference::Sampled(out.flow))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub epsilon: f64,
    /// transport distance between m₀ and its lattice projection
    pub initial_error: f64,
    /// error at the final time
    pub error_t: f64,
    /// worst error over the time grid
    pub error_sup: f64,
    /// wall-clock seconds for this row (the only non-deterministic field)
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub scenario: String,
    pub b: f64,
    pub rows: Vec<ConvergenceRow>,
    /// log-log slope of error_t against ε
    pub slope: f64,
    /// max over rows of error_t / (ε + initial_error)
    pub c_hat: f64,
}

/// Number of integrator steps keeping the ODE step guard comfortably
/// satisfied for spacing h.
pub fn steps_for(problem: &BalanceProblem, h: f64) -> usize {
    let d = problem.dim as f64;
    let rate = problem.c_f * d.sqrt() / h + problem.c_g;
    ((problem.horizon * rate / 0.25).ceil() as usize).max(64)
}

/// For each spacing: build the lattice, project m₀, integrate, and measure
/// transport errors against the reference at every grid time. Rows run in
/// parallel and are reported in the given order.
pub fn convergence_study(
    problem: &BalanceProblem,
    h_list: &[f64],
    reference: &RefSpec,
    b: f64,
) -> Result<ConvergenceReport> {
    if h_list.is_empty() || h_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(BalanceError::InvalidInput("h_list must be nonempty and strictly decreasing".into()));
    }
    let rf = reference_for(problem, reference)?;

    let rows: Result<Vec<ConvergenceRow>> = h_list
        .par_iter()
        .map(|&h| {
            let start = Instant::now();
            let lattice = build_lattice(&problem.domain, h)?;
            let beta0 = project_initial(&problem.initial, &lattice);
            let initial_error = prw_direct(
                &problem.initial,
                &to_measure(&beta0, &lattice)?,
                b,
            )?;
            let steps = steps_for(problem, h);
            let flow = ode::integrate(problem, &lattice, &beta0, steps, false, 0.0)?;

            // sup over up to 64 evenly spaced grid times plus the endpoint;
            // each comparison is an exact transport solve, so evaluating the
            // full grid would dominate the runtime at fine spacings
            let last = flow.time_grid.len() - 1;
            let stride = (last / 64).max(1);
            let mut error_sup = 0.0f64;
            let mut error_t = 0.0;
            for k in (0..=last).step_by(stride).chain([last]) {
                let m_lat = to_measure(&flow.states[k], &lattice)?;
                let err = prw_direct(&rf.at(flow.time_grid[k])?, &m_lat, b)?;
                error_sup = error_sup.max(err);
                if k == last {
                    error_t = err;
                }
            }
            Ok(ConvergenceRow {
                h,
                epsilon: epsilon_for(problem, h),
                initial_error,
                error_t,
                error_sup,
                runtime_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect();
    let rows = rows?;

    let slope = fit_slope(
        &rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.error_t).collect::<Vec<_>>(),
    );
    let c_hat = rows
        .iter()
        .map(|r| r.error_t / (r.epsilon + r.initial_error))
        .fold(0.0f64, f64::max);

    Ok(ConvergenceReport {
        scenario: problem.name.clone(),
        b,
        rows,
        slope,
        c_hat,
    })
}

/// Least-squares slope of ln(y) against ln(x); NaN when degenerate.
fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(&a, &b)| a > 0.0 && b > 0.0)
        .map(|(&a, &b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossRow {
    pub t: f64,
    pub pair: String,
    pub distance: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossReport {
    pub scenario: String,
    pub epsilon: f64,
    pub c_hat: f64,
    pub rows: Vec<CrossRow>,
}

impl CrossReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Runs the lattice ODE, the particle solver, and the seed-averaged chain on
/// one scenario and reports pairwise transport distances at five checkpoint
/// times. Deterministic pairs must agree to Ĉ·(ε + projection error); pairs
/// involving the chain get an extra 5·N^{−1/2}·‖m₀‖ Monte Carlo allowance.
pub fn cross_validate(
    problem: &BalanceProblem,
    h: f64,
    n: usize,
    steps: usize,
    seeds: &[u64],
    c_hat: f64,
) -> Result<CrossReport> {
    if seeds.is_empty() {
        return Err(BalanceError::InvalidInput("need at least one seed".into()));
    }
    let b = problem.default_b();
    let r = problem.choose_r();
    let epsilon = epsilon_for(problem, h);

    let lattice = build_lattice(&problem.domain, h)?;
    let beta0 = project_initial(&problem.initial, &lattice);
    let init_err = prw_direct(&problem.initial, &to_measure(&beta0, &lattice)?, b)?;

    let ode_steps = steps.max(steps_for(problem, h));
    let lattice_flow = ode::integrate(problem, &lattice, &beta0, ode_steps, false, 0.0)?;
    let picard = picard_solve(problem, n.max(1), steps.max(64), 0.0, 50)?;
    // the chain guard is five times stricter than the ODE guard
    let chain_steps = ode_steps * 5;
    let chains: Result<Vec<_>> = seeds
        .par_iter()
        .map(|&s| simulate_chain(problem, &lattice, &beta0, n, chain_steps, r, s))
        .collect();
    let chains = chains?;

    let det_tol = c_hat * (epsilon + init_err);
    let mc_tol = det_tol + 5.0 * problem.initial.total_mass() / (n as f64).sqrt();

    let mut rows = Vec::new();
    for k in 1..=5 {
        let t = problem.horizon * k as f64 / 5.0;
        let m_lat = to_measure(lattice_flow.state_near(t), &lattice)?;
        let m_par = picard.flow.interpolate(t)?;
        let mean_dist = |m: &DiscreteMeasure| -> Result<f64> {
            let mut acc = 0.0;
            for c in &chains {
                let m_mc = to_measure(c.state_near(t), &lattice)?;
                acc += prw_direct(m, &m_mc, b)?;
            }
            Ok(acc / chains.len() as f64)
        };

        let d_lp = prw_direct(&m_lat, &m_par, b)?;
        rows.push(CrossRow {
            t,
            pair: "lattice-particle".into(),
            distance: d_lp,
            tolerance: det_tol,
            pass: d_lp <= det_tol,
        });
        let d_lc = mean_dist(&m_lat)?;
        rows.push(CrossRow {
            t,
            pair: "lattice-chain".into(),
            distance: d_lc,
            tolerance: mc_tol,
            pass: d_lc <= mc_tol,
        });
        let d_pc = mean_dist(&m_par)?;
        rows.push(CrossRow {
            t,
            pair: "particle-chain".into(),
            distance: d_pc,
            tolerance: mc_tol,
            pass: d_pc <= mc_tol,
        });
    }

    Ok(CrossReport {
        scenario: problem.name.clone(),
        epsilon,
        c_hat,
        rows,
    })
}
