//! Lagrangian solver: the solution is carried by weighted curves
//! (ẋ = f, ẇ = g·w), the self-consistent field is found by Picard iteration,
//! and candidate flows can be checked against the weak formulation.

use crate::error::{BalanceError, Result};
use crate::measures::{prw_direct, DiscreteMeasure};
use crate::problem::BalanceProblem;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One group of identical particles: `prob_mass` is the fraction k/N of the
/// ensemble following this path. Curves from the same start coincide for all
/// time (the dynamics is deterministic), so grouping loses nothing and keeps
/// ensembles small no matter how large N is.
#[derive(Debug, Clone)]
pub struct Curve {
    pub prob_mass: f64,
    pub positions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WeightedCurveEnsemble {
    pub time_grid: Vec<f64>,
    pub curves: Vec<Curve>,
}

/// A time grid of measures; what the solvers exchange and compare.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub time_grid: Vec<f64>,
    pub measures: Vec<DiscreteMeasure>,
}

impl MeasureFlow {
    pub fn constant(time_grid: Vec<f64>, m: DiscreteMeasure) -> Self {
        let measures = vec![m; time_grid.len()];
        Self { time_grid, measures }
    }

    pub fn final_measure(&self) -> &DiscreteMeasure {
        self.measures.last().expect("flow holds at least one measure")
    }

    pub fn measure_near(&self, t: f64) -> &DiscreteMeasure {
        let i = nearest_index(&self.time_grid, t);
        &self.measures[i]
    }

    /// Measure at an arbitrary time: the convex combination
    /// (1−θ)·m(t_k) + θ·m(t_{k+1}) of the bracketing grid measures. For
    /// fields that read m through linear functionals (mass, moments — all of
    /// the catalog) this is exact linear-in-t interpolation.
    pub fn interpolate(&self, t: f64) -> Result<DiscreteMeasure> {
        let grid = &self.time_grid;
        if t <= grid[0] {
            return Ok(self.measures[0].clone());
        }
        if t >= *grid.last().unwrap() {
            return Ok(self.measures.last().unwrap().clone());
        }
        let k = match grid.binary_search_by(|g| g.total_cmp(&t)) {
            Ok(i) => return Ok(self.measures[i].clone()),
            Err(i) => i - 1,
        };
        let theta = (t - grid[k]) / (grid[k + 1] - grid[k]);
        let dim = self.measures[k].dim();
        DiscreteMeasure::new(
            dim,
            self.measures[k]
                .atoms()
                .iter()
                .map(|a| (a.point.clone(), a.weight * (1.0 - theta)))
                .chain(
                    self.measures[k + 1]
                        .atoms()
                        .iter()
                        .map(|a| (a.point.clone(), a.weight * theta)),
                ),
        )
    }

    /// sup over shared grid times of the transport distance to `other`.
    pub fn sup_distance(&self, other: &MeasureFlow, b: f64) -> Result<f64> {
        if self.time_grid.len() != other.time_grid.len() {
            return Err(BalanceError::InvalidInput("flows live on different grids".into()));
        }
        let mut worst = 0.0f64;
        for (a, c) in self.measures.iter().zip(&other.measures) {
            worst = worst.max(prw_direct(a, c, b)?);
        }
        Ok(worst)
    }
}

fn nearest_index(grid: &[f64], t: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - t).abs().total_cmp(&(*b - t).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Deterministic N-particle reading of m₀: each atom gets a group whose
/// particle count is its weight share of N, rounded by largest remainder.
/// Returns (start point, prob_mass = count/N) with zero-count atoms dropped.
pub fn quantize_initial(m0: &DiscreteMeasure, n: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    if n == 0 || m0.is_empty() {
        return Err(BalanceError::InvalidInput("need N ≥ 1 and a nonempty initial measure".into()));
    }
    let weights: Vec<f64> = m0.atoms().iter().map(|a| a.weight).collect();
    let counts = crate::measures::transport::quantize_masses(&weights, n as u64);
    Ok(m0
        .atoms()
        .iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(a, c)| (a.point.clone(), c as f64 / n as f64))
        .collect())
}

/// I.i.d. sampling of N start points from ‖m₀‖⁻¹·m₀, grouped by atom.
pub fn sample_initial(m0: &DiscreteMeasure, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>> {
    if n == 0 || m0.is_empty() {
        return Err(BalanceError::InvalidInput("need N ≥ 1 and a nonempty initial measure".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = m0.total_mass();
    let mut counts = vec![0usize; m0.atoms().len()];
    for _ in 0..n {
        let mut u = rng.gen_range(0.0..total);
        for (i, a) in m0.atoms().iter().enumerate() {
            if u < a.weight || i + 1 == counts.len() {
                counts[i] += 1;
                break;
            }
            u -= a.weight;
        }
    }
    Ok(m0
        .atoms()
        .iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(a, c)| (a.point.clone(), c as f64 / n as f64))
        .collect())
}

/// The measure Σᵢ pᵢ·wᵢ(t)·δ_{xᵢ(t)} at every grid time.
pub fn evaluate_flow(ensemble: &WeightedCurveEnsemble) -> Result<MeasureFlow> {
    let dim = ensemble
        .curves
        .first()
        .map(|c| c.positions[0].len())
        .ok_or_else(|| BalanceError::InvalidInput("empty ensemble".into()))?;
    let mut measures = Vec::with_capacity(ensemble.time_grid.len());
    for k in 0..ensemble.time_grid.len() {
        measures.push(DiscreteMeasure::new(
            dim,
            ensemble
                .curves
                .iter()
                .map(|c| (c.positions[k].clone(), c.prob_mass * c.weights[k])),
        )?);
    }
    Ok(MeasureFlow { time_grid: ensemble.time_grid.clone(), measures })
}

/// Integrates ẋ = f(t, x, m(t)), ẇ = g(t, x, m(t))·w for every start point by
/// RK4 on the flow's grid, with the field frozen to `flow`. Initial weights
/// are ‖m₀‖ for every curve.
pub fn propagate(
    problem: &BalanceProblem,
    flow: &MeasureFlow,
    initial_points: &[(Vec<f64>, f64)],
) -> Result<WeightedCurveEnsemble> {
    let w0 = problem.initial.total_mass();
    let starts: Vec<(Vec<f64>, f64, f64)> = initial_points
        .iter()
        .map(|(p, pm)| (p.clone(), *pm, w0))
        .collect();
    propagate_from(problem, flow, &starts)
}

/// As [`propagate`] but with per-curve initial weights; used to glue Picard
/// passes on split horizons.
fn propagate_from(
    problem: &BalanceProblem,
    flow: &MeasureFlow,
    starts: &[(Vec<f64>, f64, f64)],
) -> Result<WeightedCurveEnsemble> {
    if starts.is_empty() {
        return Err(BalanceError::InvalidInput("no initial points".into()));
    }
    let grid = &flow.time_grid;
    if grid.len() < 2 {
        return Err(BalanceError::InvalidInput("flow grid needs at least two times".into()));
    }
    let dt_max = grid.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
    if dt_max * problem.c_g > crate::ode::STEP_GUARD {
        return Err(BalanceError::StepGuard(format!(
            "Δt·C_g = {:.3e} exceeds {}",
            dt_max * problem.c_g,
            crate::ode::STEP_GUARD
        )));
    }

    let d = problem.dim;
    let mut curves: Vec<Curve> = starts
        .iter()
        .map(|(p, pm, w)| Curve {
            prob_mass: *pm,
            positions: vec![p.clone()],
            weights: vec![*w],
        })
        .collect();

    let mut xs = vec![0.0; d];
    for k in 0..grid.len() - 1 {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let dt = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        let m0 = &flow.measures[k];
        let mm = flow.interpolate(tm)?;
        let m1 = &flow.measures[k + 1];

        let stages = [
            (t0, problem.velocity.prepare(t0, m0), problem.growth.prepare(t0, m0)),
            (tm, problem.velocity.prepare(tm, &mm), problem.growth.prepare(tm, &mm)),
            (t1, problem.velocity.prepare(t1, m1), problem.growth.prepare(t1, m1)),
        ];

        for c in &mut curves {
            let x = c.positions[k].clone();
            let w = c.weights[k];

            // RK4 stages on (x, w); stage s ∈ {0: t0, 1: mid, 2: t1}
            let mut kx = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            let mut kw = [0.0; 4];
            for (s, (stage, shift)) in [(0usize, 0.0), (1, 0.5), (1, 0.5), (2, 1.0)]
                .iter()
                .enumerate()
            {
                let (prev_x, prev_w) = if s == 0 {
                    (x.clone(), w)
                } else {
                    let px: Vec<f64> = x
                        .iter()
                        .zip(&kx[s - 1])
                        .map(|(a, k)| a + shift * dt * k)
                        .collect();
                    (px, w + shift * dt * kw[s - 1])
                };
                let (_, vel, gr) = &stages[*stage];
                vel(&prev_x, &mut xs);
                kx[s].copy_from_slice(&xs);
                kw[s] = gr(&prev_x) * prev_w;
            }

            let next_x: Vec<f64> = (0..d)
                .map(|i| x[i] + dt / 6.0 * (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]))
                .collect();
            let next_w = (w + dt / 6.0 * (kw[0] + 2.0 * kw[1] + 2.0 * kw[2] + kw[3])).max(0.0);
            c.positions.push(next_x);
            c.weights.push(next_w);
        }
    }

    Ok(WeightedCurveEnsemble { time_grid: grid.clone(), curves })
}

/// How the first Picard iterate is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PicardInit {
    /// field frozen to the (quantized) initial measure, constant in time
    FrozenInitial,
    /// field frozen to the zero measure
    ZeroField,
}

#[derive(Debug)]
pub struct PicardOutcome {
    pub ensemble: WeightedCurveEnsemble,
    pub flow: MeasureFlow,
    pub iterations: usize,
    pub residual: f64,
    /// residual after each iteration, in order (splits concatenated)
    pub residual_history: Vec<f64>,
}

/// Fixed-point iteration of propagate ∘ evaluate_flow from the frozen-initial
/// field, with deterministic initial quantization. Converges when the sup
/// transport distance between consecutive flows drops below `tol`
/// (pass `tol ≤ 0` for the default 1e−6·‖m₀‖).
pub fn picard_solve(
    problem: &BalanceProblem,
    n: usize,
    steps: usize,
    tol: f64,
    max_iter: usize,
) -> Result<PicardOutcome> {
    picard_solve_init(problem, n, steps, tol, max_iter, PicardInit::FrozenInitial, None)
}

pub fn picard_solve_init(
    problem: &BalanceProblem,
    n: usize,
    steps: usize,
    tol: f64,
    max_iter: usize,
    init: PicardInit,
    sample_seed: Option<u64>,
) -> Result<PicardOutcome> {
    let tol = if tol > 0.0 { tol } else { 1e-6 * problem.initial.total_mass() };
    let points = match sample_seed {
        Some(seed) => sample_initial(&problem.initial, n, seed)?,
        None => quantize_initial(&problem.initial, n)?,
    };
    let w0 = problem.initial.total_mass();
    let starts: Vec<(Vec<f64>, f64, f64)> =
        points.into_iter().map(|(p, pm)| (p, pm, w0)).collect();
    let grid: Vec<f64> = (0..=steps)
        .map(|k| problem.horizon * k as f64 / steps as f64)
        .collect();
    let (ensemble, iterations, residual, residual_history) =
        picard_interval(problem, &grid, &starts, tol, max_iter, init, 0)?;
    let flow = evaluate_flow(&ensemble)?;
    Ok(PicardOutcome { ensemble, flow, iterations, residual, residual_history })
}

/// One Picard pass on a (sub)grid. If the residual ever increases, the
/// interval is split at its midpoint and the two halves are solved
/// separately and glued, mirroring the continuation argument behind
/// fixed-point existence on long horizons.
fn picard_interval(
    problem: &BalanceProblem,
    grid: &[f64],
    starts: &[(Vec<f64>, f64, f64)],
    tol: f64,
    max_iter: usize,
    init: PicardInit,
    depth: usize,
) -> Result<(WeightedCurveEnsemble, usize, f64, Vec<f64>)> {
    let b = problem.default_b();
    let dim = problem.dim;

    let init_measure = match init {
        PicardInit::FrozenInitial => DiscreteMeasure::new(
            dim,
            starts.iter().map(|(p, pm, w)| (p.clone(), pm * w)),
        )?,
        PicardInit::ZeroField => DiscreteMeasure::empty(dim),
    };
    let seed_flow = MeasureFlow::constant(grid.to_vec(), init_measure);
    let mut ensemble = propagate_from(problem, &seed_flow, starts)?;
    let mut flow = evaluate_flow(&ensemble)?;
    let mut prev_residual = f64::INFINITY;
    let mut history = Vec::new();

    for iter in 1..=max_iter {
        let next_ensemble = propagate_from(problem, &flow, starts)?;
        let next_flow = evaluate_flow(&next_ensemble)?;
        let residual = flow.sup_distance(&next_flow, b)?;
        ensemble = next_ensemble;
        flow = next_flow;
        history.push(residual);
        if residual < tol {
            return Ok((ensemble, iter, residual, history));
        }
        if residual > prev_residual {
            if depth >= 3 {
                return Err(BalanceError::NoConvergence { iterations: iter, residual });
            }
            return split_horizon(problem, grid, starts, tol, max_iter, init, depth);
        }
        prev_residual = residual;
    }
    Err(BalanceError::NoConvergence { iterations: max_iter, residual: prev_residual })
}

fn split_horizon(
    problem: &BalanceProblem,
    grid: &[f64],
    starts: &[(Vec<f64>, f64, f64)],
    tol: f64,
    max_iter: usize,
    init: PicardInit,
    depth: usize,
) -> Result<(WeightedCurveEnsemble, usize, f64, Vec<f64>)> {
    let mid = grid.len() / 2;
    if mid == 0 || mid + 1 >= grid.len() {
        return Err(BalanceError::NoConvergence { iterations: max_iter, residual: f64::NAN });
    }
    let (first, i1, r1, h1) =
        picard_interval(problem, &grid[..=mid], starts, tol, max_iter, init, depth + 1)?;
    let handoff: Vec<(Vec<f64>, f64, f64)> = first
        .curves
        .iter()
        .map(|c| {
            (
                c.positions.last().unwrap().clone(),
                c.prob_mass,
                *c.weights.last().unwrap(),
            )
        })
        .collect();
    let (second, i2, r2, h2) =
        picard_interval(problem, &grid[mid..], &handoff, tol, max_iter, init, depth + 1)?;

    let mut curves = first.curves;
    for (c, tail) in curves.iter_mut().zip(second.curves) {
        c.positions.extend(tail.positions.into_iter().skip(1));
        c.weights.extend(tail.weights.into_iter().skip(1));
    }
    let mut history = h1;
    history.extend(h2);
    Ok((
        WeightedCurveEnsemble { time_grid: grid.to_vec(), curves },
        i1 + i2,
        r1.max(r2),
        history,
    ))
}

/// A C¹ test function φ(t, x) with its gradient and time derivative.
pub struct TestFunction {
    pub value: Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    pub grad: Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
    pub dt: Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
}

/// Static C¹ bump ((1 − u²)² for u = ‖x − c‖/r, 0 beyond), equal to 1 at the
/// center and compactly supported in the ball of radius r.
pub fn bump(center: Vec<f64>, radius: f64) -> TestFunction {
    moving_bump(center, radius, Vec::new())
}

/// Bump translated with constant velocity v: φ(t, x) = ψ(x − c − v·t).
/// Pass an empty velocity for a static bump.
pub fn moving_bump(center: Vec<f64>, radius: f64, velocity: Vec<f64>) -> TestFunction {
    let d = center.len();
    let vel = if velocity.is_empty() { vec![0.0; d] } else { velocity };
    assert_eq!(vel.len(), d);

    let shifted = {
        let center = center.clone();
        let vel = vel.clone();
        move |t: f64, x: &[f64]| -> Vec<f64> {
            (0..x.len()).map(|i| x[i] - center[i] - vel[i] * t).collect()
        }
    };
    let psi = move |z: &[f64], radius: f64| -> f64 {
        let u2 = z.iter().map(|c| c * c).sum::<f64>() / (radius * radius);
        if u2 >= 1.0 {
            0.0
        } else {
            (1.0 - u2) * (1.0 - u2)
        }
    };

    let sh1 = shifted.clone();
    let sh2 = shifted.clone();
    let sh3 = shifted;
    let vel_dt = vel;
    TestFunction {
        value: Box::new(move |t, x| psi(&sh1(t, x), radius)),
        grad: Box::new(move |t, x, out| {
            let z = sh2(t, x);
            let u2 = z.iter().map(|c| c * c).sum::<f64>() / (radius * radius);
            if u2 >= 1.0 {
                out.fill(0.0);
            } else {
                let factor = -4.0 * (1.0 - u2) / (radius * radius);
                for (o, zi) in out.iter_mut().zip(&z) {
                    *o = factor * zi;
                }
            }
        }),
        dt: Box::new(move |t, x| {
            let z = sh3(t, x);
            let u2 = z.iter().map(|c| c * c).sum::<f64>() / (radius * radius);
            if u2 >= 1.0 {
                0.0
            } else {
                let factor = -4.0 * (1.0 - u2) / (radius * radius);
                -factor * z.iter().zip(&vel_dt).map(|(zi, vi)| zi * vi).sum::<f64>()
            }
        }),
    }
}

/// For each test function, the worst (over grid times s) defect of the weak
/// formulation:
/// |∫φ(s)dm(s) − ∫φ(0)dm₀ − ∫₀ˢ∫(∂_tφ + ⟨∇φ, f⟩ + φ·g) dm(t) dt|
/// with trapezoidal quadrature in t.
pub fn weak_residual(
    problem: &BalanceProblem,
    flow: &MeasureFlow,
    test_functions: &[TestFunction],
) -> Result<Vec<f64>> {
    let d = problem.dim;
    let grid = &flow.time_grid;
    let mut out = Vec::with_capacity(test_functions.len());

    for tf in test_functions {
        // integrand value per grid time
        let mut integrand = Vec::with_capacity(grid.len());
        let mut gradbuf = vec![0.0; d];
        let mut f = vec![0.0; d];
        for (k, &t) in grid.iter().enumerate() {
            let m = &flow.measures[k];
            let vel = problem.velocity.prepare(t, m);
            let gr = problem.growth.prepare(t, m);
            let mut acc = 0.0;
            for a in m.atoms() {
                let phi = (tf.value)(t, &a.point);
                (tf.grad)(t, &a.point, &mut gradbuf);
                vel(&a.point, &mut f);
                let adv: f64 = gradbuf.iter().zip(&f).map(|(g, v)| g * v).sum();
                acc += a.weight * ((tf.dt)(t, &a.point) + adv + phi * gr(&a.point));
            }
            integrand.push(acc);
        }

        let pair = |k: usize| -> f64 {
            flow.measures[k]
                .atoms()
                .iter()
                .map(|a| a.weight * (tf.value)(grid[k], &a.point))
                .sum()
        };
        let base = pair(0);
        let mut integral = 0.0;
        let mut worst = 0.0f64;
        for k in 1..grid.len() {
            integral += 0.5 * (integrand[k - 1] + integrand[k]) * (grid[k] - grid[k - 1]);
            worst = worst.max((pair(k) - base - integral).abs());
        }
        out.push(worst);
    }
    Ok(out)
}
