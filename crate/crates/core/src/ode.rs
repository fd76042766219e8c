//! Fixed-step RK4 integration of the lattice system dβ/dt = βQ(t,β) + βG(t,β)
//! and of its conservative form on the states plus the remote point, where
//! growth becomes transport to and from the extra state.

use crate::error::{BalanceError, Result};
use crate::lattice::{
    extend_rates, from_measure, to_measure, Lattice, ProblemRates, RateBuilder, WeightVector,
};
use crate::measures::{AugmentedDistribution, DiscreteMeasure};
use crate::problem::BalanceProblem;

/// Δt · (max exit rate + max |g|) must stay below this for positivity.
pub const STEP_GUARD: f64 = 0.5;
/// Largest roundoff mass (relative to ‖β‖₁) the integrator silently clamps
/// away per step; anything bigger aborts the run.
pub const CLAMP_LIMIT: f64 = 1e-10;
/// Extended runs must conserve total mass R to this relative tolerance.
pub const CONSERVATION_TOL: f64 = 1e-8;

/// Time-indexed lattice states produced by [`integrate`].
#[derive(Debug, Clone)]
pub struct LatticeFlow {
    pub time_grid: Vec<f64>,
    pub states: Vec<WeightVector>,
    /// whether the remote point is tracked (states carry a star entry)
    pub extended: bool,
    /// total roundoff mass clamped to zero over the whole run
    pub clamped_mass: f64,
}

impl LatticeFlow {
    pub fn final_state(&self) -> &WeightVector {
        self.states.last().expect("flow has at least the initial state")
    }

    pub fn measures(&self, lattice: &Lattice) -> Result<Vec<DiscreteMeasure>> {
        self.states.iter().map(|b| to_measure(b, lattice)).collect()
    }

    /// State at the grid time nearest to t.
    pub fn state_near(&self, t: f64) -> &WeightVector {
        let i = self
            .time_grid
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - t).abs().total_cmp(&(*b - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        &self.states[i]
    }
}

/// Right-hand side β·Q(t,β) + β·G(t,β) of the plain lattice system.
pub fn rhs(problem: &BalanceProblem, lattice: &Lattice, t: f64, beta: &WeightVector) -> Result<Vec<f64>> {
    rhs_rates(&ProblemRates { problem, lattice }, t, beta)
}

fn rhs_rates(rates: &dyn RateBuilder, t: f64, beta: &WeightVector) -> Result<Vec<f64>> {
    let clean = sanitize(beta, false);
    let q = rates.movement(t, &clean)?;
    let g = rates.growth(t, &clean)?;
    let mut out = vec![0.0; beta.values.len()];
    q.apply_left(&beta.values, &mut out);
    for ((o, &b), &gi) in out.iter_mut().zip(&beta.values).zip(&g) {
        *o += b * gi;
    }
    Ok(out)
}

fn rhs_extended(rates: &dyn RateBuilder, t: f64, beta: &WeightVector, r: f64) -> Result<Vec<f64>> {
    let clean = sanitize(beta, true);
    let q = rates.movement(t, &clean)?;
    let g = rates.growth(t, &clean)?;
    let n = beta.values.len();
    let (gplus, gminus): (Vec<f64>, Vec<f64>) =
        g.iter().map(|&v| (v.max(0.0), (-v).max(0.0))).unzip();
    let ext = extend_rates(&q, &gplus, &gminus, &clean, r)?;
    let mut state = Vec::with_capacity(n + 1);
    state.extend_from_slice(&beta.values);
    state.push(beta.star.unwrap_or(0.0));
    let mut out = vec![0.0; n + 1];
    ext.apply_left(&state, &mut out);
    Ok(out)
}

/// Rate oracles see nonnegative weights even at interior RK stages, where
/// the state may dip below zero by O(Δt·rhs).
fn sanitize(beta: &WeightVector, star: bool) -> WeightVector {
    WeightVector {
        values: beta.values.iter().map(|&v| v.max(0.0)).collect(),
        star: if star { Some(beta.star.unwrap_or(0.0).max(0.0)) } else { None },
    }
}

pub struct IntegrateOptions {
    pub steps: usize,
    /// integrate on [0, horizon]
    pub horizon: f64,
    /// Some(R): conservative form on states ∪ {⋆} with headroom total R
    pub extended: Option<f64>,
}

/// Integrates the problem's upwind/growth system on the given lattice over
/// [0, T].
pub fn integrate(
    problem: &BalanceProblem,
    lattice: &Lattice,
    beta0: &WeightVector,
    steps: usize,
    extended: bool,
    r: f64,
) -> Result<LatticeFlow> {
    integrate_rates(
        &ProblemRates { problem, lattice },
        beta0,
        &IntegrateOptions {
            steps,
            horizon: problem.horizon,
            extended: extended.then_some(r),
        },
    )
}

/// Classical RK4 on a fixed grid for an arbitrary rate supplier. In extended
/// mode the initial star entry defaults to R − ‖β₀‖ and total mass R is
/// certified at every grid time.
pub fn integrate_rates(
    rates: &dyn RateBuilder,
    beta0: &WeightVector,
    opts: &IntegrateOptions,
) -> Result<LatticeFlow> {
    beta0.validate()?;
    if opts.steps == 0 || !(opts.horizon > 0.0) {
        return Err(BalanceError::InvalidInput("need steps ≥ 1 and a positive horizon".into()));
    }
    let dt = opts.horizon / opts.steps as f64;

    let mut state = beta0.clone();
    if let Some(r) = opts.extended {
        let head = r - beta0.lattice_mass();
        if head <= 0.0 {
            return Err(BalanceError::HeadroomExhausted(format!(
                "initial mass {} is not below R = {r}",
                beta0.lattice_mass()
            )));
        }
        state.star = Some(beta0.star.unwrap_or(head));
    }

    let mut flow = LatticeFlow {
        time_grid: vec![0.0],
        states: vec![state.clone()],
        extended: opts.extended.is_some(),
        clamped_mass: 0.0,
    };

    for step in 0..opts.steps {
        let t = step as f64 * dt;

        // positivity/stability guard at the current state
        let clean = sanitize(&state, opts.extended.is_some());
        let q = rates.movement(t, &clean)?;
        let g = rates.growth(t, &clean)?;
        let gmax = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let rate_scale = q.max_exit_rate() + gmax;
        if dt * rate_scale > STEP_GUARD {
            return Err(BalanceError::StepGuard(format!(
                "Δt·max rate = {:.3e} exceeds {STEP_GUARD}; needs ≥ {} steps",
                dt * rate_scale,
                (opts.horizon * rate_scale / STEP_GUARD).ceil()
            )));
        }

        state = rk4_step(rates, t, dt, &state, opts.extended)?;

        // clamp roundoff negatives, abort on anything substantive
        let scale = state.total_mass().abs().max(1e-300);
        let mut clamped = 0.0;
        for v in state.values.iter_mut().chain(state.star.iter_mut()) {
            if *v < 0.0 {
                clamped -= *v;
                *v = 0.0;
            }
        }
        if clamped > CLAMP_LIMIT * scale {
            return Err(BalanceError::StepGuard(format!(
                "negative mass {clamped:e} at step {step} exceeds the roundoff budget"
            )));
        }
        flow.clamped_mass += clamped;

        if let Some(r) = opts.extended {
            let total = state.total_mass();
            if (total - r).abs() > CONSERVATION_TOL * r {
                return Err(BalanceError::Internal(format!(
                    "extended run lost conservation: total {total} vs R = {r}"
                )));
            }
        }

        flow.time_grid.push((step + 1) as f64 * dt);
        flow.states.push(state.clone());
    }
    Ok(flow)
}

fn rk4_step(
    rates: &dyn RateBuilder,
    t: f64,
    dt: f64,
    beta: &WeightVector,
    extended: Option<f64>,
) -> Result<WeightVector> {
    let eval = |t: f64, b: &WeightVector| -> Result<Vec<f64>> {
        match extended {
            Some(r) => rhs_extended(rates, t, b, r),
            None => rhs_rates(rates, t, b),
        }
    };
    let pack = |b: &WeightVector| -> Vec<f64> {
        let mut v = b.values.clone();
        if extended.is_some() {
            v.push(b.star.unwrap_or(0.0));
        }
        v
    };
    let unpack = |mut v: Vec<f64>| -> WeightVector {
        if extended.is_some() {
            let star = v.pop().unwrap();
            WeightVector { values: v, star: Some(star) }
        } else {
            WeightVector::new(v)
        }
    };

    let y0 = pack(beta);
    let shifted = |k: &[f64], factor: f64| -> WeightVector {
        unpack(y0.iter().zip(k).map(|(&y, &ki)| y + factor * ki).collect())
    };

    let k1 = eval(t, beta)?;
    let k2 = eval(t + 0.5 * dt, &shifted(&k1, 0.5 * dt))?;
    let k3 = eval(t + 0.5 * dt, &shifted(&k2, 0.5 * dt))?;
    let k4 = eval(t + dt, &shifted(&k3, dt))?;

    let next: Vec<f64> = y0
        .iter()
        .enumerate()
        .map(|(i, &y)| y + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    Ok(unpack(next))
}

/// The generator of the extended dynamics applied to a test vector φ over
/// the states plus the remote point (φ's last entry): movement differences,
/// death transport into the remote point, and the normalized birth term on
/// the remote-point row. Returns one value per state, remote point last.
pub fn generator_apply(
    problem: &BalanceProblem,
    lattice: &Lattice,
    t: f64,
    mu: &AugmentedDistribution,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let beta = {
        let mut b = from_measure(&mu.base, lattice)?;
        b.star = Some(mu.star_mass);
        b
    };
    generator_apply_weights(problem, lattice, t, &beta, phi)
}

pub fn generator_apply_weights(
    problem: &BalanceProblem,
    lattice: &Lattice,
    t: f64,
    beta: &WeightVector,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let n = lattice.len();
    if phi.len() != n + 1 {
        return Err(BalanceError::InvalidInput(format!(
            "test vector has {} entries, expected {} states plus the remote point",
            phi.len(),
            n + 1
        )));
    }
    let rates = ProblemRates { problem, lattice };
    let q = rates.movement(t, beta)?;
    let g = rates.growth(t, beta)?;
    let star_mass = beta.star.unwrap_or(0.0);
    let phi_star = phi[n];

    let mut out = vec![0.0; n + 1];
    let mut birth = 0.0;
    for i in 0..n {
        let mut v = 0.0;
        for &(j, rate) in q.row(i) {
            v += (phi[j] - phi[i]) * rate;
        }
        let gm = (-g[i]).max(0.0);
        v += (phi_star - phi[i]) * gm;
        out[i] = v;

        let gp = g[i].max(0.0);
        if gp > 0.0 && star_mass == 0.0 {
            return Err(BalanceError::HeadroomExhausted(
                "birth rate with no mass at the remote point".into(),
            ));
        }
        birth += (phi[i] - phi_star) * gp * beta.values[i];
    }
    out[n] = if star_mass > 0.0 { birth / star_mass } else { 0.0 };
    Ok(out)
}
