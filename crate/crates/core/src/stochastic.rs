//! Jump-process simulators: the mean-field Markov chain on the lattice plus
//! the remote point, and the coupled two-component process whose synchronized
//! deaths/births keep the pair close and whose empirical gap measures the
//! lattice approximation error.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::error::{BalanceError, Result};
use crate::lattice::{Lattice, ProblemRates, RateBuilder, WeightVector};
use crate::measures::{augment, wasserstein1, DiscreteMeasure};
use crate::ode::LatticeFlow;
use crate::problem::BalanceProblem;
use crate::superposition::MeasureFlow;

/// Δt · (max total jump rate) must stay below this; the per-step thinning
/// error is first order in this product.
pub const CHAIN_STEP_GUARD: f64 = 0.1;

/// Deterministic per-(seed, particle, step) RNG stream, so runs reproduce
/// bit-for-bit regardless of scheduling.
fn stream_rng(seed: u64, particle: u64, step: u64) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_add(particle.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Distributes N particles over lattice states and the remote point in
/// proportion to β₀ (total R), by largest remainder.
fn place_particles(beta0: &WeightVector, r: f64, n: usize) -> Result<Vec<i64>> {
    let star = r - beta0.lattice_mass();
    if star < -1e-9 * r {
        return Err(BalanceError::HeadroomExhausted(format!(
            "initial lattice mass {} exceeds R = {r}",
            beta0.lattice_mass()
        )));
    }
    let mut weights = beta0.values.clone();
    weights.push(beta0.star.unwrap_or(star.max(0.0)));
    let counts = crate::measures::transport::quantize_masses(&weights, n as u64);
    let n_states = beta0.values.len() as i64;
    let mut out = Vec::with_capacity(n);
    for (i, c) in counts.iter().enumerate() {
        let state = if i as i64 == n_states { -1 } else { i as i64 };
        out.extend(std::iter::repeat(state).take(*c as usize));
    }
    Ok(out)
}

/// Mean-field chain for a problem instance: rates are rebuilt each step from
/// the scaled empirical occupancy R·(fraction per state). Starts from m₀
/// projected onto the lattice via exact support matching.
pub fn simulate_chain(
    problem: &BalanceProblem,
    lattice: &Lattice,
    beta0: &WeightVector,
    n: usize,
    steps: usize,
    r: f64,
    seed: u64,
) -> Result<LatticeFlow> {
    simulate_chain_rates(
        &ProblemRates { problem, lattice },
        beta0,
        n,
        steps,
        problem.horizon,
        r,
        seed,
    )
}

/// Chain simulation for an arbitrary rate supplier. Each step freezes the
/// empirical weights β̂, reads movement/growth rates once per state, and
/// lets every particle jump at most once by exponential thinning. Returns
/// the empirical flow R·(fraction per state), remote point included.
pub fn simulate_chain_rates(
    rates: &dyn RateBuilder,
    beta0: &WeightVector,
    n: usize,
    steps: usize,
    horizon: f64,
    r: f64,
    seed: u64,
) -> Result<LatticeFlow> {
    if n == 0 || steps == 0 || !(horizon > 0.0) || !(r > 0.0) {
        return Err(BalanceError::InvalidInput("need N ≥ 1, steps ≥ 1, positive horizon and R".into()));
    }
    let n_states = rates.lattice().len();
    let dt = horizon / steps as f64;
    let mut particles = place_particles(beta0, r, n)?;
    let unit = r / n as f64;

    let empirical = |particles: &[i64]| -> WeightVector {
        let mut values = vec![0.0; n_states];
        let mut star = 0.0;
        for &s in particles {
            if s < 0 {
                star += unit;
            } else {
                values[s as usize] += unit;
            }
        }
        WeightVector { values, star: Some(star) }
    };

    let mut flow = LatticeFlow {
        time_grid: vec![0.0],
        states: vec![empirical(&particles)],
        extended: true,
        clamped_mass: 0.0,
    };

    for step in 0..steps {
        let t = step as f64 * dt;
        let beta_hat = flow.states.last().unwrap().clone();
        let q = rates.movement(t, &beta_hat)?;
        let g = rates.growth(t, &beta_hat)?;

        // per-state exit rates and jump targets
        let mut targets: Vec<Vec<(i64, f64)>> = Vec::with_capacity(n_states);
        for i in 0..n_states {
            let mut row: Vec<(i64, f64)> = q
                .row(i)
                .iter()
                .filter(|&&(j, _)| j != i)
                .map(|&(j, rate)| (j as i64, rate))
                .collect();
            let death = (-g[i]).max(0.0);
            if death > 0.0 {
                row.push((-1, death));
            }
            targets.push(row);
        }

        // remote-point birth rates: g⁺_y·β̂_y / (R − ‖β̂‖), with
        // R − ‖β̂‖ = R·(star fraction)
        let star_mass = beta_hat.star.unwrap_or(0.0);
        let birth_weight: f64 = (0..n_states).map(|y| g[y].max(0.0) * beta_hat.values[y]).sum();
        let star_row: Vec<(i64, f64)> = if star_mass > 0.0 {
            (0..n_states)
                .filter_map(|y| {
                    let rate = g[y].max(0.0) * beta_hat.values[y] / star_mass;
                    (rate > 0.0).then_some((y as i64, rate))
                })
                .collect()
        } else if birth_weight > 0.0 {
            return Err(BalanceError::HeadroomExhausted(format!(
                "birth rate with no particles at the remote point (step {step})"
            )));
        } else {
            Vec::new()
        };

        let exit: Vec<f64> = targets
            .iter()
            .map(|row| row.iter().map(|&(_, r)| r).sum())
            .collect();
        let star_exit: f64 = star_row.iter().map(|&(_, r)| r).sum();
        let max_rate = exit.iter().fold(star_exit, |a, &b| a.max(b));
        if dt * max_rate > CHAIN_STEP_GUARD {
            return Err(BalanceError::StepGuard(format!(
                "Δt·max rate = {:.3e} exceeds {CHAIN_STEP_GUARD}; needs ≥ {} steps",
                dt * max_rate,
                (horizon * max_rate / CHAIN_STEP_GUARD).ceil()
            )));
        }

        particles
            .par_iter_mut()
            .enumerate()
            .for_each(|(pid, state)| {
                let (row, lambda) = if *state < 0 {
                    (&star_row, star_exit)
                } else {
                    (&targets[*state as usize], exit[*state as usize])
                };
                if lambda == 0.0 {
                    return;
                }
                let mut rng = stream_rng(seed, pid as u64, step as u64);
                if rng.gen::<f64>() >= 1.0 - (-lambda * dt).exp() {
                    return;
                }
                let mut u = rng.gen::<f64>() * lambda;
                for &(to, rate) in row.iter() {
                    if u < rate {
                        *state = to;
                        return;
                    }
                    u -= rate;
                }
                *state = row.last().unwrap().0;
            });

        flow.time_grid.push((step + 1) as f64 * dt);
        flow.states.push(empirical(&particles));
    }
    Ok(flow)
}

/// A pair of the coupled process: the continuous component over K ∪ {⋆} and
/// the chain component over the lattice ∪ {⋆}.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub first: crate::measures::AugmentedPoint,
    pub second: crate::measures::AugmentedPoint,
}

/// Empirical distribution of pairs (probabilities summing to one).
pub struct PairDistribution {
    pub pairs: Vec<(CoupledState, f64)>,
}

impl PairDistribution {
    pub fn star_star_mass(&self) -> f64 {
        self.pairs
            .iter()
            .filter(|(s, _)| s.first.is_star() && s.second.is_star())
            .map(|(_, w)| w)
            .sum()
    }

    /// Marginal of one slot as a measure of total mass R (remote mass
    /// excluded).
    fn marginal(&self, r: f64, dim: usize, first: bool) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(
            dim,
            self.pairs.iter().filter_map(|(s, w)| {
                let p = if first { &s.first } else { &s.second };
                match p {
                    crate::measures::AugmentedPoint::Interior(x) => Some((x.clone(), w * r)),
                    crate::measures::AugmentedPoint::Star => None,
                }
            }),
        )
    }
}

/// Synchronized jump rates of one pair: deaths use the min-coupling of the
/// two components' death rates; births fire only from (⋆,⋆) and sample
/// targets from the current pair distribution, matched mass jointly and each
/// excess alone, normalized by the (⋆,⋆) probability.
#[derive(Debug, Clone)]
pub struct JumpRates {
    /// both components die together
    pub rate_11: f64,
    /// only the first dies
    pub rate_10: f64,
    /// only the second dies
    pub rate_01: f64,
    /// birth targets with rates; nonempty only at (⋆,⋆)
    pub births: Vec<(CoupledState, f64)>,
}

pub fn coupled_rates(
    problem: &BalanceProblem,
    t: f64,
    state: &CoupledState,
    theta: &PairDistribution,
    r: f64,
) -> Result<JumpRates> {
    use crate::measures::AugmentedPoint as P;
    let mu1 = theta.marginal(r, problem.dim, true)?;
    let mu2 = theta.marginal(r, problem.dim, false)?;
    let gminus = |p: &P, mu: &DiscreteMeasure| -> f64 {
        match p {
            P::Star => 0.0,
            P::Interior(x) => (-problem.growth.eval(t, x, mu)).max(0.0),
        }
    };
    let gplus = |p: &P, mu: &DiscreteMeasure| -> f64 {
        match p {
            P::Star => 0.0,
            P::Interior(x) => problem.growth.eval(t, x, mu).max(0.0),
        }
    };

    let d1 = gminus(&state.first, &mu1);
    let d2 = gminus(&state.second, &mu2);
    let rate_11 = d1.min(d2);
    let mut rates = JumpRates {
        rate_11,
        rate_10: d1 - rate_11,
        rate_01: d2 - rate_11,
        births: Vec::new(),
    };

    if state.first.is_star() && state.second.is_star() {
        let norm = theta.star_star_mass();
        let mut births = Vec::new();
        let mut total = 0.0;
        for (pair, w) in &theta.pairs {
            let b1 = gplus(&pair.first, &mu1);
            let b2 = gplus(&pair.second, &mu2);
            let joint = b1.min(b2);
            for (target, weight) in [
                (CoupledState { first: pair.first.clone(), second: pair.second.clone() }, joint),
                (CoupledState { first: pair.first.clone(), second: P::Star }, b1 - joint),
                (CoupledState { first: P::Star, second: pair.second.clone() }, b2 - joint),
            ] {
                let rate = w * weight;
                if rate > 0.0 {
                    total += rate;
                    births.push((target, rate));
                }
            }
        }
        if total > 0.0 {
            if norm <= 0.0 {
                return Err(BalanceError::HeadroomExhausted(
                    "birth requested with no (⋆,⋆) pairs to spend".into(),
                ));
            }
            for (_, rate) in &mut births {
                *rate /= norm;
            }
            rates.births = births;
        }
    }
    Ok(rates)
}

/// Per-time diagnostics of a coupled run.
#[derive(Debug, Clone)]
pub struct CoupledOutcome {
    pub time_grid: Vec<f64>,
    /// (1/N)·Σ ρ_⋆(Xᵢ, Xᵢ^Q), the empirical coupling gap
    pub gap: Vec<f64>,
    /// same with the smoothed distance √(‖x₁−x₂‖² + ε²), ε at (⋆,⋆) and
    /// √(b² + ε²) across life states
    pub gap_regularized: Vec<f64>,
    /// first-component empirical measure, mass R·(alive fraction)
    pub first_marginal: MeasureFlow,
    /// second-component empirical weights, remote point included
    pub second_marginal: LatticeFlow,
}

/// Runs N coupled pairs on [0, T]. The first components move along the
/// characteristics of the reference flow; the second components jump by the
/// upwind rates fed back from their own empirical occupancy; deaths and
/// births are synchronized by the min-coupling. Initial pairs realize an
/// optimal plan between the two augmented initial distributions.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    problem: &BalanceProblem,
    lattice: &Lattice,
    flow_ref: &MeasureFlow,
    beta0: &WeightVector,
    n: usize,
    steps: usize,
    r: f64,
    epsilon: f64,
    seed: u64,
) -> Result<CoupledOutcome> {
    if n == 0 || steps == 0 {
        return Err(BalanceError::InvalidInput("need N ≥ 1 and steps ≥ 1".into()));
    }
    let b = problem.default_b();
    let dt = problem.horizon / steps as f64;
    let d = problem.dim;
    let n_states = lattice.len();

    // ---- initial pairs from an optimal transport plan ----
    let m0 = &problem.initial;
    let i_beta0 = crate::lattice::to_measure(beta0, lattice)?;
    let mu1 = augment(m0, r)?;
    let mu2 = augment(&i_beta0, r)?;
    let (_, plan) = wasserstein1(&mu1, &mu2, b)?;

    // group table: distinct alive positions of the first component
    let mut groups: Vec<Vec<f64>> = m0.atoms().iter().map(|a| a.point.clone()).collect();
    // map plan target indices (atoms of 𝕀(β₀)) to lattice indices
    let atom_to_lattice: Vec<usize> = i_beta0
        .atoms()
        .iter()
        .map(|a| lattice.nearest(&a.point))
        .collect();

    let masses: Vec<f64> = plan.entries.iter().map(|e| e.mass).collect();
    let counts = crate::measures::transport::quantize_masses(&masses, n as u64);
    // pair encoding: −1 = remote point, otherwise group / lattice index
    let mut pairs: Vec<(i64, i64)> = Vec::with_capacity(n);
    for (e, c) in plan.entries.iter().zip(counts) {
        let first = if e.source == plan.source_star { -1 } else { e.source as i64 };
        let second = if e.target == plan.target_star {
            -1
        } else {
            atom_to_lattice[e.target] as i64
        };
        pairs.extend(std::iter::repeat((first, second)).take(c as usize));
    }

    let unit = r / n as f64;
    let rho = |first: i64, second: i64, groups: &[Vec<f64>]| -> (f64, f64) {
        match (first, second) {
            (-1, -1) => (0.0, epsilon),
            (-1, _) | (_, -1) => (b, (b * b + epsilon * epsilon).sqrt()),
            (g, y) => {
                let dist = crate::measures::euclidean(&groups[g as usize], &lattice.points()[y as usize]);
                (dist.min(2.0 * b), (dist * dist + epsilon * epsilon).sqrt())
            }
        }
    };

    let mut out = CoupledOutcome {
        time_grid: vec![0.0],
        gap: vec![0.0],
        gap_regularized: vec![0.0],
        first_marginal: MeasureFlow { time_grid: vec![0.0], measures: vec![] },
        second_marginal: LatticeFlow {
            time_grid: vec![0.0],
            states: vec![],
            extended: true,
            clamped_mass: 0.0,
        },
    };

    let record = |out: &mut CoupledOutcome, pairs: &[(i64, i64)], groups: &[Vec<f64>]| -> Result<()> {
        let mut gap = 0.0;
        let mut gap_reg = 0.0;
        let mut second = WeightVector { values: vec![0.0; n_states], star: Some(0.0) };
        let mut first_atoms: HashMap<i64, f64> = HashMap::new();
        for &(f, s) in pairs {
            let (g0, ge) = rho(f, s, groups);
            gap += g0;
            gap_reg += ge;
            if s < 0 {
                *second.star.as_mut().unwrap() += unit;
            } else {
                second.values[s as usize] += unit;
            }
            if f >= 0 {
                *first_atoms.entry(f).or_insert(0.0) += unit;
            }
        }
        out.gap.push(gap / n as f64);
        out.gap_regularized.push(gap_reg / n as f64);
        out.second_marginal.states.push(second);
        out.first_marginal.measures.push(DiscreteMeasure::new(
            d,
            first_atoms.into_iter().map(|(g, w)| (groups[g as usize].clone(), w)),
        )?);
        Ok(())
    };
    // placeholder entries pushed above get replaced by the first record
    out.gap.clear();
    out.gap_regularized.clear();
    record(&mut out, &pairs, &groups)?;

    for step in 0..steps {
        let t = step as f64 * dt;

        // snapshot of the pair distribution
        let mut counts: HashMap<(i64, i64), usize> = HashMap::new();
        for &p in &pairs {
            *counts.entry(p).or_insert(0) += 1;
        }
        let star_star = counts.get(&(-1, -1)).copied().unwrap_or(0) as f64 / n as f64;

        // fields: first side reads the reference flow, second side reads its
        // own empirical occupancy
        let m_ref = flow_ref.interpolate(t)?;
        let g1 = problem.growth.prepare(t, &m_ref);
        let g1_vals: Vec<f64> = groups.iter().map(|x| g1(x)).collect();

        let mut beta_hat = WeightVector { values: vec![0.0; n_states], star: Some(0.0) };
        for (&(_, s), &c) in &counts {
            if s < 0 {
                *beta_hat.star.as_mut().unwrap() += unit * c as f64;
            } else {
                beta_hat.values[s as usize] += unit * c as f64;
            }
        }
        let q = crate::lattice::upwind_matrix(problem, lattice, t, &beta_hat)?;
        let m2 = crate::lattice::to_measure(&beta_hat, lattice)?;
        let g2 = problem.growth.prepare(t, &m2);
        let g2_vals: Vec<f64> = lattice.points().iter().map(|x| g2(x)).collect();

        // birth kernel over pair types (shared by every (⋆,⋆) pair)
        let mut births: Vec<((i64, i64), f64)> = Vec::new();
        let mut birth_total = 0.0;
        if star_star > 0.0 || counts.keys().any(|&(f, s)| f >= 0 || s >= 0) {
            for (&(f, s), &c) in &counts {
                let w = c as f64 / n as f64;
                let b1 = if f >= 0 { g1_vals[f as usize].max(0.0) } else { 0.0 };
                let b2 = if s >= 0 { g2_vals[s as usize].max(0.0) } else { 0.0 };
                let joint = b1.min(b2);
                for (target, weight) in
                    [((f, s), joint), ((f, -1), b1 - joint), ((-1, s), b2 - joint)]
                {
                    let rate = w * weight;
                    if rate > 0.0 {
                        births.push((target, rate));
                        birth_total += rate;
                    }
                }
            }
        }
        if birth_total > 0.0 {
            if star_star <= 0.0 {
                return Err(BalanceError::HeadroomExhausted(format!(
                    "birth requested with no (⋆,⋆) pairs (step {step})"
                )));
            }
            for (_, rate) in &mut births {
                *rate /= star_star;
            }
            birth_total /= star_star;
        }

        // per-pair-type event tables
        #[derive(Clone)]
        enum Event {
            Move(i64),
            DeathBoth,
            DeathFirst,
            DeathSecond,
            Birth,
        }
        let mut tables: HashMap<(i64, i64), (Vec<(Event, f64)>, f64)> = HashMap::new();
        for &key in counts.keys() {
            let (f, s) = key;
            let mut evs: Vec<(Event, f64)> = Vec::new();
            if s >= 0 {
                for &(j, rate) in q.row(s as usize) {
                    if j as i64 != s && rate > 0.0 {
                        evs.push((Event::Move(j as i64), rate));
                    }
                }
            }
            let d1 = if f >= 0 { (-g1_vals[f as usize]).max(0.0) } else { 0.0 };
            let d2 = if s >= 0 { (-g2_vals[s as usize]).max(0.0) } else { 0.0 };
            let both = d1.min(d2);
            if both > 0.0 {
                evs.push((Event::DeathBoth, both));
            }
            if d1 - both > 0.0 {
                evs.push((Event::DeathFirst, d1 - both));
            }
            if d2 - both > 0.0 {
                evs.push((Event::DeathSecond, d2 - both));
            }
            if f < 0 && s < 0 && birth_total > 0.0 {
                evs.push((Event::Birth, birth_total));
            }
            let total: f64 = evs.iter().map(|(_, r)| r).sum();
            tables.insert(key, (evs, total));
        }

        let max_rate = tables.values().fold(0.0f64, |a, (_, t)| a.max(*t));
        if dt * max_rate > CHAIN_STEP_GUARD {
            return Err(BalanceError::StepGuard(format!(
                "Δt·max rate = {:.3e} exceeds {CHAIN_STEP_GUARD}; needs ≥ {} steps",
                dt * max_rate,
                (problem.horizon * max_rate / CHAIN_STEP_GUARD).ceil()
            )));
        }

        let birth_cdf: Vec<((i64, i64), f64)> = {
            let mut acc = 0.0;
            births
                .iter()
                .map(|&(tgt, r)| {
                    acc += r;
                    (tgt, acc)
                })
                .collect()
        };

        pairs.par_iter_mut().enumerate().for_each(|(pid, pair)| {
            let (evs, lambda) = &tables[pair];
            if *lambda == 0.0 {
                return;
            }
            let mut rng = stream_rng(seed, pid as u64, step as u64);
            if rng.gen::<f64>() >= 1.0 - (-lambda * dt).exp() {
                return;
            }
            let mut u = rng.gen::<f64>() * lambda;
            for (ev, rate) in evs {
                if u >= *rate {
                    u -= rate;
                    continue;
                }
                match ev {
                    Event::Move(j) => pair.1 = *j,
                    Event::DeathBoth => *pair = (-1, -1),
                    Event::DeathFirst => pair.0 = -1,
                    Event::DeathSecond => pair.1 = -1,
                    Event::Birth => {
                        let v = rng.gen::<f64>() * birth_total;
                        let tgt = birth_cdf
                            .iter()
                            .find(|&&(_, acc)| v < acc)
                            .map(|&(tgt, _)| tgt)
                            .unwrap_or(birth_cdf.last().unwrap().0);
                        *pair = tgt;
                    }
                }
                return;
            }
        });

        // advance the group positions along the reference characteristics
        let tm = t + 0.5 * dt;
        let t1 = t + dt;
        let m_mid = flow_ref.interpolate(tm)?;
        let m_next = flow_ref.interpolate(t1)?;
        let stages = [
            problem.velocity.prepare(t, &m_ref),
            problem.velocity.prepare(tm, &m_mid),
            problem.velocity.prepare(t1, &m_next),
        ];
        for pos in &mut groups {
            let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            for (s, (stage, shift)) in [(0usize, 0.0), (1, 0.5), (1, 0.5), (2, 1.0)]
                .iter()
                .enumerate()
            {
                let probe: Vec<f64> = if s == 0 {
                    pos.clone()
                } else {
                    pos.iter()
                        .zip(&k[s - 1])
                        .map(|(a, ki)| a + shift * dt * ki)
                        .collect()
                };
                let mut f = vec![0.0; d];
                stages[*stage](&probe, &mut f);
                k[s] = f;
            }
            for i in 0..d {
                pos[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
        }

        out.time_grid.push(t1);
        out.first_marginal.time_grid.push(t1);
        out.second_marginal.time_grid.push(t1);
        record(&mut out, &pairs, &groups)?;
    }

    Ok(out)
}
