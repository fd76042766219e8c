//! Three-solver agreement and coupling marginals at desk scale; the heavier
//! sweeps live in the acceptance suite.

use balance_core::harness::{cross_validate, project_initial};
use balance_core::lattice::{build_lattice, epsilon_for, to_measure};
use balance_core::measures::prw_direct;
use balance_core::ode;
use balance_core::problem::scenario;
use balance_core::stochastic::simulate_coupled;
use balance_core::superposition::picard_solve;

#[test]
fn cross_validate_logistic() {
    let p = scenario("logistic_growth").unwrap();
    let rep = cross_validate(&p, 0.25, 4000, 200, &[5, 6], 2.0).unwrap();
    assert!(rep.pass(), "{:#?}", rep.rows);
}

#[test]
fn cross_validate_advection() {
    let p = scenario("advection1d").unwrap();
    let rep = cross_validate(&p, 0.1, 2000, 200, &[3], 2.0).unwrap();
    assert!(rep.pass(), "{:#?}", rep.rows);
    // pairwise rows at each of the five checkpoints
    assert_eq!(rep.rows.len(), 15);
    assert!(rep.rows.iter().all(|r| r.distance.is_finite()));
}

#[test]
fn coupled_marginals_track_both_solvers() {
    let p = scenario("advection1d").unwrap();
    let h = 0.1;
    let lat = build_lattice(&p.domain, h).unwrap();
    let beta0 = project_initial(&p.initial, &lat);
    let r = p.choose_r();
    let b = p.default_b();
    let n = 4000;
    let steps = 200;

    let flow_ref = picard_solve(&p, 64, steps, 0.0, 50).unwrap().flow;
    let lattice_flow = ode::integrate(&p, &lat, &beta0, steps, true, r).unwrap();
    let eps = epsilon_for(&p, h);
    let out = simulate_coupled(&p, &lat, &flow_ref, &beta0, n, steps, r, eps, 42).unwrap();

    let m0 = p.initial.total_mass();
    let tol = 5.0 * m0 / (n as f64).sqrt() + 2.0 * (eps + 0.0);
    for k in [steps / 2, steps] {
        let t = out.time_grid[k];
        // first component against the particle flow it was driven by
        let d1 = prw_direct(
            &out.first_marginal.measures[k],
            &flow_ref.interpolate(t).unwrap(),
            b,
        )
        .unwrap();
        assert!(d1 <= tol, "first marginal at t = {t}: {d1} > {tol}");
        // second component against the extended lattice ODE
        let m_chain = to_measure(out.second_marginal.state_near(t), &lat).unwrap();
        let m_ode = to_measure(lattice_flow.state_near(t), &lat).unwrap();
        let d2 = prw_direct(&m_chain, &m_ode, b).unwrap();
        assert!(d2 <= tol, "second marginal at t = {t}: {d2} > {tol}");
    }
    // the regularized diagnostic dominates its ε floor and stays finite
    assert!(out.gap.iter().all(|g| g.is_finite() && *g >= 0.0));
    assert!(out.gap_regularized.iter().all(|g| g.is_finite() && *g >= 0.0));
}
