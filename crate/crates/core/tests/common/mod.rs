//! Shared helpers for the integration suites: a brute-force transport oracle
//! and random-measure generators.

#![allow(dead_code)]

use balance_core::measures::DiscreteMeasure;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exact balanced min-cost transport for tiny instances by vertex
/// enumeration: every basic solution is supported on a spanning tree of the
/// bipartite supply/demand graph, so enumerating all cell subsets of size
/// n + m − 1, solving the unique flows by leaf peeling, and keeping the
/// feasible ones visits every vertex of the transportation polytope.
pub fn oracle_transport(supply: &[f64], demand: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> f64 {
    let n = supply.len();
    let m = demand.len();
    assert!(n <= 5 && m <= 5, "oracle is combinatorial in the atom count");
    let total_in: f64 = supply.iter().sum();
    let total_out: f64 = demand.iter().sum();
    assert!(
        (total_in - total_out).abs() <= 1e-9 * total_in.max(1.0),
        "oracle needs balanced marginals"
    );

    let cells: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        let chosen: Vec<(usize, usize)> = pick.iter().map(|&p| cells[p]).collect();
        if let Some(c) = solve_on_tree(supply, demand, &chosen, cost) {
            best = best.min(c);
        }
        // advance to the next k-combination in lexicographic order
        let mut i = k;
        while i > 0 && pick[i - 1] == cells.len() - k + (i - 1) {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        pick[i - 1] += 1;
        for j in i..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

/// Unique flow on a candidate support, found by repeatedly resolving nodes of
/// degree one; returns None if the support is not a spanning tree or the flow
/// goes negative.
fn solve_on_tree(
    supply: &[f64],
    demand: &[f64],
    cells: &[(usize, usize)],
    cost: &dyn Fn(usize, usize) -> f64,
) -> Option<f64> {
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let mut alive = vec![true; cells.len()];
    let mut remaining = cells.len();
    let mut total = 0.0;
    while remaining > 0 {
        let mut progressed = false;
        for (ci, &(i, j)) in cells.iter().enumerate() {
            if !alive[ci] {
                continue;
            }
            let row_deg = cells.iter().zip(&alive).filter(|(&(a, _), &al)| al && a == i).count();
            let col_deg = cells.iter().zip(&alive).filter(|(&(_, b), &al)| al && b == j).count();
            if row_deg == 1 || col_deg == 1 {
                let q = if row_deg == 1 { s[i] } else { d[j] };
                if q < -1e-9 {
                    return None;
                }
                total += q.max(0.0) * cost(i, j);
                s[i] -= q;
                d[j] -= q;
                alive[ci] = false;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return None; // a cycle: not a tree
        }
    }
    // all marginals must be exhausted (spanning) and nothing negative
    if s.iter().chain(d.iter()).any(|v| v.abs() > 1e-7) {
        return None;
    }
    Some(total)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unbalanced transport optimum by brute force: augment both sides with the
/// remote point carrying R − ‖m‖ and price pairs by the truncated metric.
pub fn oracle_prw(m1: &DiscreteMeasure, m2: &DiscreteMeasure, b: f64) -> f64 {
    let r = m1.total_mass().max(m2.total_mass()) + 1.0;
    let mut supply: Vec<f64> = m1.atoms().iter().map(|a| a.weight).collect();
    let mut demand: Vec<f64> = m2.atoms().iter().map(|a| a.weight).collect();
    let (ns, nd) = (supply.len(), demand.len());
    supply.push(r - m1.total_mass());
    demand.push(r - m2.total_mass());
    let cost = |i: usize, j: usize| -> f64 {
        match (i == ns, j == nd) {
            (true, true) => 0.0,
            (true, false) | (false, true) => b,
            (false, false) => euclid(&m1.atoms()[i].point, &m2.atoms()[j].point).min(2.0 * b),
        }
    };
    oracle_transport(&supply, &demand, &cost)
}

/// Two states a → b at unit rate, b absorbing, no growth: occupancy of a at
/// time t is e^{−t} in closed form.
pub struct TwoState {
    pub lattice: balance_core::lattice::Lattice,
}

impl TwoState {
    pub fn new() -> Self {
        Self {
            lattice: balance_core::lattice::Lattice::from_points(vec![vec![0.0], vec![1.0]])
                .unwrap(),
        }
    }
}

impl balance_core::lattice::RateBuilder for TwoState {
    fn movement(
        &self,
        _t: f64,
        _beta: &balance_core::lattice::WeightVector,
    ) -> balance_core::Result<balance_core::lattice::RateMatrix> {
        balance_core::lattice::RateMatrix::kolmogorov(2, vec![vec![(1, 1.0)], vec![]], false)
    }

    fn growth(
        &self,
        _t: f64,
        _beta: &balance_core::lattice::WeightVector,
    ) -> balance_core::Result<Vec<f64>> {
        Ok(vec![0.0, 0.0])
    }

    fn lattice(&self) -> &balance_core::lattice::Lattice {
        &self.lattice
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random measure with the given number of atoms in [−5, 5]^d and weights in
/// (0, 2).
pub fn random_measure(rng: &mut ChaCha8Rng, dim: usize, atoms: usize) -> DiscreteMeasure {
    DiscreteMeasure::new(
        dim,
        (0..atoms).map(|_| {
            let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            (p, rng.gen_range(0.01..2.0))
        }),
    )
    .unwrap()
}
