//! Discrete nonnegative measures, the remote-point augmentation, and the
//! unbalanced 1-Wasserstein (PRW) distance computed exactly by two routes.

pub mod transport;

use crate::error::{BalanceError, Result};
use transport::{quantize_cost, quantize_masses, MASS_UNITS};

/// Atoms closer than this (per coordinate) are merged on construction.
pub const MERGE_TOL: f64 = 1e-12;

/// Relative tolerance for "equal totals" preconditions.
const TOTAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// A finite nonnegative measure given by finitely many weighted atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    atoms: Vec<Atom>,
    total: f64,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, atoms: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(BalanceError::InvalidInput("dimension must be positive".into()));
        }
        let mut merged: Vec<Atom> = Vec::new();
        let mut index: std::collections::HashMap<Vec<i64>, usize> = std::collections::HashMap::new();
        for (point, weight) in atoms {
            if point.len() != dim {
                return Err(BalanceError::InvalidInput(format!(
                    "atom has dimension {}, expected {dim}",
                    point.len()
                )));
            }
            if !weight.is_finite() || weight < 0.0 {
                return Err(BalanceError::InvalidInput(format!("atom weight {weight} is not a nonnegative real")));
            }
            if weight == 0.0 {
                continue;
            }
            let key: Vec<i64> = point.iter().map(|&c| (c / MERGE_TOL).round() as i64).collect();
            match index.get(&key) {
                Some(&i) => merged[i].weight += weight,
                None => {
                    index.insert(key, merged.len());
                    merged.push(Atom { point, weight });
                }
            }
        }
        let total = merged.iter().map(|a| a.weight).sum();
        Ok(Self { dim, atoms: merged, total })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, atoms: Vec::new(), total: 0.0 }
    }

    pub fn dirac(point: Vec<f64>, weight: f64) -> Result<Self> {
        let dim = point.len();
        Self::new(dim, [(point, weight)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.dim, self.atoms.iter().map(|a| (a.point.clone(), a.weight * factor)))
    }

    /// Snaps atoms onto a grid of the given resolution, merging collisions.
    /// Moves each atom by at most `resolution * sqrt(d) / 2`.
    pub fn quantized(&self, resolution: f64) -> Result<Self> {
        Self::new(
            self.dim,
            self.atoms.iter().map(|a| {
                let p = a.point.iter().map(|&c| (c / resolution).round() * resolution).collect();
                (p, a.weight)
            }),
        )
    }
}

/// A point of the phase space extended by the remote point.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentedPoint {
    Interior(Vec<f64>),
    Star,
}

impl AugmentedPoint {
    pub fn is_star(&self) -> bool {
        matches!(self, AugmentedPoint::Star)
    }
}

/// Ground distance on the augmented space: `b` between any interior point and
/// the remote point, zero between two remote points, and the Euclidean
/// distance truncated at `2b` between interior points.
pub fn rho_star(a: &AugmentedPoint, b: &AugmentedPoint, b_param: f64) -> f64 {
    match (a, b) {
        (AugmentedPoint::Star, AugmentedPoint::Star) => 0.0,
        (AugmentedPoint::Star, AugmentedPoint::Interior(_))
        | (AugmentedPoint::Interior(_), AugmentedPoint::Star) => b_param,
        (AugmentedPoint::Interior(x), AugmentedPoint::Interior(y)) => {
            euclidean(x, y).min(2.0 * b_param)
        }
    }
}

pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// A measure of total mass `R` on the augmented space: the original atoms
/// plus the residual `R - ||m||` placed at the remote point.
#[derive(Debug, Clone)]
pub struct AugmentedDistribution {
    pub base: DiscreteMeasure,
    pub star_mass: f64,
    pub total: f64,
}

impl AugmentedDistribution {
    pub fn new(base: DiscreteMeasure, star_mass: f64) -> Result<Self> {
        if star_mass < 0.0 || !star_mass.is_finite() {
            return Err(BalanceError::InvalidInput("remote-point mass must be nonnegative".into()));
        }
        let total = base.total_mass() + star_mass;
        if total <= 0.0 {
            return Err(BalanceError::InvalidInput("augmented distribution must carry positive mass".into()));
        }
        Ok(Self { base, star_mass, total })
    }
}

/// Extends `m` to the augmented space with total mass `R`, giving the remote
/// point the headroom `R - ||m||`. Requires strict headroom `R > ||m||`.
pub fn augment(m: &DiscreteMeasure, r: f64) -> Result<AugmentedDistribution> {
    if !(r > m.total_mass()) {
        return Err(BalanceError::InvalidInput(format!(
            "extension total R = {r} must exceed the measure mass {}",
            m.total_mass()
        )));
    }
    AugmentedDistribution::new(m.clone(), r - m.total_mass())
}

/// One routing of mass from a source atom to a target atom. Indices equal to
/// the number of base atoms on the respective side denote the remote point.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub entries: Vec<PlanEntry>,
    pub source_star: usize,
    pub target_star: usize,
}

impl TransportPlan {
    pub fn row_marginals(&self, n_sources: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_sources];
        for e in &self.entries {
            out[e.source] += e.mass;
        }
        out
    }

    pub fn column_marginals(&self, n_targets: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_targets];
        for e in &self.entries {
            out[e.target] += e.mass;
        }
        out
    }
}

/// Exact 1-Wasserstein distance between two augmented distributions of equal
/// total mass, with ground cost `rho_star`. Returns the optimal value and an
/// optimal plan. The value equals `R * W_1` of the normalized probabilities.
pub fn wasserstein1(
    mu1: &AugmentedDistribution,
    mu2: &AugmentedDistribution,
    b_param: f64,
) -> Result<(f64, TransportPlan)> {
    if b_param <= 0.0 {
        return Err(BalanceError::InvalidInput("b must be positive".into()));
    }
    let scale = mu1.total.max(mu2.total);
    if (mu1.total - mu2.total).abs() > TOTAL_TOL * scale {
        return Err(BalanceError::InvalidInput(format!(
            "total masses differ: {} vs {}",
            mu1.total, mu2.total
        )));
    }

    let sources = augmented_nodes(mu1);
    let targets = augmented_nodes(mu2);
    let source_star = mu1.base.atoms().len();
    let target_star = mu2.base.atoms().len();

    if sources.is_empty() || targets.is_empty() {
        // Only possible when every weight is zero, which `new` rules out.
        return Err(BalanceError::Internal("empty augmented support".into()));
    }

    let supply_w: Vec<f64> = sources.iter().map(|(_, w)| *w).collect();
    let demand_w: Vec<f64> = targets.iter().map(|(_, w)| *w).collect();
    let supply = quantize_masses(&supply_w, MASS_UNITS);
    let demand = quantize_masses(&demand_w, MASS_UNITS);

    let m = sources.len();
    let n = targets.len();
    let mut cost = vec![0i64; m * n];
    for (i, (p, _)) in sources.iter().enumerate() {
        for (j, (q, _)) in targets.iter().enumerate() {
            cost[i * n + j] = quantize_cost(rho_star(p, q, b_param));
        }
    }

    let sol = transport::min_cost_transport(&supply, &demand, &cost)?;
    let unit_mass = mu1.total / MASS_UNITS as f64;
    let value = sol.cost_units as f64 * unit_mass * transport::COST_RESOLUTION;

    let remap = |nodes: &[(AugmentedPoint, f64)], star: usize, k: usize| -> usize {
        if nodes[k].0.is_star() {
            star
        } else {
            k
        }
    };
    let entries = sol
        .flows
        .iter()
        .map(|&(i, j, units)| PlanEntry {
            source: remap(&sources, source_star, i),
            target: remap(&targets, target_star, j),
            mass: units as f64 * unit_mass,
        })
        .collect();

    Ok((value, TransportPlan { entries, source_star, target_star }))
}

fn augmented_nodes(mu: &AugmentedDistribution) -> Vec<(AugmentedPoint, f64)> {
    let mut nodes: Vec<(AugmentedPoint, f64)> = mu
        .base
        .atoms()
        .iter()
        .map(|a| (AugmentedPoint::Interior(a.point.clone()), a.weight))
        .collect();
    if mu.star_mass > 0.0 {
        nodes.push((AugmentedPoint::Star, mu.star_mass));
    }
    nodes
}

/// PRW distance between two nonnegative measures of possibly different mass,
/// with per-unit creation/destruction cost `b_param`. Solved by lifting both
/// measures to a common augmented total and running the exact transport LP;
/// the lifted optimum coincides with the sub-measure program.
pub fn prw_direct(m1: &DiscreteMeasure, m2: &DiscreteMeasure, b_param: f64) -> Result<f64> {
    let max = m1.total_mass().max(m2.total_mass());
    if max == 0.0 {
        return Ok(0.0);
    }
    let r = 1.5 * max;
    prw_augmented(m1, m2, b_param, r)
}

/// PRW distance via the augmented representation with an explicit headroom
/// total `R > max(||m1||, ||m2||)`. The value does not depend on `R`.
pub fn prw_augmented(m1: &DiscreteMeasure, m2: &DiscreteMeasure, b_param: f64, r: f64) -> Result<f64> {
    let mu1 = augment(m1, r)?;
    let mu2 = augment(m2, r)?;
    Ok(wasserstein1(&mu1, &mu2, b_param)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1d(atoms: &[(f64, f64)]) -> DiscreteMeasure {
        DiscreteMeasure::new(1, atoms.iter().map(|&(x, w)| (vec![x], w))).unwrap()
    }

    #[test]
    fn duplicate_atoms_merge() {
        let m = m1d(&[(0.0, 0.3), (0.0, 0.2), (1.0, 0.1)]);
        assert_eq!(m.atoms().len(), 2);
        assert!((m.total_mass() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(DiscreteMeasure::new(1, [(vec![0.0], -1.0)]).is_err());
    }

    #[test]
    fn rho_star_cases() {
        let x0 = AugmentedPoint::Interior(vec![0.0]);
        let x10 = AugmentedPoint::Interior(vec![10.0]);
        assert_eq!(rho_star(&AugmentedPoint::Star, &AugmentedPoint::Star, 3.0), 0.0);
        assert_eq!(rho_star(&x0, &AugmentedPoint::Star, 3.0), 3.0);
        // min(10, 2*3) = 6
        assert_eq!(rho_star(&x0, &x10, 3.0), 6.0);
        // symmetry
        assert_eq!(rho_star(&x10, &x0, 3.0), rho_star(&x0, &x10, 3.0));
    }

    #[test]
    fn augment_headroom() {
        let m = m1d(&[(0.0, 1.0)]);
        let a = augment(&m, 2.0).unwrap();
        assert!((a.star_mass - 1.0).abs() < 1e-15);
        assert!(augment(&m, 1.0).is_err());
        assert!(augment(&m, 0.5).is_err());

        let empty = DiscreteMeasure::empty(1);
        let a = augment(&empty, 1.0).unwrap();
        assert!((a.star_mass - 1.0).abs() < 1e-15);

        let m = m1d(&[(0.0, 0.3), (1.0, 0.2)]);
        let a = augment(&m, 1.0).unwrap();
        assert!((a.star_mass - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_identity_and_shift() {
        let m = m1d(&[(0.0, 0.5), (1.0, 0.5)]);
        let mu = augment(&m, 2.0).unwrap();
        let (d, plan) = wasserstein1(&mu, &mu, 5.0).unwrap();
        assert!(d.abs() < 1e-12);
        // Diagonal plan: every entry keeps source == target node role.
        for e in &plan.entries {
            assert_eq!(e.source, e.target);
        }

        let a = AugmentedDistribution::new(m1d(&[(0.0, 1.0)]), 0.0).unwrap();
        let b = AugmentedDistribution::new(m1d(&[(1.0, 1.0)]), 0.0).unwrap();
        let (d, _) = wasserstein1(&a, &b, 5.0).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wasserstein_routes_through_remote_point() {
        // Direct transport over distance 4 costs 4 * 0.5 = 2; destroying and
        // recreating through the remote point costs 2 * b * 0.5 = 1 with b = 1.
        let a = AugmentedDistribution::new(m1d(&[(0.0, 0.5)]), 0.5).unwrap();
        let b = AugmentedDistribution::new(m1d(&[(4.0, 0.5)]), 0.5).unwrap();
        let (d, _) = wasserstein1(&a, &b, 1.0).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn wasserstein_rejects_mismatched_totals() {
        let a = AugmentedDistribution::new(m1d(&[(0.0, 1.0)]), 0.5).unwrap();
        let b = AugmentedDistribution::new(m1d(&[(0.0, 1.0)]), 0.0).unwrap();
        assert!(wasserstein1(&a, &b, 1.0).is_err());
    }

    #[test]
    fn prw_direct_examples() {
        let m = m1d(&[(0.25, 0.7), (2.0, 0.1)]);
        assert!(prw_direct(&m, &m, 3.0).unwrap().abs() < 1e-10);

        // Surplus mass 1 at the same point pays b = 3.
        let d = prw_direct(&m1d(&[(0.0, 2.0)]), &m1d(&[(0.0, 1.0)]), 3.0).unwrap();
        assert!((d - 3.0).abs() < 1e-9, "got {d}");

        // Transporting over distance 10 loses to destroy+create at 2b = 2.
        let d = prw_direct(&m1d(&[(0.0, 1.0)]), &m1d(&[(10.0, 1.0)]), 1.0).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn prw_augmented_r_invariance() {
        let m1 = m1d(&[(0.0, 1.0)]);
        let m2 = m1d(&[(10.0, 1.0)]);
        for r in [1.5, 3.0, 100.0] {
            let d = prw_augmented(&m1, &m2, 1.0, r).unwrap();
            assert!((d - 2.0).abs() < 1e-9, "R={r} gave {d}");
        }
        let d = prw_augmented(&m1d(&[(0.0, 2.0)]), &m1d(&[(0.0, 1.0)]), 3.0, 4.0).unwrap();
        assert!((d - 3.0).abs() < 1e-9);

        let m = m1d(&[(0.3, 0.4), (1.0, 0.6)]);
        for r in [1.1, 7.0] {
            assert!(prw_augmented(&m, &m, 2.0, r).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn plan_marginals_match_weights() {
        let a = AugmentedDistribution::new(m1d(&[(0.0, 0.4), (1.0, 0.6)]), 1.0).unwrap();
        let b = AugmentedDistribution::new(m1d(&[(0.5, 1.2)]), 0.8).unwrap();
        let (_, plan) = wasserstein1(&a, &b, 3.0).unwrap();
        let rows = plan.row_marginals(3);
        let cols = plan.column_marginals(2);
        for (got, want) in rows.iter().zip([0.4, 0.6, 1.0]) {
            assert!((got - want).abs() < 1e-10 * 2.0, "row {got} vs {want}");
        }
        for (got, want) in cols.iter().zip([1.2, 0.8]) {
            assert!((got - want).abs() < 1e-10 * 2.0, "col {got} vs {want}");
        }
        for e in &plan.entries {
            assert!(e.mass >= 0.0);
        }
    }
}
