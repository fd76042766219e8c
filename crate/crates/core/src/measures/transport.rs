//! Exact min-cost transport on a dense bipartite graph.
//!
//! Masses are quantized to integer units and costs to integer ticks, so the
//! optimum is bit-stable across platforms and independent of atom ordering.
//! The solver is successive shortest paths with Johnson potentials; all
//! supplies/demands are integral, so termination is guaranteed.

use crate::error::{BalanceError, Result};

/// Number of mass units each side is quantized into.
pub const MASS_UNITS: u64 = 100_000_000_000_000; // 1e14

/// Absolute cost resolution: one cost tick equals 1e-12.
pub const COST_RESOLUTION: f64 = 1e-12;

const INF: i64 = i64::MAX / 4;

pub struct Solution {
    /// Optimal objective in (mass unit) x (cost tick).
    pub cost_units: i128,
    /// Positive flows as (source, sink, units).
    pub flows: Vec<(usize, usize, u64)>,
}

/// Splits `total_units` across `weights` proportionally, exactly, using
/// largest-remainder rounding. Zero weights receive zero units.
pub fn quantize_masses(weights: &[f64], total_units: u64) -> Vec<u64> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let mut units = Vec::with_capacity(weights.len());
    let mut fractions: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned: u64 = 0;
    for (i, &w) in weights.iter().enumerate() {
        let share = w / total * total_units as f64;
        let floor = share.floor() as u64;
        assigned += floor;
        units.push(floor);
        fractions.push((share - floor as f64, i));
    }
    // Hand out the remainder by largest fractional part, ties by index.
    let mut remainder = total_units - assigned;
    fractions.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in &fractions {
        if remainder == 0 {
            break;
        }
        units[i] += 1;
        remainder -= 1;
    }
    units
}

/// Quantizes a nonnegative cost to integer ticks.
pub fn quantize_cost(c: f64) -> i64 {
    (c / COST_RESOLUTION).round() as i64
}

/// Solves the balanced transport problem with integer supplies/demands
/// (`sum(supply) == sum(demand)`) and a dense row-major cost matrix.
pub fn min_cost_transport(supply: &[u64], demand: &[u64], cost: &[i64]) -> Result<Solution> {
    let m = supply.len();
    let n = demand.len();
    assert_eq!(cost.len(), m * n);
    let total_supply: u128 = supply.iter().map(|&s| s as u128).sum();
    let total_demand: u128 = demand.iter().map(|&d| d as u128).sum();
    if total_supply != total_demand {
        return Err(BalanceError::Internal(format!(
            "unbalanced transport: supply {total_supply} != demand {total_demand}"
        )));
    }
    if total_supply == 0 {
        return Ok(Solution { cost_units: 0, flows: Vec::new() });
    }

    let nodes = m + n;
    let mut flow = vec![0u64; m * n];
    let mut pot = vec![0i64; nodes];
    let mut rem_supply: Vec<u64> = supply.to_vec();
    let mut rem_demand: Vec<u64> = demand.to_vec();
    let mut remaining = total_supply;

    let mut dist = vec![INF; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let max_augmentations = 64 * (nodes as u64 + 4) * (nodes as u64 + 4);
    let mut augmentations: u64 = 0;

    while remaining > 0 {
        augmentations += 1;
        if augmentations > max_augmentations {
            return Err(BalanceError::Internal(
                "transport solver exceeded augmentation budget".into(),
            ));
        }

        // Dijkstra over reduced costs from every source with remaining supply.
        dist.iter_mut().for_each(|d| *d = INF);
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        let mut heap = std::collections::BinaryHeap::new();
        for i in 0..m {
            if rem_supply[i] > 0 {
                dist[i] = 0;
                heap.push(std::cmp::Reverse((0i64, i)));
            }
        }
        while let Some(std::cmp::Reverse((d, v))) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            if v < m {
                // Forward arcs source v -> every sink.
                let row = v * n;
                for j in 0..n {
                    let rc = cost[row + j] + pot[v] - pot[m + j];
                    let nd = d + rc;
                    if nd < dist[m + j] {
                        dist[m + j] = nd;
                        parent[m + j] = v;
                        heap.push(std::cmp::Reverse((nd, m + j)));
                    }
                }
            } else {
                // Backward arcs sink -> source where positive flow exists.
                let j = v - m;
                for i in 0..m {
                    if flow[i * n + j] > 0 {
                        let rc = -cost[i * n + j] + pot[v] - pot[i];
                        let nd = d + rc;
                        if nd < dist[i] {
                            dist[i] = nd;
                            parent[i] = v;
                            heap.push(std::cmp::Reverse((nd, i)));
                        }
                    }
                }
            }
        }

        // Cheapest sink that still needs mass.
        let mut target = usize::MAX;
        let mut best = INF;
        for j in 0..n {
            if rem_demand[j] > 0 && dist[m + j] < best {
                best = dist[m + j];
                target = m + j;
            }
        }
        if target == usize::MAX {
            return Err(BalanceError::Internal("transport network disconnected".into()));
        }

        let d_target = dist[target];
        for v in 0..nodes {
            if dist[v] < INF {
                pot[v] += dist[v].min(d_target);
            }
        }

        // Walk the path back to a source, recording the bottleneck.
        let mut bottleneck = rem_demand[target - m];
        let mut v = target;
        loop {
            let p = parent[v];
            if p == usize::MAX {
                bottleneck = bottleneck.min(rem_supply[v]);
                break;
            }
            if v >= m {
                // p (source) -> v (sink): forward, uncapacitated.
            } else {
                // p (sink) -> v (source): backward, capacity = current flow.
                bottleneck = bottleneck.min(flow[v * n + (p - m)]);
            }
            v = p;
        }

        let mut v = target;
        loop {
            let p = parent[v];
            if p == usize::MAX {
                rem_supply[v] -= bottleneck;
                break;
            }
            if v >= m {
                flow[p * n + (v - m)] += bottleneck;
            } else {
                flow[v * n + (p - m)] -= bottleneck;
            }
            v = p;
        }
        rem_demand[target - m] -= bottleneck;
        remaining -= bottleneck as u128;
    }

    let mut cost_units: i128 = 0;
    let mut flows = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let f = flow[i * n + j];
            if f > 0 {
                cost_units += f as i128 * cost[i * n + j] as i128;
                flows.push((i, j, f));
            }
        }
    }
    Ok(Solution { cost_units, flows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transport_costs_nothing() {
        let s = vec![3, 7];
        let cost = vec![0, 5, 5, 0];
        let sol = min_cost_transport(&s, &s, &cost).unwrap();
        assert_eq!(sol.cost_units, 0);
    }

    #[test]
    fn picks_cheaper_route() {
        // Two sources, two sinks; crossing is cheaper for one pair.
        let supply = vec![1, 1];
        let demand = vec![1, 1];
        let cost = vec![10, 1, 1, 10];
        let sol = min_cost_transport(&supply, &demand, &cost).unwrap();
        assert_eq!(sol.cost_units, 2);
    }

    #[test]
    fn quantization_preserves_totals() {
        let w = vec![0.3, 0.2, 0.5, 0.0];
        let u = quantize_masses(&w, MASS_UNITS);
        assert_eq!(u.iter().sum::<u64>(), MASS_UNITS);
        assert_eq!(u[3], 0);
    }
}
