//! Exact discrete optimal transport by successive shortest paths.
//!
//! Sources are the reference types, sinks the candidate types. Each round
//! finds a cheapest augmenting path in the residual graph (forward arcs at
//! cost `c[i][j]`, backward arcs at `-c[i][j]` where flow is positive) with
//! a queue-based Bellman-Ford, then ships as much mass as the path allows.
//! Every round exhausts a source, a sink or a backward arc, so the number
//! of rounds is finite; the result is an optimal basic plan.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MASS_EPS: f64 = 1e-15;
const RELAX_EPS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `flow[i][j]`: mass moved from source `i` to sink `j`.
    pub flow: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub total_cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.flow.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.flow.first().map_or(0, Vec::len);
        (0..n).map(|j| self.flow.iter().map(|r| r[j]).sum()).collect()
    }

    /// Largest marginal violation against the given weights.
    pub fn marginal_error(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(supply)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(demand)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }
}

/// Minimum-cost plan moving `supply` onto `demand` under `cost`.
///
/// Both marginals must be non-negative and have equal totals (within
/// `1e-9`); `cost` must be a finite `supply.len() × demand.len()` matrix.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<TransportPlan> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 {
        return Err(Error::EmptyDoc("transport problem has an empty side".into()));
    }
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(Error::Invalid(format!("cost matrix must be {m}×{n}")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    if supply.iter().chain(demand).any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Invalid(
            "transport weights must be finite and non-negative".into(),
        ));
    }
    let (s_tot, d_tot): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (s_tot - d_tot).abs() > 1e-9 {
        return Err(Error::Invalid(format!("unbalanced transport: {s_tot} vs {d_tot}")));
    }

    let mut flow = vec![vec![0.0; n]; m];
    let mut rem_s = supply.to_vec();
    let mut rem_d = demand.to_vec();
    let nodes = m + n;
    let max_rounds = 4 * nodes * nodes + 64;

    for _ in 0..max_rounds {
        if !rem_s.iter().any(|&s| s > MASS_EPS) || !rem_d.iter().any(|&d| d > MASS_EPS) {
            break;
        }
        // Multi-source shortest paths over the residual graph.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        let mut in_queue = vec![false; nodes];
        let mut queue = VecDeque::new();
        for i in 0..m {
            if rem_s[i] > MASS_EPS {
                dist[i] = 0.0;
                in_queue[i] = true;
                queue.push_back(i);
            }
        }
        let mut pops = 0usize;
        let pop_limit = nodes * nodes * (nodes + 1);
        while let Some(u) = queue.pop_front() {
            in_queue[u] = false;
            pops += 1;
            if pops > pop_limit {
                return Err(Error::Invalid("transport solver failed to converge".into()));
            }
            if u < m {
                for j in 0..n {
                    let v = m + j;
                    let d = dist[u] + cost[u][j];
                    if d < dist[v] - RELAX_EPS {
                        dist[v] = d;
                        pred[v] = u;
                        if !in_queue[v] {
                            in_queue[v] = true;
                            queue.push_back(v);
                        }
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[i][j] > MASS_EPS {
                        let d = dist[u] - cost[i][j];
                        if d < dist[i] - RELAX_EPS {
                            dist[i] = d;
                            pred[i] = u;
                            if !in_queue[i] {
                                in_queue[i] = true;
                                queue.push_back(i);
                            }
                        }
                    }
                }
            }
        }

        let Some(sink) = (0..n)
            .filter(|&j| rem_d[j] > MASS_EPS && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]).then(a.cmp(&b)))
        else {
            break;
        };

        // Walk back to the originating source, collecting the bottleneck.
        let mut path = Vec::new();
        let mut v = m + sink;
        let mut amount = rem_d[sink];
        loop {
            let u = pred[v];
            if u == usize::MAX {
                break;
            }
            if u >= m {
                // Backward arc: sink u cancels flow it received from source v.
                amount = amount.min(flow[v][u - m]);
            }
            path.push((u, v));
            v = u;
            if path.len() > nodes {
                return Err(Error::Invalid("transport solver found a cyclic path".into()));
            }
        }
        amount = amount.min(rem_s[v]);
        if amount <= 0.0 {
            return Err(Error::Invalid("transport solver stalled".into()));
        }
        rem_s[v] -= amount;
        rem_d[sink] -= amount;
        for (u, w) in path {
            if u < m {
                flow[u][w - m] += amount;
            } else {
                let f = &mut flow[w][u - m];
                *f -= amount;
                if *f < MASS_EPS {
                    *f = 0.0;
                }
            }
        }
    }

    let total_cost = flow
        .iter()
        .zip(cost)
        .map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c).sum::<f64>())
        .sum();
    Ok(TransportPlan {
        flow,
        cost: cost.to_vec(),
        total_cost,
    })
}
