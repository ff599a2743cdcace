//! Greedy block placement with cache reservation (GBP-CR) and the
//! surrogate-based choice of the required capacity `c`.
//!
//! Under a required capacity `c`, every placed block reserves `c` cache slots,
//! so server `j` can host at most `m_j(c) = min(floor(M_j / (s_m + s_c c)), L)`
//! blocks and spends at most `t_j(c) = tau_c_j + tau_p_j m_j(c)` on a job.
//! Servers are consumed fastest-first by amortized time `t_j(c) / m_j(c)` and
//! grouped into disjoint chains until the scaled service rate target
//! `lambda / (rho_bar c)` is met.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AllocatedChain, BlockPlacement, Cluster, ComposedSystem, Node, ServerChain};

/// `m_j(c)`: blocks server `j` can host while reserving `c` slots per block.
pub fn max_blocks(cluster: &Cluster, j: usize, c: u64) -> usize {
    let per_block = cluster.service.block_bytes as u128 + cluster.service.cache_slot_bytes as u128 * c as u128;
    let fit = cluster.servers[j].memory_bytes as u128 / per_block;
    fit.min(cluster.block_count() as u128) as usize
}

/// Largest `c` any single server could support while hosting one block.
pub fn c_max(cluster: &Cluster) -> u64 {
    let max_mem = cluster.servers.iter().map(|s| s.memory_bytes).max().unwrap_or(0);
    max_mem.saturating_sub(cluster.service.block_bytes) / cluster.service.cache_slot_bytes
}

/// Per-server block budgets and time bounds under a required capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservationProfile {
    pub c: u64,
    pub max_blocks: Vec<usize>,
    /// `t_j(c)`, seconds.
    pub bound_time: Vec<f64>,
}

impl ReservationProfile {
    pub fn new(cluster: &Cluster, c: u64) -> Self {
        let max_blocks: Vec<usize> = (0..cluster.server_count())
            .map(|j| max_blocks(cluster, j, c))
            .collect();
        let bound_time = cluster
            .servers
            .iter()
            .zip(&max_blocks)
            .map(|(s, &m)| s.comm_time + s.per_block_compute * m as f64)
            .collect();
        ReservationProfile {
            c,
            max_blocks,
            bound_time,
        }
    }

    /// `t_j(c) / m_j(c)`; `None` when the server cannot host a block.
    pub fn amortized_time(&self, j: usize) -> Option<f64> {
        let m = self.max_blocks[j];
        (m > 0).then(|| self.bound_time[j] / m as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub c: u64,
    pub placement: BlockPlacement,
    /// Server groups of the complete chains, in construction order; each
    /// group lists its servers in block order.
    pub chains: Vec<Vec<usize>>,
    /// `sum_k 1 / sum_{j in J_k} t_j(c)`.
    pub scaled_rate: f64,
    /// `lambda / (rho_bar c)`.
    pub required_scaled_rate: f64,
    pub rate_satisfied: bool,
}

impl PlacementResult {
    /// `K(c)`.
    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    /// Guaranteed total service rate `c * scaled_rate` of the disjoint chains.
    pub fn rate_lower_bound(&self) -> f64 {
        self.c as f64 * self.scaled_rate
    }

    /// The disjoint chains themselves, each with capacity `c`.
    pub fn disjoint_system(&self, cluster: &Cluster) -> Result<ComposedSystem> {
        let chains = self
            .chains
            .iter()
            .map(|group| {
                let nodes: Vec<Node> = std::iter::once(Node::Head)
                    .chain(group.iter().map(|&j| Node::Server(j)))
                    .chain(std::iter::once(Node::Tail))
                    .collect();
                Ok(AllocatedChain {
                    chain: ServerChain::new(cluster, &self.placement, &nodes)?,
                    capacity: self.c,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ComposedSystem::new(self.placement.clone(), chains))
    }
}

/// Runs GBP-CR for required capacity `c`.
///
/// Servers with equal amortized time are taken in index order. A trailing
/// chain that cannot cover all blocks when servers run out is dropped and its
/// servers left unused.
pub fn gbp_cr(cluster: &Cluster, c: u64, lambda: f64, rho_bar: f64) -> Result<PlacementResult> {
    validate_rate_params(c, lambda, rho_bar)?;
    let profile = ReservationProfile::new(cluster, c);
    let mut order: Vec<(usize, f64)> = (0..cluster.server_count())
        .filter_map(|j| profile.amortized_time(j).map(|t| (j, t)))
        .collect();
    if order.is_empty() {
        return Err(Error::CapacityInfeasible { c });
    }
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let l = cluster.block_count();
    let required = lambda / (rho_bar * c as f64);
    let mut placement = BlockPlacement::empty(l, cluster.server_count());
    let mut chains = Vec::new();
    let mut current = Vec::new();
    let mut next_block = 1usize;
    let mut chain_time = 0.0;
    let mut scaled_rate = 0.0;
    let mut rate_satisfied = false;

    for (j, _) in order {
        let m = profile.max_blocks[j];
        placement.set(j, next_block.min(l - m + 1), m)?;
        current.push(j);
        chain_time += profile.bound_time[j];
        next_block = (next_block + m - 1).min(l) + 1;
        if next_block > l {
            scaled_rate += 1.0 / chain_time;
            chains.push(std::mem::take(&mut current));
            if scaled_rate >= required {
                rate_satisfied = true;
                break;
            }
            next_block = 1;
            chain_time = 0.0;
        }
    }
    for j in current {
        placement.clear(j);
    }

    Ok(PlacementResult {
        c,
        placement,
        chains,
        scaled_rate,
        required_scaled_rate: required,
        rate_satisfied,
    })
}

pub(crate) fn validate_rate_params(c: u64, lambda: f64, rho_bar: f64) -> Result<()> {
    if c == 0 {
        return Err(Error::invalid("required capacity c must be at least 1"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid("arrival rate must be finite and >= 0"));
    }
    if !(rho_bar > 0.0 && rho_bar < 1.0) {
        return Err(Error::invalid("rho_bar must lie in (0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRow {
    pub c: u64,
    /// `K(c)`, present when GBP-CR meets the rate target under `c`.
    pub chain_count: Option<usize>,
    /// `c * K(c)`.
    pub objective: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTuning {
    pub best_c: u64,
    pub table: Vec<SurrogateRow>,
}

/// Picks `c* = argmin c K(c)` over `c in 1..=c_max`, smaller `c` on ties.
pub fn surrogate_tuning(cluster: &Cluster, lambda: f64, rho_bar: f64) -> Result<SurrogateTuning> {
    let c_max = c_max(cluster);
    if c_max == 0 {
        return Err(Error::CapacityInfeasible { c: 1 });
    }
    let mut table = Vec::with_capacity(c_max as usize);
    let mut best: Option<(u64, u64)> = None;
    let mut best_rate: f64 = 0.0;
    for c in 1..=c_max {
        let row = match gbp_cr(cluster, c, lambda, rho_bar) {
            Ok(r) => {
                best_rate = best_rate.max(r.rate_lower_bound());
                if r.rate_satisfied {
                    let k = r.chain_count();
                    let obj = c * k as u64;
                    if best.is_none_or(|(_, b)| obj < b) {
                        best = Some((c, obj));
                    }
                    SurrogateRow {
                        c,
                        chain_count: Some(k),
                        objective: Some(obj),
                    }
                } else {
                    SurrogateRow {
                        c,
                        chain_count: None,
                        objective: None,
                    }
                }
            }
            Err(Error::CapacityInfeasible { .. }) => SurrogateRow {
                c,
                chain_count: None,
                objective: None,
            },
            Err(e) => return Err(e),
        };
        table.push(row);
    }
    match best {
        Some((best_c, _)) => Ok(SurrogateTuning { best_c, table }),
        None => Err(Error::RateUnattainable {
            required: lambda / rho_bar,
            best: best_rate,
        }),
    }
}
