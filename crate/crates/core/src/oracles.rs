//! Exhaustive and closed-form reference solutions for small instances.
//!
//! Everything here is exponential in some input dimension and refuses inputs
//! beyond [`OracleLimits`] instead of running for hours.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{transition_rates, ChainRates, JffcState};
use crate::error::{Error, Result};
use crate::model::{BlockPlacement, ChainEdge, Cluster, Node, ServerChain};
use crate::placement::{max_blocks, validate_rate_params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLimits {
    pub max_servers: usize,
    pub max_blocks: usize,
    pub max_capacity_enum: u64,
    pub ctmc_truncation: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_servers: 8,
            max_blocks: 12,
            max_capacity_enum: 6,
            ctmc_truncation: 200,
        }
    }
}

/// Most capacity vectors [`brute_force_cache`] will try.
const MAX_CACHE_SEARCH: u128 = 10_000_000;
/// Largest state space solved with a dense LU factorization.
const DENSE_STATE_LIMIT: usize = 2_500;
const MAX_CTMC_STATES: usize = 1_000_000;

fn refuse(msg: String) -> Error {
    Error::OracleRefused(msg)
}

/// Every head-to-tail path through feasible edges, in lexicographic node order.
pub fn enumerate_chains(placement: &BlockPlacement, limits: &OracleLimits) -> Result<Vec<Vec<ChainEdge>>> {
    if placement.server_count() > limits.max_servers {
        return Err(refuse(format!(
            "{} servers exceeds the limit of {}",
            placement.server_count(),
            limits.max_servers
        )));
    }
    let edges = placement.feasible_edges();
    let mut out = Vec::new();
    let mut path = Vec::new();
    walk(&edges, Node::Head, &mut path, &mut out);
    Ok(out)
}

fn walk(edges: &[ChainEdge], at: Node, path: &mut Vec<ChainEdge>, out: &mut Vec<Vec<ChainEdge>>) {
    if at == Node::Tail {
        out.push(path.clone());
        return;
    }
    for e in edges.iter().filter(|e| e.from == at) {
        path.push(*e);
        walk(edges, e.to, path, out);
        path.pop();
    }
}

/// Optimal grouping for the block-placement problem: the fewest disjoint
/// server groups (at least one), each holding all blocks, whose summed rate
/// bounds reach the target. `groups` is empty when `chain_count` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpOptimum {
    pub chain_count: Option<usize>,
    pub groups: Vec<Vec<usize>>,
    /// `sum over groups of 1 / sum(t_j)`.
    pub scaled_rate: f64,
}

/// Brute-force block placement at reservation `c`: each server `j` holds
/// `m_j(c)` blocks and costs `t_j(c)`, and the target is `lambda / (rho_bar c)`.
pub fn brute_force_bp(
    cluster: &Cluster,
    c: u64,
    lambda: f64,
    rho_bar: f64,
    limits: &OracleLimits,
) -> Result<BpOptimum> {
    validate_rate_params(c, lambda, rho_bar)?;
    let j = cluster.server_count();
    if j > limits.max_servers || cluster.block_count() > limits.max_blocks {
        return Err(refuse(format!(
            "{j} servers / {} blocks exceeds the limits {} / {}",
            cluster.block_count(),
            limits.max_servers,
            limits.max_blocks
        )));
    }
    let blocks: Vec<u64> = (0..j).map(|s| max_blocks(cluster, s, c) as u64).collect();
    let times: Vec<f64> = (0..j)
        .map(|s| {
            let srv = &cluster.servers[s];
            srv.comm_time + srv.per_block_compute * blocks[s] as f64
        })
        .collect();
    let target = lambda / (rho_bar * c as f64);
    min_groups(&blocks, &times, cluster.block_count() as u64, target, limits)
}

/// Subset dynamic program behind [`brute_force_bp`], on raw `(m_j, t_j)`.
pub fn min_groups(blocks: &[u64], times: &[f64], block_count: u64, target: f64, limits: &OracleLimits) -> Result<BpOptimum> {
    let n = blocks.len();
    if n != times.len() {
        return Err(Error::invalid("blocks and times differ in length"));
    }
    if n > limits.max_servers {
        return Err(refuse(format!("{n} servers exceeds the limit of {}", limits.max_servers)));
    }
    let full = (1usize << n) - 1;
    let group_rate: Vec<Option<f64>> = (0..=full)
        .map(|mask| {
            let (m, t) = (0..n)
                .filter(|s| mask >> s & 1 == 1)
                .fold((0u64, 0.0), |(m, t), s| (m + blocks[s], t + times[s]));
            (mask != 0 && m >= block_count && t > 0.0).then(|| 1.0 / t)
        })
        .collect();

    // best[k][mask]: largest rate from at most k disjoint groups inside mask.
    let mut best = vec![vec![0.0f64; full + 1]];
    let mut choice: Vec<Vec<usize>> = vec![vec![0; full + 1]];
    for k in 1..=n {
        let prev = &best[k - 1];
        let mut row = vec![0.0f64; full + 1];
        let mut pick = vec![0usize; full + 1];
        for mask in 1..=full {
            let low = mask & mask.wrapping_neg();
            // either the lowest server is idle, or it leads some group
            let (mut value, mut chosen) = (row[mask & !low], 0usize);
            let rest = mask & !low;
            let mut sub = rest;
            loop {
                let group = sub | low;
                if let Some(r) = group_rate[group] {
                    let v = r + prev[mask & !group];
                    if v > value {
                        value = v;
                        chosen = group;
                    }
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & rest;
            }
            if chosen == 0 {
                // inherit the choice made without the lowest server
                chosen = pick[mask & !low];
            }
            row[mask] = value;
            pick[mask] = chosen;
        }
        // every block must be hosted somewhere, so at least one group
        let reached = row[full] > 0.0 && row[full] >= target;
        best.push(row);
        choice.push(pick);
        if reached {
            let mut groups = Vec::new();
            let (mut mask, mut level) = (full, k);
            while level > 0 && mask != 0 {
                let g = choice[level][mask];
                if g == 0 {
                    break;
                }
                groups.push((0..n).filter(|s| g >> s & 1 == 1).collect());
                mask &= !g;
                level -= 1;
            }
            return Ok(BpOptimum {
                chain_count: Some(groups.len()),
                groups,
                scaled_rate: best[k][full],
            });
        }
    }
    Ok(BpOptimum {
        chain_count: None,
        groups: Vec::new(),
        scaled_rate: best[n][full],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheOptimum {
    /// `None` when no capacity vector within the enumeration bound works.
    pub total_capacity: Option<u64>,
    pub capacities: Vec<u64>,
}

/// Fewest total cache reservations over fixed `chains` that reach
/// `required_rate` without exceeding any server's residual slots. Each
/// capacity is searched in `0..=limits.max_capacity_enum`.
pub fn brute_force_cache(
    cluster: &Cluster,
    placement: &BlockPlacement,
    chains: &[ServerChain],
    required_rate: f64,
    limits: &OracleLimits,
) -> Result<CacheOptimum> {
    if cluster.server_count() > limits.max_servers {
        return Err(refuse(format!(
            "{} servers exceeds the limit of {}",
            cluster.server_count(),
            limits.max_servers
        )));
    }
    let per = limits.max_capacity_enum as u128 + 1;
    let space = per.checked_pow(chains.len() as u32).unwrap_or(u128::MAX);
    if space > MAX_CACHE_SEARCH {
        return Err(refuse(format!("{space} capacity vectors exceeds {MAX_CACHE_SEARCH}")));
    }
    let residual = cluster.residual_slots(placement)?;
    let k = chains.len();
    let usage: Vec<Vec<(usize, u64)>> = chains
        .iter()
        .map(|ch| {
            ch.hops()
                .iter()
                .filter_map(|e| match e.to {
                    Node::Server(j) => Some((j, e.blocks as u64)),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let rates: Vec<f64> = chains.iter().map(|c| c.service_rate()).collect();

    let mut caps = vec![0u64; k];
    let mut best: Option<(u64, Vec<u64>)> = None;
    loop {
        let total: u64 = caps.iter().sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            let rate: f64 = caps.iter().zip(&rates).map(|(&c, &mu)| c as f64 * mu).sum();
            if rate >= required_rate {
                let mut used = vec![0u64; residual.len()];
                for (c, hops) in caps.iter().zip(&usage) {
                    for &(j, m) in hops {
                        used[j] += c * m;
                    }
                }
                if used.iter().zip(&residual).all(|(u, r)| u <= r) {
                    best = Some((total, caps.clone()));
                }
            }
        }
        // odometer
        let mut i = 0;
        while i < k && caps[i] == limits.max_capacity_enum {
            caps[i] = 0;
            i += 1;
        }
        if i == k {
            break;
        }
        caps[i] += 1;
    }
    Ok(match best {
        Some((total, capacities)) => CacheOptimum {
            total_capacity: Some(total),
            capacities,
        },
        None => CacheOptimum {
            total_capacity: None,
            capacities: Vec::new(),
        },
    })
}

/// Mean number in system of an M/M/c queue (Erlang C).
pub fn mmc_mean_occupancy(c: u64, mu: f64, lambda: f64) -> Result<f64> {
    if c == 0 || !(mu > 0.0) || !(lambda >= 0.0) {
        return Err(Error::invalid("M/M/c needs c >= 1, mu > 0, lambda >= 0"));
    }
    let nu = c as f64 * mu;
    if lambda >= nu {
        return Err(Error::Unstable { lambda, nu });
    }
    let a = lambda / mu;
    let rho = lambda / nu;
    // sum_{n<c} a^n/n! and a^c/c!, scaled by the largest term to avoid overflow
    let mut terms = Vec::with_capacity(c as usize + 1);
    let mut log_term = 0.0;
    terms.push(0.0);
    for n in 1..=c {
        log_term += a.ln() - (n as f64).ln();
        terms.push(log_term);
    }
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let head: f64 = terms[..c as usize].iter().map(|t| (t - peak).exp()).sum();
    let top = (terms[c as usize] - peak).exp() / (1.0 - rho);
    let wait_prob = top / (head + top);
    Ok(a + wait_prob * rho / (1.0 - rho))
}

/// Stationary law of the JFFC occupancy CTMC with the queue truncated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtmcSolution {
    pub states: Vec<JffcState>,
    pub pi: Vec<f64>,
    pub mean_occupancy: f64,
    /// Estimated probability of queue lengths beyond the truncation.
    pub tail_mass: f64,
}

/// Builds the generator from [`transition_rates`] over all states with at
/// most `truncation` queued jobs (arrivals blocked at the top) and solves
/// `pi Q = 0`, `sum(pi) = 1`.
pub fn ctmc_stationary(rates: &ChainRates, lambda: f64, truncation: u64) -> Result<CtmcSolution> {
    let nu = rates.total_rate();
    if !(lambda >= 0.0) {
        return Err(Error::invalid("arrival rate must be >= 0"));
    }
    if lambda >= nu {
        return Err(Error::Unstable { lambda, nu });
    }
    let caps = rates.capacities();
    let busy_states = caps
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c as usize + 1))
        .unwrap_or(usize::MAX);
    let count = busy_states.saturating_add(truncation as usize);
    if count > MAX_CTMC_STATES {
        return Err(refuse(format!("{count} CTMC states exceeds {MAX_CTMC_STATES}")));
    }

    let mut states = Vec::with_capacity(count);
    let mut busy = vec![0u64; caps.len()];
    loop {
        states.push(JffcState { queued: 0, busy: busy.clone() });
        let mut i = 0;
        while i < caps.len() && busy[i] == caps[i] {
            busy[i] = 0;
            i += 1;
        }
        if i == caps.len() {
            break;
        }
        busy[i] += 1;
    }
    for q in 1..=truncation {
        states.push(JffcState {
            queued: q,
            busy: caps.to_vec(),
        });
    }
    let index = |s: &JffcState| -> usize {
        if s.queued > 0 {
            return busy_states + s.queued as usize - 1;
        }
        let mut idx = 0usize;
        let mut stride = 1usize;
        for (b, c) in s.busy.iter().zip(caps) {
            idx += *b as usize * stride;
            stride *= *c as usize + 1;
        }
        idx
    };

    // outgoing transitions per state, arrivals suppressed at the truncation
    let mut out: Vec<Vec<(usize, f64)>> = Vec::with_capacity(count);
    for s in &states {
        let moves = transition_rates(rates, lambda, s)?
            .into_iter()
            .filter(|(t, _)| t.queued <= truncation)
            .map(|(t, r)| (index(&t), r))
            .collect();
        out.push(moves);
    }

    let pi = if count <= DENSE_STATE_LIMIT {
        dense_solve(&out)?
    } else {
        gauss_seidel(&out)?
    };
    let mean_occupancy = states
        .iter()
        .zip(&pi)
        .map(|(s, p)| p * (s.queued + s.busy.iter().sum::<u64>()) as f64)
        .sum();
    let rho = lambda / nu;
    let tail_mass = if truncation == 0 {
        pi[busy_states - 1] * rho / (1.0 - rho)
    } else {
        pi[count - 1] * rho / (1.0 - rho)
    };
    Ok(CtmcSolution {
        states,
        pi,
        mean_occupancy,
        tail_mass,
    })
}

fn dense_solve(out: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = out.len();
    // rows of Q^T are balance equations; the last one is replaced by sum(pi) = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, moves) in out.iter().enumerate() {
        for &(j, r) in moves {
            a[(j, i)] += r;
            a[(i, i)] -= r;
        }
    }
    for i in 0..n {
        a[(n - 1, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular CTMC generator".into()))?;
    Ok(pi.iter().map(|&p| p.max(0.0)).collect())
}

fn gauss_seidel(out: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = out.len();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut leave = vec![0.0f64; n];
    for (i, moves) in out.iter().enumerate() {
        for &(j, r) in moves {
            incoming[j].push((i, r));
            leave[i] += r;
        }
    }
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut delta = 0.0f64;
        for j in 0..n {
            let inflow: f64 = incoming[j].iter().map(|&(i, r)| pi[i] * r).sum();
            let next = inflow / leave[j];
            delta = delta.max((next - pi[j]).abs() / next.max(1e-300));
            pi[j] = next;
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        if delta < 1e-13 {
            return Ok(pi);
        }
    }
    Err(Error::Numerical("Gauss-Seidel did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn erlang_c_reference_values() {
        assert_relative_eq!(mmc_mean_occupancy(1, 1.0, 0.5).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(mmc_mean_occupancy(2, 1.0, 1.0).unwrap(), 4.0 / 3.0, epsilon = 1e-14);
        assert!(mmc_mean_occupancy(2, 1.0, 1e-9).unwrap() < 1e-8);
        assert!(matches!(mmc_mean_occupancy(2, 1.0, 2.0), Err(Error::Unstable { .. })));
    }

    #[test]
    fn ctmc_single_chain_matches_erlang_c() {
        let r = ChainRates::new([(1.0, 3)]).unwrap();
        let sol = ctmc_stationary(&r, 2.0, 200).unwrap();
        assert!(sol.tail_mass < 1e-10);
        assert_relative_eq!(sol.mean_occupancy, mmc_mean_occupancy(3, 1.0, 2.0).unwrap(), max_relative = 1e-9);
        assert_relative_eq!(sol.pi.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ctmc_rejects_unstable_load() {
        let r = ChainRates::new([(2.0, 1), (1.0, 1)]).unwrap();
        assert!(matches!(ctmc_stationary(&r, 3.0, 50), Err(Error::Unstable { .. })));
    }

    #[test]
    fn sparse_and_dense_solvers_agree() {
        let r = ChainRates::new([(2.0, 1), (1.0, 2)]).unwrap();
        let mut out = Vec::new();
        let sol = ctmc_stationary(&r, 2.5, 60).unwrap();
        let index = |s: &JffcState| sol.states.iter().position(|t| t == s).unwrap();
        for s in &sol.states {
            let moves = transition_rates(&r, 2.5, s)
                .unwrap()
                .into_iter()
                .filter(|(t, _)| t.queued <= 60)
                .map(|(t, rate)| (index(&t), rate))
                .collect::<Vec<_>>();
            out.push(moves);
        }
        let iterative = gauss_seidel(&out).unwrap();
        for (a, b) in iterative.iter().zip(&sol.pi) {
            assert_relative_eq!(a, b, epsilon = 1e-11);
        }
    }

    #[test]
    fn min_groups_partition_instance() {
        // {3, 1, 1, 2, 2, 1} splits into two halves of 5
        let x = [3u64, 1, 1, 2, 2, 1];
        let t: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let opt = min_groups(&x, &t, 5, 2.0 / 5.0, &OracleLimits::default()).unwrap();
        assert_eq!(opt.chain_count, Some(2));
        let mut all: Vec<usize> = opt.groups.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);
        for g in &opt.groups {
            assert_eq!(g.iter().map(|&s| x[s]).sum::<u64>(), 5);
        }

        // {3, 3, 2}: sum 8, halves of 4 impossible
        let x = [3u64, 3, 2];
        let t: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let opt = min_groups(&x, &t, 4, 2.0 / 4.0, &OracleLimits::default()).unwrap();
        assert_eq!(opt.chain_count, None);
    }

    #[test]
    fn min_groups_zero_target_and_single_server() {
        let limits = OracleLimits::default();
        assert_eq!(min_groups(&[5], &[1.0], 5, 0.0, &limits).unwrap().chain_count, Some(1));
        assert_eq!(min_groups(&[4], &[1.0], 5, 0.0, &limits).unwrap().chain_count, None);
        let opt = min_groups(&[5, 1], &[1.0, 1.0], 5, 0.9, &limits).unwrap();
        assert_eq!(opt.chain_count, Some(1));
        assert_eq!(opt.groups, vec![vec![0]]);
    }

    #[test]
    fn limits_are_enforced() {
        let limits = OracleLimits {
            max_servers: 2,
            ..OracleLimits::default()
        };
        assert!(matches!(
            min_groups(&[1, 1, 1], &[1.0; 3], 1, 1.0, &limits),
            Err(Error::OracleRefused(_))
        ));
        let placement = BlockPlacement::empty(3, 3);
        assert!(matches!(enumerate_chains(&placement, &limits), Err(Error::OracleRefused(_))));
    }
}
