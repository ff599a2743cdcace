//! Greedy cache allocation (GCA).
//!
//! Starting from the residual cache slots left by a block placement, GCA
//! repeatedly routes the fastest head-to-tail chain through the edges whose
//! target still has room for one more job, gives that chain as many
//! concurrent jobs as its tightest hop allows, and removes the edges that can
//! no longer take a job. The emitted chains are exactly the ones a
//! join-the-fastest-free-chain dispatcher would ever use.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AllocatedChain, BlockPlacement, ChainEdge, Cluster, ComposedSystem, Node, ServerChain};
use crate::oracles::{self, OracleLimits};

/// Routing topology over the extended server set. An edge is active while
/// its target has at least `m_ij` residual slots (the tail is unconstrained).
#[derive(Debug, Clone)]
pub struct RoutingGraph {
    edges: Vec<ChainEdge>,
    cost: Vec<f64>,
    active: Vec<bool>,
    /// Used nodes ordered by decreasing end position `a + m`; edges strictly
    /// increase the end position, so this is a reverse topological order.
    order: Vec<Node>,
    /// Outgoing edge indices per node slot, targets ascending.
    out: Vec<Vec<usize>>,
    server_count: usize,
}

impl RoutingGraph {
    pub fn new(cluster: &Cluster, placement: &BlockPlacement, residual: &[u64]) -> Self {
        let edges = placement.feasible_edges();
        let cost = edges.iter().map(|e| cluster.hop_time(e.to, e.blocks)).collect();
        let server_count = placement.server_count();
        let mut out = vec![Vec::new(); server_count + 2];
        for (idx, e) in edges.iter().enumerate() {
            out[slot(e.from, server_count)].push(idx);
        }
        let mut order: Vec<Node> = placement.nodes().collect();
        order.sort_by_key(|&n| {
            let (a, m) = placement.range(n).expect("placed");
            std::cmp::Reverse(a + m)
        });
        let mut graph = RoutingGraph {
            edges,
            cost,
            active: Vec::new(),
            order,
            out,
            server_count,
        };
        graph.active = graph.edges.iter().map(|e| admits(e, residual)).collect();
        graph
    }

    pub fn active_edge_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn active_edges(&self) -> impl Iterator<Item = &ChainEdge> + '_ {
        self.edges.iter().zip(&self.active).filter(|(_, &a)| a).map(|(e, _)| e)
    }

    /// Deactivates every edge whose target no longer has `m_ij` free slots.
    pub fn prune(&mut self, residual: &[u64]) {
        for (e, active) in self.edges.iter().zip(self.active.iter_mut()) {
            if *active && !admits(e, residual) {
                *active = false;
            }
        }
    }

    /// Minimum-cost head-to-tail path over active edges; among equal-cost
    /// paths, the one with the lexicographically smallest node sequence.
    pub fn shortest_path(&self) -> Option<Vec<ChainEdge>> {
        let n = self.server_count + 2;
        let mut dist = vec![f64::INFINITY; n];
        dist[slot(Node::Tail, self.server_count)] = 0.0;
        for &node in &self.order {
            let s = slot(node, self.server_count);
            for &idx in &self.out[s] {
                if !self.active[idx] {
                    continue;
                }
                let d = self.cost[idx] + dist[slot(self.edges[idx].to, self.server_count)];
                if d < dist[s] {
                    dist[s] = d;
                }
            }
        }
        let mut cur = slot(Node::Head, self.server_count);
        if dist[cur].is_infinite() {
            return None;
        }
        let mut path = Vec::new();
        loop {
            // out[cur] is sorted by target node, so the first match is the
            // lexicographically smallest continuation.
            let idx = self.out[cur]
                .iter()
                .copied()
                .find(|&idx| {
                    self.active[idx]
                        && self.cost[idx] + dist[slot(self.edges[idx].to, self.server_count)] == dist[cur]
                })
                .expect("shortest-path distance realized by some edge");
            let e = self.edges[idx];
            path.push(e);
            if e.to == Node::Tail {
                return Some(path);
            }
            cur = slot(e.to, self.server_count);
        }
    }
}

fn slot(node: Node, server_count: usize) -> usize {
    match node {
        Node::Head => 0,
        Node::Server(j) => j + 1,
        Node::Tail => server_count + 1,
    }
}

fn admits(e: &ChainEdge, residual: &[u64]) -> bool {
    match e.to {
        Node::Server(j) => residual[j] >= e.blocks as u64,
        _ => true,
    }
}

/// Full record of a GCA run, chains in emission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcaRun {
    pub chains: Vec<AllocatedChain>,
    pub initial_residual: Vec<u64>,
    pub final_residual: Vec<u64>,
    /// Active edges before the first iteration.
    pub initial_edges: usize,
}

impl GcaRun {
    pub fn into_system(self, placement: BlockPlacement) -> ComposedSystem {
        ComposedSystem::new(placement, self.chains)
    }
}

/// GCA on `placement` using the cache slots its servers have left.
pub fn gca(cluster: &Cluster, placement: &BlockPlacement) -> Result<ComposedSystem> {
    let residual = cluster.residual_slots(placement)?;
    Ok(gca_with_residuals(cluster, placement, &residual)?.into_system(placement.clone()))
}

/// GCA starting from explicit residual slot counts.
pub fn gca_with_residuals(cluster: &Cluster, placement: &BlockPlacement, residual: &[u64]) -> Result<GcaRun> {
    if residual.len() != placement.server_count() || placement.server_count() != cluster.server_count() {
        return Err(Error::invalid("residual slots, placement and cluster disagree on server count"));
    }
    let initial_residual = residual.to_vec();
    let mut residual = residual.to_vec();
    let mut graph = RoutingGraph::new(cluster, placement, &residual);
    let initial_edges = graph.active_edge_count();
    let mut chains = Vec::new();

    while let Some(hops) = graph.shortest_path() {
        let capacity = hops
            .iter()
            .filter_map(|e| match e.to {
                Node::Server(j) => Some(residual[j] / e.blocks as u64),
                _ => None,
            })
            .min()
            .expect("every chain visits a real server");
        assert!(capacity >= 1, "active edges always admit one more job");
        for e in &hops {
            if let Node::Server(j) = e.to {
                residual[j] -= e.blocks as u64 * capacity;
            }
        }
        graph.prune(&residual);
        let nodes: Vec<Node> = std::iter::once(Node::Head).chain(hops.iter().map(|e| e.to)).collect();
        chains.push(AllocatedChain {
            chain: ServerChain::new(cluster, placement, &nodes)?,
            capacity,
        });
        if chains.len() > initial_edges {
            return Err(Error::Numerical("GCA exceeded its iteration bound".into()));
        }
    }

    Ok(GcaRun {
        chains,
        initial_residual,
        final_residual: residual,
        initial_edges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SufficiencyReport {
    Passed {
        levels: Vec<usize>,
    },
    Failed {
        level: usize,
        faster_chain: Vec<Node>,
        faster_time: f64,
        gca_time: Option<f64>,
    },
    Skipped {
        reason: String,
    },
}

impl SufficiencyReport {
    pub fn passed(&self) -> bool {
        matches!(self, SufficiencyReport::Passed { .. })
    }
}

/// Randomized check that no chain outside a GCA run could beat it under
/// fastest-free-chain dispatch.
///
/// A probe at level `l` fills GCA chains `1..l-1` to capacity and enumerates
/// every chain still admissible under the remaining slots; none may be
/// strictly faster than GCA chain `l`. Level `K + 1` checks that nothing is
/// admissible once every GCA chain is full. When `probe_count` covers all
/// `K + 1` levels every level is checked, otherwise levels are sampled.
pub fn verify_jffc_sufficiency(
    cluster: &Cluster,
    placement: &BlockPlacement,
    run: &GcaRun,
    probe_count: usize,
    seed: u64,
    limits: &OracleLimits,
) -> SufficiencyReport {
    if cluster.server_count() > limits.max_servers {
        return SufficiencyReport::Skipped {
            reason: format!(
                "{} servers exceeds the enumeration limit of {}",
                cluster.server_count(),
                limits.max_servers
            ),
        };
    }
    let all_chains = match oracles::enumerate_chains(placement, limits) {
        Ok(chains) => chains,
        Err(e) => {
            return SufficiencyReport::Skipped { reason: e.to_string() };
        }
    };

    let k = run.chains.len();
    let levels: Vec<usize> = if probe_count > k {
        (1..=k + 1).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, k + 1, probe_count).into_iter().map(|i| i + 1).collect();
        picked.sort_unstable();
        picked
    };

    for &level in &levels {
        let mut residual = run.initial_residual.clone();
        for allocated in &run.chains[..level - 1] {
            for e in allocated.chain.hops() {
                if let Node::Server(j) = e.to {
                    residual[j] -= e.blocks as u64 * allocated.capacity;
                }
            }
        }
        let best = all_chains
            .iter()
            .filter(|hops| hops.iter().all(|e| admits(e, &residual)))
            .map(|hops| (crate::model::chain_service_time(cluster, hops), hops))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let gca_time = run.chains.get(level - 1).map(|c| c.chain.service_time());
        let violation = match (best, gca_time) {
            (Some((t, hops)), Some(g)) if t < g - 1e-12 * g.abs().max(1.0) => Some((t, hops)),
            (Some((t, hops)), None) => Some((t, hops)),
            _ => None,
        };
        if let Some((t, hops)) = violation {
            return SufficiencyReport::Failed {
                level,
                faster_chain: std::iter::once(Node::Head).chain(hops.iter().map(|e| e.to)).collect(),
                faster_time: t,
                gca_time,
            };
        }
    }
    SufficiencyReport::Passed { levels }
}
