//! System model: servers, the block-chain service, block placements and the
//! server chains that can be composed from a placement.
//!
//! Memory is tracked in integer bytes everywhere. The floor divisions that turn
//! residual memory into cache slots (and memory into per-server block counts)
//! are exact integer arithmetic.

use std::collections::HashSet;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decimal gigabyte, the unit used by the hardware profiles.
pub const BYTES_PER_GB: u64 = 1_000_000_000;

/// Converts decimal gigabytes to bytes, rounding to the nearest byte.
pub fn gb_to_bytes(gb: f64) -> u64 {
    (gb * BYTES_PER_GB as f64).round() as u64
}

/// The chain-structured service: `block_count` blocks of `block_bytes` each,
/// and `cache_slot_bytes` of cache per block per concurrently served job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub block_count: usize,
    pub block_bytes: u64,
    pub cache_slot_bytes: u64,
}

impl ServiceSpec {
    pub fn new(block_count: usize, block_bytes: u64, cache_slot_bytes: u64) -> Result<Self> {
        let spec = ServiceSpec {
            block_count,
            block_bytes,
            cache_slot_bytes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_count == 0 {
            return Err(Error::invalid("block_count must be at least 1"));
        }
        if self.block_bytes == 0 {
            return Err(Error::invalid("block_bytes must be at least 1"));
        }
        if self.cache_slot_bytes == 0 {
            return Err(Error::invalid("cache_slot_bytes must be at least 1"));
        }
        Ok(())
    }
}

/// A physical server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub id: String,
    pub memory_bytes: u64,
    /// Mean communication time to take part in one job, seconds.
    #[serde(rename = "comm_time_s")]
    pub comm_time: f64,
    /// Mean computation time per block per job, seconds.
    #[serde(rename = "per_block_compute_s")]
    pub per_block_compute: f64,
}

impl ServerSpec {
    pub fn new(id: impl Into<String>, memory_bytes: u64, comm_time: f64, per_block_compute: f64) -> Self {
        ServerSpec {
            id: id.into(),
            memory_bytes,
            comm_time,
            per_block_compute,
        }
    }
}

/// A node of the extended server set: the dummy head, a real server (by index
/// into [`Cluster::servers`]), or the dummy tail.
///
/// The derived order (head, servers by index, tail) is the node-id order used
/// for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Head,
    Server(usize),
    Tail,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Head => f.write_str("head"),
            Node::Server(j) => write!(f, "server#{j}"),
            Node::Tail => f.write_str("tail"),
        }
    }
}

/// Service definition plus the servers available to host it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    #[serde(flatten)]
    pub service: ServiceSpec,
    pub servers: Vec<ServerSpec>,
}

impl Cluster {
    pub fn new(service: ServiceSpec, servers: Vec<ServerSpec>) -> Result<Self> {
        let cluster = Cluster { service, servers };
        cluster.validate()?;
        Ok(cluster)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cluster: Cluster = serde_json::from_str(s)?;
        cluster.validate()?;
        Ok(cluster)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.service.validate()?;
        let mut seen = HashSet::new();
        for s in &self.servers {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate server id {:?}", s.id)));
            }
            if !(s.comm_time.is_finite() && s.comm_time >= 0.0) {
                return Err(Error::invalid(format!("server {}: comm_time_s must be finite and >= 0", s.id)));
            }
            if !(s.per_block_compute.is_finite() && s.per_block_compute >= 0.0) {
                return Err(Error::invalid(format!(
                    "server {}: per_block_compute_s must be finite and >= 0",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.service.block_count
    }

    pub fn server_count(&self) -> usize {
        self.servers.len()
    }

    /// Residual cache slots at server `j` after hosting `blocks` blocks:
    /// `floor((M_j - s_m * blocks) / s_c)`.
    pub fn cache_slots(&self, j: usize, blocks: usize) -> Result<u64> {
        let server = &self.servers[j];
        let used = self.service.block_bytes * blocks as u64;
        if used > server.memory_bytes {
            return Err(Error::MemoryExceeded {
                server: server.id.clone(),
                needed: used,
                available: server.memory_bytes,
            });
        }
        Ok((server.memory_bytes - used) / self.service.cache_slot_bytes)
    }

    /// Residual cache slots of every server under `placement`.
    pub fn residual_slots(&self, placement: &BlockPlacement) -> Result<Vec<u64>> {
        self.check_shape(placement)?;
        (0..self.servers.len())
            .map(|j| self.cache_slots(j, placement.blocks_at(j)))
            .collect()
    }

    /// Total memory used by server `j` when it processes `jobs[k].1` concurrent
    /// jobs arriving over each edge `(jobs[k].0, j)`.
    pub fn memory_consumption(&self, placement: &BlockPlacement, j: usize, jobs: &[(Node, u64)]) -> Result<u64> {
        self.check_shape(placement)?;
        let to = Node::Server(j);
        let mut slots = 0u64;
        for &(from, count) in jobs {
            let edge = placement
                .edge(from, to)
                .ok_or(Error::InfeasibleEdge { from, to })?;
            slots += count * edge.blocks as u64;
        }
        Ok(self.service.block_bytes * placement.blocks_at(j) as u64 + self.service.cache_slot_bytes * slots)
    }

    /// Checks that every server holds its placed blocks within its memory.
    pub fn check_placement(&self, placement: &BlockPlacement) -> Result<()> {
        self.residual_slots(placement).map(|_| ())
    }

    /// Time contributed by entering `to` and processing `blocks` blocks there.
    pub fn hop_time(&self, to: Node, blocks: usize) -> f64 {
        match to {
            Node::Server(j) => {
                let s = &self.servers[j];
                s.comm_time + s.per_block_compute * blocks as f64
            }
            Node::Head | Node::Tail => 0.0,
        }
    }

    fn check_shape(&self, placement: &BlockPlacement) -> Result<()> {
        if placement.server_count() != self.servers.len() || placement.block_count() != self.block_count() {
            return Err(Error::invalid(format!(
                "placement covers {} servers / {} blocks, cluster has {} / {}",
                placement.server_count(),
                placement.block_count(),
                self.servers.len(),
                self.block_count()
            )));
        }
        Ok(())
    }
}

/// Contiguous range of blocks `first..first+count-1` hosted by one server.
/// `count == 0` means the server is unused and `first` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockRange {
    pub first: usize,
    pub count: usize,
}

/// Per-server block ranges for a service of `block_count` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPlacement")]
pub struct BlockPlacement {
    block_count: usize,
    ranges: Vec<BlockRange>,
}

#[derive(Deserialize)]
struct RawPlacement {
    block_count: usize,
    ranges: Vec<BlockRange>,
}

impl TryFrom<RawPlacement> for BlockPlacement {
    type Error = Error;

    fn try_from(raw: RawPlacement) -> Result<Self> {
        BlockPlacement::new(raw.block_count, raw.ranges)
    }
}

impl BlockPlacement {
    /// A placement with every server unused.
    pub fn empty(block_count: usize, server_count: usize) -> Self {
        BlockPlacement {
            block_count,
            ranges: vec![BlockRange::default(); server_count],
        }
    }

    pub fn new(block_count: usize, ranges: Vec<BlockRange>) -> Result<Self> {
        let mut placement = BlockPlacement::empty(block_count, ranges.len());
        for (j, r) in ranges.into_iter().enumerate() {
            placement.set(j, r.first, r.count)?;
        }
        Ok(placement)
    }

    /// Places blocks `first..first+count-1` at server `j` (`count == 0` clears it).
    pub fn set(&mut self, j: usize, first: usize, count: usize) -> Result<()> {
        if count == 0 {
            self.ranges[j] = BlockRange::default();
            return Ok(());
        }
        if first < 1 || first + count - 1 > self.block_count {
            return Err(Error::invalid(format!(
                "server #{j}: blocks {first}..{} outside 1..{}",
                first + count - 1,
                self.block_count
            )));
        }
        self.ranges[j] = BlockRange { first, count };
        Ok(())
    }

    pub fn clear(&mut self, j: usize) {
        self.ranges[j] = BlockRange::default();
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn server_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[BlockRange] {
        &self.ranges
    }

    pub fn blocks_at(&self, j: usize) -> usize {
        self.ranges[j].count
    }

    pub fn used_servers(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges
            .iter()
            .enumerate()
            .filter(|(_, r)| r.count > 0)
            .map(|(j, _)| j)
    }

    /// `(first block, block count)` of any node of the extended server set;
    /// `None` for unused servers. The head hosts dummy block 0 and the tail
    /// dummy block `L + 1`.
    pub fn range(&self, node: Node) -> Option<(usize, usize)> {
        match node {
            Node::Head => Some((0, 1)),
            Node::Tail => Some((self.block_count + 1, 1)),
            Node::Server(j) => {
                let r = self.ranges[j];
                (r.count > 0).then_some((r.first, r.count))
            }
        }
    }

    /// The edge `from -> to` if a chain may traverse the two consecutively,
    /// i.e. `a_to <= a_from + m_from <= a_to + m_to - 1`.
    pub fn edge(&self, from: Node, to: Node) -> Option<ChainEdge> {
        let (a_i, m_i) = self.range(from)?;
        let (a_j, m_j) = self.range(to)?;
        let next = a_i + m_i;
        (a_j <= next && next < a_j + m_j).then(|| ChainEdge {
            from,
            to,
            blocks: a_j + m_j - next,
        })
    }

    /// Head, every used server in index order, then the tail.
    pub fn nodes(&self) -> impl Iterator<Item = Node> + '_ {
        std::iter::once(Node::Head)
            .chain(self.used_servers().map(Node::Server))
            .chain(std::iter::once(Node::Tail))
    }

    /// Every feasible edge, ordered by `(from, to)`.
    pub fn feasible_edges(&self) -> Vec<ChainEdge> {
        let nodes: Vec<Node> = self.nodes().collect();
        let mut edges = Vec::new();
        for &from in &nodes {
            for &to in &nodes {
                if let Some(e) = self.edge(from, to) {
                    edges.push(e);
                }
            }
        }
        edges
    }
}

/// One hop of a chain: after `from`, server `to` processes `blocks` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEdge {
    pub from: Node,
    pub to: Node,
    pub blocks: usize,
}

/// Mean service time of a sequence of hops: `sum(tau_c_j + tau_p_j * m_ij)`.
pub fn chain_service_time(cluster: &Cluster, hops: &[ChainEdge]) -> f64 {
    hops.iter().map(|e| cluster.hop_time(e.to, e.blocks)).sum()
}

/// An ordered path from the head to the tail through feasible edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerChain {
    hops: Vec<ChainEdge>,
    #[serde(rename = "service_time_s")]
    service_time: f64,
}

impl ServerChain {
    /// Builds the chain visiting `nodes`, which must start at the head, end
    /// at the tail and only use feasible edges.
    pub fn new(cluster: &Cluster, placement: &BlockPlacement, nodes: &[Node]) -> Result<Self> {
        if nodes.first() != Some(&Node::Head) || nodes.last() != Some(&Node::Tail) || nodes.len() < 3 {
            return Err(Error::invalid("a chain must run from the head through servers to the tail"));
        }
        let hops = nodes
            .windows(2)
            .map(|w| placement.edge(w[0], w[1]).ok_or(Error::InfeasibleEdge { from: w[0], to: w[1] }))
            .collect::<Result<Vec<_>>>()?;
        let service_time = chain_service_time(cluster, &hops);
        Ok(ServerChain { hops, service_time })
    }

    pub fn hops(&self) -> &[ChainEdge] {
        &self.hops
    }

    pub fn nodes(&self) -> Vec<Node> {
        std::iter::once(Node::Head).chain(self.hops.iter().map(|e| e.to)).collect()
    }

    /// Real servers in traversal order.
    pub fn servers(&self) -> impl Iterator<Item = usize> + '_ {
        self.hops.iter().filter_map(|e| match e.to {
            Node::Server(j) => Some(j),
            _ => None,
        })
    }

    /// Mean service time `T_k`, seconds.
    pub fn service_time(&self) -> f64 {
        self.service_time
    }

    /// `mu_k = 1 / T_k`.
    pub fn service_rate(&self) -> f64 {
        1.0 / self.service_time
    }

    /// Blocks processed on each hop, in order. For a valid chain these tile
    /// `1..=L` followed by the tail's dummy block `L+1`.
    pub fn processed_blocks(&self, placement: &BlockPlacement) -> Vec<RangeInclusive<usize>> {
        self.hops
            .iter()
            .map(|e| {
                let (a, m) = placement.range(e.to).expect("chain node is placed");
                (a + m - e.blocks)..=(a + m - 1)
            })
            .collect()
    }
}

/// A chain together with its capacity (maximum concurrent jobs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocatedChain {
    pub chain: ServerChain,
    pub capacity: u64,
}

/// A block placement and the chains composed on top of it, ordered by
/// descending service rate (stable with respect to the order supplied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedSystem {
    pub placement: BlockPlacement,
    pub chains: Vec<AllocatedChain>,
}

impl ComposedSystem {
    pub fn new(placement: BlockPlacement, mut chains: Vec<AllocatedChain>) -> Self {
        chains.sort_by(|a, b| a.chain.service_time().total_cmp(&b.chain.service_time()));
        ComposedSystem { placement, chains }
    }

    /// `nu = sum(c_k * mu_k)`.
    pub fn total_rate(&self) -> f64 {
        self.chains
            .iter()
            .map(|c| c.capacity as f64 * c.chain.service_rate())
            .sum()
    }

    /// `C = sum(c_k)`.
    pub fn total_capacity(&self) -> u64 {
        self.chains.iter().map(|c| c.capacity).sum()
    }

    /// `(mu_k, c_k)` pairs in order.
    pub fn rates(&self) -> Vec<(f64, u64)> {
        self.chains
            .iter()
            .map(|c| (c.chain.service_rate(), c.capacity))
            .collect()
    }

    /// Cache slots each server has committed: `sum over k of m_ij * c_k`.
    pub fn slot_usage(&self) -> Vec<u64> {
        slot_usage(
            self.placement.server_count(),
            self.chains.iter().map(|c| (&c.chain, c.capacity)),
        )
    }
}

fn slot_usage<'a>(server_count: usize, chains: impl Iterator<Item = (&'a ServerChain, u64)>) -> Vec<u64> {
    let mut usage = vec![0u64; server_count];
    for (chain, capacity) in chains {
        for e in chain.hops() {
            if let Node::Server(j) = e.to {
                usage[j] += e.blocks as u64 * capacity;
            }
        }
    }
    usage
}

/// Objective and constraint check of the joint placement/cache-allocation
/// problem for a given set of chains and capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpcaReport {
    /// `sum(c_k)`.
    pub objective: u64,
    /// `sum(c_k / T_k)`.
    pub total_rate: f64,
    /// `lambda / rho_bar`.
    pub required_rate: f64,
    pub rate_ok: bool,
    pub memory_ok: bool,
    /// Servers whose cache constraint (or block memory) is violated.
    pub memory_violations: Vec<usize>,
}

pub fn evaluate_bpca(
    cluster: &Cluster,
    placement: &BlockPlacement,
    chains: &[ServerChain],
    capacities: &[u64],
    lambda: f64,
    rho_bar: f64,
) -> Result<BpcaReport> {
    if chains.len() != capacities.len() {
        return Err(Error::invalid(format!(
            "{} chains but {} capacities",
            chains.len(),
            capacities.len()
        )));
    }
    let objective = capacities.iter().sum();
    let total_rate = chains
        .iter()
        .zip(capacities)
        .map(|(k, &c)| c as f64 / k.service_time())
        .sum::<f64>();
    let required_rate = lambda / rho_bar;
    let usage = slot_usage(placement.server_count(), chains.iter().zip(capacities.iter().copied()));
    let memory_violations: Vec<usize> = (0..cluster.server_count())
        .filter(|&j| match cluster.cache_slots(j, placement.blocks_at(j)) {
            Ok(slots) => usage[j] > slots,
            Err(_) => true,
        })
        .collect();
    Ok(BpcaReport {
        objective,
        total_rate,
        required_rate,
        rate_ok: total_rate >= required_rate,
        memory_ok: memory_violations.is_empty(),
        memory_violations,
    })
}
