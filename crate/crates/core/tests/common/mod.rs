#![allow(dead_code)]

use chainserve::model::{gb_to_bytes, BlockPlacement, BlockRange, Cluster, ServerSpec, ServiceSpec};
use chainserve::workload::{GpuProfile, ProfileSet, RttMatrix, ServerProfile, DEFAULT_OVERHEAD_MS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Five servers, three blocks; a block takes 10 bytes and a cache slot 1.
/// Every server has 10 free slots after placement. Server `l` computes a
/// block in `l * eps`; server 2 has a slower link.
pub fn two_chain_example(eps: f64) -> Cluster {
    let service = ServiceSpec::new(3, 10, 1).unwrap();
    let servers = (1..=5)
        .map(|l| {
            let (mem, comm) = if l == 2 { (30, 2.0) } else { (20, 1.0) };
            ServerSpec::new(format!("j{l}"), mem, comm, l as f64 * eps)
        })
        .collect();
    Cluster::new(service, servers).unwrap()
}

pub fn example_placement() -> BlockPlacement {
    let r = |first, count| BlockRange { first, count };
    BlockPlacement::new(3, vec![r(1, 1), r(2, 2), r(1, 1), r(2, 1), r(3, 1)]).unwrap()
}

/// `l` identical servers with room for all `l` blocks plus one cache slot per block.
pub fn identical_servers(l: usize, tau_c: f64, tau_p: f64) -> Cluster {
    let s_c = 1u64;
    let s_m = l as u64 * s_c;
    let service = ServiceSpec::new(l, s_m, s_c).unwrap();
    let servers = (0..l)
        .map(|i| ServerSpec::new(format!("j{}", i + 1), (l as u64 + 1) * s_m, tau_c, tau_p))
        .collect();
    Cluster::new(service, servers).unwrap()
}

pub const BLOCK_GB: f64 = 1.32;
pub const SLOT_GB: f64 = 0.11;

/// Nodes scattered over a 2000 km square; RTT grows with distance.
pub fn rtt_matrix(nodes: usize, seed: u64) -> RttMatrix {
    let mut r = rng(seed);
    let pts: Vec<(f64, f64)> = (0..nodes)
        .map(|_| (r.random_range(0.0..2000.0), r.random_range(0.0..2000.0)))
        .collect();
    let ids: Vec<String> = (0..nodes).map(|i| format!("n{i}")).collect();
    let ms = pts
        .iter()
        .map(|a| {
            pts.iter()
                .map(|b| {
                    let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                    if d == 0.0 {
                        0.0
                    } else {
                        // ~1 ms per 100 km each way plus switching delay
                        2.0 + d / 50.0
                    }
                })
                .collect()
        })
        .collect();
    RttMatrix::new(ids, ms, DEFAULT_OVERHEAD_MS).unwrap()
}

/// `j` servers, a fraction `eta` of them on high-performance GPUs, serving
/// a 70-block model with 2000 input and 20 output tokens on average.
pub fn gpu_pool_profiles(j: usize, eta: f64, seed: u64) -> (ProfileSet, RttMatrix) {
    let rtt = rtt_matrix(j + 1, seed);
    let mut r = rng(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..j).collect();
    order.shuffle(&mut r);
    let high = (eta * j as f64).round() as usize;
    let servers = (0..j)
        .map(|i| {
            let gpu = if order[i] < high {
                GpuProfile::high_performance()
            } else {
                GpuProfile::low_performance()
            };
            ServerProfile {
                id: format!("s{i}"),
                node: format!("n{}", i + 1),
                gpu,
            }
        })
        .collect();
    let set = ProfileSet {
        orchestrator: "n0".into(),
        mean_input_tokens: 2000.0,
        mean_output_tokens: 20.0,
        overhead_ms: DEFAULT_OVERHEAD_MS,
        servers,
    };
    (set, rtt)
}

pub fn gpu_pool_cluster(j: usize, eta: f64, seed: u64) -> Cluster {
    let (set, rtt) = gpu_pool_profiles(j, eta, seed);
    let block = gb_to_bytes(BLOCK_GB);
    let service = ServiceSpec::new(70, block, gb_to_bytes(SLOT_GB)).unwrap();
    Cluster::new(service, set.server_specs(&rtt, block).unwrap()).unwrap()
}

/// Random cluster with `servers` servers and `blocks` blocks. With
/// `homogeneous`, all servers share one memory size.
pub fn random_cluster(r: &mut ChaCha8Rng, servers: usize, blocks: usize, homogeneous: bool) -> Cluster {
    let s_m = r.random_range(5..=20u64);
    let s_c = r.random_range(1..=4u64);
    let service = ServiceSpec::new(blocks, s_m, s_c).unwrap();
    let shared = r.random_range(s_m + s_c..=(blocks as u64 + 1) * (s_m + 3 * s_c));
    let specs = (0..servers)
        .map(|j| {
            let mem = if homogeneous {
                shared
            } else {
                r.random_range(s_m + s_c..=(blocks as u64 + 1) * (s_m + 3 * s_c))
            };
            ServerSpec::new(format!("s{j}"), mem, r.random_range(0.05..2.0), r.random_range(0.01..0.5))
        })
        .collect();
    Cluster::new(service, specs).unwrap()
}

/// Random placement where each server hosts a random range (or nothing)
/// that fits in its memory.
pub fn random_placement(r: &mut ChaCha8Rng, cluster: &Cluster) -> BlockPlacement {
    let l = cluster.block_count();
    let mut p = BlockPlacement::empty(l, cluster.server_count());
    for j in 0..cluster.server_count() {
        let fit = (cluster.servers[j].memory_bytes / cluster.service.block_bytes) as usize;
        let most = fit.min(l);
        if most == 0 || r.random_bool(0.15) {
            continue;
        }
        let count = r.random_range(1..=most);
        let first = r.random_range(1..=l - count + 1);
        p.set(j, first, count).unwrap();
    }
    p
}
