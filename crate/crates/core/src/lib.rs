//! Server-chain composition for memory-bound, chain-structured job serving
//! such as pipeline-parallel transformer inference.
//!
//! The pipeline: place blocks on servers ([`placement`]), allocate cache
//! capacity to chains ([`cache`]), dispatch jobs to chains ([`sim`]), and
//! predict response times ([`analysis`]). [`oracles`] holds brute-force
//! references for small instances and [`workload`] builds service-time
//! parameters and arrival streams.

// NaN must fail validation, so `!(x > 0.0)` is intended
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cache;
pub mod error;
pub mod model;
pub mod oracles;
pub mod placement;
pub mod sim;
pub mod workload;

pub use analysis::{bound_tuning, exact_k2, occupancy_bounds, BoundKind, ChainRates, OccupancyBounds};
pub use cache::{gca, verify_jffc_sufficiency, SufficiencyReport};
pub use error::{Error, ErrorKind, Result};
pub use model::{
    evaluate_bpca, AllocatedChain, BlockPlacement, BlockRange, BpcaReport, ChainEdge, Cluster, ComposedSystem, Node,
    ServerChain, ServerSpec, ServiceSpec,
};
pub use placement::{gbp_cr, surrogate_tuning, PlacementResult};
pub use sim::{run_sim, Policy, SimConfig, SimStats};
