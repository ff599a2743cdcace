//! Discrete-event simulation of composed chains under a load-balancing policy.
//!
//! Each chain `k` is a pool of `c_k` identical job servers. JFFC keeps one
//! central FCFS queue; the baseline policies route every arrival to a chain
//! and keep a FIFO queue per chain.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::ComposedSystem;
use crate::workload::{ChainCost, SizedJob, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Join the fastest free chain, else the central queue.
    Jffc,
    /// Join the chain with the fewest jobs per unit of capacity.
    Jsq,
    /// Join a random idle job server, else a random job server.
    Jiq,
    /// Smallest expected delay `(n_k + 1) / (c_k mu_k)`.
    Sed,
    /// JSQ with ties broken toward the fastest chain.
    SaJsq,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Jffc, Policy::Jsq, Policy::Jiq, Policy::Sed, Policy::SaJsq];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Jffc => "jffc",
            Policy::Jsq => "jsq",
            Policy::Jiq => "jiq",
            Policy::Sed => "sed",
            Policy::SaJsq => "sa-jsq",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "jffc" => Ok(Policy::Jffc),
            "jsq" => Ok(Policy::Jsq),
            "jiq" => Ok(Policy::Jiq),
            "sed" => Ok(Policy::Sed),
            "sa-jsq" | "sajsq" => Ok(Policy::SaJsq),
            _ => Err(Error::invalid(format!("unknown policy {s:?}"))),
        }
    }
}

/// One chain as the simulator sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimChain {
    pub rate: f64,
    pub capacity: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDist {
    /// Unit-mean exponential.
    Exponential,
    /// Every job has size 1.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadSource {
    /// Poisson arrivals at `lambda`; a job of size `r` takes `r / mu_k` on chain `k`.
    Stochastic { lambda: f64, sizes: SizeDist },
    /// Recorded arrivals and sizes, served like the stochastic mode.
    Sized(Vec<SizedJob>),
    /// Trace requests; chain `k` serves one in `costs[k].duration(in, out)`.
    Trace { requests: Vec<TraceRecord>, costs: Vec<ChainCost> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Total arrivals, warmup included.
    Jobs(u64),
    /// Arrivals up to this time, seconds.
    Time(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Fastest first; JFFC prefers lower indices.
    pub chains: Vec<SimChain>,
    pub workload: WorkloadSource,
    pub policy: Policy,
    pub horizon: Horizon,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub replications: u32,
    /// Keep per-job response times for quantiles.
    pub keep_samples: bool,
    /// Keep per-job records.
    pub record_jobs: bool,
}

pub const DEFAULT_WARMUP: f64 = 0.1;

impl SimConfig {
    /// Poisson arrivals with exponential sizes over `system`'s chains.
    pub fn stochastic(system: &ComposedSystem, lambda: f64, policy: Policy, jobs: u64, seed: u64, replications: u32) -> Self {
        Self::from_rates(&system.rates(), lambda, policy, jobs, seed, replications)
    }

    pub fn from_rates(rates: &[(f64, u64)], lambda: f64, policy: Policy, jobs: u64, seed: u64, replications: u32) -> Self {
        SimConfig {
            chains: rates
                .iter()
                .map(|&(rate, capacity)| SimChain { rate, capacity })
                .collect(),
            workload: WorkloadSource::Stochastic {
                lambda,
                sizes: SizeDist::Exponential,
            },
            policy,
            horizon: Horizon::Jobs(jobs),
            warmup_fraction: DEFAULT_WARMUP,
            seed,
            replications,
            keep_samples: false,
            record_jobs: false,
        }
    }

    pub fn total_rate(&self) -> f64 {
        self.chains.iter().map(|c| c.rate * c.capacity as f64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains.is_empty() {
            return Err(Error::invalid("simulation needs at least one chain"));
        }
        if self.chains.iter().any(|c| !(c.rate.is_finite() && c.rate > 0.0) || c.capacity == 0) {
            return Err(Error::invalid("chain rates must be positive and capacities >= 1"));
        }
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup fraction must lie in [0, 0.5]"));
        }
        match self.horizon {
            Horizon::Jobs(n) if n >= 1 => {}
            Horizon::Time(t) if t.is_finite() && t > 0.0 => {}
            _ => return Err(Error::invalid("horizon must be at least one job or a positive time")),
        }
        if self.replications == 0 {
            return Err(Error::invalid("at least one replication is required"));
        }
        match &self.workload {
            WorkloadSource::Stochastic { lambda, .. } => {
                if !(lambda.is_finite() && *lambda > 0.0) {
                    return Err(Error::invalid("arrival rate must be positive"));
                }
            }
            WorkloadSource::Sized(jobs) => {
                check_arrivals(jobs.iter().map(|j| j.arrival_s))?;
                if jobs.iter().any(|j| !(j.size.is_finite() && j.size >= 0.0)) {
                    return Err(Error::invalid("job sizes must be finite and >= 0"));
                }
            }
            WorkloadSource::Trace { requests, costs } => {
                check_arrivals(requests.iter().map(|r| r.arrival_s))?;
                if costs.len() != self.chains.len() {
                    return Err(Error::invalid(format!(
                        "{} chain costs for {} chains",
                        costs.len(),
                        self.chains.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_arrivals(arrivals: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    let mut count = 0u64;
    for (i, t) in arrivals.enumerate() {
        // data row i sits on line i + 2 of a CSV with a header
        if !(t.is_finite() && t >= prev) {
            return Err(Error::Trace {
                line: i as u64 + 2,
                message: format!("arrival {t} is not after the previous arrival {prev}"),
            });
        }
        prev = t;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("workload has no jobs"));
    }
    Ok(())
}

/// Queue a job waits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueId {
    Central,
    Chain(usize),
}

/// State visible to a policy.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub chains: &'a [SimChain],
    pub busy: &'a [u64],
    /// Per-chain queue lengths (all zero under JFFC).
    pub queued: &'a [u64],
    pub central_queued: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// `draw` is a uniform variate in `[0, 1)` for randomized policies.
    Arrival { draw: f64 },
    Completion { chain: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Start the arriving job on a chain.
    Serve(usize),
    /// Queue the arriving job.
    Enqueue(QueueId),
    /// Start the head of a queue on the chain that just freed a slot.
    Dequeue { queue: QueueId, chain: usize },
    Idle,
}

/// What `policy` does on `event`. Ties go to the lowest chain index.
pub fn policy_step(policy: Policy, snap: &Snapshot<'_>, event: Event) -> Decision {
    match event {
        Event::Completion { chain } => match policy {
            Policy::Jffc if snap.central_queued > 0 => Decision::Dequeue {
                queue: QueueId::Central,
                chain,
            },
            Policy::Jffc => Decision::Idle,
            _ if snap.queued[chain] > 0 => Decision::Dequeue {
                queue: QueueId::Chain(chain),
                chain,
            },
            _ => Decision::Idle,
        },
        Event::Arrival { draw } => {
            if policy == Policy::Jffc {
                return match (0..snap.chains.len()).find(|&k| snap.busy[k] < snap.chains[k].capacity) {
                    Some(k) => Decision::Serve(k),
                    None => Decision::Enqueue(QueueId::Central),
                };
            }
            let k = route(policy, snap, draw);
            if snap.busy[k] < snap.chains[k].capacity && snap.queued[k] == 0 {
                Decision::Serve(k)
            } else {
                Decision::Enqueue(QueueId::Chain(k))
            }
        }
    }
}

fn route(policy: Policy, snap: &Snapshot<'_>, draw: f64) -> usize {
    let k_count = snap.chains.len();
    let load = |k: usize| snap.busy[k] + snap.queued[k];
    // n_a / c_a < n_b / c_b without division
    let less_loaded = |a: usize, b: usize| -> Ordering {
        let lhs = load(a) as u128 * snap.chains[b].capacity as u128;
        let rhs = load(b) as u128 * snap.chains[a].capacity as u128;
        lhs.cmp(&rhs)
    };
    match policy {
        Policy::Jsq => (1..k_count).fold(0, |best, k| if less_loaded(k, best).is_lt() { k } else { best }),
        Policy::SaJsq => (1..k_count).fold(0, |best, k| match less_loaded(k, best) {
            Ordering::Less => k,
            Ordering::Equal if snap.chains[k].rate > snap.chains[best].rate => k,
            _ => best,
        }),
        Policy::Sed => {
            let delay = |k: usize| (load(k) + 1) as f64 / (snap.chains[k].capacity as f64 * snap.chains[k].rate);
            (1..k_count).fold(0, |best, k| if delay(k) < delay(best) { k } else { best })
        }
        Policy::Jiq => {
            let idle: u64 = (0..k_count).map(|k| snap.chains[k].capacity - snap.busy[k].min(snap.chains[k].capacity)).sum();
            if idle > 0 {
                weighted_pick(k_count, idle, draw, |k| snap.chains[k].capacity - snap.busy[k].min(snap.chains[k].capacity))
            } else {
                let total: u64 = snap.chains.iter().map(|c| c.capacity).sum();
                weighted_pick(k_count, total, draw, |k| snap.chains[k].capacity)
            }
        }
        Policy::Jffc => unreachable!("JFFC does not route to per-chain queues"),
    }
}

fn weighted_pick(k_count: usize, total: u64, draw: f64, weight: impl Fn(usize) -> u64) -> usize {
    let target = ((draw * total as f64) as u64).min(total - 1);
    let mut acc = 0;
    for k in 0..k_count {
        acc += weight(k);
        if target < acc {
            return k;
        }
    }
    k_count - 1
}

/// One job's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job: u64,
    pub arrival_s: f64,
    pub start_s: f64,
    pub finish_s: f64,
    pub chain_id: usize,
}

/// Statistics of one replication over its measured jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationStats {
    pub replication: u32,
    pub measured_jobs: u64,
    pub mean_response: f64,
    pub mean_waiting: f64,
    pub mean_service: f64,
    /// Time average of jobs in system between the first measured arrival and the last arrival.
    pub mean_occupancy: f64,
    /// Measured arrivals per second over the same window.
    pub throughput: f64,
    /// Busy fraction of each chain's capacity over the window.
    pub utilization: Vec<f64>,
    pub backlog_mid: u64,
    pub backlog_end: u64,
    /// `(backlog_end - backlog_mid) / elapsed`, jobs per second.
    pub backlog_growth: f64,
}

/// Mean across replications with a 95% Student-t half-width (absent with
/// one replication).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: Option<f64>,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate { mean, half_width: None };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("degrees of freedom are positive")
            .inverse_cdf(0.975);
        Estimate {
            mean,
            half_width: Some(t * (var / n as f64).sqrt()),
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width.unwrap_or(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub policy: Policy,
    pub seed: u64,
    pub replications: u32,
    pub measured_jobs: u64,
    pub mean_response: Estimate,
    pub mean_waiting: Estimate,
    pub mean_service: Estimate,
    pub mean_occupancy: Estimate,
    pub throughput: Estimate,
    pub utilization: Vec<Estimate>,
    pub median_response: Option<f64>,
    pub p95_response: Option<f64>,
    pub p99_response: Option<f64>,
    /// `lambda / nu` in stochastic mode.
    pub offered_load: Option<f64>,
    /// Stochastic mode: `lambda >= nu`. Otherwise: the backlog grew in
    /// every replication by more than the total capacity.
    pub unstable: bool,
    pub per_replication: Vec<ReplicationStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub stats: SimStats,
    /// Per replication, sorted by job index, when `record_jobs` is set.
    pub jobs: Vec<Vec<JobRecord>>,
}

/// Runs all replications (in parallel) and aggregates them.
pub fn run_sim(config: &SimConfig) -> Result<SimRun> {
    config.validate()?;
    let results: Vec<Replication> = (0..config.replications)
        .into_par_iter()
        .map(|r| replicate(config, r))
        .collect();

    let per: Vec<ReplicationStats> = results.iter().map(|r| r.stats.clone()).collect();
    let est = |f: fn(&ReplicationStats) -> f64| Estimate::from_samples(&per.iter().map(f).collect::<Vec<_>>());
    let utilization = (0..config.chains.len())
        .map(|k| Estimate::from_samples(&per.iter().map(|p| p.utilization[k]).collect::<Vec<_>>()))
        .collect();

    let (median, p95, p99) = if config.keep_samples {
        let mut all: Vec<f64> = results.iter().flat_map(|r| r.samples.iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        (quantile(&all, 0.5), quantile(&all, 0.95), quantile(&all, 0.99))
    } else {
        (None, None, None)
    };

    let offered_load = match &config.workload {
        WorkloadSource::Stochastic { lambda, .. } => Some(lambda / config.total_rate()),
        _ => None,
    };
    let capacity: u64 = config.chains.iter().map(|c| c.capacity).sum();
    let unstable = match offered_load {
        Some(load) => load >= 1.0,
        None => per.iter().all(|p| p.backlog_end > p.backlog_mid + capacity),
    };

    let stats = SimStats {
        policy: config.policy,
        seed: config.seed,
        replications: config.replications,
        measured_jobs: per.iter().map(|p| p.measured_jobs).sum(),
        mean_response: est(|p| p.mean_response),
        mean_waiting: est(|p| p.mean_waiting),
        mean_service: est(|p| p.mean_service),
        mean_occupancy: est(|p| p.mean_occupancy),
        throughput: est(|p| p.throughput),
        utilization,
        median_response: median,
        p95_response: p95,
        p99_response: p99,
        offered_load,
        unstable,
        per_replication: per,
    };
    Ok(SimRun {
        stats,
        jobs: results.into_iter().map(|r| r.jobs).collect(),
    })
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy)]
struct Job {
    id: u64,
    arrival: f64,
    size: f64,
    input: f64,
    output: f64,
    measured: bool,
}

#[derive(Debug, Clone, Copy)]
struct Completion {
    time: f64,
    chain: usize,
    start: f64,
    job: Job,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.chain.cmp(&other.chain))
            .then(self.job.id.cmp(&other.job.id))
    }
}

struct Replication {
    stats: ReplicationStats,
    samples: Vec<f64>,
    jobs: Vec<JobRecord>,
}

/// Produces arrivals in order.
struct Arrivals<'a> {
    config: &'a SimConfig,
    rng: ChaCha8Rng,
    next_id: u64,
    clock: f64,
    peeked: Option<Job>,
    warmup_jobs: u64,
    warmup_time: f64,
}

impl<'a> Arrivals<'a> {
    fn new(config: &'a SimConfig, rng: ChaCha8Rng) -> Self {
        let (warmup_jobs, warmup_time) = match config.horizon {
            Horizon::Jobs(n) => ((config.warmup_fraction * n as f64).floor() as u64, f64::NEG_INFINITY),
            Horizon::Time(t) => (0, config.warmup_fraction * t),
        };
        let mut a = Arrivals {
            config,
            rng,
            next_id: 0,
            clock: 0.0,
            peeked: None,
            warmup_jobs,
            warmup_time,
        };
        a.peeked = a.generate();
        a
    }

    fn generate(&mut self) -> Option<Job> {
        let id = self.next_id;
        if let Horizon::Jobs(n) = self.config.horizon {
            if id >= n {
                return None;
            }
        }
        let (arrival, size, input, output) = match &self.config.workload {
            WorkloadSource::Stochastic { lambda, sizes } => {
                let gap: f64 = self.rng.sample(Exp1);
                self.clock += gap / lambda;
                let size = match sizes {
                    SizeDist::Exponential => self.rng.sample(Exp1),
                    SizeDist::Deterministic => 1.0,
                };
                (self.clock, size, 0.0, 0.0)
            }
            WorkloadSource::Sized(jobs) => {
                let j = jobs.get(id as usize)?;
                (j.arrival_s, j.size, 0.0, 0.0)
            }
            WorkloadSource::Trace { requests, .. } => {
                let r = requests.get(id as usize)?;
                (r.arrival_s, 0.0, r.input_tokens as f64, r.output_tokens as f64)
            }
        };
        if let Horizon::Time(t) = self.config.horizon {
            if arrival > t {
                return None;
            }
        }
        self.next_id += 1;
        Some(Job {
            id,
            arrival,
            size,
            input,
            output,
            measured: id >= self.warmup_jobs && arrival >= self.warmup_time,
        })
    }

    fn peek_time(&self) -> Option<f64> {
        self.peeked.map(|j| j.arrival)
    }

    fn pop(&mut self) -> Option<Job> {
        let job = self.peeked.take();
        self.peeked = self.generate();
        job
    }
}

/// Time-weighted accumulation over the measurement window.
struct Window {
    open: bool,
    since: f64,
    start: f64,
    end: f64,
    occupancy_area: f64,
    busy_area: Vec<f64>,
}

impl Window {
    fn advance(&mut self, now: f64, in_system: u64, busy: &[u64]) {
        if self.open {
            let dt = now - self.since;
            self.occupancy_area += dt * in_system as f64;
            for (a, &b) in self.busy_area.iter_mut().zip(busy) {
                *a += dt * b as f64;
            }
        }
        self.since = now;
    }
}

fn replicate(config: &SimConfig, replication: u32) -> Replication {
    let mut arrival_rng = ChaCha8Rng::seed_from_u64(config.seed);
    arrival_rng.set_stream(2 * replication as u64);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(config.seed);
    draw_rng.set_stream(2 * replication as u64 + 1);

    let chains = &config.chains;
    let k_count = chains.len();
    let durations = |job: &Job, k: usize| -> f64 {
        match &config.workload {
            WorkloadSource::Trace { costs, .. } => costs[k].duration(job.input, job.output),
            _ => job.size / chains[k].rate,
        }
    };

    let mut arrivals = Arrivals::new(config, arrival_rng);
    let mid_mark = match config.horizon {
        Horizon::Jobs(n) => MidMark::Job(arrivals.warmup_jobs + (n - arrivals.warmup_jobs) / 2),
        Horizon::Time(t) => MidMark::Time((arrivals.warmup_time + t) / 2.0),
    };
    let mut heap: BinaryHeap<Reverse<Completion>> = BinaryHeap::with_capacity(64);
    let mut busy = vec![0u64; k_count];
    let mut queued = vec![0u64; k_count];
    let mut central: VecDeque<Job> = VecDeque::new();
    let mut chain_queues: Vec<VecDeque<Job>> = vec![VecDeque::new(); k_count];
    let mut in_system = 0u64;

    let mut window = Window {
        open: false,
        since: 0.0,
        start: 0.0,
        end: 0.0,
        occupancy_area: 0.0,
        busy_area: vec![0.0; k_count],
    };
    let (mut measured, mut sum_resp, mut sum_wait, mut sum_serv) = (0u64, 0.0, 0.0, 0.0);
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let (mut backlog_mid, mut backlog_end, mut mid_time, mut end_time) = (None, 0u64, 0.0, 0.0);

    loop {
        let next_arrival = arrivals.peek_time();
        let next_completion = heap.peek().map(|c| c.0.time);
        let take_completion = match (next_completion, next_arrival) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(c), Some(a)) => c <= a,
        };
        if take_completion {
            let Reverse(done) = heap.pop().expect("peeked");
            let now = done.time;
            window.advance(now, in_system, &busy);
            let k = done.chain;
            busy[k] -= 1;
            in_system -= 1;
            let job = done.job;
            if job.measured {
                measured += 1;
                sum_resp += now - job.arrival;
                sum_wait += done.start - job.arrival;
                sum_serv += now - done.start;
                if config.keep_samples {
                    samples.push(now - job.arrival);
                }
            }
            if config.record_jobs {
                records.push(JobRecord {
                    job: job.id,
                    arrival_s: job.arrival,
                    start_s: done.start,
                    finish_s: now,
                    chain_id: k,
                });
            }
            let snap = Snapshot {
                chains,
                busy: &busy,
                queued: &queued,
                central_queued: central.len() as u64,
            };
            if let Decision::Dequeue { queue, chain } = policy_step(config.policy, &snap, Event::Completion { chain: k }) {
                let next = match queue {
                    QueueId::Central => central.pop_front(),
                    QueueId::Chain(q) => {
                        queued[q] -= 1;
                        chain_queues[q].pop_front()
                    }
                }
                .expect("policy dequeued from a nonempty queue");
                start(&mut heap, &mut busy, chains, chain, now, next, durations(&next, chain));
            }
        } else {
            let job = arrivals.pop().expect("peeked");
            let now = job.arrival;
            window.advance(now, in_system, &busy);
            if job.measured && !window.open {
                window.open = true;
                window.start = now;
            }
            in_system += 1;
            let draw = if config.policy == Policy::Jiq { draw_rng.random::<f64>() } else { 0.0 };
            let snap = Snapshot {
                chains,
                busy: &busy,
                queued: &queued,
                central_queued: central.len() as u64,
            };
            match policy_step(config.policy, &snap, Event::Arrival { draw }) {
                Decision::Serve(k) => start(&mut heap, &mut busy, chains, k, now, job, durations(&job, k)),
                Decision::Enqueue(QueueId::Central) => central.push_back(job),
                Decision::Enqueue(QueueId::Chain(k)) => {
                    queued[k] += 1;
                    chain_queues[k].push_back(job);
                }
                d => unreachable!("arrival produced {d:?}"),
            }
            if backlog_mid.is_none() && mid_mark.reached(&job) {
                backlog_mid = Some(in_system);
                mid_time = now;
            }
            if arrivals.peek_time().is_none() {
                window.end = now;
                window.open = false;
                backlog_end = in_system;
                end_time = now;
            }
        }
    }

    let span = window.end - window.start;
    let per_time = |area: f64| if span > 0.0 { area / span } else { 0.0 };
    let mean = |sum: f64| if measured > 0 { sum / measured as f64 } else { f64::NAN };
    let backlog_mid = backlog_mid.unwrap_or(backlog_end);
    records.sort_by_key(|r| r.job);
    let stats = ReplicationStats {
        replication,
        measured_jobs: measured,
        mean_response: mean(sum_resp),
        mean_waiting: mean(sum_wait),
        mean_service: mean(sum_serv),
        mean_occupancy: per_time(window.occupancy_area),
        throughput: per_time(measured as f64),
        utilization: window
            .busy_area
            .iter()
            .zip(chains)
            .map(|(&a, c)| per_time(a) / c.capacity as f64)
            .collect(),
        backlog_mid,
        backlog_end,
        backlog_growth: if end_time > mid_time {
            (backlog_end as f64 - backlog_mid as f64) / (end_time - mid_time)
        } else {
            0.0
        },
    };
    Replication {
        stats,
        samples,
        jobs: records,
    }
}

enum MidMark {
    Job(u64),
    Time(f64),
}

impl MidMark {
    fn reached(&self, job: &Job) -> bool {
        match *self {
            MidMark::Job(id) => job.id >= id,
            MidMark::Time(t) => job.arrival >= t,
        }
    }
}

fn start(
    heap: &mut BinaryHeap<Reverse<Completion>>,
    busy: &mut [u64],
    chains: &[SimChain],
    k: usize,
    now: f64,
    job: Job,
    duration: f64,
) {
    busy[k] += 1;
    assert!(busy[k] <= chains[k].capacity, "chain {k} over capacity");
    heap.push(Reverse(Completion {
        time: now + duration,
        chain: k,
        start: now,
        job,
    }));
}
