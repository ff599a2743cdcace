//! Workload construction and the token-level service-time model.
//!
//! Per block, a request costs a fixed overhead, a compute-bound prefill term
//! per input token and a memory-bound decode term per output token after the
//! first. Every output token also makes one relay round trip between the
//! orchestrator and the server.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Node, ServerChain, ServerSpec, BYTES_PER_GB};

pub const DEFAULT_OVERHEAD_MS: f64 = 18.0;

/// Hardware figures of one GPU node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile {
    pub tflops: f64,
    pub bandwidth_gb_per_ms: f64,
    pub memory_bytes: u64,
    #[serde(default = "default_block_overhead_ms")]
    pub block_overhead_ms: f64,
    #[serde(default = "default_block_gflop")]
    pub block_gflop: f64,
}

fn default_block_overhead_ms() -> f64 {
    1.0
}

fn default_block_gflop() -> f64 {
    5.0
}

impl GpuProfile {
    pub fn new(tflops: f64, bandwidth_gb_per_ms: f64, memory_bytes: u64) -> Self {
        GpuProfile {
            tflops,
            bandwidth_gb_per_ms,
            memory_bytes,
            block_overhead_ms: default_block_overhead_ms(),
            block_gflop: default_block_gflop(),
        }
    }

    /// A 3g.40gb A100 slice.
    pub fn high_performance() -> Self {
        Self::new(120.0, 1.02, 40 * BYTES_PER_GB)
    }

    /// A 2g.20gb A100 slice.
    pub fn low_performance() -> Self {
        Self::new(80.0, 0.51, 20 * BYTES_PER_GB)
    }

    pub fn validate(&self) -> Result<()> {
        let values = [self.tflops, self.bandwidth_gb_per_ms, self.block_overhead_ms, self.block_gflop];
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.memory_bytes == 0 {
            return Err(Error::invalid(format!("GPU profile fields must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Prefill time per block per input token, ms.
    pub fn prefill_ms(&self) -> f64 {
        self.block_gflop / self.tflops
    }

    /// Decode time per block per output token, ms: reading the block's weights.
    pub fn decode_ms(&self, block_bytes: u64) -> f64 {
        block_bytes as f64 / BYTES_PER_GB as f64 / self.bandwidth_gb_per_ms
    }
}

/// Mean per-block compute time `tau_p`, seconds.
pub fn derive_tau_p(profile: &GpuProfile, block_bytes: u64, mean_in: f64, mean_out: f64) -> f64 {
    let ms = profile.block_overhead_ms
        + profile.prefill_ms() * mean_in
        + profile.decode_ms(block_bytes) * (mean_out - 1.0);
    ms / 1e3
}

/// Symmetric round-trip-time matrix between named nodes, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttMatrix {
    ids: Vec<String>,
    rtt_ms: Vec<Vec<f64>>,
    pub overhead_ms: f64,
}

impl RttMatrix {
    pub fn new(ids: Vec<String>, rtt_ms: Vec<Vec<f64>>, overhead_ms: f64) -> Result<Self> {
        let n = ids.len();
        if rtt_ms.len() != n || rtt_ms.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("RTT matrix must be square and match its ids"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate RTT node id {dup:?}")));
        }
        for i in 0..n {
            if rtt_ms[i][i] != 0.0 {
                return Err(Error::invalid(format!("RTT diagonal at {:?} is not zero", ids[i])));
            }
            for j in 0..n {
                let v = rtt_ms[i][j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid(format!("RTT {:?}-{:?} must be >= 0", ids[i], ids[j])));
                }
                if (v - rtt_ms[j][i]).abs() > 1e-9 * v.abs().max(1.0) {
                    return Err(Error::invalid(format!("RTT matrix not symmetric at {:?}-{:?}", ids[i], ids[j])));
                }
            }
        }
        if !(overhead_ms.is_finite() && overhead_ms >= 0.0) {
            return Err(Error::invalid("RTT overhead must be >= 0"));
        }
        Ok(RttMatrix { ids, rtt_ms, overhead_ms })
    }

    /// Reads a CSV whose header row is `<anything>,id1,id2,...` and whose
    /// rows are `idK,v1,v2,...`, rows in the same order as the header.
    pub fn from_csv_reader(reader: impl Read, overhead_ms: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let ids: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_owned).collect();
        let mut rows = Vec::with_capacity(ids.len());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(i as u64 + 2, |p| p.line());
            let trace_err = |message: String| Error::Trace { line, message };
            let id = rec.get(0).unwrap_or_default();
            if ids.get(i).map(String::as_str) != Some(id) {
                return Err(trace_err(format!("row id {id:?} does not match header order")));
            }
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| trace_err(format!("bad RTT value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(values);
        }
        Self::new(ids, rows, overhead_ms)
    }

    pub fn from_path(path: impl AsRef<Path>, overhead_ms: f64) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, overhead_ms)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::invalid(format!("node {id:?} missing from the RTT matrix")))
    }

    pub fn rtt_ms(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.rtt_ms[self.index(a)?][self.index(b)?])
    }
}

/// Mean communication time `tau_c`, seconds: one relayed round trip plus
/// overhead per output token.
pub fn derive_tau_c(rtt: &RttMatrix, orchestrator: &str, server: &str, mean_out: f64) -> Result<f64> {
    Ok(mean_out * (rtt.rtt_ms(orchestrator, server)? + rtt.overhead_ms) / 1e3)
}

/// Per-server token-level timing, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenModel {
    pub comm_per_output: f64,
    pub block_overhead: f64,
    pub prefill_per_token: f64,
    pub decode_per_token: f64,
}

impl TokenModel {
    pub fn new(profile: &GpuProfile, block_bytes: u64, round_trip_ms: f64) -> Self {
        TokenModel {
            comm_per_output: round_trip_ms / 1e3,
            block_overhead: profile.block_overhead_ms / 1e3,
            prefill_per_token: profile.prefill_ms() / 1e3,
            decode_per_token: profile.decode_ms(block_bytes) / 1e3,
        }
    }

    pub fn comm_time(&self, output_tokens: f64) -> f64 {
        output_tokens * self.comm_per_output
    }

    pub fn block_time(&self, input_tokens: f64, output_tokens: f64) -> f64 {
        self.block_overhead + self.prefill_per_token * input_tokens + self.decode_per_token * (output_tokens - 1.0)
    }
}

/// One server as described in a profiles file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerProfile {
    pub id: String,
    /// RTT matrix node hosting the server.
    pub node: String,
    pub gpu: GpuProfile,
}

/// Servers plus the calibration used to derive their mean times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub orchestrator: String,
    pub mean_input_tokens: f64,
    pub mean_output_tokens: f64,
    #[serde(default = "default_overhead")]
    pub overhead_ms: f64,
    pub servers: Vec<ServerProfile>,
}

fn default_overhead() -> f64 {
    DEFAULT_OVERHEAD_MS
}

impl ProfileSet {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// Token models for each server, in order.
    pub fn token_models(&self, rtt: &RttMatrix, block_bytes: u64) -> Result<Vec<TokenModel>> {
        self.servers
            .iter()
            .map(|s| {
                s.gpu.validate()?;
                let round_trip = rtt.rtt_ms(&self.orchestrator, &s.node)? + rtt.overhead_ms;
                Ok(TokenModel::new(&s.gpu, block_bytes, round_trip))
            })
            .collect()
    }

    /// Server specs with `tau_c`, `tau_p` evaluated at the mean token counts.
    pub fn server_specs(&self, rtt: &RttMatrix, block_bytes: u64) -> Result<Vec<ServerSpec>> {
        if !(self.mean_input_tokens >= 0.0 && self.mean_output_tokens >= 1.0) {
            return Err(Error::invalid("mean input tokens must be >= 0 and mean output tokens >= 1"));
        }
        let models = self.token_models(rtt, block_bytes)?;
        Ok(self
            .servers
            .iter()
            .zip(models)
            .map(|(s, m)| {
                ServerSpec::new(
                    s.id.clone(),
                    s.gpu.memory_bytes,
                    m.comm_time(self.mean_output_tokens),
                    m.block_time(self.mean_input_tokens, self.mean_output_tokens),
                )
            })
            .collect())
    }
}

/// Time for one request with the given token counts to traverse `chain`.
pub fn request_service_time(chain: &ServerChain, models: &[TokenModel], input_tokens: f64, output_tokens: f64) -> f64 {
    chain
        .hops()
        .iter()
        .filter_map(|e| match e.to {
            Node::Server(j) => {
                let m = &models[j];
                Some(m.comm_time(output_tokens) + m.block_time(input_tokens, output_tokens) * e.blocks as f64)
            }
            _ => None,
        })
        .sum()
}

/// [`request_service_time`] of one chain collapsed to
/// `fixed + per_input * in + per_output * out`, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainCost {
    pub fixed: f64,
    pub per_input: f64,
    pub per_output: f64,
}

impl ChainCost {
    pub fn for_chain(chain: &ServerChain, models: &[TokenModel]) -> Self {
        let mut cost = ChainCost {
            fixed: 0.0,
            per_input: 0.0,
            per_output: 0.0,
        };
        for e in chain.hops() {
            if let Node::Server(j) = e.to {
                let m = &models[j];
                let blocks = e.blocks as f64;
                cost.fixed += blocks * (m.block_overhead - m.decode_per_token);
                cost.per_input += blocks * m.prefill_per_token;
                cost.per_output += m.comm_per_output + blocks * m.decode_per_token;
            }
        }
        cost
    }

    pub fn duration(&self, input_tokens: f64, output_tokens: f64) -> f64 {
        self.fixed + self.per_input * input_tokens + self.per_output * output_tokens
    }
}

/// One request of an inference trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

/// A job with an abstract size: a chain of rate `mu` serves it in `size / mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizedJob {
    pub arrival_s: f64,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Workload {
    Trace(Vec<TraceRecord>),
    Sized(Vec<SizedJob>),
}

impl Workload {
    pub fn len(&self) -> usize {
        match self {
            Workload::Trace(r) => r.len(),
            Workload::Sized(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn arrivals(&self) -> Vec<f64> {
        match self {
            Workload::Trace(r) => r.iter().map(|x| x.arrival_s).collect(),
            Workload::Sized(r) => r.iter().map(|x| x.arrival_s).collect(),
        }
    }

    /// Service demands: sizes, or trace durations under `cost`. Without a
    /// cost model a trace's output token counts stand in.
    pub fn demands(&self, cost: Option<&ChainCost>) -> Vec<f64> {
        match (self, cost) {
            (Workload::Sized(r), _) => r.iter().map(|x| x.size).collect(),
            (Workload::Trace(r), Some(c)) => r
                .iter()
                .map(|x| c.duration(x.input_tokens as f64, x.output_tokens as f64))
                .collect(),
            (Workload::Trace(r), None) => r.iter().map(|x| x.output_tokens as f64).collect(),
        }
    }
}

/// Parses a `arrival_s,input_tokens,output_tokens` CSV.
pub fn read_trace(reader: impl Read) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != ["arrival_s", "input_tokens", "output_tokens"] {
        return Err(Error::Trace {
            line: 1,
            message: format!("expected header arrival_s,input_tokens,output_tokens, found {}", header.join(",")),
        });
    }
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Trace {
            line,
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(line, |p| p.line());
        let err = |message: String| Error::Trace { line, message };
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", rec.len())));
        }
        let arrival_s: f64 = rec[0].parse().map_err(|e| err(format!("arrival_s {:?}: {e}", &rec[0])))?;
        if !(arrival_s.is_finite() && arrival_s >= 0.0) {
            return Err(err(format!("arrival_s must be finite and >= 0, got {arrival_s}")));
        }
        let tokens = |field: &str, name: &str| -> Result<u32> {
            match field.parse::<u32>() {
                Ok(v) if v > 0 => Ok(v),
                Ok(_) => Err(err(format!("{name} must be positive"))),
                Err(e) => Err(err(format!("{name} {field:?}: {e}"))),
            }
        };
        let input_tokens = tokens(&rec[1], "input_tokens")?;
        let output_tokens = tokens(&rec[2], "output_tokens")?;
        if let Some(prev) = out.last() {
            if arrival_s < prev.arrival_s {
                return Err(err(format!(
                    "arrival {arrival_s} precedes the previous arrival {}",
                    prev.arrival_s
                )));
            }
        }
        out.push(TraceRecord {
            arrival_s,
            input_tokens,
            output_tokens,
        });
    }
    Ok(out)
}

pub fn ingest_trace(path: impl AsRef<Path>) -> Result<Workload> {
    Ok(Workload::Trace(read_trace(std::fs::File::open(path)?)?))
}

/// Writes the canonical trace CSV. Arrival times use the shortest decimal
/// that parses back to the same `f64`, so a read/write round trip is exact.
pub fn write_trace(mut writer: impl Write, records: &[TraceRecord]) -> Result<()> {
    writeln!(writer, "arrival_s,input_tokens,output_tokens")?;
    for r in records {
        writeln!(writer, "{:?},{},{}", r.arrival_s, r.input_tokens, r.output_tokens)?;
    }
    Ok(())
}

/// Poisson arrivals at rate `lambda` with unit-mean exponential sizes.
pub fn synth_poisson(lambda: f64, jobs: usize, seed: u64) -> Result<Workload> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid("arrival rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let jobs = (0..jobs)
        .map(|_| {
            let gap: f64 = rng.sample(Exp1);
            t += gap / lambda;
            SizedJob {
                arrival_s: t,
                size: rng.sample(Exp1),
            }
        })
        .collect();
    Ok(Workload::Sized(jobs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub x: f64,
    pub empirical: f64,
    /// CDF of the exponential with the same mean.
    pub exponential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfComparison {
    pub mean: f64,
    pub std: f64,
    /// Sample std over the std of the same-mean exponential (which equals the mean).
    pub std_ratio: f64,
    pub points: Vec<CdfPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub interarrival: CdfComparison,
    pub service: CdfComparison,
}

pub const MIN_REPORT_RECORDS: usize = 100;

/// Compares inter-arrival times and service demands against exponentials.
pub fn distribution_report(workload: &Workload, cost: Option<&ChainCost>) -> Result<DistributionReport> {
    if workload.len() < MIN_REPORT_RECORDS {
        return Err(Error::invalid(format!(
            "distribution report needs at least {MIN_REPORT_RECORDS} records, got {}",
            workload.len()
        )));
    }
    let arrivals = workload.arrivals();
    let gaps: Vec<f64> = arrivals.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(DistributionReport {
        interarrival: compare_exponential(&gaps)?,
        service: compare_exponential(&workload.demands(cost))?,
    })
}

pub fn compare_exponential(samples: &[f64]) -> Result<CdfComparison> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return Err(Error::invalid("samples must have a positive mean"));
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let steps = 100.min(n);
    let points = (1..=steps)
        .map(|k| {
            let idx = (k * n).div_ceil(steps) - 1;
            let x = sorted[idx];
            // fraction of samples <= x, counting ties
            let empirical = sorted.partition_point(|v| *v <= x) as f64 / n as f64;
            CdfPoint {
                x,
                empirical,
                exponential: 1.0 - (-x / mean).exp(),
            }
        })
        .collect();
    Ok(CdfComparison {
        mean,
        std,
        std_ratio: std / mean,
        points,
    })
}
