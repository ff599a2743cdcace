mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chainserve::analysis::{bound_curve, exact_k2, occupancy_bounds, select_bound, BoundKind, ChainRates, OccupancyBounds};
use chainserve::cache::gca;
use chainserve::model::{evaluate_bpca, BlockPlacement, BpcaReport, Cluster, ComposedSystem, ServerChain, ServerSpec, ServiceSpec};
use chainserve::placement::{gbp_cr, surrogate_tuning};
use chainserve::sim::{run_sim, Horizon, JobRecord, Policy, SimChain, SimConfig, SimStats, WorkloadSource, DEFAULT_WARMUP};
use chainserve::workload::{ingest_trace, ChainCost, ProfileSet, RttMatrix, Workload};
use chainserve::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use output::{ensure_dir, parse_json, write_csv, write_json, Provenance};

/// Job count used when a stochastic run is known to be unstable.
const UNSTABLE_JOB_CAP: u64 = 20_000;

#[derive(Parser)]
#[command(name = "chainserve", version, about = "Compose, analyze and simulate server chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Place blocks, allocate cache and write placement.json and chains.json.
    Compose(ComposeArgs),
    /// Sweep the capacity parameter and write tuning.csv.
    Tune(TuneArgs),
    /// Response-time bounds of a composed system, written to bounds.json.
    Analyze(AnalyzeArgs),
    /// Simulate a composed system under one or more policies.
    Simulate(SimulateArgs),
    /// Collate stats_*.json files of a directory into report.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct ClusterArgs {
    /// Service definition (block_count, block_bytes, cache_slot_bytes).
    #[arg(long)]
    service: PathBuf,
    /// JSON array of servers with memory and mean times.
    #[arg(long, conflicts_with = "profiles")]
    servers: Option<PathBuf>,
    /// GPU profiles; mean times are derived with --rtt.
    #[arg(long, requires = "rtt")]
    profiles: Option<PathBuf>,
    /// Round-trip times in milliseconds, CSV matrix keyed by node id.
    #[arg(long)]
    rtt: Option<PathBuf>,
}

#[derive(Args)]
struct RateArgs {
    /// Arrival rate, jobs per second.
    #[arg(long)]
    lambda: f64,
    /// Target utilization.
    #[arg(long, default_value_t = 0.7)]
    rho_bar: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TuneMethod {
    Surrogate,
    Lower,
    Upper,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    rate: RateArgs,
    /// Required capacity per chain; tuned when absent.
    #[arg(long)]
    c: Option<u64>,
    #[arg(long, value_enum, default_value_t = TuneMethod::Surrogate)]
    tune: TuneMethod,
    /// Use this block placement instead of running the greedy placement.
    #[arg(long, conflicts_with = "c")]
    placement: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    rate: RateArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Composed system; defaults to <out>/chains.json.
    #[arg(long)]
    chains: Option<PathBuf>,
    /// Arrival rate; defaults to the one used at composition.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Composed system; defaults to <out>/chains.json.
    #[arg(long)]
    chains: Option<PathBuf>,
    /// Poisson arrival rate; defaults to the one used at composition.
    #[arg(long, conflicts_with = "trace")]
    lambda: Option<f64>,
    /// Request trace (arrival_s,input_tokens,output_tokens); needs --profiles and --rtt.
    #[arg(long, requires_all = ["profiles", "rtt"])]
    trace: Option<PathBuf>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    rtt: Option<PathBuf>,
    /// Comma-separated policies, or "all".
    #[arg(long, default_value = "jffc")]
    policy: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Arrivals per replication, warmup included.
    #[arg(long, default_value_t = 100_000)]
    jobs: u64,
    /// Simulated seconds per replication instead of a job count.
    #[arg(long, conflicts_with = "jobs")]
    duration: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: f64,
    /// Skip the per-job CSV.
    #[arg(long)]
    no_job_log: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding stats_<policy>.json files; report.csv is written there.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compose(a) => compose(a),
        Command::Tune(a) => tune(a),
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<chainserve::Error>())
        .map(chainserve::Error::kind);
    match kind {
        Some(ErrorKind::Infeasible) => 2,
        Some(ErrorKind::Unstable) => 3,
        _ => 1,
    }
}

/// Builds the cluster from a server list or from profiles plus RTTs.
fn load_cluster(args: &ClusterArgs, prov: &mut Provenance) -> Result<Cluster> {
    let bytes = prov.read_input("service", &args.service)?;
    let service: ServiceSpec = parse_json(&bytes, &args.service)?;
    let servers: Vec<ServerSpec> = match (&args.servers, &args.profiles, &args.rtt) {
        (Some(path), _, _) => parse_json(&prov.read_input("servers", path)?, path)?,
        (None, Some(p), Some(r)) => {
            let (set, rtt) = load_profiles(p, r, prov)?;
            set.server_specs(&rtt, service.block_bytes)?
        }
        _ => bail!("either --servers or --profiles with --rtt is required"),
    };
    if servers.is_empty() {
        bail!("server list is empty");
    }
    Ok(Cluster::new(service, servers)?)
}

fn load_profiles(profiles: &Path, rtt: &Path, prov: &mut Provenance) -> Result<(ProfileSet, RttMatrix)> {
    let set: ProfileSet = parse_json(&prov.read_input("profiles", profiles)?, profiles)?;
    let matrix = RttMatrix::from_csv_reader(&prov.read_input("rtt", rtt)?[..], set.overhead_ms)
        .with_context(|| format!("parsing {}", rtt.display()))?;
    Ok((set, matrix))
}

fn rate_params(prov: &mut Provenance, rate: &RateArgs) {
    prov.param("lambda", rate.lambda);
    prov.param("rho_bar", rate.rho_bar);
}

#[derive(Serialize, Deserialize)]
struct PlacementFile {
    c: Option<u64>,
    placement: BlockPlacement,
    /// Servers hosting blocks, with their block range.
    hosts: Vec<HostedRange>,
}

#[derive(Serialize, Deserialize)]
struct HostedRange {
    server: String,
    first_block: usize,
    block_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ChainSummary {
    servers: Vec<String>,
    service_time_s: f64,
    rate: f64,
    capacity: u64,
}

/// Everything later commands need to know about a composition.
#[derive(Serialize, Deserialize)]
struct ChainsFile {
    c: Option<u64>,
    lambda: f64,
    rho_bar: f64,
    total_rate: f64,
    total_capacity: u64,
    chains: Vec<ChainSummary>,
    report: BpcaReport,
    cluster: Cluster,
    system: ComposedSystem,
}

fn compose(args: ComposeArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut prov = Provenance::new("compose");
    rate_params(&mut prov, &args.rate);
    let cluster = load_cluster(&args.cluster, &mut prov)?;
    let RateArgs { lambda, rho_bar } = args.rate;

    let (c, placement) = if let Some(path) = &args.placement {
        let bytes = prov.read_input("placement", path)?;
        let value: serde_json::Value = parse_json(&bytes, path)?;
        let inner = value.get("placement").cloned().unwrap_or(value);
        let placement: BlockPlacement =
            serde_json::from_value(inner).with_context(|| format!("parsing {}", path.display()))?;
        cluster.check_placement(&placement)?;
        (None, placement)
    } else {
        let c = match args.c {
            Some(c) => c,
            None => {
                prov.param("tune", args.tune);
                tuned_c(&cluster, lambda, rho_bar, args.tune)?
            }
        };
        prov.param("c", c);
        let placed = gbp_cr(&cluster, c, lambda, rho_bar)?;
        if !placed.rate_satisfied {
            return Err(chainserve::Error::RateUnattainable {
                required: lambda / rho_bar,
                best: placed.rate_lower_bound(),
            })
            .with_context(|| format!("block placement with c={c} cannot reach the required rate"));
        }
        (Some(c), placed.placement)
    };

    let system = gca(&cluster, &placement)?;
    if system.chains.is_empty() {
        bail!("no chain fits in the cache space left by the placement");
    }
    let chains: Vec<ServerChain> = system.chains.iter().map(|a| a.chain.clone()).collect();
    let caps: Vec<u64> = system.chains.iter().map(|a| a.capacity).collect();
    let report = evaluate_bpca(&cluster, &placement, &chains, &caps, lambda, rho_bar)?;

    let hosts = placement
        .ranges()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.count > 0)
        .map(|(j, r)| HostedRange {
            server: cluster.servers[j].id.clone(),
            first_block: r.first,
            block_count: r.count,
        })
        .collect();
    write_json(&args.out, "placement.json", &prov, &PlacementFile { c, placement, hosts })?;

    let summaries: Vec<ChainSummary> = system
        .chains
        .iter()
        .map(|a| ChainSummary {
            servers: a.chain.servers().map(|j| cluster.servers[j].id.clone()).collect(),
            service_time_s: a.chain.service_time(),
            rate: a.chain.service_rate(),
            capacity: a.capacity,
        })
        .collect();
    let file = ChainsFile {
        c,
        lambda,
        rho_bar,
        total_rate: system.total_rate(),
        total_capacity: system.total_capacity(),
        chains: summaries,
        report,
        cluster,
        system,
    };
    write_json(&args.out, "chains.json", &prov, &file)?;

    println!(
        "{} chains, total capacity {}, total rate {:.6}/s, memory_ok={}, rate_ok={}",
        file.chains.len(),
        file.total_capacity,
        file.total_rate,
        file.report.memory_ok,
        file.report.rate_ok
    );
    for (k, s) in file.chains.iter().enumerate() {
        println!(
            "  chain {k}: {} capacity={} T={:.6}s",
            s.servers.join(" -> "),
            s.capacity,
            s.service_time_s
        );
    }
    Ok(())
}

fn tuned_c(cluster: &Cluster, lambda: f64, rho_bar: f64, method: TuneMethod) -> Result<u64> {
    Ok(match method {
        TuneMethod::Surrogate => surrogate_tuning(cluster, lambda, rho_bar)?.best_c,
        TuneMethod::Lower | TuneMethod::Upper => {
            let kind = if method == TuneMethod::Lower { BoundKind::Lower } else { BoundKind::Upper };
            select_bound(bound_curve(cluster, lambda, rho_bar)?, kind, lambda)?.best_c
        }
    })
}

#[derive(Serialize)]
struct TuningRow {
    c: u64,
    chain_count: Option<usize>,
    c_times_k: Option<u64>,
    composed_chains: Option<usize>,
    lower_response_s: Option<f64>,
    upper_response_s: Option<f64>,
    /// Methods choosing this `c`, separated by `;`.
    chosen: String,
}

fn tune(args: TuneArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut prov = Provenance::new("tune");
    rate_params(&mut prov, &args.rate);
    let cluster = load_cluster(&args.cluster, &mut prov)?;
    let RateArgs { lambda, rho_bar } = args.rate;

    let surrogate = surrogate_tuning(&cluster, lambda, rho_bar)?;
    let curve = bound_curve(&cluster, lambda, rho_bar)?;
    let mut picks = vec![("surrogate", surrogate.best_c)];
    for (name, kind) in [("lower", BoundKind::Lower), ("upper", BoundKind::Upper)] {
        match select_bound(curve.clone(), kind, lambda) {
            Ok(t) => picks.push((name, t.best_c)),
            Err(e) => eprintln!("warning: no {name}-bound choice: {e}"),
        }
    }

    let rows: Vec<TuningRow> = surrogate
        .table
        .iter()
        .zip(&curve)
        .map(|(s, b)| {
            debug_assert_eq!(s.c, b.c);
            let chosen: Vec<&str> = picks.iter().filter(|p| p.1 == s.c).map(|p| p.0).collect();
            TuningRow {
                c: s.c,
                chain_count: s.chain_count,
                c_times_k: s.objective,
                composed_chains: b.chain_count,
                lower_response_s: b.lower_response,
                upper_response_s: b.upper_response,
                chosen: chosen.join(";"),
            }
        })
        .collect();
    let path = write_csv(&args.out, "tuning.csv", &prov, &rows)?;
    for (name, c) in &picks {
        println!("{name}: c* = {c}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn load_chains(path: Option<PathBuf>, out: &Path, prov: &mut Provenance) -> Result<ChainsFile> {
    let path = path.unwrap_or_else(|| out.join("chains.json"));
    let bytes = prov.read_input("chains", &path)?;
    let file: ChainsFile = parse_json(&bytes, &path)?;
    file.cluster.validate()?;
    Ok(file)
}

#[derive(Serialize)]
struct ExactValue {
    mean_occupancy: f64,
    mean_response_s: f64,
}

#[derive(Serialize)]
struct BoundsFile {
    lambda: f64,
    total_rate: f64,
    total_capacity: u64,
    chain_count: usize,
    bounds: OccupancyBounds,
    /// Exact JFFC values, available for two chains.
    exact: Option<ExactValue>,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut prov = Provenance::new("analyze");
    let file = load_chains(args.chains, &args.out, &mut prov)?;
    let lambda = args.lambda.unwrap_or(file.lambda);
    prov.param("lambda", lambda);

    let rates = ChainRates::from_system(&file.system)?;
    let bounds = occupancy_bounds(&rates, lambda)?;
    let exact = if rates.len() == 2 {
        let (mu, c) = (rates.rates(), rates.capacities());
        let occ = exact_k2(mu[0], mu[1], c[0], c[1], lambda)?;
        let response = if lambda > 0.0 { occ / lambda } else { 1.0 / mu[0] };
        Some(ExactValue {
            mean_occupancy: occ,
            mean_response_s: response,
        })
    } else {
        None
    };
    let out = BoundsFile {
        lambda,
        total_rate: rates.total_rate(),
        total_capacity: rates.total_capacity(),
        chain_count: rates.len(),
        bounds,
        exact,
    };
    write_json(&args.out, "bounds.json", &prov, &out)?;
    println!(
        "mean response in [{:.6}, {:.6}] s",
        bounds.lower_mean_response, bounds.upper_mean_response
    );
    if let Some(e) = &out.exact {
        println!("exact mean response {:.6} s", e.mean_response_s);
    }
    Ok(())
}

fn parse_policies(s: &str) -> Result<Vec<Policy>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Policy::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        let p: Policy = name.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        bail!("no policy given");
    }
    Ok(out)
}

#[derive(Serialize)]
struct StatsFile<'a> {
    horizon: Horizon,
    horizon_capped: bool,
    stats: &'a SimStats,
}

#[derive(Deserialize)]
struct StatsInput {
    stats: SimStats,
}

#[derive(Serialize)]
struct JobRow {
    replication: u32,
    job: u64,
    arrival_s: f64,
    start_s: f64,
    finish_s: f64,
    chain_id: usize,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut prov = Provenance::new("simulate");
    prov.seed = Some(args.seed);
    let file = load_chains(args.chains, &args.out, &mut prov)?;
    let policies = parse_policies(&args.policy)?;
    let system = &file.system;
    let chains: Vec<SimChain> = system
        .chains
        .iter()
        .map(|a| SimChain {
            rate: a.chain.service_rate(),
            capacity: a.capacity,
        })
        .collect();

    let mut horizon = match args.duration {
        Some(t) => Horizon::Time(t),
        None => Horizon::Jobs(args.jobs),
    };
    let mut capped = false;
    let workload = if let Some(trace) = &args.trace {
        let (set, rtt) = load_profiles(args.profiles.as_deref().unwrap(), args.rtt.as_deref().unwrap(), &mut prov)?;
        prov.read_input("trace", trace)?;
        let Workload::Trace(requests) = ingest_trace(trace)? else {
            unreachable!("trace files hold token counts")
        };
        let models = set.token_models(&rtt, file.cluster.service.block_bytes)?;
        if models.len() != file.cluster.server_count() {
            bail!("profiles describe {} servers, the composition has {}", models.len(), file.cluster.server_count());
        }
        let costs = system.chains.iter().map(|a| ChainCost::for_chain(&a.chain, &models)).collect();
        if args.duration.is_none() {
            horizon = Horizon::Jobs(args.jobs.min(requests.len() as u64));
        }
        WorkloadSource::Trace { requests, costs }
    } else {
        let lambda = args.lambda.unwrap_or(file.lambda);
        prov.param("lambda", lambda);
        let nu = system.total_rate();
        if lambda >= nu {
            eprintln!("warning: arrival rate {lambda}/s >= total service rate {nu}/s; the queue grows without bound");
            if let Horizon::Jobs(n) = horizon {
                if n > UNSTABLE_JOB_CAP {
                    eprintln!("warning: horizon capped at {UNSTABLE_JOB_CAP} jobs");
                    horizon = Horizon::Jobs(UNSTABLE_JOB_CAP);
                    capped = true;
                }
            }
        }
        WorkloadSource::Stochastic {
            lambda,
            sizes: chainserve::sim::SizeDist::Exponential,
        }
    };
    prov.param("horizon", horizon);
    prov.param("replications", args.reps);
    prov.param("warmup", args.warmup);

    for policy in policies {
        let mut p = prov.clone();
        p.param("policy", policy);
        let config = SimConfig {
            chains: chains.clone(),
            workload: workload.clone(),
            policy,
            horizon,
            warmup_fraction: args.warmup,
            seed: args.seed,
            replications: args.reps,
            keep_samples: true,
            record_jobs: !args.no_job_log,
        };
        let run = run_sim(&config)?;
        let s = &run.stats;
        if s.unstable {
            eprintln!("warning: {policy}: backlog kept growing; the system looks unstable");
        }
        let name = policy.name();
        write_json(
            &args.out,
            &format!("stats_{name}.json"),
            &p,
            &StatsFile {
                horizon,
                horizon_capped: capped,
                stats: s,
            },
        )?;
        if let Some(first) = run.jobs.first() {
            let rows: Vec<JobRow> = first.iter().map(|r: &JobRecord| job_row(0, r)).collect();
            write_csv(&args.out, &format!("jobs_{name}.csv"), &p, &rows)?;
        }
        println!(
            "{name}: mean response {:.6} s (+/- {}), {} measured jobs",
            s.mean_response.mean,
            s.mean_response.half_width.map_or("n/a".into(), |h| format!("{h:.6}")),
            s.measured_jobs
        );
    }
    Ok(())
}

fn job_row(replication: u32, r: &JobRecord) -> JobRow {
    JobRow {
        replication,
        job: r.job,
        arrival_s: r.arrival_s,
        start_s: r.start_s,
        finish_s: r.finish_s,
        chain_id: r.chain_id,
    }
}

#[derive(Serialize)]
struct ReportRow {
    policy: String,
    mean_response_s: f64,
    mean_response_half_width_s: Option<f64>,
    median_response_s: Option<f64>,
    p95_response_s: Option<f64>,
    p99_response_s: Option<f64>,
    mean_waiting_s: f64,
    mean_service_s: f64,
    unstable: bool,
}

fn report(args: ReportArgs) -> Result<()> {
    let mut prov = Provenance::new("report");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.out)
        .with_context(|| format!("reading {}", args.out.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("stats_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no stats_*.json files in {}", args.out.display());
    }
    let mut stats = Vec::new();
    for path in &paths {
        let label = path.file_stem().and_then(|n| n.to_str()).unwrap_or("stats").to_owned();
        let bytes = prov.read_input(&label, path)?;
        stats.push(parse_json::<StatsInput>(&bytes, path)?.stats);
    }
    stats.sort_by_key(|s| Policy::ALL.iter().position(|p| *p == s.policy));

    let rows: Vec<ReportRow> = stats
        .iter()
        .map(|s| ReportRow {
            policy: s.policy.name().into(),
            mean_response_s: s.mean_response.mean,
            mean_response_half_width_s: s.mean_response.half_width,
            median_response_s: s.median_response,
            p95_response_s: s.p95_response,
            p99_response_s: s.p99_response,
            mean_waiting_s: s.mean_waiting.mean,
            mean_service_s: s.mean_service.mean,
            unstable: s.unstable,
        })
        .collect();
    write_csv(&args.out, "report.csv", &prov, &rows)?;

    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("| policy | mean | median | P95 | P99 | waiting | service |");
    println!("|---|---|---|---|---|---|---|");
    for r in &rows {
        println!(
            "| {} | {:.4} | {} | {} | {} | {:.4} | {:.4} |",
            r.policy,
            r.mean_response_s,
            opt(r.median_response_s),
            opt(r.p95_response_s),
            opt(r.p99_response_s),
            r.mean_waiting_s,
            r.mean_service_s
        );
    }
    Ok(())
}
