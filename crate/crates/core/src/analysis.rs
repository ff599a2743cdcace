//! Steady-state analysis of join-the-fastest-free-chain (JFFC) dispatch with
//! a central FCFS queue, Poisson arrivals and exponential job sizes.
//!
//! The exact occupancy process is a multi-dimensional CTMC. Collapsing it to
//! the total job count gives a birth-death process whose death rate in state
//! `n` is sandwiched between the rate with all `n` jobs on the fastest chains
//! and the rate with all of them on the slowest. Both envelopes are
//! birth-death processes with closed-form means, which bound the true mean
//! occupancy. For two chains the CTMC is solved exactly by a level recursion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::gca;
use crate::error::{Error, Result};
use crate::model::{Cluster, ComposedSystem};
use crate::placement::{c_max, gbp_cr};

/// Chain service rates and capacities, fastest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRates {
    rates: Vec<f64>,
    capacities: Vec<u64>,
}

impl ChainRates {
    /// Sorts `(mu, c)` pairs by descending rate; equal rates keep their input
    /// order.
    pub fn new(pairs: impl IntoIterator<Item = (f64, u64)>) -> Result<Self> {
        let mut pairs: Vec<(f64, u64)> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::invalid("at least one chain is required"));
        }
        for &(mu, c) in &pairs {
            if !(mu.is_finite() && mu > 0.0) {
                return Err(Error::invalid(format!("service rate {mu} must be positive and finite")));
            }
            if c == 0 {
                return Err(Error::invalid("chain capacities must be at least 1"));
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(ChainRates {
            rates: pairs.iter().map(|p| p.0).collect(),
            capacities: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn from_system(system: &ComposedSystem) -> Result<Self> {
        Self::new(system.rates())
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn capacities(&self) -> &[u64] {
        &self.capacities
    }

    /// `nu = sum(c_l mu_l)`.
    pub fn total_rate(&self) -> f64 {
        self.rates
            .iter()
            .zip(&self.capacities)
            .map(|(&mu, &c)| mu * c as f64)
            .sum()
    }

    /// `C = sum(c_l)`.
    pub fn total_capacity(&self) -> u64 {
        self.capacities.iter().sum()
    }
}

/// Upper and lower envelopes `(nu_bar_n, nu_under_n)` of the aggregate
/// departure rate with `n` jobs in the system: jobs packed onto the fastest
/// chains versus onto the slowest.
pub fn death_rate_bounds(rates: &ChainRates, n: u64) -> (f64, f64) {
    let k = rates.len();
    let mut upper = 0.0;
    let mut before = 0u64;
    for l in 0..k {
        let busy = n.saturating_sub(before).min(rates.capacities[l]);
        upper += rates.rates[l] * busy as f64;
        before += rates.capacities[l];
    }
    let mut lower = 0.0;
    let mut after = 0u64;
    for l in (0..k).rev() {
        let busy = n.saturating_sub(after).min(rates.capacities[l]);
        lower += rates.rates[l] * busy as f64;
        after += rates.capacities[l];
    }
    (upper, lower)
}

/// Stationary law of a birth-death process with birth rate `lambda`, death
/// rates `death[n-1]` in states `n = 1..=C` and a constant death rate `tail`
/// above `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirthDeath {
    /// `phi_0..=phi_C`; the tail is `phi_C rho^(n-C)`.
    pub phi: Vec<f64>,
    pub rho: f64,
    pub mean: f64,
}

impl BirthDeath {
    /// Total probability, including the geometric tail above `C`.
    pub fn total_mass(&self) -> f64 {
        let c = self.phi.len() - 1;
        self.phi[..c].iter().sum::<f64>() + self.phi[c] / (1.0 - self.rho)
    }
}

/// Mean occupancy of a birth-death process (see [`BirthDeath`]). Products of
/// rate ratios are accumulated in log space so large `C` does not overflow.
pub fn birth_death_occupancy(lambda: f64, death: &[f64], tail: f64) -> Result<BirthDeath> {
    if death.is_empty() {
        return Err(Error::invalid("at least one death rate is required"));
    }
    if death.iter().any(|&d| !(d > 0.0 && d.is_finite())) || !(tail > 0.0) {
        return Err(Error::invalid("death rates must be positive"));
    }
    if lambda >= tail {
        return Err(Error::Unstable { lambda, nu: tail });
    }
    let c = death.len();
    let rho = lambda / tail;
    let ln_lambda = lambda.ln();
    let mut log_b = Vec::with_capacity(c + 1);
    log_b.push(0.0);
    let mut acc = 0.0;
    for &d in death {
        acc += ln_lambda - d.ln();
        log_b.push(acc);
    }
    let peak = log_b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_b.iter().map(|&lb| (lb - peak).exp()).collect();
    let norm = w[..c].iter().sum::<f64>() + w[c] / (1.0 - rho);
    let phi: Vec<f64> = w.iter().map(|x| x / norm).collect();
    let head: f64 = phi[..c].iter().enumerate().map(|(n, p)| n as f64 * p).sum();
    let mean = head + phi[c] * (rho / ((1.0 - rho) * (1.0 - rho)) + c as f64 / (1.0 - rho));
    Ok(BirthDeath { phi, rho, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyBounds {
    pub lower_mean_occupancy: f64,
    pub upper_mean_occupancy: f64,
    /// Seconds.
    pub lower_mean_response: f64,
    /// Seconds.
    pub upper_mean_response: f64,
}

/// The two envelope birth-death processes for `rates` at arrival rate `lambda`.
pub fn envelope_processes(rates: &ChainRates, lambda: f64) -> Result<(BirthDeath, BirthDeath)> {
    let nu = rates.total_rate();
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("arrival rate must be finite and >= 0"));
    }
    if lambda >= nu {
        return Err(Error::Unstable { lambda, nu });
    }
    let c = rates.total_capacity();
    let (fast, slow): (Vec<f64>, Vec<f64>) = (1..=c).map(|n| death_rate_bounds(rates, n)).unzip();
    Ok((
        birth_death_occupancy(lambda, &fast, nu)?,
        birth_death_occupancy(lambda, &slow, nu)?,
    ))
}

/// Lower and upper bounds on the steady-state mean occupancy and (by
/// Little's law) mean response time. At `lambda = 0` the response bounds are
/// their limits `1/mu_fastest` and `1/mu_slowest`.
pub fn occupancy_bounds(rates: &ChainRates, lambda: f64) -> Result<OccupancyBounds> {
    let (lower, upper) = envelope_processes(rates, lambda)?;
    let (lower_resp, upper_resp) = if lambda > 0.0 {
        (lower.mean / lambda, upper.mean / lambda)
    } else {
        (1.0 / rates.rates[0], 1.0 / rates.rates[rates.len() - 1])
    };
    Ok(OccupancyBounds {
        lower_mean_occupancy: lower.mean,
        upper_mean_occupancy: upper.mean,
        lower_mean_response: lower_resp,
        upper_mean_response: upper_resp,
    })
}

/// Exact steady-state mean occupancy with two chains, chain 1 being the one
/// dispatch prefers. Solved by the backward level recursion over the number
/// of busy slots on chain 2 with the queued states summed as a geometric tail.
pub fn exact_k2(mu1: f64, mu2: f64, c1: u64, c2: u64, lambda: f64) -> Result<f64> {
    if !(mu1 > 0.0 && mu2 > 0.0 && mu1.is_finite() && mu2.is_finite()) || c1 == 0 || c2 == 0 {
        return Err(Error::invalid("exact_k2 needs positive rates and capacities"));
    }
    let nu = c1 as f64 * mu1 + c2 as f64 * mu2;
    if !(lambda >= 0.0) {
        return Err(Error::invalid("arrival rate must be >= 0"));
    }
    if lambda >= nu {
        return Err(Error::Unstable { lambda, nu });
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (c1, c2) = (c1 as usize, c2 as usize);
    // alpha[z2][z1] = pi(0, z1, z2) / pi(0, 0, c2)
    let mut alpha = vec![vec![0.0f64; c1 + 1]; c2 + 1];
    alpha[c2][0] = 1.0;
    let mut prefix = 1.0;
    for n in 1..=c1 {
        alpha[c2][n] = (c2 as f64 * mu2 * prefix + lambda * alpha[c2][n - 1]) / (n as f64 * mu1);
        prefix += alpha[c2][n];
    }

    let mut beta = vec![0.0f64; c1 + 1];
    let mut gamma = vec![0.0f64; c1 + 1];
    for z2 in (0..c2).rev() {
        let up_rate = (z2 + 1) as f64 * mu2;
        let here_rate = z2 as f64 * mu2;
        let upper_level = alpha[z2 + 1].clone();
        let at_full = up_rate / lambda * upper_level.iter().sum::<f64>();

        beta[0] = 1.0;
        gamma[0] = 0.0;
        let (mut beta_sum, mut gamma_sum, mut upper_sum) = (1.0, 0.0, 0.0);
        for n in 1..=c1 {
            upper_sum += upper_level[n - 1];
            let denom = n as f64 * mu1;
            beta[n] = (here_rate * beta_sum + lambda * beta[n - 1]) / denom;
            gamma[n] = (here_rate * gamma_sum + lambda * gamma[n - 1] - up_rate * upper_sum) / denom;
            beta_sum += beta[n];
            gamma_sum += gamma[n];
        }
        if beta[c1] == 0.0 || !beta[c1].is_finite() {
            return Err(Error::Numerical(format!(
                "exact_k2: degenerate beta at z2={z2} (beta={})",
                beta[c1]
            )));
        }
        let a0 = (at_full - gamma[c1]) / beta[c1];
        for n in 0..c1 {
            alpha[z2][n] = beta[n] * a0 + gamma[n];
        }
        alpha[z2][c1] = at_full;
    }

    let mut weighted = 0.0;
    let mut total = 0.0;
    for (z2, level) in alpha.iter().enumerate() {
        for (z1, &a) in level.iter().enumerate() {
            weighted += a * (z1 + z2) as f64;
            total += a;
        }
    }
    let full = alpha[c2][c1];
    let queued_mass = lambda * full / (nu - lambda);
    let numerator = weighted + queued_mass * (nu / (nu - lambda) + (c1 + c2) as f64);
    let mean = numerator / (total + queued_mass);
    if !mean.is_finite() {
        return Err(Error::Numerical("exact_k2: non-finite mean occupancy".into()));
    }
    Ok(mean)
}

/// State of the JFFC occupancy process: queued jobs plus busy slots per
/// chain (fastest first).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JffcState {
    pub queued: u64,
    pub busy: Vec<u64>,
}

/// Outgoing transitions of `state` under JFFC.
pub fn transition_rates(rates: &ChainRates, lambda: f64, state: &JffcState) -> Result<Vec<(JffcState, f64)>> {
    let caps = rates.capacities();
    if state.busy.len() != caps.len() || state.busy.iter().zip(caps).any(|(b, c)| b > c) {
        return Err(Error::invalid(format!("malformed state {state:?}")));
    }
    let full = state.busy.iter().zip(caps).all(|(b, c)| b == c);
    if state.queued > 0 && !full {
        return Err(Error::invalid(format!("jobs queued while a chain has room: {state:?}")));
    }
    let mut out = Vec::new();
    if lambda > 0.0 {
        let mut next = state.clone();
        match next.busy.iter().zip(caps).position(|(b, c)| b < c) {
            Some(l) => next.busy[l] += 1,
            None => next.queued += 1,
        }
        out.push((next, lambda));
    }
    if state.queued > 0 {
        let mut next = state.clone();
        next.queued -= 1;
        out.push((next, rates.total_rate()));
    } else {
        for (l, &b) in state.busy.iter().enumerate() {
            if b > 0 {
                let mut next = state.clone();
                next.busy[l] -= 1;
                out.push((next, b as f64 * rates.rates()[l]));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Lower,
    Upper,
}

/// Response-time bounds of the GBP-CR + GCA composition for one `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub c: u64,
    pub chain_count: Option<usize>,
    pub total_rate: Option<f64>,
    pub lower_response: Option<f64>,
    pub upper_response: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTuning {
    pub kind: BoundKind,
    pub best_c: u64,
    pub best_response: f64,
    pub curve: Vec<BoundPoint>,
}

/// Bounds for every `c in 1..=c_max`. A `c` for which GBP-CR misses its rate
/// target, or whose GCA composition is unstable at `lambda`, has no bounds.
pub fn bound_curve(cluster: &Cluster, lambda: f64, rho_bar: f64) -> Result<Vec<BoundPoint>> {
    let c_max = c_max(cluster);
    (1..=c_max)
        .into_par_iter()
        .map(|c| bound_point(cluster, c, lambda, rho_bar))
        .collect()
}

fn bound_point(cluster: &Cluster, c: u64, lambda: f64, rho_bar: f64) -> Result<BoundPoint> {
    let mut point = BoundPoint {
        c,
        chain_count: None,
        total_rate: None,
        lower_response: None,
        upper_response: None,
    };
    let placed = match gbp_cr(cluster, c, lambda, rho_bar) {
        Ok(p) => p,
        Err(Error::CapacityInfeasible { .. }) => return Ok(point),
        Err(e) => return Err(e),
    };
    if !placed.rate_satisfied {
        return Ok(point);
    }
    let system = gca(cluster, &placed.placement)?;
    point.chain_count = Some(system.chains.len());
    point.total_rate = Some(system.total_rate());
    let Ok(rates) = ChainRates::from_system(&system) else {
        return Ok(point);
    };
    match occupancy_bounds(&rates, lambda) {
        Ok(b) => {
            point.lower_response = Some(b.lower_mean_response);
            point.upper_response = Some(b.upper_mean_response);
        }
        Err(Error::Unstable { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(point)
}

/// Chooses `c` minimizing the selected response-time bound (smaller `c` on ties).
pub fn bound_tuning(cluster: &Cluster, lambda: f64, rho_bar: f64, kind: BoundKind) -> Result<BoundTuning> {
    let curve = bound_curve(cluster, lambda, rho_bar)?;
    select_bound(curve, kind, lambda)
}

pub fn select_bound(curve: Vec<BoundPoint>, kind: BoundKind, lambda: f64) -> Result<BoundTuning> {
    let value = |p: &BoundPoint| match kind {
        BoundKind::Lower => p.lower_response,
        BoundKind::Upper => p.upper_response,
    };
    let best = curve
        .iter()
        .filter_map(|p| value(p).map(|v| (p.c, v)))
        .fold(None, |best: Option<(u64, f64)>, (c, v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((c, v)),
        });
    match best {
        Some((best_c, best_response)) => Ok(BoundTuning {
            kind,
            best_c,
            best_response,
            curve,
        }),
        None => {
            let nu = curve.iter().filter_map(|p| p.total_rate).fold(0.0, f64::max);
            if curve.iter().all(|p| p.chain_count.is_none()) {
                Err(Error::RateUnattainable {
                    required: lambda,
                    best: nu,
                })
            } else {
                Err(Error::Unstable { lambda, nu })
            }
        }
    }
}
