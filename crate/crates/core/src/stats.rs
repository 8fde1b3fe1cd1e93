//! Seed-variance summaries, the Mann-Whitney U test and latency reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-seed results of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mean_return: f64,
    pub returns: Vec<f64>,
    /// Seconds per decision.
    pub latencies: Vec<f64>,
}

impl RunSummary {
    pub fn new(seed: u64, returns: Vec<f64>, latencies: Vec<f64>) -> Self {
        let mean_return = mean(&returns);
        Self { seed, mean_return, returns, latencies }
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation over the absolute mean.
pub fn relative_std(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Stats("relative std needs at least two samples".into()));
    }
    let m = mean(samples);
    if m == 0.0 || !m.is_finite() {
        return Err(Error::Stats(format!("relative std is undefined for mean {m}")));
    }
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / samples.len() as f64;
    Ok(var.sqrt() / m.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    /// `a` tends to be larger than `b`.
    Greater,
    /// `a` tends to be smaller than `b`.
    Less,
    TwoSided,
}

impl std::str::FromStr for Alternative {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greater" => Ok(Self::Greater),
            "less" => Ok(Self::Less),
            "two-sided" | "two_sided" => Ok(Self::TwoSided),
            _ => Err(Error::Config(format!("unknown alternative '{s}'"))),
        }
    }
}

impl std::fmt::Display for Alternative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Greater => "greater",
            Self::Less => "less",
            Self::TwoSided => "two-sided",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    /// Pairs with `a > b`, ties counted one half.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Largest `n_a * n_b` for which the exact null distribution is used.
pub const EXACT_PAIR_LIMIT: usize = 1_000_000;
/// Largest dynamic-programming table (entries touched) for the exact path.
pub const EXACT_COST_LIMIT: usize = 50_000_000;

/// `U` statistic, doubled so that it is an integer.
fn u2(a: &[f64], b: &[f64]) -> usize {
    let mut s = 0;
    for x in a {
        for y in b {
            if x > y {
                s += 2;
            } else if x == y {
                s += 1;
            }
        }
    }
    s
}

/// Null distribution of `2U` over all equally likely splits of the pooled
/// sample, honouring ties. Entry `i` is the probability of `2U = i`.
fn exact_null(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (a.len(), b.len());
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let j = pooled[i..].iter().take_while(|&&v| v == pooled[i]).count();
        groups.push(j);
        i += j;
    }
    let max_u2 = 2 * na * b.len();
    // dp[k][u] = number of ways to pick k of the processed values as `a`
    let mut dp = vec![vec![0.0f64; max_u2 + 1]; na + 1];
    dp[0][0] = 1.0;
    let mut seen = 0;
    for &g in &groups {
        let mut next = vec![vec![0.0f64; max_u2 + 1]; na + 1];
        for k in 0..=na.min(seen) {
            let b_below = seen - k;
            if b_below > nb {
                continue;
            }
            // Members of the group not taken by `a` must still fit in `b`.
            let j_min = g.saturating_sub(nb - b_below);
            for (u, &c) in dp[k].iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let mut binom = 1.0;
                for j in 0..=g.min(na - k) {
                    if j > 0 {
                        binom = binom * (g - j + 1) as f64 / j as f64;
                    }
                    if j < j_min {
                        continue;
                    }
                    let du = j * 2 * b_below + j * (g - j);
                    next[k + j][u + du] += c * binom;
                }
            }
        }
        dp = next;
        seen += g;
    }
    let total: f64 = dp[na].iter().sum();
    dp[na].iter().map(|c| c / total).collect()
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, rel. err < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

fn tail_p(u2_obs: usize, null: &[f64], alt: Alternative) -> f64 {
    let upper: f64 = null[u2_obs..].iter().sum();
    let lower: f64 = null[..=u2_obs].iter().sum();
    match alt {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    }
}

/// Mann-Whitney U test. Exact (tie-aware) when the sample sizes are small
/// enough, otherwise a tie-corrected normal approximation with continuity
/// correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alt: Alternative) -> Result<MwuResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("both samples must be non-empty".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("samples must be finite".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let obs = u2(a, b);
    let u = obs as f64 / 2.0;
    let n = na + nb;
    let cost = n * (na + 1) * (2 * na * nb + 1);
    if na * nb <= EXACT_PAIR_LIMIT && cost <= EXACT_COST_LIMIT {
        let null = exact_null(a, b);
        return Ok(MwuResult { u, p_value: tail_p(obs, &null, alt).clamp(0.0, 1.0), exact: true });
    }
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let t = pooled[i..].iter().take_while(|&&v| v == pooled[i]).count() as f64;
        tie_term += t * t * t - t;
        i += t as usize;
    }
    let (fa, fb, fnn) = (na as f64, nb as f64, n as f64);
    let mu = fa * fb / 2.0;
    let sigma = (fa * fb / 12.0 * ((fnn + 1.0) - tie_term / (fnn * (fnn - 1.0)))).sqrt();
    let p = if sigma == 0.0 {
        1.0
    } else {
        let greater = normal_sf((u - mu - 0.5) / sigma);
        let less = 1.0 - normal_sf((u - mu + 0.5) / sigma);
        match alt {
            Alternative::Greater => greater,
            Alternative::Less => less,
            Alternative::TwoSided => (2.0 * greater.min(less)).min(1.0),
        }
    };
    Ok(MwuResult { u, p_value: p.clamp(0.0, 1.0), exact: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub denoiser_calls_per_step: usize,
    pub samples: usize,
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn latency_report(latencies: &[f64], n_sampling_steps: usize, n_candidates: usize) -> Result<LatencyReport> {
    if latencies.is_empty() {
        return Err(Error::Stats("no latency samples".into()));
    }
    let mut s = latencies.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        mean: mean(&s),
        p50: percentile(&s, 0.5),
        p95: percentile(&s, 0.95),
        denoiser_calls_per_step: n_sampling_steps * n_candidates,
        samples: s.len(),
    })
}
