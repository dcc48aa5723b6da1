//! Convergence diagnostics for multiple chains: rank-normalized split R-hat
//! and bulk effective sample size.

use serde::{Deserialize, Serialize};

use crate::dist::std_normal_quantile;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Splits each chain into halves, dropping the middle draw of odd lengths.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Normal scores of the pooled ranks, ties averaged.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        let z = std_normal_quantile((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &pooled[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

/// Classic R-hat of equal-length chains.
pub fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / m;
    let b = n * var(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Maximum of the bulk and folded rank-normalized split R-hat.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.len() < 2 || split[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = rhat_basic(&rank_normalize(&split));
    let pooled: Vec<f64> = split.iter().flatten().copied().collect();
    let med = median(&pooled);
    let folded: Vec<Vec<f64>> = split.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    bulk.max(tail)
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone positive sequence.
pub fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / m as f64;
    let b_over_n = if m > 1 { var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let acov = chains.iter().map(|c| autocov(c, t)).sum::<f64>() / m as f64;
        1.0 - (w - acov) / var_plus
    };
    // Sum pairs Γ_k = ρ_{2k} + ρ_{2k+1} while positive, enforcing monotonicity.
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut pair = rho(t) + rho(t + 1);
        if !(pair > 0.0) {
            break;
        }
        pair = pair.min(prev);
        prev = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    let tau = tau.max(1.0 / ((m * n) as f64).log10());
    (m * n) as f64 / tau
}

/// Bulk ESS: ESS of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.is_empty() || split[0].len() < 4 {
        return f64::NAN;
    }
    ess_basic(&rank_normalize(&split))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(chains: &[Vec<f64>]) -> ParamSummary {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    ParamSummary {
        mean: mean(&pooled),
        sd: var(&pooled).sqrt(),
        q025: quantile_sorted(&pooled, 0.025),
        q50: quantile_sorted(&pooled, 0.5),
        q975: quantile_sorted(&pooled, 0.975),
        rhat: rhat(chains),
        ess_bulk: ess_bulk(chains),
    }
}
