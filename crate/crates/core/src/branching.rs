//! Linear branching-process approximation of the early infection.
//!
//! While target cells are effectively undepleted (`S ≈ S0`) the types
//! `(E, I, V)` reproduce independently:
//!
//! | event | change | rate |
//! |-------|--------|------|
//! | infection | `(+1, 0, 0)` | `β* V` |
//! | eclipse exit | `(-1, +1, 0)` | `k E` |
//! | removal | `(0, -1, 0)` | `δ I` |
//! | production | `(0, 0, +1)` | `ρ I` |
//! | clearance | `(0, 0, -1)` | `c V` |
//!
//! with `β* = β S0`. The mean matrix is
//! `A = [[-k, 0, β*], [k, -δ, 0], [0, ρ, -c]]`, its dominant eigenvalue is the
//! early growth rate `λ`, and `e^{-λt} u·X(t)` is a martingale for the left
//! eigenvector `u`, converging to `W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpSummary {
    pub lambda: f64,
    /// Left eigenvector of `A` for `λ` over `(E, I, V)`, summing to one.
    pub u: [f64; 3],
    /// `E[W]` for a single initial eclipse cell, i.e. `u_E`.
    pub mu_w: f64,
    /// Extinction probabilities starting from a single E, I or V.
    pub q: [f64; 3],
    pub q_star: f64,
    pub beta_star: f64,
}

pub fn mean_matrix(p: &ModelParams) -> [[f64; 3]; 3] {
    let bs = p.beta_star();
    [[-p.k, 0.0, bs], [p.k, -p.delta, 0.0], [0.0, p.rho, -p.c]]
}

/// Dominant eigenvalue of the mean matrix: the root of
/// `(λ+k)(λ+δ)(λ+c) = β* k ρ` above `-min(k, δ, c)`.
pub fn growth_rate(p: &ModelParams) -> f64 {
    let bs = p.beta_star();
    let target = bs * p.k * p.rho;
    let g = |l: f64| (l + p.k) * (l + p.delta) * (l + p.c) - target;
    let dg = |l: f64| {
        (l + p.delta) * (l + p.c) + (l + p.k) * (l + p.c) + (l + p.k) * (l + p.delta)
    };
    let mut lo = -p.k.min(p.delta).min(p.c);
    let mut hi = lo.abs().max(1.0);
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    // Newton polish; g is increasing and convex on the bracket.
    let mut l = 0.5 * (lo + hi);
    for _ in 0..4 {
        let d = dg(l);
        if d <= 0.0 {
            break;
        }
        let next = l - g(l) / d;
        if !(next >= lo - 1e-9 && next <= hi + 1e-9) {
            break;
        }
        l = next;
    }
    l
}

/// Left eigenvector `u A = λ u`, normalised to sum to one.
pub fn left_eigenvector(p: &ModelParams, lambda: f64) -> [f64; 3] {
    let u_e = 1.0;
    let u_i = u_e * (lambda + p.k) / p.k;
    let u_v = u_i * (lambda + p.delta) / p.rho;
    let sum = u_e + u_i + u_v;
    [u_e / sum, u_i / sum, u_v / sum]
}

/// Minimal nonnegative fixed point of the progeny generating functions.
///
/// `q3` is the smaller root of
/// `ρ(c+β*) q² − (cδ + 2cρ + β*ρ) q + c(δ+ρ) = 0`, whose roots are `1` and
/// `c(δ+ρ) / (ρ(c+β*))`; then `q1 = q2 = δ / (δ + ρ − ρ q3)`.
pub fn extinction_probs(p: &ModelParams) -> [f64; 3] {
    if p.r0 <= 1.0 {
        return [1.0; 3];
    }
    let bs = p.beta_star();
    let q3 = (p.c * (p.delta + p.rho) / (p.rho * (p.c + bs))).min(1.0);
    let q1 = (p.delta / (p.delta + p.rho - p.rho * q3)).min(1.0);
    [q1, q1, q3]
}

/// Left-hand side of the extinction quadratic in `q3`.
pub fn extinction_quadratic(p: &ModelParams, q3: f64) -> f64 {
    let bs = p.beta_star();
    p.rho * (p.c + bs) * q3 * q3 - (p.c * p.delta + 2.0 * p.c * p.rho + bs * p.rho) * q3
        + p.c * (p.delta + p.rho)
}

pub fn bp_summary(p: &ModelParams) -> Result<BpSummary> {
    p.validate()?;
    if p.r0 <= 1.0 {
        return Err(Error::Subcritical { r0: p.r0 });
    }
    let lambda = growth_rate(p);
    let u = left_eigenvector(p, lambda);
    let q = extinction_probs(p);
    Ok(BpSummary { lambda, u, mu_w: u[0], q, q_star: q[0], beta_star: p.beta_star() })
}
