//! Target-cell-limited (TCL) model with an eclipse phase.
//!
//! Compartments are susceptible target cells `S`, eclipse-phase cells `E`,
//! infectious cells `I` and free virions `V`. The model is parameterised by
//! the basic reproduction number `R0` rather than the infection rate `β`;
//! the two are related by `R0 = β S0 ρ / (δ c)`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Default initial target-cell count.
pub const DEFAULT_S0: f64 = 8.0e7;
/// Eclipse exit rate held fixed during inference (1/day).
pub const FIXED_K: f64 = 4.0;
/// Virion clearance rate held fixed during inference (1/day).
pub const FIXED_C: f64 = 10.0;

/// Within-host parameter vector `(R0, k, δ, ρ, c, t0)` plus the fixed `S0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub r0: f64,
    /// Eclipse exit rate, 1/day.
    pub k: f64,
    /// Infectious-cell removal rate, 1/day.
    pub delta: f64,
    /// Virion production rate per infectious cell, 1/day.
    pub rho: f64,
    /// Virion clearance rate, 1/day.
    pub c: f64,
    /// Infection time, days relative to the data's time origin.
    pub t0: f64,
    pub s0: f64,
}

impl ModelParams {
    pub fn new(r0: f64, k: f64, delta: f64, rho: f64, c: f64, t0: f64) -> Result<Self> {
        Self::with_s0(r0, k, delta, rho, c, t0, DEFAULT_S0)
    }

    pub fn with_s0(r0: f64, k: f64, delta: f64, rho: f64, c: f64, t0: f64, s0: f64) -> Result<Self> {
        let p = Self { r0, k, delta, rho, c, t0, s0 };
        p.validate()?;
        Ok(p)
    }

    /// Parameters with `k` and `c` at their fixed inference values.
    pub fn from_free(r0: f64, delta: f64, rho: f64, t0: f64) -> Result<Self> {
        Self::new(r0, FIXED_K, delta, rho, FIXED_C, t0)
    }

    /// `θ = (8, 4, 1.7, 3, 10, 0)`, the illustration parameters used throughout
    /// the validation suites.
    pub fn reference() -> Self {
        Self { r0: 8.0, k: 4.0, delta: 1.7, rho: 3.0, c: 10.0, t0: 0.0, s0: DEFAULT_S0 }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [("R0", self.r0), ("k", self.k), ("delta", self.delta), ("rho", self.rho), ("c", self.c)];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.t0.is_finite() {
            return Err(domain("t0 must be finite"));
        }
        if !(self.s0.is_finite() && self.s0 >= 1.0) {
            return Err(domain(format!("S0 must be at least 1, got {}", self.s0)));
        }
        Ok(())
    }

    /// Infection rate per virion per target cell per day.
    pub fn beta(&self) -> f64 {
        self.r0 * self.delta * self.c / (self.rho * self.s0)
    }

    /// `β·S0`, the per-virion infection rate at full target-cell availability.
    pub fn beta_star(&self) -> f64 {
        self.r0 * self.delta * self.c / self.rho
    }

    /// The free coordinates `(R0, δ, ρ)` learned by the surrogate.
    pub fn free_coords(&self) -> [f64; 3] {
        [self.r0, self.delta, self.rho]
    }
}

pub fn beta_from_r0(p: &ModelParams) -> Result<f64> {
    p.validate()?;
    Ok(p.beta())
}

/// Inverse of [`beta_from_r0`]: `R0 = β S0 ρ / (δ c)`, reading `δ, ρ, c, S0`
/// from `p` and ignoring its `r0` field.
pub fn r0_from_beta(beta: f64, p: &ModelParams) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(domain(format!("beta must be positive, got {beta}")));
    }
    let probe = ModelParams { r0: 1.0, ..*p };
    probe.validate()?;
    Ok(beta * p.s0 * p.rho / (p.delta * p.c))
}

/// Integer counts `(S, E, I, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct State {
    pub s: u64,
    pub e: u64,
    pub i: u64,
    pub v: u64,
}

impl State {
    pub fn new(s: u64, e: u64, i: u64, v: u64) -> Self {
        Self { s, e, i, v }
    }

    /// A single eclipse-phase cell in a fully susceptible population.
    pub fn initial(p: &ModelParams) -> Self {
        Self { s: p.s0.round() as u64 - 1, e: 1, i: 0, v: 0 }
    }

    pub fn cells(&self) -> u64 {
        self.s + self.e + self.i
    }

    pub fn infection_extinct(&self) -> bool {
        self.e == 0 && self.i == 0 && self.v == 0
    }

    /// Applies a reaction, returning `None` if any count would go negative.
    pub fn apply(&self, r: Reaction) -> Option<State> {
        let d = r.delta_state();
        let add = |x: u64, dx: i64| -> Option<u64> {
            if dx >= 0 {
                x.checked_add(dx as u64)
            } else {
                x.checked_sub(dx.unsigned_abs())
            }
        };
        Some(State { s: add(self.s, d[0])?, e: add(self.e, d[1])?, i: add(self.i, d[2])?, v: add(self.v, d[3])? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reaction {
    Infection,
    EclipseExit,
    CellRemoval,
    VirionProduction,
    VirionClearance,
}

impl Reaction {
    pub const ALL: [Reaction; 5] = [
        Reaction::Infection,
        Reaction::EclipseExit,
        Reaction::CellRemoval,
        Reaction::VirionProduction,
        Reaction::VirionClearance,
    ];

    /// `(ΔS, ΔE, ΔI, ΔV)`.
    pub fn delta_state(self) -> [i64; 4] {
        match self {
            Reaction::Infection => [-1, 1, 0, 0],
            Reaction::EclipseExit => [0, -1, 1, 0],
            Reaction::CellRemoval => [0, 0, -1, 0],
            Reaction::VirionProduction => [0, 0, 0, 1],
            Reaction::VirionClearance => [0, 0, 0, -1],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Propensities `(βSV, kE, δI, ρI, cV)` in [`Reaction::ALL`] order.
///
/// Production is `ρ·I`: virions are produced by infectious cells.
pub fn rates(state: &State, p: &ModelParams) -> [f64; 5] {
    let (s, e, i, v) = (state.s as f64, state.e as f64, state.i as f64, state.v as f64);
    [p.beta() * s * v, p.k * e, p.delta * i, p.rho * i, p.c * v]
}

/// Population means and standard deviations of `(R0, δ, ρ)` and the
/// observation noise `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub mu_r0: f64,
    pub mu_delta: f64,
    pub mu_rho: f64,
    pub sigma_r0: f64,
    pub sigma_delta: f64,
    pub sigma_rho: f64,
    pub kappa: f64,
}

impl Hyperparams {
    pub const NAMES: [&'static str; 7] = ["mu_R0", "mu_delta", "mu_rho", "sigma_R0", "sigma_delta", "sigma_rho", "kappa"];

    /// Values used to generate the synthetic validation cohort.
    pub fn synthetic_truth() -> Self {
        Self { mu_r0: 8.0, mu_delta: 1.3, mu_rho: 3.0, sigma_r0: 0.5, sigma_delta: 0.15, sigma_rho: 0.25, kappa: 0.5 }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.mu_r0, self.mu_delta, self.mu_rho, self.sigma_r0, self.sigma_delta, self.sigma_rho, self.kappa]
    }

    pub fn from_array(x: [f64; 7]) -> Self {
        Self { mu_r0: x[0], mu_delta: x[1], mu_rho: x[2], sigma_r0: x[3], sigma_delta: x[4], sigma_rho: x[5], kappa: x[6] }
    }

    pub fn means(&self) -> [f64; 3] {
        [self.mu_r0, self.mu_delta, self.mu_rho]
    }

    pub fn sds(&self) -> [f64; 3] {
        [self.sigma_r0, self.sigma_delta, self.sigma_rho]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.as_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}
