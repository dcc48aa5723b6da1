//! Random time-shift law and the shifted deterministic trajectory.
//!
//! Conditional on survival the branching-process martingale limit `W` is
//! modelled as generalized gamma, `g(w) ∝ w^{d-1} exp(-(w/a)^p)`, and the shift
//! is `τ = log(W/μ_W)/λ`. With probability `q*` the infection goes extinct,
//! which is kept as a separate [`TauDraw::Extinct`] outcome.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::branching::{bp_summary, BpSummary};
use crate::dist::{digamma, gamma_p, gamma_quantile_unit, tetragamma, trigamma};
use crate::error::{domain, Error, Result};
use crate::model::ModelParams;
use crate::ode::Trajectory;
use crate::optimize::nelder_mead;
use crate::rng::fast_stream;
use crate::ssa::{bp_terminal_state, BpOutcome};

/// Generalized-gamma parameters of `W | survival`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgParams {
    pub a: f64,
    pub d: f64,
    pub p: f64,
}

impl GgParams {
    pub fn new(a: f64, d: f64, p: f64) -> Result<Self> {
        let g = Self { a, d, p };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("d", self.d), ("p", self.p)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("generalized-gamma {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.a, self.d, self.p]
    }

    pub fn logpdf(&self, w: f64) -> f64 {
        if !(w > 0.0) {
            return f64::NEG_INFINITY;
        }
        let lw = w.ln();
        self.p.ln() - self.d * self.a.ln() - ln_gamma(self.d / self.p) + (self.d - 1.0) * lw
            - (self.p * (lw - self.a.ln())).exp()
    }

    pub fn cdf(&self, w: f64) -> f64 {
        if !(w > 0.0) {
            return 0.0;
        }
        gamma_p(self.d / self.p, (self.p * (w.ln() - self.a.ln())).exp())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g: f64 = Gamma::new(self.d / self.p, 1.0).expect("validated shape").sample(rng);
        self.a * g.powf(1.0 / self.p)
    }
}

/// Outcome of drawing from the full time-shift mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauDraw {
    Extinct,
    Shift(f64),
}

impl TauDraw {
    pub fn shift(self) -> Option<f64> {
        match self {
            TauDraw::Shift(t) => Some(t),
            TauDraw::Extinct => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeShiftLaw {
    pub lambda: f64,
    pub mu_w: f64,
    pub q_star: f64,
    pub a: f64,
    pub d: f64,
    pub p: f64,
}

impl TimeShiftLaw {
    pub fn new(lambda: f64, mu_w: f64, q_star: f64, gg: GgParams) -> Result<Self> {
        let law = Self { lambda, mu_w, q_star, a: gg.a, d: gg.d, p: gg.p };
        law.validate()?;
        Ok(law)
    }

    pub fn from_summary(bp: &BpSummary, gg: GgParams) -> Result<Self> {
        Self::new(bp.lambda, bp.mu_w, bp.q_star, gg)
    }

    /// Law for `p` with `(a, d, p)` supplied externally (surrogate or MC fit).
    pub fn for_params(p: &ModelParams, gg: GgParams) -> Result<Self> {
        Self::from_summary(&bp_summary(p)?, gg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gg().validate()?;
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(domain(format!("growth rate must be positive, got {}", self.lambda)));
        }
        if !(self.mu_w.is_finite() && self.mu_w > 0.0) {
            return Err(domain(format!("mu_W must be positive, got {}", self.mu_w)));
        }
        if !(0.0..=1.0).contains(&self.q_star) {
            return Err(domain(format!("q* must lie in [0, 1], got {}", self.q_star)));
        }
        Ok(())
    }

    pub fn gg(&self) -> GgParams {
        GgParams { a: self.a, d: self.d, p: self.p }
    }

    /// `log(μ_W e^{λτ} / a)`.
    #[inline]
    fn y(&self, tau: f64) -> f64 {
        self.mu_w.ln() + self.lambda * tau - self.a.ln()
    }

    /// Log of the conditional density `f(τ)`.
    pub fn log_pdf(&self, tau: f64) -> f64 {
        let y = self.y(tau);
        (self.p * self.lambda).ln() - ln_gamma(self.d / self.p) + self.d * y - (self.p * y).exp()
    }

    pub fn pdf(&self, tau: f64) -> f64 {
        self.log_pdf(tau).exp()
    }

    /// Conditional CDF `∫_{-∞}^τ f`.
    pub fn cdf(&self, tau: f64) -> f64 {
        gamma_p(self.d / self.p, (self.p * self.y(tau)).exp())
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(domain(format!("quantile level must lie in (0, 1), got {q}")));
        }
        let g = gamma_quantile_unit(self.d / self.p, q);
        Ok((self.a.ln() + g.ln() / self.p - self.mu_w.ln()) / self.lambda)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TauDraw {
        if rng.random::<f64>() < self.q_star {
            return TauDraw::Extinct;
        }
        TauDraw::Shift(self.sample_conditional(rng))
    }

    /// Draw from `f(τ)`, i.e. conditional on survival.
    pub fn sample_conditional<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let w = self.gg().sample(rng);
        (w / self.mu_w).ln() / self.lambda
    }

    /// Whether the central 95% of `f` lies within `[-limit, limit]`.
    pub fn central_mass_within(&self, limit: f64) -> bool {
        match (self.quantile(0.025), self.quantile(0.975)) {
            (Ok(lo), Ok(hi)) => lo >= -limit && hi <= limit,
            _ => false,
        }
    }
}

/// Supplies the time-shift law for a parameter vector.
pub trait LawSource: Sync {
    fn law(&self, p: &ModelParams) -> Result<TimeShiftLaw>;
}

/// `(a, d, p)` held constant while `λ`, `μ_W` and `q*` follow `θ`.
#[derive(Debug, Clone, Copy)]
pub struct FixedGg(pub GgParams);

impl LawSource for FixedGg {
    fn law(&self, p: &ModelParams) -> Result<TimeShiftLaw> {
        TimeShiftLaw::for_params(p, self.0)
    }
}

/// Fits `(a, d, p)` by simulation on every call.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloLaw {
    pub n_sims: usize,
    pub seed: u64,
}

impl LawSource for MonteCarloLaw {
    fn law(&self, p: &ModelParams) -> Result<TimeShiftLaw> {
        let fit = fit_gg_params(p, self.n_sims, self.seed)?;
        TimeShiftLaw::for_params(p, fit.params)
    }
}

/// Deterministic trajectory translated by a time shift `τ`.
#[derive(Debug, Clone)]
pub struct ShiftedTrajectory {
    pub base: Trajectory,
    pub tau: f64,
}

impl ShiftedTrajectory {
    pub fn new(base: Trajectory, tau: f64) -> Self {
        Self { base, tau }
    }

    pub fn t0(&self) -> f64 {
        self.base.t0()
    }

    /// `log10 V_d(t + τ)` when both `t` and `t + τ` are after infection, `-inf`
    /// otherwise.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let t0 = self.t0();
        let s = t + self.tau - t0;
        if t <= t0 || s <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if s > self.base.horizon() {
            return Err(domain(format!(
                "t + tau = {} is beyond the trajectory end {}",
                t + self.tau,
                self.base.t_end()
            )));
        }
        Ok(self.base.log10_v_since_infection(s))
    }
}

pub fn shift_eval(straj: &ShiftedTrajectory, t: f64) -> Result<f64> {
    straj.eval(t)
}

/// Survivor sample of martingale limits from branching-process simulations.
#[derive(Debug, Clone)]
pub struct WSample {
    pub survivors: Vec<f64>,
    pub n_sims: usize,
    pub n_extinct: usize,
    pub n_aborted: usize,
    pub horizon: f64,
}

/// Simulates `n_sims` branching paths from one eclipse cell up to `T = 8/λ` and
/// returns `W = e^{-λT} u·X(T)` for paths still alive at `T`.
///
/// Path `i` uses the stream `(seed, i)`, so the result does not depend on
/// scheduling.
pub fn simulate_w(p: &ModelParams, n_sims: usize, seed: u64) -> Result<WSample> {
    let bp = bp_summary(p)?;
    let horizon = 8.0 / bp.lambda;
    let scale = (-bp.lambda * horizon).exp();
    let outcomes: Vec<BpOutcome> = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let mut rng = fast_stream(seed, &[i as u64]);
            bp_terminal_state(p, horizon, &mut rng)
        })
        .collect();
    let mut survivors = Vec::with_capacity(n_sims);
    let (mut n_extinct, mut n_aborted) = (0, 0);
    for o in outcomes {
        match o {
            BpOutcome::Alive(x) => {
                let w = scale * (bp.u[0] * x[0] as f64 + bp.u[1] * x[1] as f64 + bp.u[2] * x[2] as f64);
                survivors.push(w);
            }
            BpOutcome::Extinct => n_extinct += 1,
            BpOutcome::Exploded => n_aborted += 1,
        }
    }
    if n_aborted > 0 {
        log::warn!("{n_aborted} branching paths exceeded the population guard and were dropped");
    }
    Ok(WSample { survivors, n_sims, n_extinct, n_aborted, horizon })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgFit {
    pub params: GgParams,
    pub log_likelihood: f64,
    /// Kolmogorov–Smirnov distance between the survivor sample and the fit.
    pub ks: f64,
    pub n_survivors: usize,
    pub n_sims: usize,
    pub converged: bool,
}

pub const MIN_SURVIVORS: usize = 1000;
pub const MIN_SIMS: usize = 10_000;

/// Monte-Carlo estimate of `(a, d, p)` for `p` from `n_sims` branching paths.
pub fn fit_gg_params(p: &ModelParams, n_sims: usize, seed: u64) -> Result<GgFit> {
    if n_sims < MIN_SIMS {
        return Err(domain(format!("n_sims must be at least {MIN_SIMS}, got {n_sims}")));
    }
    let sample = simulate_w(p, n_sims, seed)?;
    if sample.survivors.len() < MIN_SURVIVORS {
        return Err(Error::InsufficientSurvivors { survivors: sample.survivors.len(), required: MIN_SURVIVORS });
    }
    let mut fit = fit_gg_mle(&sample.survivors)?;
    fit.n_sims = n_sims;
    Ok(fit)
}

/// Log-moment starting values: `log W = log a + (1/p) log G` with
/// `G ~ Gamma(d/p)`, matching mean, variance and skewness of `log W`.
pub fn gg_moment_start(ws: &[f64]) -> Result<GgParams> {
    let n = ws.len() as f64;
    let logs: Vec<f64> = ws.iter().map(|w| w.ln()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let m3 = logs.iter().map(|l| (l - mean).powi(3)).sum::<f64>() / n;
    if !(var > 0.0 && var.is_finite()) {
        return Err(domain("degenerate sample for generalized-gamma fit"));
    }
    let skew = (m3 / var.powf(1.5)).clamp(-1.99, -1e-3);
    // ψ₂(k)/ψ₁(k)^{3/2} increases from -2 to 0 in k.
    let skew_of = |lk: f64| {
        let k = lk.exp();
        tetragamma(k) / trigamma(k).powf(1.5)
    };
    let (mut lo, mut hi) = (-12.0_f64, 12.0_f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if skew_of(mid) < skew {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = (0.5 * (lo + hi)).exp();
    let p = (trigamma(k) / var).sqrt();
    let a = (mean - digamma(k) / p).exp();
    GgParams::new(a, k * p, p)
}

/// Maximum-likelihood generalized-gamma fit in `(log a, log d, log p)`.
pub fn fit_gg_mle(ws: &[f64]) -> Result<GgFit> {
    if ws.len() < 2 || ws.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(domain("generalized-gamma fit needs at least two positive samples"));
    }
    let start = gg_moment_start(ws)?;
    let logs: Vec<f64> = ws.iter().map(|w| w.ln()).collect();
    let sum_log: f64 = logs.iter().sum();
    let n = ws.len() as f64;
    let nll = |x: &[f64]| -> f64 {
        let (la, ld, lp) = (x[0], x[1], x[2]);
        let (d, p) = (ld.exp(), lp.exp());
        let tail: f64 = logs.iter().map(|l| (p * (l - la)).exp()).sum();
        -(n * (lp - d * la - ln_gamma(d / p)) + (d - 1.0) * sum_log - tail)
    };
    let x0 = [start.a.ln(), start.d.ln(), start.p.ln()];
    let mut r = nelder_mead(&nll, &x0, &[0.1, 0.1, 0.1], 1e-8, 1e-10, 20_000);
    // One restart from the optimum guards against premature simplex collapse.
    let r2 = nelder_mead(&nll, &r.x, &[0.02, 0.02, 0.02], 1e-8, 1e-10, 20_000);
    if r2.fx <= r.fx {
        r = r2;
    }
    let params = GgParams::new(r.x[0].exp(), r.x[1].exp(), r.x[2].exp())?;
    Ok(GgFit {
        params,
        log_likelihood: -r.fx,
        ks: ks_distance(ws, |w| params.cdf(w)),
        n_survivors: ws.len(),
        n_sims: ws.len(),
        converged: r.converged,
    })
}

/// One-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// One labelled training point, as exchanged between the fitting and
/// surrogate stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct GgLabel {
    #[serde(rename = "R0")]
    pub r0: f64,
    pub delta: f64,
    pub rho: f64,
    pub a: f64,
    pub d: f64,
    pub p: f64,
    pub lambda: f64,
    pub q_star: f64,
}

impl GgLabel {
    pub fn new(params: &ModelParams, law: &TimeShiftLaw) -> Self {
        Self {
            r0: params.r0,
            delta: params.delta,
            rho: params.rho,
            a: law.a,
            d: law.d,
            p: law.p,
            lambda: law.lambda,
            q_star: law.q_star,
        }
    }
}

pub fn write_labels_csv<W: Write>(labels: &[GgLabel], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in labels {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(input: R) -> Result<Vec<GgLabel>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
