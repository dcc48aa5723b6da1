//! Hierarchical model and Metropolis-within-Gibbs sampler.
//!
//! Individual parameters use a non-centred parameterisation: individual `i`
//! carries `(z_R0, z_δ, z_ρ, t0)` and its natural parameters are
//! `μ + σ·z` under the shared hyperparameters. Each iteration updates every
//! individual block with a 4-d Gaussian random walk, then the 7 shared
//! parameters `(μ_R0, μ_δ, μ_ρ, σ_R0, σ_δ, σ_ρ, κ)` jointly.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{summarize, ParamSummary};
use crate::dist::{gamma_logpdf, gumbel_logpdf, gumbel_quantile, half_normal_logpdf, normal_logpdf};
use crate::error::{Error, Result};
use crate::likelihood::{deterministic_loglik, marginal_loglik, marginal_loglik_exact, IndividualModel, IndividualSeries};
use crate::model::{Hyperparams, ModelParams};
use crate::rng::stream;
use crate::timeshift::LawSource;

/// Individuals need `R0` above this for a defined time-shift law.
pub const R0_MIN: f64 = 1.0 + 1e-6;
pub const SHARED_DIM: usize = 7;
pub const BLOCK_DIM: usize = 4;
const OPTIMAL_SCALE: f64 = 2.38 * 2.38;
const JITTER: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Shape and scale of the Gamma priors on the population means.
    pub mu_r0: (f64, f64),
    pub mu_delta: (f64, f64),
    pub mu_rho: (f64, f64),
    /// Half-normal scales.
    pub sigma_r0: f64,
    pub sigma_delta: f64,
    pub sigma_rho: f64,
    pub kappa: f64,
    /// Gumbel location and scale of the infection time.
    pub t0_loc: f64,
    pub t0_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            mu_r0: (10.0 / 3.0, 3.0),
            mu_delta: (26.0, 0.05),
            mu_rho: (10.0, 0.3),
            sigma_r0: 3.0,
            sigma_delta: 1.0,
            sigma_rho: 3.0,
            kappa: 1.0,
            t0_loc: -7.0,
            t0_scale: 3.0,
        }
    }
}

pub fn log_prior_hyper(h: &Hyperparams, pri: &Priors) -> f64 {
    let x = h.as_array();
    if x.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return f64::NEG_INFINITY;
    }
    gamma_logpdf(h.mu_r0, pri.mu_r0.0, pri.mu_r0.1)
        + gamma_logpdf(h.mu_delta, pri.mu_delta.0, pri.mu_delta.1)
        + gamma_logpdf(h.mu_rho, pri.mu_rho.0, pri.mu_rho.1)
        + half_normal_logpdf(h.sigma_r0, pri.sigma_r0)
        + half_normal_logpdf(h.sigma_delta, pri.sigma_delta)
        + half_normal_logpdf(h.sigma_rho, pri.sigma_rho)
        + half_normal_logpdf(h.kappa, pri.kappa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualBlock {
    pub z_r0: f64,
    pub z_delta: f64,
    pub z_rho: f64,
    pub t0: f64,
}

impl IndividualBlock {
    pub fn as_array(&self) -> [f64; 4] {
        [self.z_r0, self.z_delta, self.z_rho, self.t0]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self { z_r0: x[0], z_delta: x[1], z_rho: x[2], t0: x[3] }
    }

    /// `(R0, δ, ρ)` implied by the NCP coordinates.
    pub fn natural(&self, h: &Hyperparams) -> [f64; 3] {
        [h.mu_r0 + h.sigma_r0 * self.z_r0, h.mu_delta + h.sigma_delta * self.z_delta, h.mu_rho + h.sigma_rho * self.z_rho]
    }

    /// Natural parameters, or `None` outside the support.
    pub fn params(&self, h: &Hyperparams) -> Option<ModelParams> {
        let [r0, delta, rho] = self.natural(h);
        if !(r0 > R0_MIN && delta > 0.0 && rho > 0.0) {
            return None;
        }
        ModelParams::from_free(r0, delta, rho, self.t0).ok()
    }

    /// Inverse of [`natural`](Self::natural).
    pub fn from_natural(x: [f64; 3], t0: f64, h: &Hyperparams) -> Self {
        Self {
            z_r0: (x[0] - h.mu_r0) / h.sigma_r0,
            z_delta: (x[1] - h.mu_delta) / h.sigma_delta,
            z_rho: (x[2] - h.mu_rho) / h.sigma_rho,
            t0,
        }
    }
}

pub fn log_prior_individual(b: &IndividualBlock, pri: &Priors) -> f64 {
    normal_logpdf(b.z_r0, 0.0, 1.0)
        + normal_logpdf(b.z_delta, 0.0, 1.0)
        + normal_logpdf(b.z_rho, 0.0, 1.0)
        + gumbel_logpdf(b.t0, pri.t0_loc, pri.t0_scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodMode {
    /// Laplace marginal with exact fallback.
    Laplace,
    Exact,
    /// Shift fixed at zero, no extinction mass.
    Deterministic,
    /// Constant likelihood; the posterior is the prior.
    Flat,
}

/// Data, law source, priors and likelihood mode: everything the sampler
/// needs to evaluate conditionals.
pub struct Target<'a> {
    pub series: &'a [IndividualSeries],
    pub source: &'a dyn LawSource,
    pub mode: LikelihoodMode,
    pub priors: Priors,
}

impl<'a> Target<'a> {
    pub fn new(series: &'a [IndividualSeries], source: &'a dyn LawSource, mode: LikelihoodMode, priors: Priors) -> Self {
        Self { series, source, mode, priors }
    }

    pub fn n(&self) -> usize {
        self.series.len()
    }

    /// Log marginal likelihood of individual `i`; `-inf` outside the support
    /// or when the evaluation fails.
    pub fn individual_loglik(&self, i: usize, b: &IndividualBlock, h: &Hyperparams) -> f64 {
        if self.mode == LikelihoodMode::Flat {
            return 0.0;
        }
        if !(h.kappa > 0.0) {
            return f64::NEG_INFINITY;
        }
        let Some(p) = b.params(h) else {
            return f64::NEG_INFINITY;
        };
        let s = &self.series[i];
        let r = match self.mode {
            LikelihoodMode::Deterministic => deterministic_loglik(s, &p, h.kappa),
            LikelihoodMode::Laplace => {
                IndividualModel::with_source(&p, self.source, h.kappa, s.t_last()).and_then(|m| marginal_loglik(s, &m).map(|e| e.log_lik))
            }
            LikelihoodMode::Exact => {
                IndividualModel::with_source(&p, self.source, h.kappa, s.t_last()).and_then(|m| marginal_loglik_exact(s, &m))
            }
            LikelihoodMode::Flat => unreachable!(),
        };
        match r {
            Ok(v) if !v.is_nan() => v,
            Ok(_) => {
                log::warn!("individual {}: likelihood is NaN at {:?}", s.id, p);
                f64::NEG_INFINITY
            }
            Err(Error::Extrapolation { .. }) => f64::NEG_INFINITY,
            Err(e) => {
                log::warn!("individual {}: likelihood failed at {:?}: {e}", s.id, p);
                f64::NEG_INFINITY
            }
        }
    }

    pub fn individual_conditional_logpost(&self, i: usize, b: &IndividualBlock, h: &Hyperparams) -> f64 {
        let lp = log_prior_individual(b, &self.priors);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + self.individual_loglik(i, b, h)
    }

    pub fn logliks(&self, blocks: &[IndividualBlock], h: &Hyperparams) -> Vec<f64> {
        blocks.par_iter().enumerate().map(|(i, b)| self.individual_loglik(i, b, h)).collect()
    }

    /// Full joint log posterior (up to a constant).
    pub fn log_posterior(&self, state: &HierarchicalState) -> f64 {
        log_prior_hyper(&state.hyper, &self.priors)
            + state.blocks.iter().map(|b| log_prior_individual(b, &self.priors)).sum::<f64>()
            + state.loglik.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalState {
    pub blocks: Vec<IndividualBlock>,
    pub hyper: Hyperparams,
    /// Cached per-individual log marginal likelihoods.
    pub loglik: Vec<f64>,
    pub iteration: usize,
}

impl HierarchicalState {
    pub fn new(target: &Target, blocks: Vec<IndividualBlock>, hyper: Hyperparams) -> Result<Self> {
        if blocks.len() != target.n() {
            return Err(Error::Initialization(format!("{} blocks for {} individuals", blocks.len(), target.n())));
        }
        let loglik = target.logliks(&blocks, &hyper);
        let state = Self { blocks, hyper, loglik, iteration: 0 };
        if log_prior_hyper(&hyper, &target.priors) == f64::NEG_INFINITY {
            return Err(Error::Initialization("hyperparameters outside the prior support".into()));
        }
        if let Some(i) = state.loglik.iter().position(|l| *l == f64::NEG_INFINITY) {
            return Err(Error::Initialization(format!("individual {} has zero likelihood at the initial state", target.series[i].id)));
        }
        Ok(state)
    }

    /// Largest difference between the cached log-likelihoods and a fresh
    /// recomputation.
    pub fn audit(&self, target: &Target) -> f64 {
        target
            .logliks(&self.blocks, &self.hyper)
            .iter()
            .zip(&self.loglik)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    /// Natural `(R0, δ, ρ, t0)` of every individual.
    pub fn natural(&self) -> Vec<[f64; 4]> {
        self.blocks
            .iter()
            .map(|b| {
                let [r0, d, rho] = b.natural(&self.hyper);
                [r0, d, rho, b.t0]
            })
            .collect()
    }
}

/// Gaussian random-walk proposal for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProposal {
    pub dim: usize,
    /// Row-major covariance.
    pub cov: Vec<f64>,
    /// Global multiplier on the covariance.
    pub scale: f64,
    /// Lower Cholesky factor of `scale · cov`, row-major.
    #[serde(skip)]
    chol: Vec<f64>,
}

impl BlockProposal {
    pub fn new(dim: usize, cov: Vec<f64>, scale: f64) -> Result<Self> {
        if cov.len() != dim * dim || !(scale >= 0.0) {
            return Err(Error::Config("proposal covariance has the wrong shape".into()));
        }
        let mut b = Self { dim, cov, scale, chol: Vec::new() };
        b.factor()?;
        Ok(b)
    }

    pub fn diagonal(sd: &[f64]) -> Self {
        let dim = sd.len();
        let mut cov = vec![0.0; dim * dim];
        for j in 0..dim {
            cov[j * dim + j] = sd[j] * sd[j];
        }
        Self::new(dim, cov, 1.0).expect("diagonal covariance")
    }

    fn factor(&mut self) -> Result<()> {
        let d = self.dim;
        if self.scale == 0.0 || self.cov.iter().all(|v| *v == 0.0) {
            self.chol = vec![0.0; d * d];
            return Ok(());
        }
        let m = DMatrix::from_row_slice(d, d, &self.cov) * self.scale;
        if (0..d).any(|i| (0..d).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (m[(i, i)].abs() + m[(j, j)].abs()))) {
            return Err(Error::Config("proposal covariance is not symmetric".into()));
        }
        let l = m.cholesky().ok_or_else(|| Error::Config("proposal covariance is not positive definite".into()))?.l();
        self.chol = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        Ok(())
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        self.scale = scale;
        self.factor()
    }

    pub fn perturb<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.chol.is_empty() {
            // Deserialized proposals are refactored lazily.
            let mut c = self.clone();
            c.factor().expect("validated covariance");
            return c.perturb(rng);
        }
        let d = self.dim;
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d).map(|i| (0..=i).map(|j| self.chol[i * d + j] * e[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub individual: Vec<BlockProposal>,
    pub shared: BlockProposal,
    /// Sweeps of the centred `(μ, σ)` move per iteration; 0 disables it.
    #[serde(default)]
    pub interweave: usize,
}

impl ProposalSpec {
    /// Independent random walks with the given step sizes.
    pub fn initial(n: usize, individual_sd: [f64; 4], shared_sd: [f64; 7]) -> Self {
        Self { individual: vec![BlockProposal::diagonal(&individual_sd); n], shared: BlockProposal::diagonal(&shared_sd), interweave: 0 }
    }
}

/// `min(1, exp(Δ))` acceptance test.
pub fn metropolis_accept(log_ratio: f64, u: f64) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || u.ln() < log_ratio
}

pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub individual: Vec<bool>,
    pub shared: bool,
}

/// One Metropolis-within-Gibbs sweep. Individual `i` draws from stream
/// `(seed, chain, iteration, i)`, the shared step from
/// `(seed, chain, iteration, N)` and the centred move from
/// `(seed, chain, iteration, N + 1)`.
pub fn mwg_step(state: &mut HierarchicalState, proposals: &ProposalSpec, target: &Target, seed: u64, chain: u64) -> StepStats {
    let n = target.n();
    let it = state.iteration as u64;
    let hyper = state.hyper;
    let individual: Vec<bool> = state
        .blocks
        .par_iter_mut()
        .zip(state.loglik.par_iter_mut())
        .enumerate()
        .map(|(i, (block, ll))| {
            let mut rng = stream(seed, &[chain, it, i as u64]);
            let step = proposals.individual[i].perturb(&mut rng);
            let cur = block.as_array();
            let prop = IndividualBlock::from_array(std::array::from_fn(|j| cur[j] + step[j]));
            let u: f64 = rng.random();
            let lp_prop = log_prior_individual(&prop, &target.priors);
            if lp_prop == f64::NEG_INFINITY {
                return false;
            }
            let ll_prop = target.individual_loglik(i, &prop, &hyper);
            let ratio = (lp_prop + ll_prop) - (log_prior_individual(block, &target.priors) + *ll);
            if metropolis_accept(ratio, u) {
                *block = prop;
                *ll = ll_prop;
                true
            } else {
                false
            }
        })
        .collect();

    let mut rng = stream(seed, &[chain, it, n as u64]);
    let step = proposals.shared.perturb(&mut rng);
    let cur = state.hyper.as_array();
    let prop = Hyperparams::from_array(std::array::from_fn(|j| cur[j] + step[j]));
    let u: f64 = rng.random();
    let lp_prop = log_prior_hyper(&prop, &target.priors);
    let mut shared = false;
    if lp_prop > f64::NEG_INFINITY {
        let ll_prop = target.logliks(&state.blocks, &prop);
        let sum_prop: f64 = ll_prop.iter().sum();
        let ratio = (lp_prop + sum_prop) - (log_prior_hyper(&state.hyper, &target.priors) + state.loglik.iter().sum::<f64>());
        if metropolis_accept(ratio, u) {
            state.hyper = prop;
            state.loglik = ll_prop;
            shared = true;
        }
    }
    if proposals.interweave > 0 {
        centred_step(state, &target.priors, proposals.interweave, &mut stream(seed, &[chain, it, n as u64 + 1]));
    }
    state.iteration += 1;
    StepStats { individual, shared }
}

/// Random-walk updates of each `(μ, σ)` pair with the natural parameters held
/// fixed and `z` recomputed. The likelihood does not move, so only the
/// hyperprior and the population density enter the ratio.
fn centred_step<R: Rng + ?Sized>(state: &mut HierarchicalState, pri: &Priors, sweeps: usize, rng: &mut R) {
    let n = state.blocks.len();
    if n == 0 {
        return;
    }
    let x: Vec<[f64; 3]> = state.blocks.iter().map(|b| b.natural(&state.hyper)).collect();
    let mut h = state.hyper.as_array();
    let log_target = |h: &[f64; 7], j: usize| -> f64 {
        let (mu, sigma) = (h[j], h[3 + j]);
        let pop: f64 = x.iter().map(|xi| -0.5 * ((xi[j] - mu) / sigma).powi(2)).sum::<f64>() - n as f64 * sigma.ln();
        log_prior_hyper(&Hyperparams::from_array(*h), pri) + pop
    };
    let mu_step_unit = 1.0 / (n as f64).sqrt();
    let log_sigma_step = 1.2 / (2.0 * n as f64).sqrt();
    for _ in 0..sweeps {
        for j in 0..3 {
            let cur = log_target(&h, j);
            let mut prop = h;
            let e: f64 = StandardNormal.sample(rng);
            prop[j] += 1.5 * h[3 + j] * mu_step_unit * e;
            let u: f64 = rng.random();
            let lp = log_target(&prop, j);
            if metropolis_accept(lp - cur, u) {
                h = prop;
            }

            let cur = log_target(&h, j);
            let mut prop = h;
            let e: f64 = StandardNormal.sample(rng);
            prop[3 + j] *= (log_sigma_step * e).exp();
            let u: f64 = rng.random();
            let lp = log_target(&prop, j);
            if metropolis_accept(lp - cur + (prop[3 + j] / h[3 + j]).ln(), u) {
                h = prop;
            }
        }
    }
    let hyper = Hyperparams::from_array(h);
    for (b, xi) in state.blocks.iter_mut().zip(&x) {
        b.z_r0 = (xi[0] - hyper.mu_r0) / hyper.sigma_r0;
        b.z_delta = (xi[1] - hyper.mu_delta) / hyper.sigma_delta;
        b.z_rho = (xi[2] - hyper.mu_rho) / hyper.sigma_rho;
    }
    state.hyper = hyper;
}

fn sample_cov(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            cov[i * dim + j] /= n - 1.0;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }
    cov
}

pub const MIN_PILOT_DRAWS: usize = 2000;

/// Sample covariance scaled by `2.38²/dim` plus `1e-9` jitter; a
/// rank-deficient covariance falls back to its floored diagonal.
pub fn tune_block(rows: &[Vec<f64>], dim: usize) -> BlockProposal {
    let cov = if rows.len() > dim { sample_cov(rows, dim) } else { vec![0.0; dim * dim] };
    let factor = OPTIMAL_SCALE / dim as f64;
    let diag: Vec<f64> = (0..dim).map(|j| cov[j * dim + j]).collect();
    let max_var = diag.iter().cloned().fold(0.0, f64::max);
    let degenerate = diag.iter().any(|v| !(*v > 1e-14 * max_var) || !(*v > 0.0));
    let full_rank = !degenerate && DMatrix::from_row_slice(dim, dim, &cov).cholesky().is_some();
    if full_rank {
        let mut c: Vec<f64> = cov.iter().map(|v| v * factor).collect();
        for j in 0..dim {
            c[j * dim + j] += JITTER;
        }
        if let Ok(b) = BlockProposal::new(dim, c, 1.0) {
            return b;
        }
    }
    let mut c = vec![0.0; dim * dim];
    for j in 0..dim {
        c[j * dim + j] = (diag[j] * factor).max(JITTER);
    }
    BlockProposal::new(dim, c, 1.0).expect("positive diagonal")
}

/// Pilot draws per block: `individual[i]` holds the 4-d draws of individual
/// `i` and `shared` the 7-d hyperparameter draws.
#[derive(Debug, Clone, Default)]
pub struct PilotDraws {
    pub individual: Vec<Vec<Vec<f64>>>,
    pub shared: Vec<Vec<f64>>,
}

pub fn tune_proposals(pilot: &PilotDraws) -> Result<ProposalSpec> {
    if pilot.shared.len() < MIN_PILOT_DRAWS {
        return Err(Error::Config(format!("pilot has {} draws, need at least {MIN_PILOT_DRAWS}", pilot.shared.len())));
    }
    Ok(ProposalSpec {
        individual: pilot.individual.iter().map(|rows| tune_block(rows, BLOCK_DIM)).collect(),
        shared: tune_block(&pilot.shared, SHARED_DIM),
        interweave: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Main-run iterations per chain, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Pilot rounds; each retunes the proposals from its post-burn-in draws.
    pub pilot_rounds: usize,
    pub pilot_iterations: usize,
    pub pilot_burn_in: usize,
    pub seed: u64,
    pub mode: LikelihoodMode,
    /// Log-scale jitter applied to the starting hyperparameters of each chain.
    pub init_jitter: f64,
    /// Centred `(μ, σ)` sweeps interleaved with each non-centred iteration.
    #[serde(default)]
    pub interweave: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 100_000,
            burn_in: 10_000,
            thin: 10,
            pilot_rounds: 3,
            pilot_iterations: 2500,
            pilot_burn_in: 500,
            seed: 0,
            mode: LikelihoodMode::Laplace,
            init_jitter: 0.1,
            interweave: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.chains >= 1
            && self.thin >= 1
            && self.iterations > self.burn_in
            && self.init_jitter >= 0.0
            && (self.pilot_rounds == 0 || self.pilot_iterations >= self.pilot_burn_in + MIN_PILOT_DRAWS);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid sampler configuration (iterations must exceed burn-in; each pilot round needs 2000 kept draws)".into()))
        }
    }
}

/// Starting point shared by all chains before per-chain jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialValues {
    pub hyper: Hyperparams,
}

impl Default for InitialValues {
    fn default() -> Self {
        Self {
            hyper: Hyperparams { mu_r0: 10.0, mu_delta: 1.3, mu_rho: 3.0, sigma_r0: 1.0, sigma_delta: 0.2, sigma_rho: 0.5, kappa: 0.5 },
        }
    }
}

const INIT_ATTEMPTS: usize = 200;

/// Jittered hyperparameters with individual blocks near zero and infection
/// times a few days before each first detection; retried from prior draws
/// of the blocks until every individual has positive likelihood.
pub fn initialize_chain(target: &Target, init: &InitialValues, jitter: f64, seed: u64, chain: u64) -> Result<HierarchicalState> {
    let mut last_err = None;
    for attempt in 0..INIT_ATTEMPTS as u64 {
        let mut rng = stream(seed, &[u64::MAX, chain, attempt]);
        let spread = if attempt == 0 { jitter } else { jitter.max(0.1) };
        let mut h = init.hyper.as_array();
        for v in h.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v *= (spread * e).exp();
        }
        let hyper = Hyperparams::from_array(h);
        let z_sd = if attempt == 0 { 0.1 } else { 0.5 };
        let blocks: Vec<IndividualBlock> = target
            .series
            .iter()
            .map(|s| {
                let first = s.times.iter().zip(&s.censored).find(|(_, c)| !**c).map(|(t, _)| *t);
                let base = gumbel_quantile(target.priors.t0_loc, target.priors.t0_scale, 0.5);
                let t0 = match first {
                    Some(t) => base.min(t - 4.0),
                    None => base,
                };
                let mut e = || -> f64 { StandardNormal.sample(&mut rng) };
                IndividualBlock { z_r0: z_sd * e(), z_delta: z_sd * e(), z_rho: z_sd * e(), t0: t0 + spread * e() }
            })
            .collect();
        match HierarchicalState::new(target, blocks, hyper) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Initialization("no attempts made".into())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainOutput {
    pub chain: usize,
    /// Iteration index of each kept draw.
    pub iterations: Vec<usize>,
    pub hyper: Vec<[f64; 7]>,
    /// Per kept draw, natural `(R0, δ, ρ, t0)` of every individual.
    pub individual: Vec<Vec<[f64; 4]>>,
    pub acceptance_individual: Vec<f64>,
    pub acceptance_shared: f64,
    pub pilot_acceptance_individual: f64,
    pub pilot_acceptance_shared: f64,
    pub final_state: HierarchicalState,
    pub proposals: ProposalSpec,
    pub seconds: f64,
}

// Step sizes for the first pilot round.
const PILOT_INDIVIDUAL_SD: [f64; 4] = [0.2, 0.2, 0.2, 0.2];

fn rescale(b: &mut BlockProposal, acceptance: f64) {
    let f = if acceptance < 0.1 {
        0.5
    } else if acceptance < 0.2 {
        0.75
    } else if acceptance > 0.6 {
        2.0
    } else if acceptance > 0.45 {
        1.3
    } else {
        1.0
    };
    if f != 1.0 {
        let _ = b.set_scale(b.scale * f);
    }
}

pub fn run_chain(target: &Target, cfg: &SamplerConfig, init: &InitialValues, chain: usize) -> Result<ChainOutput> {
    let started = Instant::now();
    let c = chain as u64;
    let mut state = initialize_chain(target, init, cfg.init_jitter, cfg.seed, c)?;
    let n = target.n();
    let shared_sd: [f64; 7] = std::array::from_fn(|j| 0.02 * state.hyper.as_array()[j]);
    let mut proposals = ProposalSpec::initial(n, PILOT_INDIVIDUAL_SD, shared_sd);
    proposals.interweave = cfg.interweave;
    let (mut pilot_acc_ind, mut pilot_acc_sh) = (0.0, 0.0);

    for round in 0..cfg.pilot_rounds {
        let mut pilot = PilotDraws { individual: vec![Vec::new(); n], shared: Vec::new() };
        let mut acc_ind = vec![0usize; n];
        let mut acc_sh = 0usize;
        for k in 0..cfg.pilot_iterations {
            let st = mwg_step(&mut state, &proposals, target, cfg.seed ^ 0x9e37_79b9, c * 1000 + round as u64);
            if k >= cfg.pilot_burn_in {
                for (i, a) in st.individual.iter().enumerate() {
                    acc_ind[i] += *a as usize;
                    pilot.individual[i].push(state.blocks[i].as_array().to_vec());
                }
                acc_sh += st.shared as usize;
                pilot.shared.push(state.hyper.as_array().to_vec());
            }
        }
        let kept = (cfg.pilot_iterations - cfg.pilot_burn_in) as f64;
        let prev = proposals.clone();
        proposals = tune_proposals(&pilot)?;
        proposals.interweave = cfg.interweave;
        // Carry over the acceptance-driven scale correction.
        for i in 0..n {
            let a = acc_ind[i] as f64 / kept;
            let _ = proposals.individual[i].set_scale(prev.individual[i].scale);
            rescale(&mut proposals.individual[i], a);
        }
        let _ = proposals.shared.set_scale(prev.shared.scale);
        rescale(&mut proposals.shared, acc_sh as f64 / kept);
        pilot_acc_ind = acc_ind.iter().sum::<usize>() as f64 / (kept * n as f64);
        pilot_acc_sh = acc_sh as f64 / kept;
        log::info!("chain {chain} pilot round {round}: acceptance individual {pilot_acc_ind:.3}, shared {pilot_acc_sh:.3}");
    }

    state.iteration = 0;
    let mut out = ChainOutput {
        chain,
        iterations: Vec::new(),
        hyper: Vec::new(),
        individual: Vec::new(),
        acceptance_individual: vec![0.0; n],
        acceptance_shared: 0.0,
        pilot_acceptance_individual: pilot_acc_ind,
        pilot_acceptance_shared: pilot_acc_sh,
        final_state: state.clone(),
        proposals: proposals.clone(),
        seconds: 0.0,
    };
    let mut acc_ind = vec![0usize; n];
    let mut acc_sh = 0usize;
    for k in 0..cfg.iterations {
        let st = mwg_step(&mut state, &proposals, target, cfg.seed, c);
        if k >= cfg.burn_in {
            for (i, a) in st.individual.iter().enumerate() {
                acc_ind[i] += *a as usize;
            }
            acc_sh += st.shared as usize;
            if (k - cfg.burn_in) % cfg.thin == 0 {
                out.iterations.push(k);
                out.hyper.push(state.hyper.as_array());
                out.individual.push(state.natural());
            }
        }
    }
    let kept = (cfg.iterations - cfg.burn_in) as f64;
    out.acceptance_individual = acc_ind.iter().map(|a| *a as f64 / kept).collect();
    out.acceptance_shared = acc_sh as f64 / kept;
    out.final_state = state;
    out.seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub shared: Vec<(String, ParamSummary)>,
    pub acceptance_individual: Vec<f64>,
    pub acceptance_shared: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub converged: bool,
    pub seconds: f64,
    pub config: SamplerConfig,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub chains: Vec<ChainOutput>,
    pub summary: PosteriorSummary,
}

pub const RHAT_THRESHOLD: f64 = 1.01;
pub const ESS_THRESHOLD: f64 = 400.0;

/// Runs the chains, in parallel where the pool allows, and summarizes the
/// shared parameters.
pub fn run_chains(target: &Target, cfg: &SamplerConfig, init: &InitialValues) -> Result<FitResult> {
    cfg.validate()?;
    let started = Instant::now();
    let chains: Vec<ChainOutput> =
        (0..cfg.chains).into_par_iter().map(|c| run_chain(target, cfg, init, c)).collect::<Result<_>>()?;
    let summary = summarize_chains(&chains, cfg, started.elapsed().as_secs_f64());
    Ok(FitResult { chains, summary })
}

pub fn shared_traces(chains: &[ChainOutput], j: usize) -> Vec<Vec<f64>> {
    chains.iter().map(|c| c.hyper.iter().map(|h| h[j]).collect()).collect()
}

pub fn summarize_chains(chains: &[ChainOutput], cfg: &SamplerConfig, seconds: f64) -> PosteriorSummary {
    let shared: Vec<(String, ParamSummary)> =
        (0..SHARED_DIM).map(|j| (Hyperparams::NAMES[j].to_string(), summarize(&shared_traces(chains, j)))).collect();
    let max_rhat = shared.iter().map(|(_, s)| s.rhat).fold(f64::NEG_INFINITY, f64::max);
    let min_ess = shared.iter().map(|(_, s)| s.ess_bulk).fold(f64::INFINITY, f64::min);
    PosteriorSummary {
        acceptance_individual: chains.iter().map(|c| c.acceptance_individual.iter().sum::<f64>() / c.acceptance_individual.len().max(1) as f64).collect(),
        acceptance_shared: chains.iter().map(|c| c.acceptance_shared).collect(),
        converged: chains.len() >= 2 && max_rhat <= RHAT_THRESHOLD && min_ess >= ESS_THRESHOLD,
        max_rhat,
        min_ess,
        shared,
        seconds,
        config: *cfg,
    }
}

/// One row per kept draw: chain, iteration, the shared parameters, then
/// `R0_<id>, delta_<id>, rho_<id>, t0_<id>` for every individual.
pub fn write_draws_csv<W: Write>(chains: &[ChainOutput], ids: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["chain".into(), "iteration".into()];
    header.extend(Hyperparams::NAMES.iter().map(|s| s.to_string()));
    for id in ids {
        for p in ["R0", "delta", "rho", "t0"] {
            header.push(format!("{p}_{id}"));
        }
    }
    w.write_record(&header)?;
    for c in chains {
        for (k, it) in c.iterations.iter().enumerate() {
            let mut row: Vec<String> = vec![c.chain.to_string(), it.to_string()];
            row.extend(c.hyper[k].iter().map(|v| v.to_string()));
            for ind in &c.individual[k] {
                row.extend(ind.iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveRow {
    pub t: f64,
    pub q025: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub q975: f64,
}

/// Posterior predictive bands of observed log10 VL for individual `i` on
/// `grid`. Each of up to `n_draws` posterior draws contributes one
/// replicate: the shift is drawn from the Gaussian approximation of
/// `p(τ | y, θ)` at its mode (or from the survival-conditioned law when
/// the series has no detections), then Gaussian noise is added and the
/// result is censored at `η`.
pub fn posterior_predictive(
    target: &Target,
    chains: &[ChainOutput],
    i: usize,
    grid: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<PredictiveRow>> {
    use crate::likelihood::{find_tau0, h_second_derivative, FD_STEP};
    let draws: Vec<([f64; 4], f64)> =
        chains.iter().flat_map(|c| c.individual.iter().zip(&c.hyper).map(|(ind, h)| (ind[i], h[6]))).collect();
    if draws.is_empty() {
        return Err(Error::Config("no posterior draws".into()));
    }
    let stride = (draws.len() / n_draws.max(1)).max(1);
    let s = &target.series[i];
    let t_max = grid.iter().cloned().fold(s.t_last().unwrap_or(f64::NEG_INFINITY), f64::max);
    let mut reps: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for (k, (x, kappa)) in draws.iter().step_by(stride).enumerate() {
        let mut rng = stream(seed, &[i as u64, k as u64]);
        let p = ModelParams::from_free(x[0], x[1], x[2], x[3])?;
        let m = IndividualModel::with_source(&p, target.source, *kappa, Some(t_max))?;
        let tau = if s.n_detected() > 0 {
            let (t0, _) = find_tau0(s, &m)?;
            let c = h_second_derivative(s, &m, t0, FD_STEP);
            let sd = if c < 0.0 { (-1.0 / c).sqrt() } else { 0.0 };
            let e: f64 = StandardNormal.sample(&mut rng);
            t0 + sd * e
        } else {
            m.law.sample_conditional(&mut rng)
        };
        for (j, &t) in grid.iter().enumerate() {
            let sft = t + tau - p.t0;
            let z = if t <= p.t0 || sft <= 0.0 || sft > m.traj.horizon() {
                f64::NEG_INFINITY
            } else {
                m.traj.log10_v_since_infection(sft)
            };
            let e: f64 = StandardNormal.sample(&mut rng);
            reps[j].push((z + kappa * e).max(s.eta));
        }
    }
    Ok(grid
        .iter()
        .zip(reps)
        .map(|(&t, mut r)| {
            r.sort_by(f64::total_cmp);
            let q = |p: f64| crate::diagnostics::quantile_sorted(&r, p);
            PredictiveRow { t, q025: q(0.025), q10: q(0.1), q50: q(0.5), q90: q(0.9), q975: q(0.975) }
        })
        .collect())
}

pub fn write_predictive_csv<W: Write>(rows: &[(String, Vec<PredictiveRow>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "t", "q025", "q10", "q50", "q90", "q975"])?;
    for (id, pred) in rows {
        for r in pred {
            w.write_record([id.clone(), r.t.to_string(), r.q025.to_string(), r.q10.to_string(), r.q50.to_string(), r.q90.to_string(), r.q975.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
