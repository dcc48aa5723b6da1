//! Per-individual likelihoods: the censored-normal path likelihood for a fixed
//! shift, its marginal over the time-shift law by adaptive quadrature, and the
//! Laplace approximation of that marginal.
//!
//! Everything is computed on the log scale. With `h(τ) = log[L(y | τ) f(τ)]`,
//!
//! ```text
//! L_exact   = (1 − q*) ∫ exp h(τ) dτ
//! L_laplace = √(2π) (1 − q*) exp h(τ₀) · sqrt(−1 / h''(τ₀))
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::{normal_logcdf, normal_logpdf, LN_SQRT_2PI};
use crate::error::{domain, Error, Result};
use crate::model::ModelParams;
use crate::ode::{Tolerances, Trajectory, DEFAULT_HORIZON};
use crate::optimize::golden_section;
use crate::quadrature::integrate_pieces;
use crate::timeshift::{LawSource, ShiftedTrajectory, TimeShiftLaw};

/// Tail mass left out of the quadrature interval on each side.
pub const QUAD_TAIL: f64 = 1e-8;
pub const QUAD_RTOL: f64 = 1e-10;
/// Tail mass left out of the mode search interval on each side.
pub const MODE_TAIL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;
const MAX_QUAD_INTERVALS: usize = 4000;
const MAX_HORIZON: f64 = 1000.0;
const MIN_HORIZON: f64 = 30.0;

/// One individual's log10 viral-load series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `true` where the value sits at the detection limit (true value `≤ η`).
    pub censored: Vec<bool>,
    pub eta: f64,
}

impl IndividualSeries {
    /// Builds a series, flagging values at or below `eta` as censored and
    /// clamping them to `eta`.
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>, eta: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(domain("times and values differ in length"));
        }
        let censored: Vec<bool> = values.iter().map(|&v| v <= eta).collect();
        let values = values.iter().map(|&v| if v <= eta { eta } else { v }).collect();
        let s = Self { id: id.into(), times, values, censored, eta };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(id: impl Into<String>, eta: f64) -> Self {
        Self { id: id.into(), times: vec![], values: vec![], censored: vec![], eta }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.values.len() != n || self.censored.len() != n {
            return Err(domain(format!("series {}: column lengths differ", self.id)));
        }
        if !self.eta.is_finite() {
            return Err(domain(format!("series {}: detection limit must be finite", self.id)));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(domain(format!("series {}: times not strictly increasing at {}", self.id, w[1])));
            }
        }
        for j in 0..n {
            if !self.times[j].is_finite() || !self.values[j].is_finite() {
                return Err(domain(format!("series {}: non-finite entry at index {j}", self.id)));
            }
            if self.censored[j] && self.values[j] != self.eta {
                return Err(domain(format!("series {}: censored value must equal eta", self.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_detected(&self) -> usize {
        self.censored.iter().filter(|c| !**c).count()
    }

    pub fn t_last(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

/// Log-likelihood of one observation given the model value `z`.
#[inline]
pub fn obs_loglik(y: f64, censored: bool, z: f64, kappa: f64) -> f64 {
    if censored {
        if z == f64::NEG_INFINITY {
            0.0
        } else {
            normal_logcdf(y, z, kappa)
        }
    } else if z == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        normal_logpdf(y, z, kappa)
    }
}

/// `log L(y | τ)` for the trajectory already shifted by `τ`.
pub fn path_loglik(series: &IndividualSeries, straj: &ShiftedTrajectory, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(domain(format!("kappa must be positive, got {kappa}")));
    }
    let mut total = 0.0;
    for j in 0..series.len() {
        let z = straj.eval(series.times[j])?;
        total += obs_loglik(series.values[j], series.censored[j], z, kappa);
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    Ok(total)
}

/// Trajectory, time-shift law and noise level for one individual.
#[derive(Debug, Clone)]
pub struct IndividualModel {
    pub traj: Trajectory,
    pub law: TimeShiftLaw,
    pub kappa: f64,
}

impl IndividualModel {
    /// Solves the ODE far enough to evaluate `t_last + τ` for any `τ` in the
    /// integration range.
    pub fn new(p: &ModelParams, law: TimeShiftLaw, kappa: f64, t_last: Option<f64>) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(domain(format!("kappa must be positive, got {kappa}")));
        }
        law.validate()?;
        let tau_hi = law.quantile(1.0 - QUAD_TAIL * 1e-2)?;
        let need = t_last.map_or(0.0, |t| t - p.t0 + tau_hi.max(0.0) + 1.0);
        let horizon = need.max(MIN_HORIZON);
        if horizon > MAX_HORIZON {
            return Err(domain(format!("required trajectory horizon {horizon:.1} days is implausibly long")));
        }
        let traj = Trajectory::solve_horizon(p, horizon, Tolerances::default())?;
        Ok(Self { traj, law, kappa })
    }

    pub fn with_source(p: &ModelParams, source: &dyn LawSource, kappa: f64, t_last: Option<f64>) -> Result<Self> {
        let law = source.law(p)?;
        Self::new(p, law, kappa, t_last)
    }

    pub fn log_path(&self, series: &IndividualSeries, tau: f64) -> f64 {
        let t0 = self.traj.t0();
        let horizon = self.traj.horizon();
        let mut total = 0.0;
        for j in 0..series.len() {
            let t = series.times[j];
            let s = t + tau - t0;
            let z = if t <= t0 || s <= 0.0 {
                f64::NEG_INFINITY
            } else if s > horizon {
                return f64::NAN;
            } else {
                self.traj.log10_v_since_infection(s)
            };
            total += obs_loglik(series.values[j], series.censored[j], z, self.kappa);
            if total == f64::NEG_INFINITY {
                return total;
            }
        }
        total
    }

    /// `h(τ) = log L(y | τ) + log f(τ)`.
    pub fn h(&self, series: &IndividualSeries, tau: f64) -> f64 {
        let lp = self.log_path(series, tau);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + self.law.log_pdf(tau)
    }

    fn log_survival(&self) -> f64 {
        (1.0 - self.law.q_star).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalEval {
    pub log_lik: f64,
    pub method: Method,
    pub tau0: Option<f64>,
}

fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Log of the exact marginal likelihood.
pub fn marginal_loglik_exact(series: &IndividualSeries, m: &IndividualModel) -> Result<f64> {
    marginal_loglik_exact_tol(series, m, QUAD_RTOL)
}

pub fn marginal_loglik_exact_tol(series: &IndividualSeries, m: &IndividualModel, rtol: f64) -> Result<f64> {
    if series.is_empty() {
        // Path likelihood is identically one and f integrates to one.
        return Ok(m.log_survival());
    }
    let lo = m.law.quantile(QUAD_TAIL)?;
    let hi = m.law.quantile(1.0 - QUAD_TAIL)?;
    let n = 129;
    let step = (hi - lo) / (n - 1) as f64;
    let (mut tau_best, mut h_max) = (lo, f64::NEG_INFINITY);
    for tau in grid(lo, hi, n) {
        let h = m.h(series, tau);
        if h.is_nan() {
            return Err(Error::Quadrature(format!("integrand undefined at tau = {tau}")));
        }
        if h > h_max {
            (tau_best, h_max) = (tau, h);
        }
    }
    if h_max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut breaks: Vec<f64> = grid(lo, hi, 17).collect();
    breaks.push((tau_best - 2.0 * step).max(lo));
    breaks.push((tau_best + 2.0 * step).min(hi));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let r = integrate_pieces(|tau| (m.h(series, tau) - h_max).exp(), &breaks, rtol, 0.0, MAX_QUAD_INTERVALS)?;
    if r.value <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(m.log_survival() + h_max + r.value.ln())
}

/// `h''(τ)` by central differences with one Richardson step.
pub fn h_second_derivative(series: &IndividualSeries, m: &IndividualModel, tau: f64, step: f64) -> f64 {
    let h0 = m.h(series, tau);
    let d = |e: f64| (m.h(series, tau + e) - 2.0 * h0 + m.h(series, tau - e)) / (e * e);
    (4.0 * d(0.5 * step) - d(step)) / 3.0
}

// h' and h'' from one shared four-point stencil around `tau`, given h(tau).
fn h_derivatives(series: &IndividualSeries, m: &IndividualModel, tau: f64, h0: f64, step: f64) -> (f64, f64) {
    let (p1, m1) = (m.h(series, tau + step), m.h(series, tau - step));
    let (p2, m2) = (m.h(series, tau + 0.5 * step), m.h(series, tau - 0.5 * step));
    let g1 = (p1 - m1) / (2.0 * step);
    let g2 = (p2 - m2) / step;
    let c1 = (p1 - 2.0 * h0 + m1) / (step * step);
    let c2 = (p2 - 2.0 * h0 + m2) / (0.25 * step * step);
    ((4.0 * g2 - g1) / 3.0, (4.0 * c2 - c1) / 3.0)
}

/// Maximiser of `h` over the central `1 − 2·MODE_TAIL` of the law.
pub fn find_tau0(series: &IndividualSeries, m: &IndividualModel) -> Result<(f64, f64)> {
    find_mode(series, m).map(|(t, h, _)| (t, h))
}

// Coarse scan, golden section to a loose bracket, then Newton on
// Richardson-extrapolated differences. Returns (τ₀, h(τ₀), h''(τ₀)).
fn find_mode(series: &IndividualSeries, m: &IndividualModel) -> Result<(f64, f64, f64)> {
    let lo = m.law.quantile(MODE_TAIL)?;
    let hi = m.law.quantile(1.0 - MODE_TAIL)?;
    let n = 25;
    let taus: Vec<f64> = grid(lo, hi, n).collect();
    let hs: Vec<f64> = taus.iter().map(|&t| m.h(series, t)).collect();
    if hs.iter().any(|h| h.is_nan()) {
        return Err(domain("log-integrand undefined inside the search interval"));
    }
    let best = (0..n).max_by(|&i, &j| hs[i].total_cmp(&hs[j])).expect("nonempty grid");
    if hs[best] == f64::NEG_INFINITY {
        return Ok((taus[best], f64::NEG_INFINITY, f64::NAN));
    }
    let (mut a, mut b) = (taus[best.saturating_sub(1)], taus[(best + 1).min(n - 1)]);
    let mut tau = golden_section(|t| -m.h(series, t), &mut a, &mut b, 1e-4);
    let mut h_tau = m.h(series, tau);
    let (mut g, mut curv) = h_derivatives(series, m, tau, h_tau, FD_STEP);
    for _ in 0..6 {
        if !(curv < 0.0) {
            break;
        }
        let next = (tau - g / curv).clamp(lo, hi);
        if (next - tau).abs() < 1e-10 {
            break;
        }
        let h_next = m.h(series, next);
        if h_next < h_tau {
            break;
        }
        tau = next;
        h_tau = h_next;
        (g, curv) = h_derivatives(series, m, tau, h_tau, FD_STEP);
    }
    Ok((tau, h_tau, curv))
}

/// Log of the Laplace approximation. Errors with [`Error::Curvature`] when
/// `h` is not concave at its mode.
pub fn marginal_loglik_laplace(series: &IndividualSeries, m: &IndividualModel) -> Result<(f64, f64)> {
    let (tau0, h0, c) = find_mode(series, m)?;
    if h0 == f64::NEG_INFINITY {
        return Ok((f64::NEG_INFINITY, tau0));
    }
    if !(c < 0.0) {
        return Err(Error::Curvature { second_derivative: c });
    }
    Ok((LN_SQRT_2PI + m.log_survival() + h0 - 0.5 * (-c).ln(), tau0))
}

/// Laplace where it applies, otherwise exact quadrature: series without
/// detections and non-concave modes fall back.
pub fn marginal_loglik(series: &IndividualSeries, m: &IndividualModel) -> Result<MarginalEval> {
    if series.n_detected() > 0 {
        match marginal_loglik_laplace(series, m) {
            Ok((log_lik, tau0)) => return Ok(MarginalEval { log_lik, method: Method::Laplace, tau0: Some(tau0) }),
            Err(Error::Curvature { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let log_lik = marginal_loglik_exact(series, m)?;
    Ok(MarginalEval { log_lik, method: Method::Exact, tau0: None })
}

pub fn marginal_lik_exact(series: &IndividualSeries, p: &ModelParams, law: &TimeShiftLaw, kappa: f64) -> Result<f64> {
    let m = IndividualModel::new(p, *law, kappa, series.t_last())?;
    Ok(marginal_loglik_exact(series, &m)?.exp())
}

pub fn marginal_lik_laplace(series: &IndividualSeries, p: &ModelParams, law: &TimeShiftLaw, kappa: f64) -> Result<f64> {
    let m = IndividualModel::new(p, *law, kappa, series.t_last())?;
    Ok(marginal_loglik_laplace(series, &m)?.0.exp())
}

/// Path log-likelihood with the shift collapsed to `τ = 0` and no extinction
/// mass.
pub fn deterministic_loglik(series: &IndividualSeries, p: &ModelParams, kappa: f64) -> Result<f64> {
    let horizon = series.t_last().map_or(0.0, |t| t - p.t0 + 1.0).max(DEFAULT_HORIZON);
    let traj = Trajectory::solve_horizon(p, horizon, Tolerances::default())?;
    path_loglik(series, &ShiftedTrajectory::new(traj, 0.0), kappa)
}

/// Free coordinate varied along a likelihood profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreeParam {
    R0,
    Delta,
    Rho,
    T0,
}

impl FreeParam {
    pub const ALL: [FreeParam; 4] = [FreeParam::R0, FreeParam::Delta, FreeParam::Rho, FreeParam::T0];

    pub fn name(self) -> &'static str {
        match self {
            FreeParam::R0 => "R0",
            FreeParam::Delta => "delta",
            FreeParam::Rho => "rho",
            FreeParam::T0 => "t0",
        }
    }

    pub fn set(self, p: &ModelParams, value: f64) -> ModelParams {
        let mut q = *p;
        match self {
            FreeParam::R0 => q.r0 = value,
            FreeParam::Delta => q.delta = value,
            FreeParam::Rho => q.rho = value,
            FreeParam::T0 => q.t0 = value,
        }
        q
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub parameter: String,
    pub value: f64,
    pub exact: f64,
    pub laplace: f64,
    pub abs_err: f64,
}

/// Exact and Laplace likelihoods (natural scale) along a 1-D profile.
pub fn profile(
    series: &IndividualSeries,
    base: &ModelParams,
    kappa: f64,
    source: &dyn LawSource,
    param: FreeParam,
    values: &[f64],
) -> Result<Vec<ProfileRow>> {
    values
        .iter()
        .map(|&v| {
            let p = param.set(base, v);
            let m = IndividualModel::with_source(&p, source, kappa, series.t_last())?;
            let exact = marginal_loglik_exact(series, &m)?.exp();
            let laplace = marginal_loglik(series, &m)?.log_lik.exp();
            Ok(ProfileRow { parameter: param.name().into(), value: v, exact, laplace, abs_err: (exact - laplace).abs() })
        })
        .collect()
}

pub fn write_profile_csv<W: Write>(rows: &[ProfileRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["parameter", "value", "exact", "laplace", "abs_err"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeshift::GgParams;

    fn law() -> TimeShiftLaw {
        TimeShiftLaw::for_params(&ModelParams::reference(), GgParams::new(0.3, 0.65, 0.76).unwrap()).unwrap()
    }

    fn model(t0: f64) -> IndividualModel {
        let p = ModelParams { t0, ..ModelParams::reference() };
        IndividualModel::new(&p, law(), 0.5, Some(21.0)).unwrap()
    }

    #[test]
    fn single_detected_at_mean() {
        let m = model(-5.0);
        let z = m.traj.log10_v(2.0).unwrap();
        let s = IndividualSeries::new("a", vec![2.0], vec![z], 2.658).unwrap();
        let st = ShiftedTrajectory::new(m.traj.clone(), 0.0);
        let ll = path_loglik(&s, &st, 1.0).unwrap();
        assert!((ll + LN_SQRT_2PI).abs() < 1e-14);
    }

    #[test]
    fn censored_at_eta_is_half() {
        assert!((obs_loglik(2.658, true, 2.658, 0.3) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(obs_loglik(2.658, true, f64::NEG_INFINITY, 0.3), 0.0);
        assert_eq!(obs_loglik(4.0, false, f64::NEG_INFINITY, 0.3), f64::NEG_INFINITY);
    }

    #[test]
    fn empty_series() {
        let m = model(0.0);
        let s = IndividualSeries::empty("e", 2.658);
        let st = ShiftedTrajectory::new(m.traj.clone(), 0.3);
        assert_eq!(path_loglik(&s, &st, 0.5).unwrap(), 0.0);
        assert_eq!(marginal_loglik_exact(&s, &m).unwrap(), (1.0 - m.law.q_star).ln());
        assert_eq!(deterministic_loglik(&s, &ModelParams::reference(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn censoring_is_integrated_density() {
        // The censored term equals ∫_{-∞}^{η} of the detected density.
        let (eta, z, kappa) = (2.658, 3.1, 0.5);
        let r = crate::quadrature::integrate(
            |y: f64| obs_loglik(y, false, z, kappa).exp(),
            z - 40.0 * kappa,
            eta,
            1e-13,
            0.0,
            200,
        )
        .unwrap();
        assert!((r.value - obs_loglik(eta, true, z, kappa).exp()).abs() < 1e-10);
    }

    #[test]
    fn invalid_series_rejected() {
        assert!(IndividualSeries::new("x", vec![1.0, 1.0], vec![3.0, 4.0], 2.658).is_err());
        assert!(IndividualSeries::new("x", vec![1.0], vec![3.0, 4.0], 2.658).is_err());
        let s = IndividualSeries::new("x", vec![0.0, 1.0], vec![1.0, 4.0], 2.658).unwrap();
        assert_eq!(s.values[0], 2.658);
        assert_eq!(s.n_detected(), 1);
    }
}
