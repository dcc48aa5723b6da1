//! Mean-field TCL dynamics solved with an embedded Dormand–Prince 5(4) method.
//!
//! The solution keeps the per-step continuous extension so that `V_d(t)` can be
//! evaluated anywhere in the solved window without re-integrating. Time inside
//! the dense solution is measured from infection; a [`Trajectory`] attaches an
//! infection time `t0`, which makes re-anchoring a solution at a different `t0`
//! free (the dynamics do not depend on it).

use std::io::Write;
use std::sync::Arc;

use crate::error::{domain, Error, Result};
use crate::model::ModelParams;

pub const DEFAULT_RTOL: f64 = 1e-8;
pub const DEFAULT_ATOL: f64 = 1e-10;
/// Default solve window, days post-infection.
pub const DEFAULT_HORIZON: f64 = 50.0;
/// Viral loads at or below this are reported as `-inf` on the log10 scale.
pub const V_FLOOR: f64 = 1e-30;

const MAX_STEPS: usize = 200_000;

type Y = [f64; 4];

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL }
    }
}

// Dormand–Prince tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension (Hairer, Nørsett & Wanner).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy)]
struct Rates {
    beta: f64,
    k: f64,
    delta: f64,
    rho: f64,
    c: f64,
}

impl Rates {
    #[inline]
    fn rhs(&self, y: &Y) -> Y {
        let inf = self.beta * y[0] * y[3];
        [-inf, inf - self.k * y[1], self.k * y[1] - self.delta * y[2], self.rho * y[2] - self.c * y[3]]
    }
}

#[derive(Debug, Clone)]
struct DenseStep {
    s: f64,
    h: f64,
    coef: [Y; 5],
}

#[derive(Debug)]
struct DenseSolution {
    steps: Vec<DenseStep>,
    starts: Vec<f64>,
    horizon: f64,
    final_state: Y,
}

#[inline]
fn axpy(y: &Y, terms: &[(f64, &Y)], h: f64) -> Y {
    let mut out = *y;
    for (a, k) in terms {
        for j in 0..4 {
            out[j] += h * a * k[j];
        }
    }
    out
}

fn integrate(rates: &Rates, y0: Y, horizon: f64, tol: Tolerances) -> Result<DenseSolution> {
    let err_norm = |e: &Y, ya: &Y, yb: &Y| -> f64 {
        let mut acc = 0.0;
        for j in 0..4 {
            let sc = tol.atol + tol.rtol * ya[j].abs().max(yb[j].abs());
            acc += (e[j] / sc).powi(2);
        }
        (acc / 4.0).sqrt()
    };

    let mut s = 0.0;
    let mut y = y0;
    let mut k1 = rates.rhs(&y);

    // Initial step selection (Hairer's heuristic).
    let mut h = {
        let d0 = err_norm(&y, &y, &y);
        let d1 = err_norm(&k1, &y, &y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1 = axpy(&y, &[(1.0, &k1)], h0);
        let f1 = rates.rhs(&y1);
        let diff = [f1[0] - k1[0], f1[1] - k1[1], f1[2] - k1[2], f1[3] - k1[3]];
        let d2 = err_norm(&diff, &y, &y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1).min(horizon)
    };

    let mut steps = Vec::with_capacity(256);
    let mut rejected_last = false;
    let mut n = 0usize;
    while s < horizon {
        n += 1;
        if n > MAX_STEPS {
            return Err(Error::Integration { last_good_t: s, reason: "step limit exceeded".into() });
        }
        if s + h > horizon {
            h = horizon - s;
        }
        if h < 1e-14 * s.abs().max(1.0) {
            return Err(Error::Integration { last_good_t: s, reason: "step size underflow".into() });
        }
        let k2 = rates.rhs(&axpy(&y, &[(A21, &k1)], h));
        let k3 = rates.rhs(&axpy(&y, &[(A31, &k1), (A32, &k2)], h));
        let k4 = rates.rhs(&axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], h));
        let k5 = rates.rhs(&axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], h));
        let y6 = axpy(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], h);
        let k6 = rates.rhs(&y6);
        let y_new = axpy(&y, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)], h);
        let k7 = rates.rhs(&y_new);
        let mut e = [0.0; 4];
        for j in 0..4 {
            e[j] = h * (E1 * k1[j] + E3 * k3[j] + E4 * k4[j] + E5 * k5[j] + E6 * k6[j] + E7 * k7[j]);
        }
        let err = err_norm(&e, &y, &y_new);
        if !err.is_finite() {
            return Err(Error::Integration { last_good_t: s, reason: "non-finite error estimate".into() });
        }
        if err <= 1.0 {
            let mut coef = [[0.0; 4]; 5];
            for j in 0..4 {
                let ydiff = y_new[j] - y[j];
                let bspl = h * k1[j] - ydiff;
                coef[0][j] = y[j];
                coef[1][j] = ydiff;
                coef[2][j] = bspl;
                coef[3][j] = ydiff - h * k7[j] - bspl;
                coef[4][j] = h * (D1 * k1[j] + D3 * k3[j] + D4 * k4[j] + D5 * k5[j] + D6 * k6[j] + D7 * k7[j]);
            }
            steps.push(DenseStep { s, h, coef });
            s = if s + h >= horizon { horizon } else { s + h };
            y = y_new;
            k1 = k7;
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= if rejected_last { fac.min(1.0) } else { fac };
            rejected_last = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            rejected_last = true;
        }
    }
    let starts = steps.iter().map(|st| st.s).collect();
    Ok(DenseSolution { steps, starts, horizon, final_state: y })
}

impl DenseSolution {
    fn eval(&self, s: f64) -> Y {
        if s <= 0.0 {
            return self.steps[0].coef[0];
        }
        if s >= self.horizon {
            return self.final_state;
        }
        let idx = self.starts.partition_point(|&x| x <= s).saturating_sub(1);
        let st = &self.steps[idx];
        let th = (s - st.s) / st.h;
        let th1 = 1.0 - th;
        let c = &st.coef;
        let mut out = [0.0; 4];
        for j in 0..4 {
            out[j] = c[0][j] + th * (c[1][j] + th1 * (c[2][j] + th * (c[3][j] + th1 * c[4][j])));
        }
        out
    }

    fn eval_component(&self, s: f64, j: usize) -> f64 {
        if s <= 0.0 {
            return self.steps[0].coef[0][j];
        }
        if s >= self.horizon {
            return self.final_state[j];
        }
        let idx = self.starts.partition_point(|&x| x <= s).saturating_sub(1);
        let st = &self.steps[idx];
        let th = (s - st.s) / st.h;
        let th1 = 1.0 - th;
        let c = &st.coef;
        c[0][j] + th * (c[1][j] + th1 * (c[2][j] + th * (c[3][j] + th1 * c[4][j])))
    }
}

/// Dense deterministic solution `(S_d, E_d, I_d, V_d)` on `[t0, t0 + horizon]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    params: ModelParams,
    tol: Tolerances,
    sol: Arc<DenseSolution>,
}

/// Location and height of the log10 viral-load peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakStats {
    /// Absolute time of the peak (same clock as `t0`).
    pub t_peak: f64,
    /// `t_peak - t0`.
    pub days_post_infection: f64,
    pub log10_v_peak: f64,
}

/// Solves from `(S0-1, 1, 0, 0)` at `t0` up to absolute time `t_end`.
pub fn solve(p: &ModelParams, t_end: f64) -> Result<Trajectory> {
    if !(t_end > p.t0) {
        return Err(domain(format!("t_end ({t_end}) must exceed t0 ({})", p.t0)));
    }
    Trajectory::solve_horizon(p, t_end - p.t0, Tolerances::default())
}

impl Trajectory {
    /// Solves for `horizon` days post-infection.
    pub fn solve_horizon(p: &ModelParams, horizon: f64, tol: Tolerances) -> Result<Self> {
        p.validate()?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(domain(format!("horizon must be positive, got {horizon}")));
        }
        let rates = Rates { beta: p.beta(), k: p.k, delta: p.delta, rho: p.rho, c: p.c };
        let sol = integrate(&rates, [p.s0 - 1.0, 1.0, 0.0, 0.0], horizon, tol)?;
        Ok(Self { params: *p, tol, sol: Arc::new(sol) })
    }

    /// Same dynamics anchored at a different infection time.
    pub fn with_t0(&self, t0: f64) -> Self {
        Self { params: ModelParams { t0, ..self.params }, tol: self.tol, sol: Arc::clone(&self.sol) }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn t0(&self) -> f64 {
        self.params.t0
    }

    pub fn horizon(&self) -> f64 {
        self.sol.horizon
    }

    pub fn t_end(&self) -> f64 {
        self.params.t0 + self.sol.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.sol.steps.len()
    }

    /// State at absolute time `t`; errors outside `[t0, t_end]`.
    pub fn state(&self, t: f64) -> Result<[f64; 4]> {
        let s = t - self.params.t0;
        if !(s >= 0.0 && s <= self.sol.horizon) {
            return Err(domain(format!("t = {t} outside trajectory window [{}, {}]", self.t0(), self.t_end())));
        }
        Ok(self.sol.eval(s))
    }

    /// `V_d` at `s` days post-infection, clamped to the solved window.
    #[inline]
    pub fn v_since_infection(&self, s: f64) -> f64 {
        self.sol.eval_component(s, 3)
    }

    /// log10 of `V_d` at `s` days post-infection, clamped to the solved
    /// window; `-inf` before infection or below the floor.
    #[inline]
    pub fn log10_v_since_infection(&self, s: f64) -> f64 {
        let v = self.v_since_infection(s);
        if s <= 0.0 || v <= V_FLOOR {
            f64::NEG_INFINITY
        } else {
            v.log10()
        }
    }

    pub fn log10_v(&self, t: f64) -> Result<f64> {
        let s = t - self.params.t0;
        if !(s >= 0.0 && s <= self.sol.horizon) {
            return Err(domain(format!("t = {t} outside trajectory window [{}, {}]", self.t0(), self.t_end())));
        }
        Ok(self.log10_v_since_infection(s))
    }

    /// First time (days post-infection) at which `V_d` reaches `level`.
    pub fn first_crossing(&self, level: f64) -> Option<f64> {
        let horizon = self.sol.horizon;
        let dt = 0.01;
        let mut prev = 0.0;
        let mut s = dt;
        while s <= horizon + 1e-12 {
            let s_clamped = s.min(horizon);
            if self.v_since_infection(s_clamped) >= level {
                let (mut lo, mut hi) = (prev, s_clamped);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if self.v_since_infection(mid) >= level {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(hi);
            }
            prev = s_clamped;
            s += dt;
        }
        None
    }

    pub fn peak_stats(&self) -> Result<PeakStats> {
        if self.params.r0 <= 1.0 {
            return Err(Error::NoPeak);
        }
        let horizon = self.sol.horizon;
        let n = 2000;
        let grid = |i: usize| horizon * i as f64 / n as f64;
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 1..=n {
            let lv = self.log10_v_since_infection(grid(i));
            if lv > best.1 {
                best = (i, lv);
            }
        }
        if best.0 == 0 || best.0 == n || !best.1.is_finite() {
            return Err(Error::NoPeak);
        }
        let (mut a, mut b) = (grid(best.0 - 1), grid(best.0 + 1));
        let f = |s: f64| -self.log10_v_since_infection(s);
        let s_peak = crate::optimize::golden_section(f, &mut a, &mut b, 1e-10);
        Ok(PeakStats {
            t_peak: self.params.t0 + s_peak,
            days_post_infection: s_peak,
            log10_v_peak: self.log10_v_since_infection(s_peak),
        })
    }

    /// Writes `t,S,E,I,V,log10V` rows at the given absolute times.
    pub fn write_csv<W: Write>(&self, times: &[f64], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "S", "E", "I", "V", "log10V"])?;
        for &t in times {
            let y = self.state(t)?;
            let lv = self.log10_v(t)?;
            w.write_record(&[t, y[0], y[1], y[2], y[3], lv].map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_condition_and_sentinel() {
        let p = ModelParams::reference();
        let tr = solve(&p, 50.0).unwrap();
        let y = tr.state(0.0).unwrap();
        assert_eq!(y, [p.s0 - 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tr.log10_v(0.0).unwrap(), f64::NEG_INFINITY);
        assert!(tr.log10_v(-0.1).is_err());
        assert!(tr.log10_v(50.1).is_err());
        assert!(solve(&p, -1.0).is_err());
    }

    #[test]
    fn peak_is_consistent_with_log10_v() {
        let tr = solve(&ModelParams::reference(), 50.0).unwrap();
        let pk = tr.peak_stats().unwrap();
        assert!(pk.t_peak > 0.0 && pk.t_peak < 50.0);
        assert_eq!(tr.log10_v(pk.t_peak).unwrap(), pk.log10_v_peak);
        for dt in [-0.05, 0.05] {
            assert!(tr.log10_v(pk.t_peak + dt).unwrap() < pk.log10_v_peak);
        }
    }

    #[test]
    fn subcritical_has_no_peak() {
        let p = ModelParams { r0: 0.5, ..ModelParams::reference() };
        let tr = solve(&p, 50.0).unwrap();
        assert!(matches!(tr.peak_stats(), Err(Error::NoPeak)));
    }

    #[test]
    fn reanchoring_shifts_time() {
        let p = ModelParams::reference();
        let tr = solve(&p, 50.0).unwrap();
        let moved = tr.with_t0(-3.0);
        assert_eq!(moved.log10_v(2.0).unwrap(), tr.log10_v(5.0).unwrap());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let tr = solve(&ModelParams::reference(), 10.0).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&[0.0, 1.0, 2.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,S,E,I,V,log10V");
        assert_eq!(lines.len(), 4);
    }
}
