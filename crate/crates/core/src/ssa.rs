//! Exact stochastic simulation (Gillespie direct method) of the TCL CTMC and of
//! its linear branching approximation. Used for validation only.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::branching::bp_summary;
use crate::error::{domain, Error, Result};
use crate::model::{rates, ModelParams, Reaction, State};
use crate::ode::{Tolerances, Trajectory};
use crate::rng::stream;

/// Branching paths are abandoned beyond this many live individuals.
pub const BP_POPULATION_GUARD: u64 = 10_000_000;
pub const DEFAULT_CROSSING_LEVEL: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Record {
    Nothing,
    /// Snapshot of the state at multiples of `dt`.
    Grid(f64),
    /// Every event.
    Events,
}

#[derive(Debug, Clone, Copy)]
pub struct SsaOptions {
    pub t_max: f64,
    pub record: Record,
    /// Stop as soon as `V` first reaches this level.
    pub stop_at_level: Option<f64>,
}

impl SsaOptions {
    pub fn until(t_max: f64) -> Self {
        Self { t_max, record: Record::Nothing, stop_at_level: None }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SsaRun {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// `E + I + V` reached zero.
    pub extinct: bool,
    /// Branching path exceeded [`BP_POPULATION_GUARD`].
    pub exploded: bool,
    /// First time `V` reached the crossing level, if requested and reached.
    pub crossing_time: Option<f64>,
    pub t_stop: f64,
    pub final_state: State,
    pub n_events: u64,
}

#[derive(Clone, Copy)]
enum Dynamics {
    Full,
    /// Linear rates with `S` frozen at `S0`.
    Branching,
}

fn simulate<R: Rng + ?Sized>(p: &ModelParams, dynamics: Dynamics, opts: &SsaOptions, rng: &mut R) -> SsaRun {
    let mut x = State::initial(p);
    let beta_star = p.beta_star();
    let mut t = 0.0;
    let mut run = SsaRun::default();
    let mut next_grid = 0.0;
    let record = |run: &mut SsaRun, t: f64, x: State| {
        run.times.push(t);
        run.states.push(x);
    };
    if opts.record != Record::Nothing {
        record(&mut run, 0.0, x);
        if let Record::Grid(dt) = opts.record {
            next_grid = dt;
        }
    }
    loop {
        if x.infection_extinct() {
            run.extinct = true;
            break;
        }
        if let Some(level) = opts.stop_at_level {
            if x.v as f64 >= level {
                run.crossing_time = Some(t);
                break;
            }
        }
        let r = match dynamics {
            Dynamics::Full => rates(&x, p),
            Dynamics::Branching => {
                if x.e + x.i + x.v > BP_POPULATION_GUARD {
                    run.exploded = true;
                    break;
                }
                let (e, i, v) = (x.e as f64, x.i as f64, x.v as f64);
                [beta_star * v, p.k * e, p.delta * i, p.rho * i, p.c * v]
            }
        };
        let total: f64 = r.iter().sum();
        let e: f64 = Exp1.sample(rng);
        let dt = e / total;
        let t_next = t + dt;
        if let Record::Grid(g) = opts.record {
            while next_grid <= t_next.min(opts.t_max) {
                record(&mut run, next_grid, x);
                next_grid += g;
            }
        }
        if t_next > opts.t_max {
            t = opts.t_max;
            break;
        }
        t = t_next;
        let mut u = rng.random::<f64>() * total;
        let mut which = Reaction::VirionClearance;
        for (j, &rj) in r.iter().enumerate() {
            if u < rj {
                which = Reaction::ALL[j];
                break;
            }
            u -= rj;
        }
        // Guard against landing on a zero-rate channel through rounding.
        if r[which.index()] == 0.0 {
            which = Reaction::ALL[r.iter().rposition(|&v| v > 0.0).expect("positive total rate")];
        }
        x = match (dynamics, which) {
            (Dynamics::Branching, Reaction::Infection) => State { e: x.e + 1, ..x },
            _ => x.apply(which).expect("chosen reaction has positive rate"),
        };
        run.n_events += 1;
        if opts.record == Record::Events {
            record(&mut run, t, x);
        }
    }
    run.t_stop = t;
    run.final_state = x;
    run
}

/// Gillespie path of the full CTMC from `(S0-1, 1, 0, 0)`. Times are measured
/// from infection.
pub fn ssa_simulate<R: Rng + ?Sized>(p: &ModelParams, opts: &SsaOptions, rng: &mut R) -> SsaRun {
    simulate(p, Dynamics::Full, opts, rng)
}

/// Gillespie path of the linear branching approximation from `(E,I,V) = (1,0,0)`.
/// The `s` field of recorded states stays at its initial value.
pub fn bp_simulate<R: Rng + ?Sized>(p: &ModelParams, opts: &SsaOptions, rng: &mut R) -> SsaRun {
    simulate(p, Dynamics::Branching, opts, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpOutcome {
    /// `(E, I, V)` at the horizon.
    Alive([u64; 3]),
    Extinct,
    Exploded,
}

#[derive(Clone, Copy)]
enum Kind {
    E,
    I,
    V,
}

/// `(E, I, V)` of the branching process at time `t_end`, from one eclipse cell.
///
/// Individuals evolve independently, so the family tree is generated depth
/// first with one lifetime draw per individual and Poisson offspring streams;
/// this has the same law as [`bp_simulate`] at `t_end` without a global event
/// queue.
pub fn bp_terminal_state<R: Rng + ?Sized>(p: &ModelParams, t_end: f64, rng: &mut R) -> BpOutcome {
    let beta_star = p.beta_star();
    let mut stack: Vec<(Kind, f64)> = vec![(Kind::E, 0.0)];
    let mut alive = [0u64; 3];
    let mut created: u64 = 1;
    let exp = |rate: f64, rng: &mut R| -> f64 {
        let e: f64 = Exp1.sample(rng);
        e / rate
    };
    while let Some((kind, born)) = stack.pop() {
        match kind {
            Kind::E => {
                let t = born + exp(p.k, rng);
                if t >= t_end {
                    alive[0] += 1;
                } else {
                    stack.push((Kind::I, t));
                }
            }
            Kind::I | Kind::V => {
                let (death_rate, birth_rate, child, slot) = match kind {
                    Kind::I => (p.delta, p.rho, Kind::V, 1),
                    _ => (p.c, beta_star, Kind::E, 2),
                };
                let death = born + exp(death_rate, rng);
                let end = death.min(t_end);
                if death >= t_end {
                    alive[slot] += 1;
                }
                if birth_rate > 0.0 {
                    let mut t = born + exp(birth_rate, rng);
                    while t < end {
                        stack.push((child, t));
                        created += 1;
                        t += exp(birth_rate, rng);
                    }
                }
            }
        }
        if created > BP_POPULATION_GUARD {
            return BpOutcome::Exploded;
        }
    }
    if alive == [0, 0, 0] {
        BpOutcome::Extinct
    } else {
        BpOutcome::Alive(alive)
    }
}

/// Crossing-time shifts from independent full-CTMC runs.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftSample {
    /// `τ_i = t_det − t_i` over runs that reached the level.
    pub taus: Vec<f64>,
    pub n_runs: usize,
    pub n_extinct: usize,
    pub level: f64,
    /// Deterministic crossing time, days post-infection.
    pub t_det: f64,
}

impl ShiftSample {
    pub fn extinction_fraction(&self) -> f64 {
        self.n_extinct as f64 / self.n_runs as f64
    }
}

/// Runs full Gillespie paths until `V` reaches `level` or the infection dies
/// out. Run `i` uses the stream `(seed, i)`.
pub fn empirical_timeshifts(p: &ModelParams, level: f64, n_runs: usize, seed: u64) -> Result<ShiftSample> {
    empirical_timeshifts_from(p, level, 0, n_runs, seed)
}

fn empirical_timeshifts_from(
    p: &ModelParams,
    level: f64,
    first: usize,
    n_runs: usize,
    seed: u64,
) -> Result<ShiftSample> {
    let bp = bp_summary(p)?;
    let det = Trajectory::solve_horizon(p, crate::ode::DEFAULT_HORIZON, Tolerances::default())?;
    let t_det = det
        .first_crossing(level)
        .ok_or_else(|| Error::Config(format!("deterministic solution never reaches V = {level}")))?;
    // Generous cap: a surviving path crosses within a few multiples of t_det.
    let opts = SsaOptions { t_max: t_det + 40.0 / bp.lambda, record: Record::Nothing, stop_at_level: Some(level) };
    let runs: Vec<(bool, Option<f64>)> = (first..first + n_runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            let r = ssa_simulate(p, &opts, &mut rng);
            (r.extinct, r.crossing_time)
        })
        .collect();
    let n_extinct = runs.iter().filter(|r| r.0).count();
    let taus = runs.iter().filter_map(|r| r.1).map(|t| t_det - t).collect();
    Ok(ShiftSample { taus, n_runs, n_extinct, level, t_det })
}

/// Like [`empirical_timeshifts`] but keeps running batches until at least
/// `n_survivors` paths have crossed.
pub fn empirical_timeshifts_survivors(
    p: &ModelParams,
    level: f64,
    n_survivors: usize,
    seed: u64,
) -> Result<ShiftSample> {
    let mut out = empirical_timeshifts_from(p, level, 0, n_survivors, seed)?;
    while out.taus.len() < n_survivors {
        let missing = n_survivors - out.taus.len();
        let q = out.extinction_fraction().min(0.99);
        let batch = ((missing as f64 / (1.0 - q)).ceil() as usize).max(16);
        let more = empirical_timeshifts_from(p, level, out.n_runs, batch, seed)?;
        out.taus.extend(more.taus);
        out.n_runs += more.n_runs;
        out.n_extinct += more.n_extinct;
    }
    Ok(out)
}

/// Writes a recorded run as `t,S,E,I,V`.
pub fn write_run_csv<W: Write>(run: &SsaRun, out: W) -> Result<()> {
    if run.times.is_empty() {
        return Err(domain("run has no recorded states"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "S", "E", "I", "V"])?;
    for (t, x) in run.times.iter().zip(&run.states) {
        w.write_record([t.to_string(), x.s.to_string(), x.e.to_string(), x.i.to_string(), x.v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftSummary {
    pub n_runs: usize,
    pub extinction_fraction: f64,
    pub level: f64,
    pub t_det: f64,
    /// Quantiles of the crossing time at levels 0.05, 0.25, 0.5, 0.75, 0.95.
    pub crossing_time_quantiles: Vec<(f64, f64)>,
}

pub fn summarize(sample: &ShiftSample) -> ShiftSummary {
    let mut times: Vec<f64> = sample.taus.iter().map(|tau| sample.t_det - tau).collect();
    times.sort_by(f64::total_cmp);
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.95]
        .iter()
        .filter(|_| !times.is_empty())
        .map(|&q| {
            let idx = ((times.len() - 1) as f64 * q).round() as usize;
            (q, times[idx])
        })
        .collect();
    ShiftSummary {
        n_runs: sample.n_runs,
        extinction_fraction: sample.extinction_fraction(),
        level: sample.level,
        t_det: sample.t_det,
        crossing_time_quantiles: quantiles,
    }
}
