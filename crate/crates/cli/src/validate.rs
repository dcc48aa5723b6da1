use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use rtshift::branching::{bp_summary, extinction_probs, growth_rate};
use rtshift::likelihood::{profile, write_profile_csv, FreeParam, IndividualSeries, ProfileRow};
use rtshift::ode::Trajectory;
use rayon::prelude::*;
use rtshift::ssa::{empirical_timeshifts_survivors, ssa_simulate, Record, SsaOptions};
use rtshift::timeshift::{fit_gg_params, FixedGg};
use rtshift::ModelParams;

use crate::output::{self, Provenance};
use crate::{CheckFailures, Global};

#[derive(Args, Debug, Serialize)]
pub struct ValidateArgs {
    /// Output directory for report.json and profile.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "r0", default_value_t = 8.0)]
    pub r0: f64,
    #[arg(long, default_value_t = 1.7)]
    pub delta: f64,
    #[arg(long, default_value_t = 3.0)]
    pub rho: f64,
    /// Full stochastic runs for the extinction check.
    #[arg(long, default_value_t = 10_000)]
    pub runs: usize,
    /// Surviving runs for the time-shift check.
    #[arg(long, default_value_t = 10_000)]
    pub survivors: usize,
    /// Branching-process simulations for the law fit.
    #[arg(long, default_value_t = 10_000)]
    pub law_sims: usize,
    /// Virion level whose crossing times are aligned.
    #[arg(long, default_value_t = 1e3)]
    pub level: f64,
    /// Grid points per free parameter in the likelihood profiles.
    #[arg(long, default_value_t = 50)]
    pub profile_points: usize,
    #[arg(long, default_value_t = 0.02)]
    pub ks_tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub laplace_tol: f64,
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    tolerance: f64,
    passed: bool,
    seconds: f64,
}

#[derive(Serialize)]
struct Report {
    params: [f64; 3],
    q_star: f64,
    lambda: f64,
    mu_w: Option<f64>,
    subcritical: bool,
    gg: Option<[f64; 3]>,
    checks: Vec<Check>,
    notes: Vec<String>,
}

/// A synthetic test individual: the mean-field trajectory at `p` on the
/// default grid with Gaussian noise, censored at the detection limit.
fn test_individual(p: &ModelParams, kappa: f64, seed: u64) -> Result<IndividualSeries> {
    let grid = rtshift::data::ObservationGrid::default().days();
    let horizon = grid.last().copied().unwrap_or(0.0) - p.t0 + 1.0;
    let traj = Trajectory::solve_horizon(p, horizon.max(rtshift::ode::DEFAULT_HORIZON), Default::default())?;
    let eta = rtshift::data::NBA_ETA;
    let mut rng = rtshift::rng::stream(seed, &[]);
    let noise = Normal::new(0.0, kappa)?;
    let values = grid
        .iter()
        .map(|&t| {
            let z = if t > p.t0 { traj.log10_v_since_infection(t - p.t0) } else { f64::NEG_INFINITY };
            (z + noise.sample(&mut rng)).max(eta)
        })
        .collect();
    Ok(IndividualSeries::new("validate", grid, values, eta)?)
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = std::time::Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

pub fn run(g: &Global, a: ValidateArgs) -> Result<()> {
    let dir = output::out_dir(&a.out)?;
    let prov = Provenance::new("validate", g.seed, &a, &[])?;
    let p = ModelParams::from_free(a.r0, a.delta, a.rho, -7.0)?;
    let subcritical = p.r0 <= 1.0;
    let (q_star, lambda, mu_w) = if subcritical {
        (extinction_probs(&p)[0], growth_rate(&p), None)
    } else {
        let bp = bp_summary(&p)?;
        (bp.q_star, bp.lambda, Some(bp.mu_w))
    };
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    let (frac, secs) = timed(|| {
        if subcritical {
            // No deterministic crossing exists; run each path to extinction.
            let opts = SsaOptions { t_max: 1e4, record: Record::Nothing, stop_at_level: Some(a.level) };
            let extinct = (0..a.runs)
                .into_par_iter()
                .filter(|&i| ssa_simulate(&p, &opts, &mut rtshift::rng::stream(g.seed, &[i as u64])).extinct)
                .count();
            Ok(extinct as f64 / a.runs as f64)
        } else {
            Ok(rtshift::ssa::empirical_timeshifts(&p, a.level, a.runs, g.seed)?.extinction_fraction())
        }
    })?;
    let se = (q_star * (1.0 - q_star) / a.runs as f64).sqrt();
    let tol = (3.0 * se).max(1.0 / a.runs as f64);
    checks.push(Check { name: "extinction_fraction_minus_q_star", value: (frac - q_star).abs(), tolerance: tol, passed: (frac - q_star).abs() <= tol, seconds: secs });

    let mut gg = None;
    let mut rows: Vec<ProfileRow> = Vec::new();
    if subcritical {
        notes.push(format!("R0 = {} is subcritical: q* = 1 and the time-shift checks are skipped", a.r0));
    } else {
        let ((fit, ks), secs) = timed(|| {
            let fit = fit_gg_params(&p, a.law_sims, rtshift::rng::derive_seed(g.seed, &[1]))?;
            let law = rtshift::timeshift::TimeShiftLaw::for_params(&p, fit.params)?;
            let sample = empirical_timeshifts_survivors(&p, a.level, a.survivors, rtshift::rng::derive_seed(g.seed, &[2]))?;
            let ks = rtshift::timeshift::ks_distance(&sample.taus, |t| law.cdf(t));
            Ok((fit, ks))
        })?;
        gg = Some(fit.params.as_array());
        checks.push(Check { name: "time_shift_ks", value: ks, tolerance: a.ks_tol, passed: ks < a.ks_tol, seconds: secs });

        let (err, secs) = timed(|| {
            let series = test_individual(&p, 0.5, rtshift::rng::derive_seed(g.seed, &[3]))?;
            let src = FixedGg(fit.params);
            let n = a.profile_points.max(2);
            for param in FreeParam::ALL {
                let (lo, hi) = match param {
                    FreeParam::R0 => (0.5 * p.r0, 1.5 * p.r0),
                    FreeParam::Delta => (0.6 * p.delta, 1.4 * p.delta),
                    FreeParam::Rho => (0.6 * p.rho, 1.4 * p.rho),
                    FreeParam::T0 => (p.t0 - 3.0, p.t0 + 3.0),
                };
                let values: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
                rows.extend(profile(&series, &p, 0.5, &src, param, &values).with_context(|| format!("profiling {}", param.name()))?);
            }
            Ok(rows.iter().map(|r| r.abs_err).fold(0.0, f64::max))
        })?;
        checks.push(Check { name: "laplace_max_abs_error", value: err, tolerance: a.laplace_tol, passed: err < a.laplace_tol, seconds: secs });
    }

    for c in &checks {
        println!("{:<36} {:<4} value {:.3e}  tolerance {:.3e}  ({:.1}s)", c.name, if c.passed { "PASS" } else { "FAIL" }, c.value, c.tolerance, c.seconds);
    }
    for n in &notes {
        println!("note: {n}");
    }
    output::write_csv(&dir.join("profile.csv"), &prov, |w| write_profile_csv(&rows, w))?;
    let failed: Vec<String> =
        checks.iter().filter(|c| !c.passed).map(|c| format!("{} = {:.3e} exceeds {:.3e}", c.name, c.value, c.tolerance)).collect();
    output::write_json(
        &dir.join("report.json"),
        &prov,
        &Report { params: [a.r0, a.delta, a.rho], q_star, lambda, mu_w, subcritical, gg, checks, notes },
    )?;
    if failed.is_empty() { Ok(()) } else { Err(CheckFailures(failed).into()) }
}
