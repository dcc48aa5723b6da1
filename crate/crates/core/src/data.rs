//! Viral-load datasets: ingestion, preprocessing and synthetic cohorts.
//!
//! On disk a dataset is a CSV with header `id,day,log10_vl` plus a sidecar
//! `<stem>.meta.json` holding the detection limit `eta`, the units and the
//! time origin. Values at or below `eta` are censored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::gumbel_quantile;
use crate::error::{domain, Error, Result};
use crate::likelihood::IndividualSeries;
use crate::model::{Hyperparams, ModelParams};
use crate::ode::{Tolerances, Trajectory, DEFAULT_HORIZON};
use crate::rng::stream;
use crate::timeshift::{LawSource, TauDraw};

/// Detection limit of the basketball-league cohort, log10 copies/mL.
pub const NBA_ETA: f64 = 2.658;
/// Detections further than this from the peak exclude the series.
pub const PEAK_WINDOW: f64 = 14.0;
/// Interior runs of this many censored values truncate the series.
pub const CENSORED_RUN: usize = 3;
pub const MIN_DETECTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub eta: f64,
    pub units: String,
    pub time_origin: String,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self { eta: NBA_ETA, units: "log10 copies/mL".into(), time_origin: "peak observed viral load".into() }
    }
}

/// One individual's observations before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub id: String,
    pub days: Vec<f64>,
    pub values: Vec<f64>,
    pub eta: f64,
}

impl RawSeries {
    pub fn new(id: impl Into<String>, days: Vec<f64>, values: Vec<f64>, eta: f64) -> Result<Self> {
        let s = Self { id: id.into(), days, values, eta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.days.len() != self.values.len() {
            problems.push(format!("{}: days and values differ in length", self.id));
        }
        if !(self.eta.is_finite()) {
            problems.push(format!("{}: detection limit must be finite", self.id));
        }
        for (j, w) in self.days.windows(2).enumerate() {
            if w[1] == w[0] {
                problems.push(format!("{}: duplicated day {}", self.id, w[0]));
            } else if !(w[1] > w[0]) {
                problems.push(format!("{}: day {} follows day {} (position {})", self.id, w[1], w[0], j + 1));
            }
        }
        if self.days.iter().chain(&self.values).any(|v| !v.is_finite()) {
            problems.push(format!("{}: non-finite day or value", self.id));
        }
        if problems.is_empty() { Ok(()) } else { Err(Error::Validation(problems)) }
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    fn detected(&self, j: usize) -> bool {
        self.values[j] > self.eta
    }

    pub fn n_detected(&self) -> usize {
        (0..self.len()).filter(|&j| self.detected(j)).count()
    }

    fn slice(&self, lo: usize, hi: usize) -> Self {
        Self { id: self.id.clone(), days: self.days[lo..hi].to_vec(), values: self.values[lo..hi].to_vec(), eta: self.eta }
    }

    /// Censored values clamped to `eta`.
    pub fn to_series(&self) -> Result<IndividualSeries> {
        IndividualSeries::new(self.id.clone(), self.days.clone(), self.values.clone(), self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    DetectionOutsidePeakWindow,
    TooFewDetections,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preprocessed {
    Included(RawSeries),
    Excluded(Exclusion),
}

impl Preprocessed {
    pub fn included(self) -> Option<RawSeries> {
        match self {
            Preprocessed::Included(s) => Some(s),
            Preprocessed::Excluded(_) => None,
        }
    }
}

/// Applies, in order: exclusion for detections more than 14 days from the
/// peak observation; trimming of leading and trailing censored runs to one
/// bracketing value; truncation at the first run of three censored values,
/// keeping its first element; exclusion with fewer than two detections.
pub fn preprocess(raw: &RawSeries) -> Result<Preprocessed> {
    raw.validate()?;
    let n = raw.len();
    let detections: Vec<usize> = (0..n).filter(|&j| raw.detected(j)).collect();
    if let Some(&peak) = detections.iter().max_by(|&&i, &&j| raw.values[i].total_cmp(&raw.values[j]).then(j.cmp(&i))) {
        let peak_day = raw.days[peak];
        if detections.iter().any(|&j| (raw.days[j] - peak_day).abs() > PEAK_WINDOW) {
            return Ok(Preprocessed::Excluded(Exclusion::DetectionOutsidePeakWindow));
        }
    }
    let (Some(&first), Some(&last)) = (detections.first(), detections.last()) else {
        return Ok(Preprocessed::Excluded(Exclusion::TooFewDetections));
    };
    let lo = first.saturating_sub(1);
    let hi = (last + 2).min(n);
    let mut s = raw.slice(lo, hi);

    let mut run = 0;
    for j in 0..s.len() {
        if s.detected(j) {
            run = 0;
            continue;
        }
        run += 1;
        if run == CENSORED_RUN {
            s = s.slice(0, j + 2 - CENSORED_RUN);
            break;
        }
    }
    if s.n_detected() < MIN_DETECTIONS {
        return Ok(Preprocessed::Excluded(Exclusion::TooFewDetections));
    }
    Ok(Preprocessed::Included(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub series: Vec<RawSeries>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub n_raw: usize,
    pub n_included: usize,
    pub excluded: Vec<(String, Exclusion)>,
}

impl Dataset {
    pub fn preprocess(&self) -> Result<(Vec<RawSeries>, PreprocessReport)> {
        let mut kept = Vec::new();
        let mut report = PreprocessReport { n_raw: self.series.len(), ..Default::default() };
        for s in &self.series {
            match preprocess(s)? {
                Preprocessed::Included(s) => kept.push(s),
                Preprocessed::Excluded(why) => report.excluded.push((s.id.clone(), why)),
            }
        }
        report.n_included = kept.len();
        Ok((kept, report))
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    id: String,
    day: f64,
    log10_vl: f64,
}

/// Reads rows grouped by `id` in order of first appearance; all validation
/// problems are reported together.
pub fn read_dataset_csv<R: Read>(input: R, meta: DatasetMeta) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "day", "log10_vl"] {
        return Err(Error::Parse { line: 1, message: format!("expected header id,day,log10_vl, found {}", headers.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for rec in reader.deserialize::<Row>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, message: e.to_string() }
        })?;
        let g = groups.entry(row.id.clone()).or_insert_with(|| {
            order.push(row.id.clone());
            (Vec::new(), Vec::new())
        });
        g.0.push(row.day);
        g.1.push(row.log10_vl);
    }
    let mut problems = Vec::new();
    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let (days, values) = groups.remove(&id).expect("grouped id");
        let s = RawSeries { id, days, values, eta: meta.eta };
        match s.validate() {
            Ok(()) => series.push(s),
            Err(Error::Validation(p)) => problems.extend(p),
            Err(e) => return Err(e),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(Dataset { meta, series })
}

pub fn write_dataset_csv<W: Write>(series: &[RawSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "day", "log10_vl"])?;
    for s in series {
        for (d, v) in s.days.iter().zip(&s.values) {
            w.write_record([s.id.as_str(), &d.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads `path` and its sidecar metadata.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(&mp).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", mp.display())))
    })?))?;
    if !meta.eta.is_finite() {
        return Err(Error::Validation(vec!["metadata eta must be finite".into()]));
    }
    read_dataset_csv(BufReader::new(File::open(path)?), meta)
}

pub fn save_dataset(path: &Path, series: &[RawSeries], meta: &DatasetMeta) -> Result<()> {
    write_dataset_csv(series, BufWriter::new(File::create(path)?))?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(meta_path(path))?), meta)?;
    Ok(())
}

/// Acceptance window for synthetic individuals, judged on the noiseless
/// shifted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionBounds {
    pub peak_log10_min: f64,
    pub peak_log10_max: f64,
    /// Peak time window, days post-infection.
    pub peak_day_min: f64,
    pub peak_day_max: f64,
    /// Days post-infection at which the load must have fallen below `late_log10_max`.
    pub late_day: f64,
    pub late_log10_max: f64,
}

impl Default for RejectionBounds {
    fn default() -> Self {
        Self { peak_log10_min: 5.0, peak_log10_max: 10.0, peak_day_min: 4.0, peak_day_max: 9.0, late_day: 21.0, late_log10_max: 4.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationGrid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for ObservationGrid {
    fn default() -> Self {
        Self { start: -10.0, end: 21.0, step: 1.0 }
    }
}

impl ObservationGrid {
    pub fn days(&self) -> Vec<f64> {
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + self.step * i as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n: usize,
    pub truth: Hyperparams,
    pub grid: ObservationGrid,
    pub eta: f64,
    pub bounds: RejectionBounds,
    /// Gumbel location and scale for infection times.
    pub t0_loc: f64,
    pub t0_scale: f64,
    pub max_rejections: usize,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n: 100,
            truth: Hyperparams::synthetic_truth(),
            grid: ObservationGrid::default(),
            eta: NBA_ETA,
            bounds: RejectionBounds::default(),
            t0_loc: -7.0,
            t0_scale: 3.0,
            max_rejections: 10_000,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        let b = &self.bounds;
        let ok = self.n >= 1
            && self.grid.step > 0.0
            && self.grid.end >= self.grid.start
            && self.eta.is_finite()
            && b.peak_log10_min < b.peak_log10_max
            && b.peak_day_min < b.peak_day_max
            && b.late_day > 0.0
            && self.t0_scale > 0.0
            && self.max_rejections >= 1;
        if ok { Ok(()) } else { Err(Error::Config("invalid cohort configuration".into())) }
    }
}

/// Parameters an individual was generated with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    #[serde(skip)]
    pub index: usize,
    #[serde(rename = "R0")]
    pub r0: f64,
    pub delta: f64,
    pub rho: f64,
    pub t0: f64,
    pub tau: f64,
    pub attempts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthRecord {
    id: String,
    #[serde(rename = "R0")]
    r0: f64,
    delta: f64,
    rho: f64,
    t0: f64,
    tau: f64,
    attempts: usize,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub series: Vec<RawSeries>,
    pub truth: Vec<(String, TruthRow)>,
    /// Noise draws of the accepted individuals on the full grid.
    pub noise: Vec<f64>,
    pub meta: DatasetMeta,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 { x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

impl Cohort {
    /// Sample means and standard deviations of the drawn individual
    /// parameters, and the standard deviation of the noise draws.
    pub fn realized_hyperparams(&self) -> Hyperparams {
        let col = |f: fn(&TruthRow) -> f64| -> Vec<f64> { self.truth.iter().map(|(_, t)| f(t)).collect() };
        let (m_r0, s_r0) = mean_sd(&col(|t| t.r0));
        let (m_d, s_d) = mean_sd(&col(|t| t.delta));
        let (m_rho, s_rho) = mean_sd(&col(|t| t.rho));
        let (_, kappa) = mean_sd(&self.noise);
        Hyperparams { mu_r0: m_r0, mu_delta: m_d, mu_rho: m_rho, sigma_r0: s_r0, sigma_delta: s_d, sigma_rho: s_rho, kappa }
    }

    pub fn write_truth_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (id, t) in &self.truth {
            w.serialize(TruthRecord { id: id.clone(), r0: t.r0, delta: t.delta, rho: t.rho, t0: t.t0, tau: t.tau, attempts: t.attempts })?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_truth_csv<R: Read>(input: R) -> Result<Vec<(String, TruthRow)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for (index, rec) in r.deserialize::<TruthRecord>().enumerate() {
        let t = rec?;
        out.push((t.id, TruthRow { index, r0: t.r0, delta: t.delta, rho: t.rho, t0: t.t0, tau: t.tau, attempts: t.attempts }));
    }
    Ok(out)
}

enum Attempt {
    Accepted { series: RawSeries, truth: TruthRow, noise: Vec<f64> },
    Rejected,
}

fn attempt_individual(cfg: &CohortConfig, source: &dyn LawSource, id: &str, index: usize, attempt: usize) -> Result<Attempt> {
    let mut rng = stream(cfg.seed, &[index as u64, attempt as u64]);
    let h = &cfg.truth;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let r0 = h.mu_r0 + h.sigma_r0 * std.sample(&mut rng);
    let delta = h.mu_delta + h.sigma_delta * std.sample(&mut rng);
    let rho = h.mu_rho + h.sigma_rho * std.sample(&mut rng);
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let t0 = gumbel_quantile(cfg.t0_loc, cfg.t0_scale, u);
    if !(r0 > 1.0 + 1e-6 && delta > 0.0 && rho > 0.0) {
        return Ok(Attempt::Rejected);
    }
    let p = ModelParams::from_free(r0, delta, rho, t0)?;
    let law = match source.law(&p) {
        Ok(l) => l,
        Err(Error::Extrapolation { .. }) => return Ok(Attempt::Rejected),
        Err(e) => return Err(e),
    };
    let tau = match law.sample(&mut rng) {
        TauDraw::Extinct => return Ok(Attempt::Rejected),
        TauDraw::Shift(t) => t,
    };
    let days = cfg.grid.days();
    let last = days.last().copied().unwrap_or(0.0);
    let horizon = (last - t0 + tau).max(cfg.bounds.late_day + tau).max(0.0) + 1.0;
    let traj = Trajectory::solve_horizon(&p, horizon.max(DEFAULT_HORIZON), Tolerances::default())?;

    let peak = traj.peak_stats()?;
    let peak_day = peak.days_post_infection - tau;
    let late = traj.log10_v_since_infection(cfg.bounds.late_day + tau);
    let b = &cfg.bounds;
    let noise_dist = Normal::new(0.0, h.kappa).map_err(|e| domain(e.to_string()))?;
    let noise: Vec<f64> = days.iter().map(|_| noise_dist.sample(&mut rng)).collect();
    if !(peak.log10_v_peak >= b.peak_log10_min
        && peak.log10_v_peak <= b.peak_log10_max
        && peak_day >= b.peak_day_min
        && peak_day <= b.peak_day_max
        && late < b.late_log10_max)
    {
        return Ok(Attempt::Rejected);
    }
    let values: Vec<f64> = days
        .iter()
        .zip(&noise)
        .map(|(&t, e)| {
            let s = t - t0 + tau;
            let z = if t <= t0 || s <= 0.0 { f64::NEG_INFINITY } else { traj.log10_v_since_infection(s) };
            let y = z + e;
            if y <= cfg.eta { cfg.eta } else { y }
        })
        .collect();
    let raw = RawSeries::new(id, days, values, cfg.eta)?;
    match preprocess(&raw)? {
        Preprocessed::Included(series) => Ok(Attempt::Accepted {
            series,
            truth: TruthRow { index, r0, delta, rho, t0, tau, attempts: attempt + 1 },
            noise,
        }),
        Preprocessed::Excluded(_) => Ok(Attempt::Rejected),
    }
}

/// Draws individuals from the population model, shifts their mean-field
/// trajectories by sampled time shifts and adds Gaussian noise on the
/// observation grid, redrawing until each individual meets the rejection
/// bounds and survives preprocessing. Individual `i`, attempt `j` uses
/// stream `(seed, i, j)`.
pub fn generate_cohort(cfg: &CohortConfig, source: &dyn LawSource) -> Result<Cohort> {
    cfg.validate()?;
    let width = cfg.n.to_string().len();
    let results: Vec<Result<(RawSeries, TruthRow, Vec<f64>)>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let id = format!("syn{:0width$}", i + 1);
            for attempt in 0..cfg.max_rejections {
                if let Attempt::Accepted { series, truth, noise } = attempt_individual(cfg, source, &id, i, attempt)? {
                    return Ok((series, truth, noise));
                }
            }
            Err(Error::Config(format!("{id}: {} consecutive rejections; check the cohort bounds", cfg.max_rejections)))
        })
        .collect();
    let mut cohort = Cohort {
        series: Vec::with_capacity(cfg.n),
        truth: Vec::with_capacity(cfg.n),
        noise: Vec::new(),
        meta: DatasetMeta { eta: cfg.eta, units: "log10 copies/mL".into(), time_origin: "synthetic grid".into() },
    };
    for r in results {
        let (s, t, noise) = r?;
        cohort.truth.push((s.id.clone(), t));
        cohort.series.push(s);
        cohort.noise.extend(noise);
    }
    Ok(cohort)
}

/// Whether the noiseless shifted trajectory of `t` satisfies `bounds`.
pub fn satisfies_bounds(t: &TruthRow, bounds: &RejectionBounds) -> Result<bool> {
    let p = ModelParams::from_free(t.r0, t.delta, t.rho, t.t0)?;
    let traj = Trajectory::solve_horizon(&p, (bounds.late_day + t.tau + 1.0).max(DEFAULT_HORIZON), Tolerances::default())?;
    let peak = traj.peak_stats()?;
    let peak_day = peak.days_post_infection - t.tau;
    let late = traj.log10_v_since_infection(bounds.late_day + t.tau);
    Ok(peak.log10_v_peak >= bounds.peak_log10_min
        && peak.log10_v_peak <= bounds.peak_log10_max
        && peak_day >= bounds.peak_day_min
        && peak_day <= bounds.peak_day_max
        && late < bounds.late_log10_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = NBA_ETA;

    fn raw(values: &[f64]) -> RawSeries {
        let days = (0..values.len()).map(|d| d as f64).collect();
        RawSeries::new("x", days, values.to_vec(), E).unwrap()
    }

    fn kept(values: &[f64]) -> Vec<f64> {
        preprocess(&raw(values)).unwrap().included().expect("included").values
    }

    #[test]
    fn trims_leading_and_trailing_runs() {
        assert_eq!(kept(&[E, E, 5.0, 6.0, E]), vec![E, 5.0, 6.0, E]);
        assert_eq!(kept(&[5.0, 6.0]), vec![5.0, 6.0]);
    }

    #[test]
    fn truncates_at_three_run() {
        assert_eq!(kept(&[E, 5.0, 6.0, E, E, E, 4.0]), vec![E, 5.0, 6.0, E]);
        assert_eq!(kept(&[E, 5.0, E, E, 6.0, E]), vec![E, 5.0, E, E, 6.0, E]);
    }

    #[test]
    fn excludes_single_detection() {
        assert_eq!(preprocess(&raw(&[E, 5.0, E, E, E, E])).unwrap(), Preprocessed::Excluded(Exclusion::TooFewDetections));
        assert_eq!(preprocess(&raw(&[E, E])).unwrap(), Preprocessed::Excluded(Exclusion::TooFewDetections));
    }

    #[test]
    fn excludes_far_detection() {
        let s = RawSeries::new("x", vec![0.0, 1.0, 16.0], vec![7.0, 5.0, 3.0], E).unwrap();
        assert_eq!(preprocess(&s).unwrap(), Preprocessed::Excluded(Exclusion::DetectionOutsidePeakWindow));
    }

    #[test]
    fn duplicate_day_names_id_and_day() {
        let csv = "id,day,log10_vl\na,0,3\na,1,4\nb,2,5\nb,2,6\n";
        match read_dataset_csv(csv.as_bytes(), DatasetMeta::default()) {
            Err(Error::Validation(p)) => assert!(p.iter().any(|m| m.contains('b') && m.contains("duplicated day 2"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "id,day,log10_vl\na,0,3\na,one,4\n";
        match read_dataset_csv(csv.as_bytes(), DatasetMeta::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_days() {
        let d = ObservationGrid::default().days();
        assert_eq!(d.len(), 32);
        assert_eq!((d[0], d[31]), (-10.0, 21.0));
    }
}
