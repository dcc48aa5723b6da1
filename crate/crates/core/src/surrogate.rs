//! Neural surrogate for the time-shift parameters `(a, d, p)` as a function of
//! `(R0, δ, ρ)` with `k` and `c` fixed.
//!
//! The network is a single hidden layer of 64 ReLU units. Its three outputs
//! live in standardized target space and pass through a soft-plus shifted so
//! that the de-standardized prediction is `sd · softplus(o) > 0`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::ModelParams;
use crate::rng::{derive_seed, stream};
use crate::timeshift::{fit_gg_params, GgLabel, GgParams, LawSource, TimeShiftLaw};

pub const SCHEMA_VERSION: u32 = 1;
pub const HIDDEN: usize = 64;
/// Half-width of the window that must hold the central 95% of `τ`.
pub const TAU_WINDOW: f64 = 7.0;
/// Individuals below this `R0` have no usable time-shift law.
pub const R0_CRITICAL: f64 = 1.0 + 1e-6;

/// Axis-aligned box over `(R0, δ, ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypercube {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for Hypercube {
    fn default() -> Self {
        Self { lo: [1.5, 0.5, 0.5], hi: [30.0, 3.0, 12.0] }
    }
}

impl Hypercube {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        let c = Self { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..3 {
            if !(self.lo[j] > 0.0 && self.hi[j] > self.lo[j] && self.hi[j].is_finite()) {
                return Err(domain(format!("hypercube axis {j} must satisfy 0 < lo < hi, got [{}, {}]", self.lo[j], self.hi[j])));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|j| x[j] >= self.lo[j] && x[j] <= self.hi[j])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        std::array::from_fn(|j| rng.random_range(self.lo[j]..=self.hi[j]))
    }
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub sd: [f64; 3],
}

impl Standardizer {
    /// Population moments of `rows`; constant columns keep unit scale.
    pub fn fit(rows: &[[f64; 3]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Training("cannot standardize an empty set".into()));
        }
        let n = rows.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n);
        let sd = std::array::from_fn(|j| {
            let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        });
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.sd[j])
    }

    pub fn invert(&self, z: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| self.mean[j] + self.sd[j] * z[j])
    }
}

/// Labelled `(R0, δ, ρ) → (a, d, p)` pairs with their standardization.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub labels: Vec<GgLabel>,
    pub inputs: Vec<[f64; 3]>,
    pub targets: Vec<[f64; 3]>,
    pub input_std: Standardizer,
    pub target_std: Standardizer,
    pub bounds: Hypercube,
}

impl TrainingSet {
    pub fn from_labels(labels: Vec<GgLabel>, bounds: Hypercube) -> Result<Self> {
        bounds.validate()?;
        let inputs: Vec<[f64; 3]> = labels.iter().map(|l| [l.r0, l.delta, l.rho]).collect();
        let targets: Vec<[f64; 3]> = labels.iter().map(|l| [l.a, l.d, l.p]).collect();
        if let Some(x) = inputs.iter().find(|x| !bounds.contains(**x)) {
            return Err(domain(format!("training input {x:?} lies outside the hypercube")));
        }
        if targets.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(domain("training targets must be positive and finite"));
        }
        let input_std = Standardizer::fit(&inputs)?;
        let target_std = Standardizer::fit(&targets)?;
        Ok(Self { labels, inputs, targets, input_std, target_std, bounds })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn standardized(&self, idx: &[usize]) -> Vec<([f64; 3], [f64; 3])> {
        idx.iter().map(|&i| (self.input_std.apply(self.inputs[i]), self.target_std.apply(self.targets[i]))).collect()
    }
}

/// Validity filter: supercritical and central 95% of `τ` inside `±TAU_WINDOW`.
pub fn passes_filter(p: &ModelParams, gg: GgParams) -> bool {
    if !(p.r0 > R0_CRITICAL) {
        return false;
    }
    match TimeShiftLaw::for_params(p, gg) {
        Ok(law) => law.lambda > 0.0 && law.central_mass_within(TAU_WINDOW),
        Err(_) => false,
    }
}

/// Labels one point, or `None` if it fails the filter.
pub fn label_point(x: [f64; 3], sims_per_point: usize, seed: u64) -> Result<Option<GgLabel>> {
    let p = ModelParams::from_free(x[0], x[1], x[2], 0.0)?;
    if !(p.r0 > R0_CRITICAL) {
        return Ok(None);
    }
    let fit = match fit_gg_params(&p, sims_per_point, seed) {
        Ok(f) => f,
        Err(Error::InsufficientSurvivors { .. }) | Err(Error::Subcritical { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !passes_filter(&p, fit.params) {
        return Ok(None);
    }
    let law = TimeShiftLaw::for_params(&p, fit.params)?;
    Ok(Some(GgLabel::new(&p, &law)))
}

const MIN_TRAINING_POINTS: usize = 1000;
const ACCEPTANCE_PROBE: usize = 200;

/// Rejection-samples `n_target` valid, labelled points from `bounds`.
pub fn generate_training_data(bounds: Hypercube, n_target: usize, sims_per_point: usize, seed: u64) -> Result<TrainingSet> {
    if n_target < MIN_TRAINING_POINTS {
        return Err(domain(format!("n_target must be at least {MIN_TRAINING_POINTS}, got {n_target}")));
    }
    TrainingSet::from_labels(generate_labels(bounds, n_target, sims_per_point, seed)?, bounds)
}

/// Candidate `j` draws its point from stream `(seed, j, 0)` and its simulations
/// from `(seed, j, 1)`; accepted labels are kept in candidate order, so the
/// result does not depend on the thread count.
pub fn generate_labels(bounds: Hypercube, n_target: usize, sims_per_point: usize, seed: u64) -> Result<Vec<GgLabel>> {
    bounds.validate()?;
    let mut labels = Vec::with_capacity(n_target);
    let mut next = 0usize;
    while labels.len() < n_target {
        let remaining = n_target - labels.len();
        let rate = if next == 0 { 1.0 } else { (labels.len() as f64 / next as f64).max(0.01) };
        let batch = ((remaining as f64 / rate * 1.1).ceil() as usize).clamp(1, 100_000);
        let results: Vec<Result<Option<GgLabel>>> = (next..next + batch)
            .into_par_iter()
            .map(|j| {
                let x = bounds.sample(&mut stream(seed, &[j as u64, 0]));
                label_point(x, sims_per_point, derive_seed(seed, &[j as u64, 1]))
            })
            .collect();
        for r in results {
            next += 1;
            if let Some(l) = r? {
                labels.push(l);
                if labels.len() == n_target {
                    break;
                }
            }
        }
        if next >= ACCEPTANCE_PROBE && (labels.len() as f64) < 0.01 * next as f64 {
            return Err(Error::Bounds { rate: labels.len() as f64 / next as f64 });
        }
    }
    log::info!("{} labels accepted from {next} candidates", labels.len());
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub val_fraction: f64,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { val_fraction: 0.1, patience: 30, learning_rate: 1e-3, batch_size: 32, max_epochs: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let weights = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Self { rows, cols, weights, bias: vec![0.0; rows] }
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols || self.weights.len() != rows * cols || self.bias.len() != rows {
            return Err(Error::Training(format!("layer shape mismatch, expected {rows}x{cols}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub hidden: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub schema_version: u32,
    pub activations: Activations,
    pub input_std: Standardizer,
    pub target_std: Standardizer,
    pub bounds: Hypercube,
    pub layers: [Layer; 2],
    pub meta: TrainingMeta,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 { x } else { x.exp().ln_1p() }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Network weights plus the output shift; the piece that training updates.
#[derive(Debug, Clone)]
struct Net {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    shift: [f64; 3],
}

struct Tape {
    pre: [f64; HIDDEN],
    hid: [f64; HIDDEN],
    out_pre: [f64; 3],
}

impl Net {
    fn forward(&self, x: &[f64; 3], tape: &mut Tape) -> [f64; 3] {
        for h in 0..HIDDEN {
            let w = &self.w1[3 * h..3 * h + 3];
            let z = self.b1[h] + w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
            tape.pre[h] = z;
            tape.hid[h] = z.max(0.0);
        }
        let mut y = [0.0; 3];
        for o in 0..3 {
            let w = &self.w2[HIDDEN * o..HIDDEN * (o + 1)];
            let z = self.b2[o] + w.iter().zip(&tape.hid).map(|(a, b)| a * b).sum::<f64>();
            tape.out_pre[o] = z;
            y[o] = softplus(z) + self.shift[o];
        }
        y
    }

    fn loss(&self, data: &[([f64; 3], [f64; 3])]) -> f64 {
        let mut tape = Tape { pre: [0.0; HIDDEN], hid: [0.0; HIDDEN], out_pre: [0.0; 3] };
        let total: f64 = data
            .iter()
            .map(|(x, t)| {
                let y = self.forward(x, &mut tape);
                (0..3).map(|o| (y[o] - t[o]).powi(2)).sum::<f64>()
            })
            .sum();
        total / (3 * data.len()) as f64
    }
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * gi;
                self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * gi * gi;
                *pi -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
                k += 1;
            }
        }
    }
}

/// Trains on a random `1 − val_fraction` split of `ts`.
pub fn train(ts: &TrainingSet, cfg: &TrainConfig, seed: u64) -> Result<SurrogateModel> {
    if ts.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 0.5) {
        return Err(domain(format!("val_fraction must be in (0, 0.5), got {}", cfg.val_fraction)));
    }
    let (tr, val) = validation_split(ts.len(), cfg.val_fraction, seed);
    train_with_split(ts, &tr, &val, cfg, seed)
}

/// Shuffled `(train, validation)` row indices used by [`train`]. With a
/// single row both sets hold it.
pub fn validation_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[0]));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (val, tr) = idx.split_at(n_val.min(n));
    let tr = if tr.is_empty() { val } else { tr };
    (tr.to_vec(), val.to_vec())
}

/// Trains on rows `train_idx`, early-stopping on rows `val_idx` (which may
/// overlap). Returns the best-validation snapshot.
pub fn train_with_split(
    ts: &TrainingSet,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SurrogateModel> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Training("training and validation sets must be nonempty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.patience == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(domain("batch size, epochs and patience must be positive and the learning rate non-negative"));
    }
    let mut train_data = ts.standardized(train_idx);
    let val_data = ts.standardized(val_idx);

    let mut rng = stream(seed, &[1]);
    let l1 = Layer::glorot(HIDDEN, 3, &mut rng);
    let l2 = Layer::glorot(3, HIDDEN, &mut rng);
    let shift: [f64; 3] = std::array::from_fn(|o| -ts.target_std.mean[o] / ts.target_std.sd[o]);
    let mut net = Net { w1: l1.weights, b1: l1.bias, w2: l2.weights, b2: vec![0.0; 3], shift };
    // Start the outputs at the target means.
    for o in 0..3 {
        let want = -shift[o];
        net.b2[o] = if want > 30.0 { want } else { want.exp_m1().ln() };
    }
    let n_params = net.w1.len() + net.b1.len() + net.w2.len() + net.b2.len();
    let mut adam = Adam { lr: cfg.learning_rate, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] };

    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut since_best = 0;
    let mut epochs = 0;
    let mut tape = Tape { pre: [0.0; HIDDEN], hid: [0.0; HIDDEN], out_pre: [0.0; 3] };
    let (mut gw1, mut gb1) = (vec![0.0; net.w1.len()], vec![0.0; HIDDEN]);
    let (mut gw2, mut gb2) = (vec![0.0; net.w2.len()], vec![0.0; 3]);
    while epochs < cfg.max_epochs {
        epochs += 1;
        train_data.shuffle(&mut rng);
        for batch in train_data.chunks(cfg.batch_size) {
            gw1.fill(0.0);
            gb1.fill(0.0);
            gw2.fill(0.0);
            gb2.fill(0.0);
            let scale = 2.0 / (3 * batch.len()) as f64;
            for (x, t) in batch {
                let y = net.forward(x, &mut tape);
                let mut dz = [0.0; 3];
                for o in 0..3 {
                    dz[o] = scale * (y[o] - t[o]) * sigmoid(tape.out_pre[o]);
                    gb2[o] += dz[o];
                    for h in 0..HIDDEN {
                        gw2[HIDDEN * o + h] += dz[o] * tape.hid[h];
                    }
                }
                for h in 0..HIDDEN {
                    if tape.pre[h] <= 0.0 {
                        continue;
                    }
                    let g = dz[0] * net.w2[h] + dz[1] * net.w2[HIDDEN + h] + dz[2] * net.w2[2 * HIDDEN + h];
                    gb1[h] += g;
                    for i in 0..3 {
                        gw1[3 * h + i] += g * x[i];
                    }
                }
            }
            adam.step(
                &mut [&mut net.w1, &mut net.b1, &mut net.w2, &mut net.b2],
                &[&gw1, &gb1, &gw2, &gb2],
            );
        }
        let val_loss = net.loss(&val_data);
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("validation loss diverged at epoch {epochs}")));
        }
        if val_loss < best.0 {
            best = (val_loss, net.clone(), epochs);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (val_loss, net, best_epoch) = best;
    let train_loss = net.loss(&ts.standardized(train_idx));
    log::info!("surrogate trained for {epochs} epochs, best validation MSE {val_loss:.3e} at epoch {best_epoch}");
    Ok(SurrogateModel {
        schema_version: SCHEMA_VERSION,
        activations: Activations { hidden: "relu".into(), output: "softplus".into() },
        input_std: ts.input_std,
        target_std: ts.target_std,
        bounds: ts.bounds,
        layers: [
            Layer { rows: HIDDEN, cols: 3, weights: net.w1, bias: net.b1 },
            Layer { rows: 3, cols: HIDDEN, weights: net.w2, bias: net.b2 },
        ],
        meta: TrainingMeta {
            epochs,
            best_epoch,
            train_loss,
            val_loss,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            seed,
            config: *cfg,
        },
    })
}

impl SurrogateModel {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Training(format!("unsupported schema version {}", self.schema_version)));
        }
        if self.activations.hidden != "relu" || self.activations.output != "softplus" {
            return Err(Error::Training("unsupported activation spec".into()));
        }
        self.bounds.validate()?;
        self.layers[0].check(HIDDEN, 3)?;
        self.layers[1].check(3, HIDDEN)?;
        let finite = self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).all(|v| v.is_finite());
        if !finite || self.target_std.sd.iter().chain(&self.input_std.sd).any(|s| !(*s > 0.0)) {
            return Err(Error::Training("model contains invalid numbers".into()));
        }
        Ok(())
    }

    fn net(&self) -> Net {
        let shift = std::array::from_fn(|o| -self.target_std.mean[o] / self.target_std.sd[o]);
        Net {
            w1: self.layers[0].weights.clone(),
            b1: self.layers[0].bias.clone(),
            w2: self.layers[1].weights.clone(),
            b2: self.layers[1].bias.clone(),
            shift,
        }
    }

    /// `(a, d, p)` at `x = (R0, δ, ρ)`; errors outside the training hypercube.
    pub fn predict_raw(&self, x: [f64; 3]) -> Result<[f64; 3]> {
        if !self.bounds.contains(x) {
            return Err(Error::Extrapolation { input: x });
        }
        let z = self.input_std.apply(x);
        let (l1, l2) = (&self.layers[0], &self.layers[1]);
        let mut hid = [0.0; HIDDEN];
        for h in 0..HIDDEN {
            let w = &l1.weights[3 * h..3 * h + 3];
            hid[h] = (l1.bias[h] + w[0] * z[0] + w[1] * z[1] + w[2] * z[2]).max(0.0);
        }
        Ok(std::array::from_fn(|o| {
            let w = &l2.weights[HIDDEN * o..HIDDEN * (o + 1)];
            let pre = l2.bias[o] + w.iter().zip(&hid).map(|(a, b)| a * b).sum::<f64>();
            self.target_std.sd[o] * softplus(pre)
        }))
    }

    pub fn predict(&self, p: &ModelParams) -> Result<GgParams> {
        let [a, d, pp] = self.predict_raw([p.r0, p.delta, p.rho])?;
        GgParams::new(a, d, pp)
    }

    /// Mean-squared error in standardized target space over `labels`.
    pub fn mse(&self, labels: &[GgLabel]) -> Result<f64> {
        let net = self.net();
        let data: Vec<_> = labels
            .iter()
            .map(|l| (self.input_std.apply([l.r0, l.delta, l.rho]), self.target_std.apply([l.a, l.d, l.p])))
            .collect();
        if data.is_empty() {
            return Err(domain("no labels"));
        }
        Ok(net.loss(&data))
    }

    pub fn to_writer<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(input: R) -> Result<Self> {
        let m: Self = serde_json::from_reader(input)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_writer(f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl LawSource for SurrogateModel {
    fn law(&self, p: &ModelParams) -> Result<TimeShiftLaw> {
        TimeShiftLaw::for_params(p, self.predict(p)?)
    }
}

/// Per-parameter median of `|pred − label| / label`.
pub fn median_relative_errors(model: &SurrogateModel, labels: &[GgLabel]) -> Result<[f64; 3]> {
    if labels.is_empty() {
        return Err(domain("no labels"));
    }
    let mut errs: [Vec<f64>; 3] = Default::default();
    for l in labels {
        let pred = model.predict_raw([l.r0, l.delta, l.rho])?;
        for (j, truth) in [l.a, l.d, l.p].into_iter().enumerate() {
            errs[j].push(((pred[j] - truth) / truth).abs());
        }
    }
    Ok(errs.map(|mut e| {
        e.sort_by(f64::total_cmp);
        let n = e.len();
        if n % 2 == 1 { e[n / 2] } else { 0.5 * (e[n / 2 - 1] + e[n / 2]) }
    }))
}

/// Gaussian jitter of the labels, used to build synthetic training sets.
pub fn jitter_labels(labels: &[GgLabel], rel_sd: f64, seed: u64) -> Vec<GgLabel> {
    let mut rng = stream(seed, &[]);
    let n = Normal::new(0.0, rel_sd).expect("finite sd");
    labels
        .iter()
        .map(|l| GgLabel {
            a: l.a * (1.0 + n.sample(&mut rng)).max(0.05),
            d: l.d * (1.0 + n.sample(&mut rng)).max(0.05),
            p: l.p * (1.0 + n.sample(&mut rng)).max(0.05),
            ..*l
        })
        .collect()
}
