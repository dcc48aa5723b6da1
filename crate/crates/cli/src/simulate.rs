use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use rtshift::data::{generate_cohort, meta_path, write_dataset_csv, CohortConfig};
use rtshift::surrogate::SurrogateModel;
use rtshift::timeshift::{FixedGg, GgParams, LawSource, MonteCarloLaw};

use crate::output::{self, parse_triple, Provenance};
use crate::Global;

/// Where time-shift laws come from.
#[derive(Args, Debug, Clone, Serialize)]
pub struct LawArgs {
    /// Trained surrogate model (JSON).
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    /// Hold the shape parameters fixed at `a,d,p`.
    #[arg(long, value_parser = parse_triple, conflicts_with = "surrogate")]
    pub fixed_gg: Option<[f64; 3]>,
    /// Simulations per law when fitting by Monte Carlo (used when neither of
    /// the above is given).
    #[arg(long, default_value_t = 10_000)]
    pub law_sims: usize,
}

pub enum Law {
    Surrogate(Box<SurrogateModel>),
    Fixed(FixedGg),
    MonteCarlo(MonteCarloLaw),
}

impl Law {
    pub fn source(&self) -> &dyn LawSource {
        match self {
            Law::Surrogate(m) => m.as_ref(),
            Law::Fixed(f) => f,
            Law::MonteCarlo(m) => m,
        }
    }
}

impl LawArgs {
    pub fn resolve(&self, seed: u64) -> Result<Law> {
        if let Some(p) = &self.surrogate {
            let m = SurrogateModel::load(p).with_context(|| format!("loading surrogate {}", p.display()))?;
            return Ok(Law::Surrogate(Box::new(m)));
        }
        if let Some([a, d, p]) = self.fixed_gg {
            return Ok(Law::Fixed(FixedGg(GgParams::new(a, d, p)?)));
        }
        Ok(Law::MonteCarlo(MonteCarloLaw { n_sims: self.law_sims, seed }))
    }

    pub fn inputs(&self) -> Vec<&std::path::Path> {
        self.surrogate.iter().map(|p| p.as_path()).collect()
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Number of individuals.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Output directory for data.csv, data.meta.json and truth.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Cohort configuration (JSON); command-line `--n` and `--seed` take
    /// precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub law: LawArgs,
}

#[derive(Serialize)]
struct Settings<'a> {
    cohort: &'a CohortConfig,
    law: &'a LawArgs,
}

#[derive(Serialize)]
struct MetaOut<'a> {
    #[serde(flatten)]
    meta: &'a rtshift::data::DatasetMeta,
    truth_hyperparams: rtshift::Hyperparams,
    realized_hyperparams: rtshift::Hyperparams,
}

pub fn run(g: &Global, a: SimulateArgs) -> Result<()> {
    let mut cfg: CohortConfig = match &a.config {
        Some(p) => output::read_json(p)?,
        None => CohortConfig::default(),
    };
    cfg.n = a.n;
    cfg.seed = g.seed;
    let dir = output::out_dir(&a.out)?;
    let law = a.law.resolve(g.seed)?;
    let mut inputs = a.law.inputs();
    if let Some(p) = &a.config {
        inputs.push(p.as_path());
    }
    let prov = Provenance::new("simulate", g.seed, &Settings { cohort: &cfg, law: &a.law }, &inputs)?;

    let cohort = generate_cohort(&cfg, law.source()).context("generating cohort")?;
    let data = dir.join("data.csv");
    output::write_csv(&data, &prov, |w| write_dataset_csv(&cohort.series, w))?;
    output::write_json(
        &meta_path(&data),
        &prov,
        &MetaOut { meta: &cohort.meta, truth_hyperparams: cfg.truth, realized_hyperparams: cohort.realized_hyperparams() },
    )?;
    output::write_csv(&dir.join("truth.csv"), &prov, |w| cohort.write_truth_csv(w))?;
    println!("wrote {} individuals to {}", cohort.series.len(), dir.display());
    Ok(())
}
