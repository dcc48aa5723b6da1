use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use rtshift::data::{load_dataset, ObservationGrid, PreprocessReport};
use rtshift::inference::{
    posterior_predictive, run_chains, write_draws_csv, write_predictive_csv, InitialValues, LikelihoodMode, PosteriorSummary, Priors, SamplerConfig,
};
use rtshift::likelihood::IndividualSeries;

use crate::output::{self, Provenance};
use crate::simulate::LawArgs;
use crate::{CheckFailures, Global};

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    /// Dataset CSV; its metadata is read from the `.meta.json` sidecar.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for draws.csv, summary.json and predictive.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub law: LawArgs,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    /// Main-run iterations per chain, burn-in included.
    #[arg(long, default_value_t = 100_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    #[arg(long, default_value_t = 3)]
    pub pilot_rounds: usize,
    #[arg(long, default_value_t = 2500)]
    pub pilot_iters: usize,
    /// Centred hyperparameter sweeps per iteration (0 for plain non-centred).
    #[arg(long, default_value_t = 2)]
    pub interweave: usize,
    /// Prior overrides (JSON, same fields as the summary's `priors`).
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Use the shift-free deterministic likelihood.
    #[arg(long, conflicts_with = "exact")]
    pub deterministic: bool,
    /// Integrate over the time shift by quadrature instead of Laplace.
    #[arg(long)]
    pub exact: bool,
    /// Posterior draws per individual for the predictive bands.
    #[arg(long, default_value_t = 400)]
    pub predictive_draws: usize,
    /// Exit with status 3 when R-hat or ESS miss their thresholds.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Serialize)]
struct SummaryOut<'a> {
    #[serde(flatten)]
    summary: &'a PosteriorSummary,
    priors: Priors,
    preprocess: &'a PreprocessReport,
    individuals: Vec<&'a str>,
}

pub fn run(g: &Global, a: FitArgs) -> Result<()> {
    let priors: Priors = match &a.priors {
        Some(p) => output::read_json(p)?,
        None => Priors::default(),
    };
    let mode = if a.deterministic {
        LikelihoodMode::Deterministic
    } else if a.exact {
        LikelihoodMode::Exact
    } else {
        LikelihoodMode::Laplace
    };
    let cfg = SamplerConfig {
        chains: a.chains,
        iterations: a.iters,
        burn_in: a.burnin,
        thin: a.thin,
        pilot_rounds: a.pilot_rounds,
        pilot_iterations: a.pilot_iters,
        interweave: a.interweave,
        seed: g.seed,
        mode,
        ..SamplerConfig::default()
    };
    cfg.validate()?;
    let dir = output::out_dir(&a.out)?;
    let data_path = crate::absolute(&a.data);
    let meta = rtshift::data::meta_path(&data_path);
    let mut inputs = vec![data_path.as_path(), meta.as_path()];
    inputs.extend(a.law.inputs());
    if let Some(p) = &a.priors {
        inputs.push(p.as_path());
    }
    let prov = Provenance::new("fit", g.seed, &(&cfg, &priors, &a.law, a.predictive_draws), &inputs)?;

    let dataset = load_dataset(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let (kept, report) = dataset.preprocess()?;
    println!("{} of {} series included after preprocessing", report.n_included, report.n_raw);
    if kept.is_empty() {
        return Err(rtshift::error::Error::Validation(vec!["no series left after preprocessing".into()]).into());
    }
    let series: Vec<IndividualSeries> = kept.iter().map(|s| s.to_series()).collect::<rtshift::error::Result<_>>()?;
    let law = a.law.resolve(g.seed)?;
    let target = rtshift::inference::Target::new(&series, law.source(), mode, priors);

    let fit = run_chains(&target, &cfg, &InitialValues::default())?;
    let ids: Vec<String> = series.iter().map(|s| s.id.clone()).collect();
    output::write_csv(&dir.join("draws.csv"), &prov, |w| write_draws_csv(&fit.chains, &ids, w))?;

    let grid = ObservationGrid::default().days();
    let mut rows = Vec::new();
    if mode != LikelihoodMode::Deterministic {
        for (i, id) in ids.iter().enumerate() {
            match posterior_predictive(&target, &fit.chains, i, &grid, a.predictive_draws, g.seed) {
                Ok(pred) => rows.push((id.clone(), pred)),
                Err(e) => log::warn!("{id}: posterior predictive failed: {e}"),
            }
        }
    }
    output::write_csv(&dir.join("predictive.csv"), &prov, |w| write_predictive_csv(&rows, w))?;

    let s = &fit.summary;
    output::write_json(
        &dir.join("summary.json"),
        &prov,
        &SummaryOut { summary: s, priors, preprocess: &report, individuals: ids.iter().map(String::as_str).collect() },
    )?;
    println!("{:>12} {:>9} {:>9} {:>9} {:>9} {:>7} {:>8}", "parameter", "mean", "2.5%", "50%", "97.5%", "R-hat", "ESS");
    for (name, p) in &s.shared {
        println!("{name:>12} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.4} {:>8.0}", p.mean, p.q025, p.q50, p.q975, p.rhat, p.ess_bulk);
    }
    println!(
        "acceptance individual {:?}, shared {:?}; {:.0}s",
        s.acceptance_individual.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        s.acceptance_shared.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        s.seconds
    );
    if !s.converged {
        let msg = format!("not converged: max R-hat {:.4}, min ESS {:.0}", s.max_rhat, s.min_ess);
        if a.strict {
            return Err(CheckFailures(vec![msg]).into());
        }
        log::warn!("{msg}");
    }
    Ok(())
}
