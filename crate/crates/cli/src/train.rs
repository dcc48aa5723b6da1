use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use rtshift::surrogate::{
    generate_labels, median_relative_errors, train_with_split, validation_split, Hypercube, TrainConfig, TrainingSet,
};
use rtshift::timeshift::{read_labels_csv, write_labels_csv, GgLabel};

use crate::output::{self, parse_triple, Provenance};
use crate::{CheckFailures, Global};

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Output model file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Labelled points to generate.
    #[arg(long, default_value_t = 10_000)]
    pub n_train: usize,
    /// Branching-process simulations per label.
    #[arg(long, default_value_t = 10_000)]
    pub sims: usize,
    /// Lower corner of the (R0, δ, ρ) hypercube.
    #[arg(long, value_parser = parse_triple)]
    pub lo: Option<[f64; 3]>,
    /// Upper corner of the (R0, δ, ρ) hypercube.
    #[arg(long, value_parser = parse_triple)]
    pub hi: Option<[f64; 3]>,
    /// Train on existing labels instead of simulating.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Also write the generated labels here.
    #[arg(long)]
    pub save_labels: Option<PathBuf>,
    /// Extra held-out labels to report errors on.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_epochs: usize,
}

fn read_labels(p: &PathBuf) -> Result<Vec<GgLabel>> {
    let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    read_labels_csv(std::io::BufReader::new(f)).with_context(|| format!("reading labels {}", p.display()))
}

fn report(name: &str, e: [f64; 3]) {
    println!("{name:>10} median relative error: a {:.4}  d {:.4}  p {:.4}", e[0], e[1], e[2]);
}

pub fn run(g: &Global, a: TrainArgs) -> Result<()> {
    let def = Hypercube::default();
    let bounds = Hypercube::new(a.lo.unwrap_or(def.lo), a.hi.unwrap_or(def.hi))?;
    let cfg = TrainConfig {
        val_fraction: a.val_fraction,
        patience: a.patience,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
    };
    let inputs: Vec<&std::path::Path> = a.labels.iter().chain(&a.holdout).map(|p| p.as_path()).collect();
    let prov = Provenance::new("train-surrogate", g.seed, &(&a.n_train, &a.sims, &bounds, &cfg), &inputs)?;

    let started = Instant::now();
    let labels = match &a.labels {
        Some(p) => read_labels(p)?,
        None => {
            log::info!("labelling {} points with {} simulations each", a.n_train, a.sims);
            generate_labels(bounds, a.n_train, a.sims, g.seed).context("generating training labels")?
        }
    };
    if let Some(p) = &a.save_labels {
        output::write_csv(p, &prov, |w| write_labels_csv(&labels, w))?;
    }
    let label_secs = started.elapsed().as_secs_f64();
    let ts = TrainingSet::from_labels(labels, bounds)?;
    let (tr, val) = validation_split(ts.len(), cfg.val_fraction, g.seed);
    let model = train_with_split(&ts, &tr, &val, &cfg, g.seed)?;
    let m = &model.meta;
    println!(
        "trained on {} points ({} validation): {} epochs, best {} , train loss {:.3e}, validation loss {:.3e}",
        m.n_train, m.n_val, m.epochs, m.best_epoch, m.train_loss, m.val_loss
    );
    let val_labels: Vec<GgLabel> = val.iter().map(|&i| ts.labels[i]).collect();
    let val_err = median_relative_errors(&model, &val_labels)?;
    report("validation", val_err);
    if let Some(p) = &a.holdout {
        report("holdout", median_relative_errors(&model, &read_labels(p)?)?);
    }
    if !(m.val_loss.is_finite() && m.train_loss.is_finite()) {
        return Err(CheckFailures(vec!["training diverged".into()]).into());
    }
    output::write_json(&a.out, &prov, &model)?;
    println!(
        "labelling {:.1}s, training {:.1}s; model written to {}",
        label_secs,
        started.elapsed().as_secs_f64() - label_secs,
        a.out.display()
    );
    Ok(())
}
