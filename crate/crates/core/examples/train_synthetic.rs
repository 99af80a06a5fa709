//! Generates the low-noise synthetic benchmark, trains a two-layer model on
//! it and reports slide accuracy against the Bayes oracle plus gene
//! correlations. Pass `default` as the second argument for the noisier
//! default spec.
//!
//! cargo run --release --example train_synthetic -- [out_dir] [default]

use std::path::PathBuf;
use std::time::Instant;

use trnasformer::bagging::Split;
use trnasformer::eval::{evaluate_slides, group_by_slide, write_eval_reports, DEFAULT_ALPHA};
use trnasformer::model::{Model, ModelConfig};
use trnasformer::synth::{generate, oracle_bayes_accuracy, SynthSpec};
use trnasformer::train::{train, TrainConfig};

fn main() -> trnasformer::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(PathBuf::from);
    let start = Instant::now();

    let spec = match args.get(2).map(String::as_str) {
        Some("default") => SynthSpec::default(),
        _ => SynthSpec::low_noise(),
    };
    let data = generate(&spec)?;
    let oracle = oracle_bayes_accuracy(&spec, 100_000, 7)?;
    let gene_ids = data.gene_ids.clone();

    let config = ModelConfig::desk(spec.d, gene_ids.len(), spec.classes);
    let model = Model::new(config, 0)?;
    let outcome = train(
        model,
        &data.bags_in(Split::Train),
        &data.bags_in(Split::Val),
        TrainConfig::desk(),
        out.as_deref(),
        false,
    )?;
    for m in &outcome.log {
        println!(
            "epoch {:2}  train {:.4}  val {:.4}  acc {:.4}  lr {:.1e}",
            m.epoch, m.train_loss, m.val_loss, m.val_accuracy, m.lr
        );
    }

    let best = outcome.best.model()?;
    let test = group_by_slide(data.bags_in(Split::Test));
    let report = evaluate_slides(&best, &test, &gene_ids, DEFAULT_ALPHA)?;
    if let Some(dir) = &out {
        write_eval_reports(&dir.join("eval"), &report)?;
    }
    let acc = report.classification.accuracy;
    println!("bag oracle accuracy  {:.4} [{:.4}, {:.4}]", oracle.accuracy, oracle.ci_low, oracle.ci_high);
    println!("slide accuracy       {acc:.4} over {} slides", report.slides.len());
    println!("bag accuracy         {:.4}", report.bag_accuracy);
    println!("mean gene pearson r  {:.4}", report.genes.mean_pearson);
    println!("mae {}  rmse {}  rrmse {}", report.errors.mae, report.errors.rmse, report.errors.rrmse);
    println!("elapsed              {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
