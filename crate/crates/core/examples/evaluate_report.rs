//! Trains briefly on a small synthetic set, reloads the best checkpoint and
//! writes the evaluation reports: slide majority vote, confusion matrix,
//! ROC, per-gene correlations with corrected significance, errors and PCA.
//!
//! cargo run --release --example evaluate_report -- [out_dir]

use std::path::PathBuf;

use trnasformer::bagging::Split;
use trnasformer::eval::{evaluate_slides, group_by_slide, write_eval_reports, DEFAULT_ALPHA};
use trnasformer::model::{Checkpoint, Model, ModelConfig};
use trnasformer::synth::{generate, SynthSpec};
use trnasformer::train::{train, TrainConfig, BEST_CHECKPOINT};

fn main() -> trnasformer::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("trna-eval"));
    let spec = SynthSpec {
        slides_per_class: 12,
        bags_per_slide: 10,
        d: 16,
        genes: 12,
        ..SynthSpec::low_noise()
    };
    let data = generate(&spec)?;
    let config = ModelConfig {
        width: 16,
        ..ModelConfig::desk(spec.d, data.gene_ids.len(), spec.classes)
    };
    let tc = TrainConfig {
        epochs: 6,
        batch: 16,
        ..TrainConfig::desk()
    };
    let train_dir = out.join("train");
    train(Model::new(config, 0)?, &data.bags_in(Split::Train), &data.bags_in(Split::Val), tc, Some(&train_dir), false)?;

    let model = Checkpoint::load(&train_dir.join(BEST_CHECKPOINT))?.model()?;
    let mut held_out = data.bags_in(Split::Val);
    held_out.extend(data.bags_in(Split::Test));
    let slides = group_by_slide(held_out);
    let report = evaluate_slides(&model, &slides, &data.gene_ids, DEFAULT_ALPHA)?;
    write_eval_reports(&out.join("eval"), &report)?;

    let c = &report.classification;
    println!("{} slides, accuracy {:.3}, macro F1 {:.3}, micro AUC {:.3}", slides.len(), c.accuracy, c.f1_macro, c.micro_auc);
    println!("confusion {:?}", c.confusion);
    let g = &report.genes;
    println!(
        "mean r {:.3}, mean rho {:.3}, significant at {}: {} (Holm-Sidak) {} (Benjamini-Hochberg)",
        g.mean_pearson, g.mean_spearman, g.alpha, g.significant_hs, g.significant_bh
    );
    println!("MAE {}  RMSE {}  RRMSE {}", report.errors.mae, report.errors.rmse, report.errors.rrmse);
    println!("reports in {}", out.join("eval").display());
    Ok(())
}
