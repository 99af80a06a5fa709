//! Slide retrieval with the class-token embedding: every query ranks the
//! slides of other patients by correlation distance, and MAP@K is averaged
//! over random draws of one bag per slide.
//!
//! cargo run --release --example slide_search

use trnasformer::bagging::Split;
use trnasformer::eval::{group_by_slide, search_slides, ApNorm};
use trnasformer::model::{Model, ModelConfig};
use trnasformer::synth::{generate, SynthSpec};
use trnasformer::train::{train, TrainConfig};

fn main() -> trnasformer::Result<()> {
    let spec = SynthSpec {
        slides_per_class: 12,
        bags_per_slide: 10,
        d: 16,
        genes: 8,
        ..SynthSpec::default()
    };
    let data = generate(&spec)?;
    let config = ModelConfig {
        width: 16,
        ..ModelConfig::desk(spec.d, data.gene_ids.len(), spec.classes)
    };
    let untrained = Model::new(config.clone(), 0)?;
    let tc = TrainConfig {
        epochs: 6,
        batch: 16,
        ..TrainConfig::desk()
    };
    let trained = train(untrained.clone(), &data.bags_in(Split::Train), &data.bags_in(Split::Val), tc, None, false)?
        .best
        .model()?;

    let slides = group_by_slide(data.bags_in(Split::Train));
    let ks = [1, 5, 10];
    for (name, model) in [("untrained", &untrained), ("trained", &trained)] {
        let report = search_slides(model, &slides, 50, &ks, ApNorm::K, 3)?;
        let maps: Vec<String> = ks.iter().zip(&report.map).map(|(k, m)| format!("MAP@{k} {m:.3}")).collect();
        println!("{name:<10} {}", maps.join("  "));
    }
    Ok(())
}
