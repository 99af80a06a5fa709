//! Generates a planted synthetic dataset, writes it in the on-disk layout the
//! `train` subcommand reads, and prints the Bayes-oracle bag accuracy.
//!
//! cargo run --release --example synth_dataset -- [out_dir]

use std::path::PathBuf;

use trnasformer::bagging::Split;
use trnasformer::synth::{generate, oracle_bayes_accuracy, SynthSpec};

fn main() -> trnasformer::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("trna-synth"));
    let spec = SynthSpec {
        bags_per_slide: 20,
        ..SynthSpec::default()
    };
    let data = generate(&spec)?;
    data.write(&out)?;

    let m = &data.manifest;
    println!("wrote {} bags of {}x{} to {}", m.bag_count(), m.k, m.d, out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} slides", m.slides_in(split).count());
    }
    println!("{} genes kept after the median filter", data.gene_ids.len());

    let first = &data.bags[0][0];
    println!(
        "bag 0 of {}: label {}, target[0..3] {:?}",
        first.slide_id,
        first.label,
        &first.gene_target[..3]
    );

    let oracle = oracle_bayes_accuracy(&spec, 20_000, 1)?;
    println!(
        "bag-level Bayes accuracy {:.4} (95% CI {:.4}..{:.4})",
        oracle.accuracy, oracle.ci_low, oracle.ci_high
    );
    Ok(())
}
