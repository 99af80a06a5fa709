//! Expression preprocessing: ingest per-case files, drop genes whose median
//! over cases is zero, apply log10(1 + a), then split cases by label.
//!
//! cargo run --release --example gene_pipeline

use trnasformer::genes::{filter_median_zero, ingest_case_files, log_transform, split_cases, DEFAULT_FRACTIONS};

fn main() -> trnasformer::Result<()> {
    let raw = [
        ("TCGA-01", "GENE_A\t0\nGENE_B\t9\nGENE_C\t99\n"),
        ("TCGA-02", "GENE_A\t0\nGENE_B\t0\nGENE_C\t999\n"),
        ("TCGA-03", "GENE_A\t5\nGENE_B\t1\nGENE_C\t9\n"),
        ("TCGA-04", "GENE_C\t0\nGENE_B\t3\nGENE_A\t0\n"),
    ];
    let files: Vec<(String, String)> = raw.iter().map(|(c, t)| (c.to_string(), t.to_string())).collect();
    let table = ingest_case_files(&files)?;
    println!("{} genes x {} cases", table.n_genes(), table.n_cases());

    let kept = filter_median_zero(&table)?;
    println!("kept {:?}, dropped {:?}", kept.gene_ids, kept.dropped);

    let logged = log_transform(&kept)?;
    for (g, id) in logged.gene_ids.iter().enumerate() {
        println!("{id}: {:?}", logged.column(g));
    }
    // the filter only accepts raw values
    assert!(filter_median_zero(&logged).is_err());
    print!("{}", logged.to_matrix_tsv());

    let labels: Vec<(String, u32)> = (0..40).map(|i| (format!("CASE-{i:02}"), (i % 3) as u32)).collect();
    let split = split_cases(&labels, DEFAULT_FRACTIONS, 7)?;
    let mut counts = std::collections::BTreeMap::new();
    for s in split.assignment.values() {
        *counts.entry(format!("{s:?}")).or_insert(0) += 1;
    }
    println!("case split {counts:?}");
    Ok(())
}
