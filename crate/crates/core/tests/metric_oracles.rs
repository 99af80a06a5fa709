//! Retrieval metrics against brute-force enumeration on every small dataset.

mod common;

use trnasformer::eval::pearson_r;

#[test]
fn search_metrics_match_enumeration_for_all_small_datasets() {
    let detail = common::search_enumeration().unwrap();
    let n: usize = detail.split_whitespace().next().unwrap().parse().unwrap();
    assert!(n > 2000, "{detail}");
}

#[test]
fn pearson_distance_ranking_agrees_with_correlation() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [1.0, 2.1, 2.9, 4.2];
    let r = pearson_r(&a, &b).unwrap();
    assert!((common::correlation_distance(&a, &b) - (1.0 - r)).abs() < 1e-12);
}
