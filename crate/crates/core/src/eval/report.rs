//! Report files written by `eval` and `search`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{EvalReport, SearchReport};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const GENES_FILE: &str = "genes.csv";
pub const SLIDES_FILE: &str = "slides.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const PCA_BAGS_FILE: &str = "pca_bags.csv";
pub const PCA_SLIDES_FILE: &str = "pca_slides.csv";
pub const SEARCH_FILE: &str = "search.json";

#[derive(Serialize)]
struct GeneCsvRow<'a> {
    gene_id: &'a str,
    pearson_r: Option<f64>,
    pearson_p: Option<f64>,
    spearman_rho: Option<f64>,
    spearman_p: Option<f64>,
    significant_hs: bool,
    significant_bh: bool,
    mae: Option<f64>,
    rmse: Option<f64>,
    rrmse: Option<f64>,
}

#[derive(Serialize)]
struct SlideCsvRow<'a> {
    slide_id: &'a str,
    case_id: &'a str,
    label: usize,
    predicted: usize,
    bags: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    slides: usize,
    bag_accuracy: f64,
    accuracy: f64,
    f1_macro: f64,
    f1_weighted: f64,
    micro_auc: f64,
    mean_pearson: f64,
    mean_spearman: f64,
    undefined_correlations: usize,
    alpha: f64,
    significant_hs: usize,
    significant_bh: usize,
    /// `mean ± std` across genes.
    mae: String,
    rmse: String,
    rrmse: String,
    excluded_from_errors: &'a [String],
    report: &'a EvalReport,
}

fn csv_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn json_file(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the evaluation report files into `dir`.
pub fn write_eval_reports(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &report.classification;
    json_file(
        &dir.join(REPORT_FILE),
        &Summary {
            slides: report.slides.len(),
            bag_accuracy: report.bag_accuracy,
            accuracy: c.accuracy,
            f1_macro: c.f1_macro,
            f1_weighted: c.f1_weighted,
            micro_auc: c.micro_auc,
            mean_pearson: report.genes.mean_pearson,
            mean_spearman: report.genes.mean_spearman,
            undefined_correlations: report.genes.undefined,
            alpha: report.genes.alpha,
            significant_hs: report.genes.significant_hs,
            significant_bh: report.genes.significant_bh,
            mae: report.errors.mae.to_string(),
            rmse: report.errors.rmse.to_string(),
            rrmse: report.errors.rrmse.to_string(),
            excluded_from_errors: &report.errors.excluded,
            report,
        },
    )?;
    csv_rows(
        &dir.join(GENES_FILE),
        report.genes.rows.iter().map(|r| {
            let e = report.errors.genes.iter().find(|e| e.gene_id == r.gene_id);
            GeneCsvRow {
                gene_id: &r.gene_id,
                pearson_r: r.pearson_r,
                pearson_p: r.pearson_p,
                spearman_rho: r.spearman_rho,
                spearman_p: r.spearman_p,
                significant_hs: r.significant_hs,
                significant_bh: r.significant_bh,
                mae: e.map(|e| e.mae),
                rmse: e.map(|e| e.rmse),
                rrmse: e.map(|e| e.rrmse),
            }
        }),
    )?;
    csv_rows(
        &dir.join(SLIDES_FILE),
        report.slides.iter().map(|s| SlideCsvRow {
            slide_id: &s.slide_id,
            case_id: &s.case_id,
            label: s.label,
            predicted: s.predicted,
            bags: s.bag_votes.len(),
        }),
    )?;
    let classes = c.confusion.len();
    let mut header = vec!["truth".to_string()];
    header.extend((0..classes).map(|j| format!("pred_{j}")));
    let rows: Vec<Vec<String>> = c
        .confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            std::iter::once(i.to_string())
                .chain(row.iter().map(|v| v.to_string()))
                .collect()
        })
        .collect();
    csv_records(&dir.join(CONFUSION_FILE), &header, &rows)?;
    csv_rows(&dir.join(ROC_FILE), &c.micro_roc)?;
    if let Some(pca) = &report.pca {
        csv_rows(&dir.join(PCA_BAGS_FILE), &pca.bags)?;
        csv_rows(&dir.join(PCA_SLIDES_FILE), &pca.slides)?;
    }
    Ok(())
}

pub fn write_search_report(dir: &Path, report: &SearchReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    json_file(&dir.join(SEARCH_FILE), report)
}
