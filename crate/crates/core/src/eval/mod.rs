//! Evaluation: per-gene correlations with multiple-testing correction,
//! prediction errors, slide-level classification by majority vote, PCA of
//! slide representations and leave-one-patient-out retrieval.

mod classify;
mod errors;
mod pca;
mod report;
pub mod search;
mod stats;

pub use classify::{
    classification_report, roc_curve, slide_vote, ClassMetrics, ClassificationReport, RocPoint,
};
pub use errors::{prediction_errors, ErrorReport, GeneError, MeanStd};
pub use pca::{group_means, pca_project, Pca};
pub use report::*;
pub use search::{search_eval, ApNorm, SearchItem, SearchReport, SlideEmbeddings};
pub use stats::{
    adjust_pvalues, average_ranks, correlation_p_value, pearson, pearson_r, spearman,
    student_t_two_sided, Correction, Correlation, Significance, DEFAULT_ALPHA,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagging::Bag;
use crate::error::{bail, Error, Result};
use crate::model::{Model, Prediction};
use crate::numcore::Tensor;

/// All bags of one slide.
#[derive(Clone, Debug)]
pub struct SlideBags {
    pub slide_id: String,
    pub case_id: String,
    pub label: usize,
    pub bags: Vec<Bag>,
}

/// Groups bags by slide in order of first appearance.
pub fn group_by_slide(bags: Vec<Bag>) -> Vec<SlideBags> {
    let mut out: Vec<SlideBags> = Vec::new();
    for bag in bags {
        match out.iter_mut().find(|s| s.slide_id == bag.slide_id) {
            Some(s) => s.bags.push(bag),
            None => out.push(SlideBags {
                slide_id: bag.slide_id.clone(),
                case_id: bag.case_id.clone(),
                label: bag.label as usize,
                bags: vec![bag],
            }),
        }
    }
    out
}

/// Eval-mode predictions for every bag, in input order.
pub fn predict_bags(model: &Model<f32>, bags: &[Bag]) -> Result<Vec<Prediction<f32>>> {
    bags.par_iter().map(|b| model.predict(&b.instances)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub slide_id: String,
    pub case_id: String,
    pub label: usize,
    pub predicted: usize,
    /// Mean bag softmax.
    pub scores: Vec<f64>,
    /// Mean of the bag gene predictions.
    pub genes_pred: Vec<f64>,
    pub genes_true: Vec<f64>,
    pub bag_votes: Vec<usize>,
    /// Class token representation of every bag.
    #[serde(skip)]
    pub bag_embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneEvalRow {
    pub gene_id: String,
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub spearman_p: Option<f64>,
    pub significant_hs: bool,
    pub significant_bh: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneReport {
    pub rows: Vec<GeneEvalRow>,
    /// Mean over genes with a defined correlation.
    pub mean_pearson: f64,
    pub mean_spearman: f64,
    pub undefined: usize,
    pub alpha: f64,
    pub significant_hs: usize,
    pub significant_bh: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub slide_id: String,
    pub label: usize,
    /// Bag index within the slide; `None` for the per-slide mean.
    pub bag: Option<usize>,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub bags: Vec<PcaPoint>,
    pub slides: Vec<PcaPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slides: Vec<SlideSummary>,
    pub bag_accuracy: f64,
    pub classification: ClassificationReport,
    pub genes: GeneReport,
    pub errors: ErrorReport,
    pub pca: Option<PcaReport>,
}

fn mean_rows(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Per-slide summaries from bag predictions.
pub fn summarize_slides(model: &Model<f32>, slides: &[SlideBags]) -> Result<Vec<SlideSummary>> {
    slides
        .iter()
        .map(|s| {
            if s.bags.is_empty() {
                bail!(Input, "slide {} has no bags", s.slide_id);
            }
            let preds = predict_bags(model, &s.bags)?;
            let votes: Vec<usize> = preds.iter().map(|p| p.class()).collect();
            Ok(SlideSummary {
                slide_id: s.slide_id.clone(),
                case_id: s.case_id.clone(),
                label: s.label,
                predicted: slide_vote(&votes)?,
                scores: mean_rows(preds.iter().map(|p| to_f64(&p.probs))),
                genes_pred: mean_rows(preds.iter().map(|p| to_f64(&p.genes))),
                genes_true: to_f64(&s.bags[0].gene_target),
                bag_votes: votes,
                bag_embeddings: preds.iter().map(|p| to_f64(&p.c)).collect(),
            })
        })
        .collect()
}

/// Correlation and significance per gene across slides.
pub fn gene_report(
    pred: &Tensor<f64>,
    truth: &Tensor<f64>,
    gene_ids: &[String],
    alpha: f64,
) -> Result<GeneReport> {
    let (n, g) = truth.dims2()?;
    if pred.shape() != truth.shape() || gene_ids.len() != g {
        bail!(Dimension, "gene report shapes disagree");
    }
    let column = |t: &Tensor<f64>, j: usize| (0..n).map(|i| t.at(i, j)).collect::<Vec<_>>();
    let mut rows: Vec<GeneEvalRow> = (0..g)
        .into_par_iter()
        .map(|j| {
            let (x, y) = (column(pred, j), column(truth, j));
            let defined = |r: Result<Correlation>| match r {
                Ok(c) => Ok(Some(c)),
                Err(Error::UndefinedCorrelation(_)) => Ok(None),
                Err(e) => Err(e),
            };
            let p = defined(pearson(&x, &y))?;
            let s = defined(spearman(&x, &y))?;
            Ok(GeneEvalRow {
                gene_id: gene_ids[j].clone(),
                pearson_r: p.map(|c| c.r),
                pearson_p: p.map(|c| c.p),
                spearman_rho: s.map(|c| c.r),
                spearman_p: s.map(|c| c.p),
                significant_hs: false,
                significant_bh: false,
            })
        })
        .collect::<Result<_>>()?;
    let pvals: Vec<f64> = rows.iter().map(|r| r.pearson_p.unwrap_or(1.0)).collect();
    let hs = adjust_pvalues(&pvals, Correction::HolmSidak, alpha)?;
    let bh = adjust_pvalues(&pvals, Correction::BenjaminiHochberg, alpha)?;
    for (i, r) in rows.iter_mut().enumerate() {
        r.significant_hs = hs.rejected[i];
        r.significant_bh = bh.rejected[i];
    }
    let mean_of = |f: fn(&GeneEvalRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(GeneReport {
        mean_pearson: mean_of(|r| r.pearson_r),
        mean_spearman: mean_of(|r| r.spearman_rho),
        undefined: rows.iter().filter(|r| r.pearson_r.is_none()).count(),
        alpha,
        significant_hs: hs.count,
        significant_bh: bh.count,
        rows,
    })
}

fn pca_report(slides: &[SlideSummary]) -> Result<Option<PcaReport>> {
    let rows: Vec<&Vec<f64>> = slides.iter().flat_map(|s| &s.bag_embeddings).collect();
    let width = rows.first().map_or(0, |r| r.len());
    if rows.len() < 2 || width < 2 {
        return Ok(None);
    }
    let x = Tensor::from_fn(&[rows.len(), width], |i| rows[i / width][i % width]);
    let pca = pca_project(&x, 2)?;
    let mut bags = Vec::with_capacity(rows.len());
    let mut groups = Vec::with_capacity(rows.len());
    for s in slides {
        for b in 0..s.bag_embeddings.len() {
            let p = pca.projections.row(bags.len());
            bags.push(PcaPoint {
                slide_id: s.slide_id.clone(),
                label: s.label,
                bag: Some(b),
                pc1: p[0],
                pc2: p[1],
            });
            groups.push(s.slide_id.clone());
        }
    }
    let slide_points = group_means(&pca.projections, &groups)?
        .into_iter()
        .zip(slides)
        .map(|((id, m), s)| PcaPoint {
            slide_id: id,
            label: s.label,
            bag: None,
            pc1: m[0],
            pc2: m[1],
        })
        .collect();
    Ok(Some(PcaReport {
        explained_variance: pca.explained_variance,
        explained_ratio: pca.explained_ratio,
        bags,
        slides: slide_points,
    }))
}

/// Full report for a set of slides. Correlations and errors are computed
/// across slides on slide-level gene predictions (mean over bags).
pub fn evaluate_slides(
    model: &Model<f32>,
    slides: &[SlideBags],
    gene_ids: &[String],
    alpha: f64,
) -> Result<EvalReport> {
    if slides.is_empty() {
        bail!(Input, "no slides to evaluate");
    }
    if gene_ids.len() != model.config.genes {
        bail!(
            Dimension,
            "{} gene ids for a model predicting {} genes",
            gene_ids.len(),
            model.config.genes
        );
    }
    let summaries = summarize_slides(model, slides)?;
    let classes = model.config.classes;
    let classification = classification_report(
        &summaries.iter().map(|s| s.predicted).collect::<Vec<_>>(),
        &summaries.iter().map(|s| s.label).collect::<Vec<_>>(),
        &summaries.iter().map(|s| s.scores.clone()).collect::<Vec<_>>(),
        classes,
    )?;
    let (votes, correct) = summaries.iter().fold((0, 0), |(n, c), s| {
        (
            n + s.bag_votes.len(),
            c + s.bag_votes.iter().filter(|&&v| v == s.label).count(),
        )
    });
    let n = summaries.len();
    let g = gene_ids.len();
    let pred = Tensor::from_fn(&[n, g], |i| summaries[i / g].genes_pred[i % g]);
    let truth = Tensor::from_fn(&[n, g], |i| summaries[i / g].genes_true[i % g]);
    let (genes, errors) = if n >= 3 {
        (
            gene_report(&pred, &truth, gene_ids, alpha)?,
            prediction_errors(&pred, &truth, gene_ids)?,
        )
    } else {
        bail!(Input, "gene metrics need at least 3 slides, got {n}");
    };
    let pca = pca_report(&summaries)?;
    Ok(EvalReport {
        bag_accuracy: correct as f64 / votes as f64,
        slides: summaries,
        classification,
        genes,
        errors,
        pca,
    })
}

/// Retrieval over `subsets` random draws of one bag per slide.
pub fn search_slides(
    model: &Model<f32>,
    slides: &[SlideBags],
    subsets: usize,
    ks: &[usize],
    norm: ApNorm,
    seed: u64,
) -> Result<SearchReport> {
    let embeddings: Vec<SlideEmbeddings> = slides
        .iter()
        .map(|s| {
            Ok(SlideEmbeddings {
                slide_id: s.slide_id.clone(),
                patient: s.case_id.clone(),
                label: s.label,
                bags: predict_bags(model, &s.bags)?
                    .iter()
                    .map(|p| to_f64(&p.c))
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    let draws = search::draw_subsets(&embeddings, subsets, seed)?;
    search_eval(&draws, ks, norm)
}
