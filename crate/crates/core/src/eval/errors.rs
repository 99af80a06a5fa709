use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneError {
    pub gene_id: String,
    pub mae: f64,
    pub rmse: f64,
    pub rrmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub genes: Vec<GeneError>,
    /// Genes with constant truth, for which the relative error is undefined.
    pub excluded: Vec<String>,
    pub mae: MeanStd,
    pub rmse: MeanStd,
    pub rrmse: MeanStd,
}

/// Per-gene MAE, RMSE and RRMSE over the samples (rows) of `pred` and
/// `truth`, where RRMSE divides the squared error by the squared deviation of
/// the truth from its mean over the same samples.
pub fn prediction_errors(
    pred: &Tensor<f64>,
    truth: &Tensor<f64>,
    gene_ids: &[String],
) -> Result<ErrorReport> {
    let (n, g) = truth.dims2()?;
    if pred.shape() != truth.shape() {
        bail!(
            Dimension,
            "predictions {:?} against truth {:?}",
            pred.shape(),
            truth.shape()
        );
    }
    if gene_ids.len() != g {
        bail!(Dimension, "{} gene ids for {g} columns", gene_ids.len());
    }
    if n < 2 {
        bail!(Input, "prediction errors need at least 2 samples");
    }
    let mut genes = Vec::with_capacity(g);
    let mut excluded = Vec::new();
    for j in 0..g {
        let mean = (0..n).map(|i| truth.at(i, j)).sum::<f64>() / n as f64;
        let (mut abs, mut sq, mut base) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let e = pred.at(i, j) - truth.at(i, j);
            abs += e.abs();
            sq += e * e;
            base += (truth.at(i, j) - mean).powi(2);
        }
        if base == 0.0 {
            warn!("gene {} has constant truth; excluded from error report", gene_ids[j]);
            excluded.push(gene_ids[j].clone());
            continue;
        }
        genes.push(GeneError {
            gene_id: gene_ids[j].clone(),
            mae: abs / n as f64,
            rmse: (sq / n as f64).sqrt(),
            rrmse: (sq / base).sqrt(),
        });
    }
    let col = |f: fn(&GeneError) -> f64| MeanStd::of(&genes.iter().map(f).collect::<Vec<_>>());
    Ok(ErrorReport {
        mae: col(|e| e.mae),
        rmse: col(|e| e.rmse),
        rrmse: col(|e| e.rrmse),
        genes,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        let r = prediction_errors(&col(&[1.0, 3.0]), &col(&[2.0, 5.0]), &["g".into()]).unwrap();
        let e = &r.genes[0];
        assert!((e.mae - 1.5).abs() < 1e-12);
        assert!((e.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((e.rrmse - (5.0f64 / 4.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_and_mean_predictions() {
        let t = col(&[1.0, 4.0, 2.0]);
        let r = prediction_errors(&t, &t, &["g".into()]).unwrap();
        assert_eq!((r.genes[0].mae, r.genes[0].rmse, r.genes[0].rrmse), (0.0, 0.0, 0.0));
        let r = prediction_errors(&col(&[7.0 / 3.0; 3]), &t, &["g".into()]).unwrap();
        assert!((r.genes[0].rrmse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_truth_is_excluded() {
        let truth = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 3.0]]);
        let pred = Tensor::zeros(&[2, 2]);
        let r = prediction_errors(&pred, &truth, &["flat".into(), "ok".into()]).unwrap();
        assert_eq!(r.excluded, vec!["flat"]);
        assert_eq!(r.genes.len(), 1);
    }

    #[test]
    fn summary_format() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.to_string(), "2.0000 ± 1.0000");
    }

    proptest! {
        #[test]
        fn rmse_bounds_mae(
            p in prop::collection::vec(-10.0f64..10.0, 8),
            t in prop::collection::vec(-10.0f64..10.0, 8),
        ) {
            let r = prediction_errors(&col(&p), &col(&t), &["g".into()]).unwrap();
            for e in &r.genes {
                prop_assert!(e.rmse + 1e-12 >= e.mae && e.mae >= 0.0 && e.rrmse >= 0.0);
            }
        }
    }
}
