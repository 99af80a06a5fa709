use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims×D`, one principal axis per row, largest variance first.
    pub components: Tensor<f64>,
    /// Variance along each axis (covariance eigenvalues, `n − 1` normalised).
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// `n×dims`.
    pub projections: Tensor<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.components.rows())
            .map(|i| {
                self.components
                    .row(i)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(c, (v, m))| c * (v - m))
                    .sum()
            })
            .collect()
    }
}

/// Projects the rows of `x` onto the top `dims` eigenvectors of their
/// covariance. Each axis is signed so its largest-magnitude entry is positive.
pub fn pca_project(x: &Tensor<f64>, dims: usize) -> Result<Pca> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        bail!(Input, "PCA needs at least 2 rows, got {n}");
    }
    if dims == 0 || dims > d {
        bail!(Config, "cannot keep {dims} of {d} dimensions");
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d, |i, j| x.at(i, j) - mean[j]);
    let cov = (centred.transpose() * &centred) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Tensor::zeros(&[dims, d]);
    let mut explained_variance = Vec::with_capacity(dims);
    for (r, &k) in order.iter().take(dims).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(r, j, sign * v[j]);
        }
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    let explained_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let mut pca = Pca {
        mean,
        components,
        explained_variance,
        explained_ratio,
        projections: Tensor::zeros(&[n, dims]),
    };
    for i in 0..n {
        let p = pca.project(x.row(i));
        pca.projections.row_mut(i).copy_from_slice(&p);
    }
    Ok(pca)
}

/// Mean projection of each group, in order of first appearance.
pub fn group_means(projections: &Tensor<f64>, groups: &[String]) -> Result<Vec<(String, Vec<f64>)>> {
    let (n, dims) = projections.dims2()?;
    if groups.len() != n {
        bail!(Dimension, "{} group labels for {n} rows", groups.len());
    }
    let mut out: Vec<(String, Vec<f64>, usize)> = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let idx = match out.iter().position(|o| &o.0 == g) {
            Some(p) => p,
            None => {
                out.push((g.clone(), vec![0.0; dims], 0));
                out.len() - 1
            }
        };
        for (a, &v) in out[idx].1.iter_mut().zip(projections.row(i)) {
            *a += v;
        }
        out[idx].2 += 1;
    }
    Ok(out
        .into_iter()
        .map(|(g, s, c)| (g, s.into_iter().map(|v| v / c as f64).collect()))
        .collect())
}
