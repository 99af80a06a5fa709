use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value of the t-test for zero correlation.
    pub p: f64,
}

/// Two-sided p-value of a correlation `r` over `n` pairs, from
/// `t = r·√((n−2)/(1−r²))` with `n − 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    student_t_two_sided(t2, df)
}

/// `P(|T| ≥ t)` for Student's t with `df` degrees of freedom, given `t²`.
pub fn student_t_two_sided(t2: f64, df: f64) -> f64 {
    beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        bail!(Dimension, "correlation of {} and {} values", x.len(), y.len());
    }
    if x.len() < 3 {
        bail!(Input, "correlation needs at least 3 pairs, got {}", x.len());
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        bail!(Input, "non-finite value in correlation input");
    }
    Ok(())
}

/// Sample Pearson correlation (two-pass, centred sums).
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the inputs has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let r = pearson_r(x, y)?;
    Ok(Correlation {
        r,
        p: correlation_p_value(r, x.len()),
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks, with the same t-based p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    /// Holm–Šidák step-down.
    HolmSidak,
    /// Benjamini–Hochberg step-up.
    BenjaminiHochberg,
}

/// Rejection flags in input order and their count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub rejected: Vec<bool>,
    pub count: usize,
}

pub const DEFAULT_ALPHA: f64 = 0.01;

pub fn adjust_pvalues(p: &[f64], method: Correction, alpha: f64) -> Result<Significance> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!(Input, "p-value {v} outside [0, 1]");
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let count = match method {
        Correction::HolmSidak => order
            .iter()
            .enumerate()
            .take_while(|&(i, &j)| {
                let remaining = (m - i) as f64;
                p[j] <= 1.0 - (1.0 - alpha).powf(1.0 / remaining)
            })
            .count(),
        Correction::BenjaminiHochberg => order
            .iter()
            .enumerate()
            .filter(|&(i, &j)| p[j] <= (i + 1) as f64 * alpha / m as f64)
            .map(|(i, _)| i + 1)
            .max()
            .unwrap_or(0),
    };
    let mut rejected = vec![false; m];
    for &j in &order[..count] {
        rejected[j] = true;
    }
    Ok(Significance { rejected, count })
}
