//! Leave-one-patient-out slide retrieval scored by MAP@K.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::pearson_r;
use crate::error::{bail, Result};

/// One slide in a search subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchItem {
    pub slide_id: String,
    pub patient: String,
    pub label: usize,
    pub embedding: Vec<f64>,
}

/// Normaliser of AP@K.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApNorm {
    /// `1/K`.
    #[default]
    K,
    /// `1/min(K, number of relevant candidates)`.
    Relevant,
}

/// `1 − r` between two embeddings. Constant embeddings have no defined
/// correlation and sit at distance 1.
pub fn pearson_distance(a: &[f64], b: &[f64]) -> f64 {
    match pearson_r(a, b) {
        Ok(r) => 1.0 - r,
        Err(_) => 1.0,
    }
}

pub fn precision_at(relevant: &[bool], i: usize) -> f64 {
    relevant[..i].iter().filter(|&&r| r).count() as f64 / i as f64
}

/// `(1/K) Σ_{i≤K} P@i · rel_i`, with `K` truncated to the ranked list length.
pub fn average_precision_at(relevant: &[bool], k: usize, norm: ApNorm) -> f64 {
    let k = k.min(relevant.len());
    if k == 0 {
        return 0.0;
    }
    let sum: f64 = (1..=k)
        .filter(|&i| relevant[i - 1])
        .map(|i| precision_at(relevant, i))
        .sum();
    let denom = match norm {
        ApNorm::K => k,
        ApNorm::Relevant => k.min(relevant.iter().filter(|&&r| r).count()),
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

/// Relevance of the candidates of `query` ranked by distance; slides of the
/// query's own patient are excluded. Ties keep subset order.
pub fn ranked_relevance(items: &[SearchItem], query: usize) -> Vec<bool> {
    let q = &items[query];
    let mut cands: Vec<(f64, usize)> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| it.patient != q.patient)
        .map(|(j, it)| (pearson_distance(&q.embedding, &it.embedding), j))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.iter().map(|&(_, j)| items[j].label == q.label).collect()
}

/// MAP@K of one subset for every `K`, or `None` when the subset holds a
/// single patient.
pub fn subset_map(items: &[SearchItem], ks: &[usize], norm: ApNorm) -> Option<Vec<f64>> {
    let first = items.first()?;
    if items.iter().all(|it| it.patient == first.patient) {
        return None;
    }
    let mut sums = vec![0.0; ks.len()];
    for q in 0..items.len() {
        let rel = ranked_relevance(items, q);
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += average_precision_at(&rel, k, norm);
        }
    }
    Some(sums.into_iter().map(|s| s / items.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub ks: Vec<usize>,
    pub map: Vec<f64>,
    /// Per-subset MAP@K, one row per scored subset.
    pub per_subset: Vec<Vec<f64>>,
    pub skipped: usize,
    pub norm: ApNorm,
}

pub fn search_eval(subsets: &[Vec<SearchItem>], ks: &[usize], norm: ApNorm) -> Result<SearchReport> {
    if ks.is_empty() || ks.contains(&0) {
        bail!(Config, "K values must be positive, got {ks:?}");
    }
    let mut per_subset = Vec::new();
    let mut skipped = 0;
    for (i, s) in subsets.iter().enumerate() {
        match subset_map(s, ks, norm) {
            Some(m) => per_subset.push(m),
            None => {
                warn!("search subset {i} has fewer than two patients; skipped");
                skipped += 1;
            }
        }
    }
    if per_subset.is_empty() {
        bail!(Input, "no search subset has two or more patients");
    }
    let map = (0..ks.len())
        .map(|j| per_subset.iter().map(|m| m[j]).sum::<f64>() / per_subset.len() as f64)
        .collect();
    Ok(SearchReport {
        ks: ks.to_vec(),
        map,
        per_subset,
        skipped,
        norm,
    })
}

/// Candidate embeddings of one slide: one per bag.
#[derive(Clone, Debug)]
pub struct SlideEmbeddings {
    pub slide_id: String,
    pub patient: String,
    pub label: usize,
    pub bags: Vec<Vec<f64>>,
}

/// Builds `count` subsets, each holding one randomly chosen bag embedding per
/// slide.
pub fn draw_subsets(slides: &[SlideEmbeddings], count: usize, seed: u64) -> Result<Vec<Vec<SearchItem>>> {
    if let Some(s) = slides.iter().find(|s| s.bags.is_empty()) {
        bail!(Input, "slide {} has no bag embeddings", s.slide_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            slides
                .iter()
                .map(|s| SearchItem {
                    slide_id: s.slide_id.clone(),
                    patient: s.patient.clone(),
                    label: s.label,
                    embedding: s.bags[rng.random_range(0..s.bags.len())].clone(),
                })
                .collect()
        })
        .collect())
}
