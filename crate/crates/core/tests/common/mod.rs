//! Oracles shared by the integration tests. Checks return `Err` with a
//! description instead of panicking so the acceptance report can print them.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trnasformer::eval::search::{average_precision_at, precision_at, ranked_relevance, subset_map};
use trnasformer::eval::{ApNorm, SearchItem};
use trnasformer::numcore::Tensor;

pub type Check = std::result::Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

pub fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (r, c) = x.dims2().unwrap();
    Tensor::from_fn(&[r, c], |i| x.at(perm[i / c], i % c))
}

/// Lays 49 instances of 1024 values out as 7×7 blocks of 32×32 pixels and
/// applies a 32×32, stride-32 convolution whose kernel `j` is column `j` of
/// the projection.
pub fn block_conv(x: &Tensor<f64>, e: &Tensor<f64>) -> Tensor<f64> {
    let side = 224;
    let mut image = vec![0.0; side * side];
    for i in 0..49 {
        let (bi, bj) = (i / 7, i % 7);
        for u in 0..32 {
            for v in 0..32 {
                image[(bi * 32 + u) * side + bj * 32 + v] = x.at(i, u * 32 + v);
            }
        }
    }
    let width = e.cols();
    let mut out = Tensor::zeros(&[49, width]);
    for bi in 0..7 {
        for bj in 0..7 {
            for j in 0..width {
                let mut acc = 0.0;
                for u in 0..32 {
                    for v in 0..32 {
                        acc += image[(bi * 32 + u) * side + bj * 32 + v] * e.at(u * 32 + v, j);
                    }
                }
                out.set(bi * 7 + bj, j, acc);
            }
        }
    }
    out
}

/// Pearson r straight from the covariance formula.
pub fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Average ranks by counting: one plus the number of smaller values plus half
/// the number of other equal values.
pub fn counted_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// All label arrangements of `n` items over `classes` labels.
pub fn arrangements(n: usize, classes: usize) -> Vec<Vec<usize>> {
    (0..classes.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let c = code % classes;
                    code /= classes;
                    c
                })
                .collect()
        })
        .collect()
}

pub fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

pub fn correlation_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - direct_pearson(a, b)
}

/// The ranking of other-patient candidates, found by trying every order and
/// keeping the one whose distances never decrease (index breaks ties).
pub fn brute_ranking(items: &[SearchItem], q: usize) -> Vec<usize> {
    let cands: Vec<usize> = (0..items.len())
        .filter(|&j| items[j].patient != items[q].patient)
        .collect();
    let d = |j: usize| correlation_distance(&items[q].embedding, &items[j].embedding);
    permutations(&cands)
        .into_iter()
        .find(|p| {
            p.windows(2)
                .all(|w| d(w[0]) < d(w[1]) || (d(w[0]) == d(w[1]) && w[0] < w[1]))
        })
        .expect("some order is sorted")
}

/// AP@K from set counts: the hits among the first i results, for every
/// relevant position i ≤ K.
pub fn brute_ap(labels_ranked: &[bool], k: usize) -> f64 {
    let k = k.min(labels_ranked.len());
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 1..=k {
        if labels_ranked[i - 1] {
            let hits = labels_ranked.iter().take(i).filter(|&&r| r).count();
            total += hits as f64 / i as f64;
        }
    }
    total / k as f64
}

pub fn search_dataset(labels: &[usize], patients: &[usize], rng: &mut ChaCha8Rng) -> Vec<SearchItem> {
    labels
        .iter()
        .zip(patients)
        .enumerate()
        .map(|(i, (&l, &p))| SearchItem {
            slide_id: format!("s{i}"),
            patient: format!("p{p}"),
            label: l,
            embedding: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

/// Compares P@i, AP@K and MAP@K with enumeration on every 3-label dataset of
/// 2 to 6 slides, with distinct patients and with one shared patient.
pub fn search_enumeration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ks = [1, 2, 3, 5, 10];
    let mut checked = 0;
    for n in 2..=6 {
        for labels in arrangements(n, 3) {
            let distinct: Vec<usize> = (0..n).collect();
            let shared: Vec<usize> = (0..n).map(|i| if i == 1 { 0 } else { i }).collect();
            let variants = if n > 2 { vec![distinct, shared] } else { vec![distinct] };
            for pats in variants {
                let items = search_dataset(&labels, &pats, &mut rng);
                let mut sums = vec![0.0; ks.len()];
                for q in 0..n {
                    let order = brute_ranking(&items, q);
                    let rel: Vec<bool> = order.iter().map(|&j| items[j].label == items[q].label).collect();
                    ensure(ranked_relevance(&items, q) == rel, || format!("ranking differs for {labels:?} q={q}"))?;
                    for i in 1..=rel.len() {
                        let hits = order[..i].iter().filter(|&&j| items[j].label == items[q].label).count();
                        let p = precision_at(&rel, i);
                        ensure((p - hits as f64 / i as f64).abs() < 1e-12, || format!("P@{i} = {p} for {labels:?}"))?;
                    }
                    for (s, &k) in sums.iter_mut().zip(&ks) {
                        let ap = brute_ap(&rel, k);
                        let got = average_precision_at(&rel, k, ApNorm::K);
                        ensure((got - ap).abs() < 1e-12, || format!("AP@{k} = {got}, oracle {ap}"))?;
                        *s += ap;
                    }
                }
                let map = subset_map(&items, &ks, ApNorm::K).ok_or("subset_map refused two patients")?;
                for (m, s) in map.iter().zip(&sums) {
                    ensure((m - s / n as f64).abs() < 1e-12 && (0.0..=1.0).contains(m), || {
                        format!("MAP = {m}, oracle {}", s / n as f64)
                    })?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} datasets"))
}
