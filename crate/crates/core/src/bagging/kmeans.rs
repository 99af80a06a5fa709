//! Lloyd's k-means over tile coordinates, and the spatial ordering of the
//! resulting clusters.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tissue::TileCoord;
use crate::error::{bail, Result};

pub const DEFAULT_K: usize = 49;
pub const MAX_ITERATIONS: usize = 300;

/// How clusters are ordered before one tile per cluster is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SortKey {
    /// Euclidean norm of the center measured from the image origin.
    #[default]
    OriginNorm,
    /// Euclidean norm measured from the mean of all centers.
    CentroidNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// `(row, col)` of every center, indexed by cluster.
    pub centers: Vec<[f64; 2]>,
    /// Tile indices (into the clustered coordinate list) of every cluster.
    pub members: Vec<Vec<usize>>,
    /// Cluster indices in ascending sort-key order.
    pub sorted_order: Vec<usize>,
    /// Within-cluster sum of squared distances after each assignment step.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn cost(&self) -> f64 {
        self.cost_trace.last().copied().unwrap_or(0.0)
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dr, dc) = (a[0] - b[0], a[1] - b[1]);
    dr * dr + dc * dc
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest(point: [f64; 2], centers: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centers.iter().enumerate() {
        let d = dist2(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Sum of squared distances of every point to its assigned center.
pub fn objective(points: &[[f64; 2]], centers: &[[f64; 2]], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(&p, &l)| dist2(p, centers[l]))
        .sum()
}

fn kmeans_pp(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => points[w.sample(rng)],
            // every remaining point coincides with a center
            Err(_) => points[rng.random_range(0..points.len())],
        };
        centers.push(next);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, next));
        }
    }
    centers
}

/// Gives every empty cluster the point farthest from the center of the
/// currently largest cluster.
fn repair_empty(points: &[[f64; 2]], centers: &mut [[f64; 2]], labels: &mut [usize]) {
    let k = centers.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                dist2(points[a], centers[largest])
                    .total_cmp(&dist2(points[b], centers[largest]))
                    .then(b.cmp(&a))
            })
            .unwrap();
        labels[far] = empty;
        centers[empty] = points[far];
    }
}

fn update_centers(points: &[[f64; 2]], labels: &[usize], centers: &mut [[f64; 2]]) {
    let k = centers.len();
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (&p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            centers[c] = [sums[c][0] / n, sums[c][1] / n];
        }
    }
}

/// Plain Lloyd iterations from k-means++ seeds. Returns centers, labels,
/// the per-iteration cost and whether assignments stabilized.
pub fn lloyd(
    points: &[[f64; 2]],
    k: usize,
    max_iter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[f64; 2]>, Vec<usize>, Vec<f64>, bool)> {
    if points.is_empty() {
        bail!(Input, "k-means over zero points");
    }
    if k == 0 || k > points.len() {
        bail!(Input, "k={k} for {} points", points.len());
    }
    let mut centers = kmeans_pp(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|&p| nearest(p, &centers)).collect();
    repair_empty(points, &mut centers, &mut labels);
    let mut trace = vec![objective(points, &centers, &labels)];
    let mut converged = false;
    for _ in 0..max_iter {
        update_centers(points, &labels, &mut centers);
        let mut next: Vec<usize> = points.iter().map(|&p| nearest(p, &centers)).collect();
        repair_empty(points, &mut centers, &mut next);
        let cost = objective(points, &centers, &next);
        let stable = next == labels;
        labels = next;
        trace.push(cost);
        if stable {
            converged = true;
            break;
        }
    }
    Ok((centers, labels, trace, converged))
}

/// Clusters tile coordinates into exactly `k` non-empty groups.
///
/// With fewer tiles than clusters, tiles are reused (drawn with replacement)
/// so that every cluster still holds one tile.
pub fn cluster_tiles(coords: &[TileCoord], k: usize, seed: u64) -> Result<ClusterAssignment> {
    cluster_tiles_with(coords, k, seed, SortKey::default())
}

pub fn cluster_tiles_with(
    coords: &[TileCoord],
    k: usize,
    seed: u64,
    key: SortKey,
) -> Result<ClusterAssignment> {
    if coords.is_empty() {
        bail!(Input, "no tiles to cluster");
    }
    if k == 0 {
        bail!(Input, "k must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f64; 2]> = coords.iter().map(TileCoord::point).collect();

    let mut unique = points.clone();
    unique.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    unique.dedup();

    let (centers, members, trace, converged) = if unique.len() <= k {
        if points.len() < k {
            warn!(
                "{} tiles for {k} clusters; reusing tiles with replacement",
                points.len()
            );
        }
        // one cluster per tile, topped up with resampled tiles
        let mut picks: Vec<usize> = (0..points.len()).collect();
        picks.shuffle(&mut rng);
        picks.truncate(k);
        while picks.len() < k {
            picks.push(rng.random_range(0..points.len()));
        }
        let centers: Vec<[f64; 2]> = picks.iter().map(|&i| points[i]).collect();
        let members = picks.iter().map(|&i| vec![i]).collect();
        (centers, members, vec![0.0], true)
    } else {
        let (centers, labels, trace, converged) = lloyd(&points, k, MAX_ITERATIONS, &mut rng)?;
        if !converged {
            warn!("k-means stopped after {MAX_ITERATIONS} iterations without converging");
        }
        let mut members = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        (centers, members, trace, converged)
    };
    let sorted_order = sort_clusters_with(&centers, key);
    Ok(ClusterAssignment {
        centers,
        members,
        sorted_order,
        cost_trace: trace,
        converged,
    })
}

/// Permutation ordering centers by ascending distance from the origin; ties
/// go to the lexicographically smaller `(row, col)`.
pub fn sort_clusters(centers: &[[f64; 2]]) -> Vec<usize> {
    sort_clusters_with(centers, SortKey::OriginNorm)
}

pub fn sort_clusters_with(centers: &[[f64; 2]], key: SortKey) -> Vec<usize> {
    let origin = match key {
        SortKey::OriginNorm => [0.0, 0.0],
        SortKey::CentroidNorm => {
            let n = centers.len().max(1) as f64;
            let s = centers
                .iter()
                .fold([0.0, 0.0], |a, c| [a[0] + c[0], a[1] + c[1]]);
            [s[0] / n, s[1] / n]
        }
    };
    let norms: Vec<f64> = centers.iter().map(|&c| dist2(c, origin).sqrt()).collect();
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| {
        norms[a]
            .total_cmp(&norms[b])
            .then(centers[a][0].total_cmp(&centers[b][0]))
            .then(centers[a][1].total_cmp(&centers[b][1]))
            .then(a.cmp(&b))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiles(points: &[(u32, u32)]) -> Vec<TileCoord> {
        points.iter().map(|&(r, c)| TileCoord::new(r, c)).collect()
    }

    #[test]
    fn one_tile_per_cluster() {
        let coords: Vec<TileCoord> = (0..49).map(|i| TileCoord::new(i / 7, (i % 7) * 3)).collect();
        let a = cluster_tiles(&coords, 49, 1).unwrap();
        assert_eq!(a.k(), 49);
        assert!(a.members.iter().all(|m| m.len() == 1));
        assert_eq!(a.cost(), 0.0);
    }

    #[test]
    fn few_tiles_are_reused() {
        let coords = tiles(&[(0, 0), (5, 5), (9, 1)]);
        let a = cluster_tiles(&coords, 49, 2).unwrap();
        assert_eq!(a.k(), 49);
        assert!(a.members.iter().all(|m| m.len() == 1));
        let mut used: Vec<usize> = a.members.iter().map(|m| m[0]).collect();
        used.sort();
        used.dedup();
        assert_eq!(used, vec![0, 1, 2]);
    }

    #[test]
    fn empty_input() {
        assert!(cluster_tiles(&[], 49, 0).is_err());
    }

    /// Exhaustive optimum over all 2-partitions.
    fn best_split(points: &[[f64; 2]]) -> Vec<bool> {
        let n = points.len();
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1..(1u32 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let grp: Vec<_> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| points[i])
                    .collect();
                let m = grp.len() as f64;
                let c = grp.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / m, a[1] + p[1] / m]);
                cost += grp.iter().map(|&p| dist2(p, c)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        (0..n).map(|i| (best.1 >> i) & 1 == 1).collect()
    }

    #[test]
    fn two_blobs_match_exhaustive_optimum() {
        let coords = tiles(&[
            (0, 0), (1, 0), (0, 2), (2, 1), (1, 1), (2, 2),
            (30, 31), (31, 29), (29, 30), (32, 32), (30, 28), (31, 31),
        ]);
        let a = cluster_tiles(&coords, 2, 9).unwrap();
        let points: Vec<_> = coords.iter().map(TileCoord::point).collect();
        let oracle = best_split(&points);
        let side_of = |i: usize| a.members[0].contains(&i);
        let flip = side_of(0) != oracle[0];
        for i in 0..coords.len() {
            assert_eq!(side_of(i) ^ flip, oracle[i], "tile {i}");
        }
    }

    #[test]
    fn cost_below_random_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<TileCoord> = (0..300)
            .map(|_| TileCoord::new(rng.random_range(0..60), rng.random_range(0..60)))
            .collect();
        let a = cluster_tiles(&coords, 10, 5).unwrap();
        let points: Vec<_> = coords.iter().map(TileCoord::point).collect();
        let labels: Vec<usize> = (0..points.len()).map(|_| rng.random_range(0..10)).collect();
        assert!(a.cost() <= objective(&points, &a.centers, &labels));
    }

    #[test]
    fn sorting_by_norm() {
        assert_eq!(sort_clusters(&[[0.0, 0.0], [3.0, 4.0], [1.0, 0.0]]), vec![0, 2, 1]);
        assert_eq!(sort_clusters(&[[2.0, 2.0]]), vec![0]);
        assert_eq!(sort_clusters(&[[5.0, 0.0], [0.0, 5.0]]), vec![1, 0]);
    }

    #[test]
    fn centroid_sort_key() {
        let centers = [[10.0, 10.0], [0.0, 0.0], [20.0, 20.0]];
        assert_eq!(sort_clusters_with(&centers, SortKey::CentroidNorm)[0], 0);
        assert_eq!(sort_clusters_with(&centers, SortKey::OriginNorm)[0], 1);
    }
}
