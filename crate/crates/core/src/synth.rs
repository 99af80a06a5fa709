//! Seeded synthetic datasets with planted class structure and linear gene
//! signals.
//!
//! Every slide gets a thumbnail with an elliptical tissue region, which goes
//! through the real tissue mask and tile selection. Tile embeddings are
//! Gaussian around a slide mean `m_s = μ_c + o_s`, where `μ_c = separation·e_c`
//! is the class mean and `o_s ~ N(0, slide_spread² I)` a per-slide offset.
//! Gene values are `y = b + M·m̄_s + ε` with `m̄_s` the mean over the slide's
//! tiles and `b` shifting every gene above a common floor; they are written as raw expression `10^y − 1` and recovered through
//! the gene pipeline, then bags are drawn with the regular sampler.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagging::{
    bag_slide, select_tiles, tissue_mask, write_bag, Bag, BaggingParams, DatasetManifest,
    EmbeddingTable, SlideEntry, SlideMeta, Split, TileCoord, MANIFEST_FILE, MANIFEST_VERSION,
};
use crate::error::{bail, Error, Result};
use crate::genes::{filter_median_zero, log_transform, split_cases, GeneTable, DEFAULT_FRACTIONS};
use crate::numcore::Tensor;
use crate::seeds::{derive_seed, derive_seed_n};

pub const GENE_INDEX_FILE: &str = "genes.json";
pub const EXPRESSION_FILE: &str = "expression.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub slides_per_class: usize,
    pub bags_per_slide: usize,
    pub k: usize,
    pub d: usize,
    pub genes: usize,
    /// Thumbnail side in tiles.
    pub grid: usize,
    /// Distance of each class mean from the origin along its own axis.
    pub separation: f64,
    /// Standard deviation of the per-slide mean offset.
    pub slide_spread: f64,
    /// Standard deviation of tile embeddings around their slide mean.
    pub instance_noise: f64,
    /// Standard deviation of the additive gene noise (log10 units).
    pub gene_noise: f64,
    /// Entries of `M` are `N(0, mixing_scale² / d)`.
    pub mixing_scale: f64,
    /// Smallest clean gene value (log10 units); keeps raw expression positive.
    pub intercept: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            slides_per_class: 30,
            bags_per_slide: 100,
            k: 49,
            d: 64,
            genes: 50,
            grid: 20,
            separation: 3.0,
            slide_spread: 0.5,
            instance_noise: 1.0,
            gene_noise: 0.05,
            mixing_scale: 1.0,
            intercept: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Real-data shapes: 1024-wide instances and more genes.
    pub fn real_shape() -> Self {
        Self {
            d: 1024,
            genes: 2000,
            slides_per_class: 4,
            bags_per_slide: 10,
            ..Self::default()
        }
    }

    /// Default shapes with small slide offsets and tile noise: slide-level gene
    /// variation is then mostly class-driven and learnable from 72 slides.
    pub fn low_noise() -> Self {
        Self {
            slide_spread: 0.1,
            instance_noise: 0.25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("slides_per_class", self.slides_per_class),
            ("bags_per_slide", self.bags_per_slide),
            ("k", self.k),
            ("d", self.d),
            ("genes", self.genes),
        ] {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if self.classes > self.d {
            bail!(Config, "{} classes need d >= classes, got d = {}", self.classes, self.d);
        }
        if self.grid < 2 {
            bail!(Config, "grid must be at least 2 tiles");
        }
        for (name, v) in [
            ("separation", self.separation),
            ("slide_spread", self.slide_spread),
            ("instance_noise", self.instance_noise),
            ("gene_noise", self.gene_noise),
            ("mixing_scale", self.mixing_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                bail!(Config, "{name} must be finite and non-negative");
            }
        }
        if !self.intercept.is_finite() {
            bail!(Config, "intercept must be finite");
        }
        Ok(())
    }

    pub fn slides(&self) -> usize {
        self.classes * self.slides_per_class
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        m[class] = self.separation;
        m
    }
}

/// The generating parameters, kept for oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTruth {
    /// `G×d`.
    pub mixing: Tensor<f64>,
    /// Per-gene `b`, chosen so the smallest clean value equals the spec's
    /// intercept.
    pub intercepts: Vec<f64>,
    /// Mean embedding over every selected tile of each slide.
    pub slide_means: Vec<Vec<f64>>,
    /// Noise-free log10 gene values per slide.
    pub clean_genes: Vec<Vec<f64>>,
}

pub struct SynthDataset {
    pub spec: SynthSpec,
    pub manifest: DatasetManifest,
    /// Bags of every slide, in manifest order.
    pub bags: Vec<Vec<Bag>>,
    /// Ids of the genes kept by the median filter, in target order.
    pub gene_ids: Vec<String>,
    /// Raw expression before filtering and transform.
    pub raw_genes: GeneTable,
    pub truth: PlantedTruth,
}

impl SynthDataset {
    pub fn bags_in(&self, split: Split) -> Vec<Bag> {
        self.manifest
            .slides
            .iter()
            .zip(&self.bags)
            .filter(|(s, _)| s.split == split)
            .flat_map(|(_, b)| b.iter().cloned())
            .collect()
    }

    /// Writes bag files, the manifest, the gene-id index and the raw
    /// expression matrix under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest
            .slides
            .par_iter()
            .zip(&self.bags)
            .try_for_each(|(slide, bags)| -> Result<()> {
                let sub = dir.join("bags").join(&slide.slide_id);
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                for (rel, bag) in slide.bags.iter().zip(bags) {
                    write_bag(&dir.join(rel), bag)?;
                }
                Ok(())
            })?;
        let index = dir.join(GENE_INDEX_FILE);
        fs::write(&index, serde_json::to_string_pretty(&self.gene_ids)? + "\n")
            .map_err(|e| Error::io(&index, e))?;
        let expr = dir.join(EXPRESSION_FILE);
        fs::write(&expr, self.raw_genes.to_matrix_tsv()).map_err(|e| Error::io(&expr, e))?;
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }
}

const TISSUE: [u8; 3] = [226, 152, 190];
const BACKGROUND: [u8; 3] = [246, 245, 247];

/// Thumbnail with an elliptical tissue region and light colour jitter.
pub fn synthetic_thumbnail(grid: usize, rng: &mut impl Rng) -> RgbImage {
    let side = (grid * crate::bagging::tissue::TILE_PX) as u32;
    let c = side as f64 / 2.0;
    let cx = c + rng.random_range(-0.05..0.05) * side as f64;
    let cy = c + rng.random_range(-0.05..0.05) * side as f64;
    let rx = rng.random_range(0.32..0.45) * side as f64;
    let ry = rng.random_range(0.32..0.45) * side as f64;
    RgbImage::from_fn(side, side, |x, y| {
        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
        let base = if dx * dx + dy * dy <= 1.0 { TISSUE } else { BACKGROUND };
        let j = rng.random_range(-4i16..=4);
        Rgb(base.map(|v| (v as i16 + j).clamp(0, 255) as u8))
    })
}

struct SlideDraft {
    slide_id: String,
    case_id: String,
    label: u32,
    tiles: Vec<TileCoord>,
    embeddings: EmbeddingTable,
    mean: Vec<f64>,
}

fn draft_slide(spec: &SynthSpec, index: usize, label: usize) -> Result<SlideDraft> {
    let slide_id = format!("SYN-{index:04}-c{label}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(spec.seed, "slide", &[index as u64]));
    let thumb = synthetic_thumbnail(spec.grid, &mut rng);
    let tiles = select_tiles(&tissue_mask(&thumb)?)?;
    if tiles.is_empty() {
        bail!(Data, "synthetic slide {slide_id} has no tissue tiles");
    }
    let mut centre = spec.class_mean(label);
    for v in centre.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += spec.slide_spread * z;
    }
    let mut embeddings = EmbeddingTable::new(spec.d);
    let mut mean = vec![0.0; spec.d];
    let mut row = vec![0f32; spec.d];
    for t in &tiles {
        for (j, r) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *r = (centre[j] + spec.instance_noise * z) as f32;
            mean[j] += *r as f64;
        }
        embeddings.insert(t.row, t.col, &row)?;
    }
    mean.iter_mut().for_each(|m| *m /= tiles.len() as f64);
    Ok(SlideDraft {
        case_id: format!("SYN-CASE-{index:04}"),
        slide_id,
        label: label as u32,
        tiles,
        embeddings,
        mean,
    })
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let labels: Vec<usize> = (0..spec.classes)
        .flat_map(|c| std::iter::repeat_n(c, spec.slides_per_class))
        .collect();
    let drafts: Vec<SlideDraft> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &c)| draft_slide(spec, i, c))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["genes"]));
    let m_dist = Normal::new(0.0, spec.mixing_scale / (spec.d as f64).sqrt()).unwrap();
    let mixing = Tensor::from_fn(&[spec.genes, spec.d], |_| m_dist.sample(&mut rng));
    let signal: Vec<Vec<f64>> = drafts
        .iter()
        .map(|draft| {
            (0..spec.genes)
                .map(|g| mixing.row(g).iter().zip(&draft.mean).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let intercepts: Vec<f64> = (0..spec.genes)
        .map(|g| spec.intercept - signal.iter().map(|s| s[g]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut clean_genes = Vec::with_capacity(drafts.len());
    let mut raw = Vec::with_capacity(drafts.len() * spec.genes);
    for s in &signal {
        let clean: Vec<f64> = s.iter().zip(&intercepts).map(|(v, b)| v + b).collect();
        for &y in &clean {
            let z: f64 = StandardNormal.sample(&mut rng);
            raw.push((10f64.powf(y + spec.gene_noise * z) - 1.0).max(0.0));
        }
        clean_genes.push(clean);
    }
    let raw_genes = GeneTable::new(
        (0..spec.genes).map(|g| format!("SYNG{g:05}")).collect(),
        drafts.iter().map(|d| d.case_id.clone()).collect(),
        raw,
    )?;
    let genes = log_transform(&filter_median_zero(&raw_genes)?)?;

    let split = split_cases(
        &drafts
            .iter()
            .map(|d| (d.case_id.clone(), d.label))
            .collect::<Vec<_>>(),
        DEFAULT_FRACTIONS,
        derive_seed(spec.seed, &["split"]),
    )?;
    let params = BaggingParams {
        k: spec.k,
        bags_per_slide: spec.bags_per_slide,
        seed: derive_seed(spec.seed, &["bagging"]),
        ..BaggingParams::default()
    };
    let bags: Vec<Vec<Bag>> = drafts
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let meta = SlideMeta {
                slide_id: d.slide_id.clone(),
                case_id: d.case_id.clone(),
                label: d.label,
                gene_target: genes.row(i).iter().map(|&v| v as f32).collect(),
            };
            Ok(bag_slide(&d.tiles, &d.embeddings, &params, &meta)?.1.bags)
        })
        .collect::<Result<_>>()?;

    let slides = drafts
        .iter()
        .map(|d| SlideEntry {
            slide_id: d.slide_id.clone(),
            case_id: d.case_id.clone(),
            label: d.label,
            split: split.split_of(&d.case_id).unwrap_or_default(),
            bags: (0..spec.bags_per_slide)
                .map(|b| format!("bags/{}/{b:03}.trnb", d.slide_id))
                .collect(),
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        k: spec.k,
        d: spec.d,
        gene_count: genes.n_genes(),
        classes: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        gene_index: Some(GENE_INDEX_FILE.into()),
        slides,
    };
    manifest.check()?;
    Ok(SynthDataset {
        spec: spec.clone(),
        manifest,
        bags,
        gene_ids: genes.gene_ids.clone(),
        raw_genes,
        truth: PlantedTruth {
            mixing,
            intercepts,
            slide_means: drafts.into_iter().map(|d| d.mean).collect(),
            clean_genes,
        },
    })
}

/// Monte-Carlo accuracy with a normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub draws: usize,
}

/// Accuracy of the Bayes classifier that sees one bag.
///
/// The mean of a bag's `k` instances is a sufficient statistic for the class
/// and is distributed as `N(μ_c, (slide_spread² + instance_noise²/k) I)`;
/// with equal priors and a shared isotropic covariance the optimal rule is
/// the nearest class mean.
pub fn oracle_bayes_accuracy(spec: &SynthSpec, draws: usize, seed: u64) -> Result<OracleEstimate> {
    spec.validate()?;
    if draws == 0 {
        bail!(Config, "draws must be positive");
    }
    let s = (spec.slide_spread.powi(2) + spec.instance_noise.powi(2) / spec.k as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.class_mean(c)).collect();
    // only the first C coordinates separate the classes; the rest add the
    // same noise to every distance
    let dims = spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut z = vec![0.0; dims];
    for _ in 0..draws {
        let c = rng.random_range(0..spec.classes);
        for (j, v) in z.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = means[c][j] + s * e;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, m) in means.iter().enumerate() {
            let d: f64 = z.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        correct += (best == c) as usize;
    }
    let p = correct as f64 / draws as f64;
    let half = 1.96 * (p * (1.0 - p) / draws as f64).sqrt();
    Ok(OracleEstimate {
        accuracy: p,
        ci_low: (p - half).max(0.0),
        ci_high: (p + half).min(1.0),
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            slides_per_class: 4,
            bags_per_slide: 5,
            d: 8,
            genes: 6,
            grid: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn counts_match_spec() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.manifest.slides.len(), 12);
        assert_eq!(ds.manifest.bag_count(), 60);
        for c in 0..3 {
            assert_eq!(ds.manifest.slides.iter().filter(|s| s.label == c).count(), 4);
        }
        let shape = ds.manifest.shape();
        for bag in ds.bags.iter().flatten() {
            bag.validate(Some(&shape)).unwrap();
        }
        assert_eq!(shape.genes, 6);
    }

    #[test]
    fn noiseless_bags_are_identical_within_a_slide() {
        let spec = SynthSpec {
            instance_noise: 0.0,
            gene_noise: 0.0,
            ..small()
        };
        let ds = generate(&spec).unwrap();
        for bags in &ds.bags {
            assert!(bags.iter().all(|b| b.instances == bags[0].instances));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        generate(&spec).unwrap().write(&dir.path().join("a")).unwrap();
        generate(&spec).unwrap().write(&dir.path().join("b")).unwrap();
        for rel in [MANIFEST_FILE, GENE_INDEX_FILE, EXPRESSION_FILE, "bags/SYN-0003-c0/004.trnb"] {
            let a = fs::read(dir.path().join("a").join(rel)).unwrap();
            let b = fs::read(dir.path().join("b").join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn gene_targets_recover_planted_values() {
        let spec = SynthSpec {
            gene_noise: 0.0,
            ..small()
        };
        let ds = generate(&spec).unwrap();
        for (i, bags) in ds.bags.iter().enumerate() {
            for (g, &v) in bags[0].gene_target.iter().enumerate() {
                assert!((v as f64 - ds.truth.clean_genes[i][g]).abs() < 1e-5, "{v} {}", ds.truth.clean_genes[i][g]);
            }
        }
    }

    #[test]
    fn oracle_limits() {
        let far = SynthSpec {
            separation: 1e6,
            ..SynthSpec::default()
        };
        assert_eq!(oracle_bayes_accuracy(&far, 1000, 1).unwrap().accuracy, 1.0);
        let none = SynthSpec {
            separation: 0.0,
            ..SynthSpec::default()
        };
        let est = oracle_bayes_accuracy(&none, 100_000, 2).unwrap();
        assert!((est.accuracy - 1.0 / 3.0).abs() < 0.01, "{est:?}");
    }
}
