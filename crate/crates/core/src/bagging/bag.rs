use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::ClusterAssignment;
use super::tissue::TileCoord;
use crate::error::{bail, Result};
use crate::numcore::Tensor;

/// One MIL training unit: `k` tile embeddings in sorted-cluster order.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// `k×d` instance matrix.
    pub instances: Tensor<f32>,
    pub slide_id: String,
    pub case_id: String,
    pub label: u32,
    /// Transformed gene expression of the slide's case; may be empty.
    pub gene_target: Vec<f32>,
}

impl Bag {
    pub fn k(&self) -> usize {
        self.instances.rows()
    }

    pub fn d(&self) -> usize {
        self.instances.cols()
    }

    /// Checks shape, finiteness and (when given) agreement with a dataset's
    /// declared dimensions.
    pub fn validate(&self, expect: Option<&BagShape>) -> Result<()> {
        let (k, d) = self.instances.dims2()?;
        if k == 0 || d == 0 {
            bail!(Data, "bag {} has an empty instance matrix", self.slide_id);
        }
        if !self.instances.is_finite() {
            bail!(Data, "bag {} has non-finite instances", self.slide_id);
        }
        if self.gene_target.iter().any(|v| !v.is_finite()) {
            bail!(Data, "bag {} has a non-finite gene target", self.slide_id);
        }
        if self.slide_id.is_empty() {
            bail!(Data, "bag without a slide id");
        }
        if let Some(s) = expect {
            if k != s.k || d != s.d {
                bail!(
                    Data,
                    "bag {} is {k}x{d}, dataset declares {}x{}",
                    self.slide_id,
                    s.k,
                    s.d
                );
            }
            if self.gene_target.len() != s.genes {
                bail!(
                    Data,
                    "bag {} carries {} genes, dataset declares {}",
                    self.slide_id,
                    self.gene_target.len(),
                    s.genes
                );
            }
            if self.label as usize >= s.classes {
                bail!(
                    Data,
                    "bag {} has label {} but only {} classes",
                    self.slide_id,
                    self.label,
                    s.classes
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagShape {
    pub k: usize,
    pub d: usize,
    pub genes: usize,
    pub classes: usize,
}

/// Tile embeddings of one slide, keyed by grid position.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<(u32, u32), usize>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn insert(&mut self, row: u32, col: u32, embedding: &[f32]) -> Result<()> {
        if embedding.len() != self.dim {
            bail!(
                Dimension,
                "embedding of width {} in a table of width {}",
                embedding.len(),
                self.dim
            );
        }
        if let Some(&slot) = self.index.get(&(row, col)) {
            self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(embedding);
        } else {
            self.index.insert((row, col), self.index.len());
            self.data.extend_from_slice(embedding);
        }
        Ok(())
    }

    pub fn get(&self, row: u32, col: u32) -> Option<&[f32]> {
        self.index
            .get(&(row, col))
            .map(|&s| &self.data[s * self.dim..(s + 1) * self.dim])
    }

    /// Reads `row<TAB>col<TAB>v1 ... vd` lines; `#` starts a comment line.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                bail!(Input, "embedding line {}: too few fields", lineno + 1);
            }
            let parse_u = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| crate::Error::Input(format!("embedding line {}: bad coordinate {s:?}", lineno + 1)))
            };
            let (row, col) = (parse_u(fields[0])?, parse_u(fields[1])?);
            let values = fields[2..]
                .iter()
                .map(|s| {
                    s.parse::<f32>().map_err(|_| {
                        crate::Error::Input(format!("embedding line {}: bad value {s:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f32>>>()?;
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            t.insert(row, col, &values)?;
        }
        table.ok_or_else(|| crate::Error::Input("embedding table is empty".into()))
    }
}

/// Identity fields copied into every sampled bag.
#[derive(Clone, Debug, Default)]
pub struct SlideMeta {
    pub slide_id: String,
    pub case_id: String,
    pub label: u32,
    pub gene_target: Vec<f32>,
}

/// Bags plus the tile chosen from each sorted cluster for every bag.
#[derive(Clone, Debug)]
pub struct SampledBags {
    pub bags: Vec<Bag>,
    pub tiles: Vec<Vec<TileCoord>>,
}

/// Draws `count` bags, each holding one uniformly chosen tile per cluster in
/// sorted-cluster order.
pub fn sample_bags(
    assignment: &ClusterAssignment,
    coords: &[TileCoord],
    embeddings: &EmbeddingTable,
    count: usize,
    seed: u64,
    meta: &SlideMeta,
) -> Result<SampledBags> {
    if let Some(c) = assignment.members.iter().position(Vec::is_empty) {
        bail!(Contract, "cluster {c} is empty");
    }
    for members in &assignment.members {
        for &i in members {
            let t = coords.get(i).ok_or_else(|| {
                crate::Error::Data(format!("cluster member {i} has no coordinate"))
            })?;
            if embeddings.get(t.row, t.col).is_none() {
                bail!(
                    Data,
                    "slide {}: missing embedding for tile ({}, {})",
                    meta.slide_id,
                    t.row,
                    t.col
                );
            }
        }
    }
    let k = assignment.k();
    let d = embeddings.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::with_capacity(count);
    let mut tiles = Vec::with_capacity(count);
    for _ in 0..count {
        let mut data = Vec::with_capacity(k * d);
        let mut chosen = Vec::with_capacity(k);
        for &c in &assignment.sorted_order {
            let members = &assignment.members[c];
            let t = coords[members[rng.random_range(0..members.len())]];
            data.extend_from_slice(embeddings.get(t.row, t.col).unwrap());
            chosen.push(t);
        }
        bags.push(Bag {
            instances: Tensor::matrix(k, d, data)?,
            slide_id: meta.slide_id.clone(),
            case_id: meta.case_id.clone(),
            label: meta.label,
            gene_target: meta.gene_target.clone(),
        });
        tiles.push(chosen);
    }
    Ok(SampledBags { bags, tiles })
}
