//! From a slide thumbnail and tile embeddings to fixed-size bags: tissue
//! masking, tile selection, spatial k-means, cluster ordering and per-cluster
//! bootstrap sampling, plus the on-disk bag and manifest formats.

mod bag;
mod bagfile;
pub mod kmeans;
mod manifest;
pub mod tissue;

pub use bag::{sample_bags, Bag, BagShape, EmbeddingTable, SampledBags, SlideMeta};
pub use bagfile::{decode_bag, encode_bag, read_bag, write_bag, BAG_MAGIC};
pub use kmeans::{cluster_tiles, cluster_tiles_with, sort_clusters, ClusterAssignment, SortKey};
pub use manifest::{
    load_split, manifest_path, DatasetManifest, SlideEntry, Split, MANIFEST_FILE,
    MANIFEST_VERSION,
};
pub use tissue::{select_tiles, tissue_mask, TileCoord, TissueMask};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::seeds::derive_seed;

pub const BAGS_PER_SLIDE: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaggingParams {
    pub k: usize,
    pub bags_per_slide: usize,
    pub sort_key: SortKey,
    pub seed: u64,
}

impl Default for BaggingParams {
    fn default() -> Self {
        Self {
            k: kmeans::DEFAULT_K,
            bags_per_slide: BAGS_PER_SLIDE,
            sort_key: SortKey::OriginNorm,
            seed: 0,
        }
    }
}

/// Clusters the retained tiles of one slide and samples its bags. Random
/// streams are derived from `(params.seed, slide_id)` so slides can be
/// processed in any order or in parallel.
pub fn bag_slide(
    tiles: &[TileCoord],
    embeddings: &EmbeddingTable,
    params: &BaggingParams,
    meta: &SlideMeta,
) -> Result<(ClusterAssignment, SampledBags)> {
    if tiles.is_empty() {
        bail!(Data, "slide {} has no tissue tiles", meta.slide_id);
    }
    let assignment = cluster_tiles_with(
        tiles,
        params.k,
        derive_seed(params.seed, &[&meta.slide_id, "kmeans"]),
        params.sort_key,
    )?;
    let bags = sample_bags(
        &assignment,
        tiles,
        embeddings,
        params.bags_per_slide,
        derive_seed(params.seed, &[&meta.slide_id, "bags"]),
        meta,
    )?;
    Ok((assignment, bags))
}
