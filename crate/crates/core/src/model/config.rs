use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Encoder depths used in the reported experiments. Other positive depths
/// are accepted with a warning.
pub const STUDIED_DEPTHS: [usize; 5] = [1, 2, 4, 8, 12];
pub const DEFAULT_N_SET: [usize; 6] = [1, 2, 5, 10, 20, 49];

/// How the gene head pools per-instance predictions at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestAverage {
    /// `(1/k) Σ_i S(i)`: the plain average of all top-n means.
    #[default]
    Mean,
    /// `Σ_i S(i)/i` as literally printed. Not an average; kept for comparison.
    HarmonicSum,
}

/// Gene regression term of the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneLoss {
    #[default]
    Mse,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder depth L.
    pub depth: usize,
    /// Internal width D.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Instances per bag.
    pub k: usize,
    /// Instance embedding width.
    pub d: usize,
    pub genes: usize,
    pub classes: usize,
    /// Dropout before the gene head.
    pub gene_drop_p: f64,
    /// Dropout at the end of every encoder MLP.
    pub mlp_drop_p: f64,
    /// Training-time choices for the top-n average.
    pub n_set: Vec<usize>,
    pub test_average: TestAverage,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            width: 384,
            heads: 4,
            mlp_ratio: 4,
            k: 49,
            d: 1024,
            genes: 1,
            classes: 3,
            gene_drop_p: 0.25,
            mlp_drop_p: 0.1,
            n_set: DEFAULT_N_SET.to_vec(),
            test_average: TestAverage::Mean,
        }
    }
}

impl ModelConfig {
    /// CPU-sized configuration for the synthetic benchmark.
    pub fn desk(d: usize, genes: usize, classes: usize) -> Self {
        Self {
            depth: 2,
            width: 32,
            heads: 4,
            d,
            genes,
            classes,
            ..Self::default()
        }
    }

    /// The smallest configuration worth gradient-checking.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 4,
            k: 4,
            d: 8,
            genes: 5,
            classes: 3,
            gene_drop_p: 0.0,
            mlp_drop_p: 0.0,
            n_set: vec![1, 2, 4],
            test_average: TestAverage::Mean,
        }
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            bail!(Config, "encoder depth must be at least 1");
        }
        if !STUDIED_DEPTHS.contains(&self.depth) {
            log::warn!("encoder depth {} is outside {:?}", self.depth, STUDIED_DEPTHS);
        }
        for (name, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("k", self.k),
            ("d", self.d),
            ("genes", self.genes),
            ("classes", self.classes),
        ] {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if self.width % self.heads != 0 {
            bail!(Config, "width {} is not divisible by {} heads", self.width, self.heads);
        }
        for (name, p) in [("gene_drop_p", self.gene_drop_p), ("mlp_drop_p", self.mlp_drop_p)] {
            if !(0.0..1.0).contains(&p) {
                bail!(Config, "{name} = {p} outside [0, 1)");
            }
        }
        if self.n_set.is_empty() {
            bail!(Config, "n_set is empty");
        }
        if let Some(&n) = self.n_set.iter().find(|&&n| n == 0 || n > self.k) {
            bail!(Config, "n_set value {n} outside 1..={}", self.k);
        }
        Ok(())
    }
}
