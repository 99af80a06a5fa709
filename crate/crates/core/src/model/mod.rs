//! The tRNAsformer network.
//!
//! A bag of `k` instance embeddings is projected to width `D`, prefixed with a
//! learnable class token and summed with a positional embedding. `L` pre-norm
//! encoder blocks follow. The class token feeds a layernorm and the
//! classification head, giving the slide representation `c` and class
//! logits; every other token is mapped to `G` gene values and the per-gene
//! values are pooled by a top-`n` mean during training or by an average over
//! all `n` at test time.
//!
//! The instance projection is a plain `d×D` matrix. For `d = 1024` it is
//! the same map as a 32×32-kernel, stride-32 convolution over the instances
//! tiled as a 224×224 image, with kernel `j` holding column `j` of the matrix
//! in row-major order.

mod checkpoint;
mod config;
mod loss;
mod network;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{GeneLoss, ModelConfig, TestAverage, DEFAULT_N_SET, STUDIED_DEPTHS};
pub use loss::{gene_loss, total_loss};
pub use network::{
    test_average_weights, top_n_weights, EncoderBlock, Forward, Layout, Model, Pool, Prediction,
};
