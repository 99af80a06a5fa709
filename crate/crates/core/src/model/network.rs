use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TestAverage};
use crate::error::{bail, Result};
use crate::numcore::nn::{
    trunc_normal, LayerNorm, Linear, MlpBlock, MultiHeadAttention, ParamId, ParamStore, INIT_STD,
};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::seeds::derive_seed;

/// Pre-norm transformer block:
/// `z' = MSA(LN(z)) + z`, then `z'' = MLP(LN(z')) + z'`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: MlpBlock,
}

impl EncoderBlock {
    pub fn forward<'t, T: Scalar>(
        &self,
        vars: &[Var<'t, T>],
        z: Var<'t, T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let h = self.attn.forward(vars, self.norm1.forward(vars, z)?)?.add(z)?;
        self.mlp
            .forward(vars, self.norm2.forward(vars, h)?, dropout_rng)?
            .add(h)
    }
}

/// Parameter ids of every part of the network.
#[derive(Clone, Debug)]
pub struct Layout {
    /// `d×D` instance projection.
    pub embed: ParamId,
    pub class_token: ParamId,
    /// `(k+1)×D`.
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub class_head: Linear,
    /// Applied to every instance token independently (a width-1 convolution).
    pub gene_head: Linear,
}

/// How rows of `s` are pooled into one prediction per gene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pool {
    /// Mean of the `n` largest per-instance predictions.
    TopN(usize),
    /// Test-time combination of every top-n mean.
    Test(TestAverage),
}

/// Rank weights for the mean of the top `n` of `k` values.
pub fn top_n_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Rank weights equivalent to combining `S(1)..S(k)`.
///
/// `S(i) = (1/i) Σ_{r<i} v_(r)`, so the value at rank `r` (0-based) enters
/// every `S(i)` with `i > r`.
pub fn test_average_weights(k: usize, form: TestAverage) -> Vec<f64> {
    let mut w = vec![0.0; k];
    let mut tail = 0.0;
    for r in (0..k).rev() {
        let i = (r + 1) as f64;
        tail += match form {
            TestAverage::Mean => 1.0 / i,
            TestAverage::HarmonicSum => 1.0 / (i * i),
        };
        w[r] = tail;
    }
    if form == TestAverage::Mean {
        w.iter_mut().for_each(|x| *x /= k as f64);
    }
    w
}

fn to_scalar<T: Scalar>(w: &[f64]) -> Vec<T> {
    w.iter().map(|&x| T::c(x)).collect()
}

/// Tape variables produced by one forward pass.
pub struct Forward<'t, T: Scalar> {
    /// `1×D` slide representation.
    pub c: Var<'t, T>,
    /// `1×C`.
    pub logits: Var<'t, T>,
    /// Per-instance gene predictions, `k×G` (instance-major).
    pub s: Var<'t, T>,
    /// `1×G` pooled gene prediction.
    pub genes: Var<'t, T>,
}

/// Eval-mode outputs detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub c: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub genes: Vec<T>,
    /// `k×G`.
    pub instance_genes: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    /// Predicted class, ties to the smallest index.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.logits.iter().enumerate() {
            if p > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["init"]));
        let c = &config;
        let mut store = ParamStore::new();
        let embed = store.add("embed", trunc_normal(&[c.d, c.width], INIT_STD, &mut rng));
        let class_token = store.add("class_token", Tensor::zeros(&[1, c.width]));
        let pos_embed = store.add("pos_embed", Tensor::zeros(&[c.k + 1, c.width]));
        let mut blocks = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let name = format!("block{l}");
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), c.width),
                attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{name}.attn"),
                    c.width,
                    c.heads,
                    &mut rng,
                )?,
                norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), c.width),
                mlp: MlpBlock::new(
                    &mut store,
                    &format!("{name}.mlp"),
                    c.width,
                    c.hidden(),
                    c.mlp_drop_p,
                    &mut rng,
                )?,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", c.width);
        let class_head = Linear::new(&mut store, "class_head", c.width, c.classes, &mut rng);
        let gene_head = Linear::new(&mut store, "gene_head", c.width, c.genes, &mut rng);
        Ok(Self {
            layout: Layout {
                embed,
                class_token,
                pos_embed,
                blocks,
                final_norm,
                class_head,
                gene_head,
            },
            config,
            store,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if store.len() != model.store.len() {
            bail!(
                Input,
                "{} parameter tensors, configuration needs {}",
                store.len(),
                model.store.len()
            );
        }
        for ((name, p), (want, q)) in store.iter().zip(model.store.iter()) {
            if name != want || p.value.shape() != q.value.shape() {
                bail!(
                    Input,
                    "parameter {name} {:?} does not match {want} {:?}",
                    p.value.shape(),
                    q.value.shape()
                );
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// `z₀ = [x_class; x_1 E; …; x_k E] + E_pos`.
    pub fn embed_input<'t>(&self, vars: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape != [self.config.k, self.config.d] {
            bail!(
                Dimension,
                "bag is {shape:?}, model expects [{}, {}]",
                self.config.k,
                self.config.d
            );
        }
        let tokens = x.matmul(vars[self.layout.embed.0])?;
        Var::concat_rows(&[vars[self.layout.class_token.0], tokens])?
            .add(vars[self.layout.pos_embed.0])
    }

    /// Runs every encoder block. `dropout_rng` is `None` in eval mode.
    pub fn encoder_forward<'t>(
        &self,
        vars: &[Var<'t, T>],
        z0: Var<'t, T>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let mut z = z0;
        for block in &self.layout.blocks {
            z = block.forward(vars, z, dropout_rng.as_deref_mut())?;
        }
        Ok(z)
    }

    /// `c = LN(z_L⁰)` and the class logits.
    pub fn classify<'t>(
        &self,
        vars: &[Var<'t, T>],
        z: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let c = self.layout.final_norm.forward(vars, z.slice_rows(0, 1)?)?;
        let logits = self.layout.class_head.forward(vars, c)?;
        Ok((c, logits))
    }

    /// Per-instance gene predictions `s` (`k×G`) and their top-`n` mean.
    pub fn gene_head<'t>(
        &self,
        vars: &[Var<'t, T>],
        z: Var<'t, T>,
        n: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let k = self.config.k;
        if n == 0 || n > k {
            bail!(Contract, "top-n with n = {n} outside 1..={k}");
        }
        let s = self.instance_genes(vars, z, dropout_rng)?;
        let pooled = s.rank_weighted_cols(&to_scalar::<T>(&top_n_weights(n)))?;
        Ok((s, pooled))
    }

    fn instance_genes<'t>(
        &self,
        vars: &[Var<'t, T>],
        z: Var<'t, T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let mut tokens = z.slice_rows(1, self.config.k + 1)?;
        if let Some(rng) = dropout_rng {
            tokens = tokens.dropout(self.config.gene_drop_p, rng)?;
        }
        self.layout.gene_head.forward(vars, tokens)
    }

    /// Test-time gene prediction from `s`.
    pub fn aggregate_test<'t>(&self, s: Var<'t, T>, form: TestAverage) -> Result<Var<'t, T>> {
        s.rank_weighted_cols(&to_scalar::<T>(&test_average_weights(self.config.k, form)))
    }

    /// Full forward pass over one bag. Dropout is active iff `dropout_rng` is
    /// `Some`.
    pub fn forward<'t>(
        &self,
        vars: &[Var<'t, T>],
        instances: Var<'t, T>,
        pool: Pool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward<'t, T>> {
        let z0 = self.embed_input(vars, instances)?;
        let z = self.encoder_forward(vars, z0, dropout_rng.as_deref_mut())?;
        let (c, logits) = self.classify(vars, z)?;
        let (s, genes) = match pool {
            Pool::TopN(n) => self.gene_head(vars, z, n, dropout_rng)?,
            Pool::Test(form) => {
                let s = self.instance_genes(vars, z, dropout_rng)?;
                (s, self.aggregate_test(s, form)?)
            }
        };
        Ok(Forward {
            c,
            logits,
            s,
            genes,
        })
    }

    /// Eval-mode prediction with the configured test-time average.
    pub fn predict(&self, instances: &Tensor<T>) -> Result<Prediction<T>> {
        self.predict_with(instances, Pool::Test(self.config.test_average))
    }

    pub fn predict_with(&self, instances: &Tensor<T>, pool: Pool) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let vars = self.store.bind(&tape);
        let x = tape.constant(instances.clone());
        let out = self.forward(&vars, x, pool, None)?;
        let logits = out.logits.value().data().to_vec();
        let mut probs = logits.clone();
        crate::numcore::softmax_in_place(&mut probs);
        let c = out.c.value().data().to_vec();
        let genes = out.genes.value().data().to_vec();
        let instance_genes = out.s.value().clone();
        Ok(Prediction {
            c,
            logits,
            probs,
            genes,
            instance_genes,
        })
    }
}
