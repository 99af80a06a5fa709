//! Neural layers built from tape primitives.
//!
//! Layers do not own tensors. Every learnable tensor lives in a flat
//! [`ParamStore`] and layers hold [`ParamId`]s into it; a forward pass first
//! binds the whole store onto a tape and then looks up its variables by id.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Gradients, Param, Scalar, Tape, Tensor, Var};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.params.push(Param::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Records every parameter on `tape`, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>, vars: &[Var<'_, T>]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.accumulate(grads, v);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Sample from N(0, std²) truncated at ±2 std.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::c(z * std);
        }
    })
}

pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(&[fan_in, fan_out], INIT_STD, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, vars: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(vars[self.weight.0])?.add_row(vars[self.bias.0])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[1, width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width])),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, vars: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layernorm(vars[self.gain.0], vars[self.bias.0], T::c(self.eps))
    }
}

/// Multi-head scaled dot-product self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            bail!(Config, "width {width} is not divisible into {heads} heads");
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, vars: &[Var<'t, T>], z: Var<'t, T>) -> Result<Var<'t, T>> {
        let width = self.query.fan_out;
        if self.heads == 0 || width % self.heads != 0 {
            bail!(Config, "width {width} is not divisible into {} heads", self.heads);
        }
        let head = width / self.heads;
        let q = self.query.forward(vars, z)?;
        let k = self.key.forward(vars, z)?;
        let v = self.value.forward(vars, z)?;
        let scale = T::c(1.0 / (head as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head, (h + 1) * head);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let attn = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax_rows()?;
            outs.push(attn.matmul(vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat_cols(&outs)?
        };
        self.out.forward(vars, merged)
    }
}

/// Linear → GELU → linear → dropout.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_p: f64,
}

impl MlpBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        drop_p: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_p) {
            bail!(Config, "dropout probability {drop_p} outside [0, 1)");
        }
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng),
            drop_p,
        })
    }

    /// `dropout_rng` is `None` in eval mode, which makes dropout the identity.
    pub fn forward<'t, T: Scalar>(
        &self,
        vars: &[Var<'t, T>],
        z: Var<'t, T>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&self.drop_p) {
            bail!(Config, "dropout probability {} outside [0, 1)", self.drop_p);
        }
        let h = self.fc1.forward(vars, z)?.gelu()?;
        let y = self.fc2.forward(vars, h)?;
        match dropout_rng {
            Some(rng) => y.dropout(self.drop_p, rng),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{numeric_grad, relative_error};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_params(store: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            store.get_mut(id).value.fill(0.0);
        }
    }

    #[test]
    fn trunc_normal_bounds() {
        let t: Tensor<f64> = trunc_normal(&[100, 100], 0.02, &mut rng(0));
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn head_split_must_divide() {
        let mut store = ParamStore::<f64>::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng(0)).is_err());
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng(1)).unwrap();
        for lin in [&attn.value, &attn.out] {
            store.get_mut(lin.weight).value = Tensor::eye(4);
        }
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let x = Tensor::from_rows(&[&[0.3, -1.0, 2.0, 0.5]]);
        let z = tape.constant(x.clone());
        let y = attn.forward(&vars, z).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn zero_query_key_gives_mean_of_values() {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng(2)).unwrap();
        zero_params(
            &mut store,
            &[attn.query.weight, attn.key.weight],
        );
        store.get_mut(attn.value.weight).value = Tensor::eye(4);
        store.get_mut(attn.out.weight).value = Tensor::eye(4);
        let x = Tensor::from_rows(&[
            &[1.0, 2.0, 3.0, 4.0],
            &[-1.0, 0.0, 1.0, 0.0],
            &[0.5, 0.5, 2.0, -3.0],
        ]);
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let y = attn.forward(&vars, tape.constant(x.clone())).unwrap();
        for c in 0..4 {
            let mean = (0..3).map(|r| x.at(r, c)).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((y.value().at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng(3)).unwrap();
        // larger weights so the softmax is far from uniform
        for p in store.params_mut() {
            p.value = trunc_normal(p.value.shape(), 0.5, &mut rng(p.value.numel() as u64));
        }
        let x: Tensor<f64> = trunc_normal(&[3, 4], 1.0, &mut rng(4));
        let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
            let tape = Tape::new();
            let vars = store.bind(&tape);
            let y = attn.forward(&vars, tape.constant(x.clone()))?;
            Ok(y.square()?.sum()?.item())
        };
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let xin = tape.leaf(x.clone());
        let loss = attn.forward(&vars, xin).unwrap().square().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = store.clone();
        analytic.accumulate(&grads, &vars);
        for i in 0..store.len() {
            let numeric = numeric_grad(&store.params()[i].value, 1e-5, |probe| {
                let mut s = store.clone();
                s.params_mut()[i].value = probe.clone();
                loss_of(&s, &x)
            })
            .unwrap();
            let err = relative_error(&analytic.params()[i].grad, &numeric);
            assert!(err < 1e-5, "{}: {err}", store.names()[i]);
        }
        let numeric_x = numeric_grad(&x, 1e-5, |probe| loss_of(&store, probe)).unwrap();
        assert!(relative_error(grads.get(xin).unwrap(), &numeric_x) < 1e-5);
    }

    #[test]
    fn mlp_zero_weights_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mlp = MlpBlock::new(&mut store, "m", 4, 16, 0.25, &mut rng(5)).unwrap();
        zero_params(&mut store, &[mlp.fc1.weight, mlp.fc2.weight]);
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let x = tape.constant(trunc_normal(&[3, 4], 1.0, &mut rng(6)));
        let y = mlp.forward(&vars, x, Some(&mut rng(7))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_rejects_bad_dropout() {
        let mut store = ParamStore::<f64>::new();
        assert!(MlpBlock::new(&mut store, "m", 4, 16, 1.0, &mut rng(5)).is_err());
        assert!(MlpBlock::new(&mut store, "m", 4, 16, -0.1, &mut rng(5)).is_err());
    }

    #[test]
    fn mlp_eval_mode_is_seed_independent() {
        let mut store = ParamStore::<f64>::new();
        let mlp = MlpBlock::new(&mut store, "m", 4, 16, 0.25, &mut rng(8)).unwrap();
        let x = trunc_normal::<f64>(&[3, 4], 1.0, &mut rng(9));
        let run = || {
            let tape = Tape::new();
            let vars = store.bind(&tape);
            let y = mlp.forward(&vars, tape.constant(x.clone()), None).unwrap();
            let v = y.value().clone();
            v
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut store = ParamStore::<f64>::new();
        let mlp = MlpBlock::new(&mut store, "m", 4, 16, 0.25, &mut rng(10)).unwrap();
        for p in store.params_mut() {
            p.value = trunc_normal(p.value.shape(), 0.5, &mut rng(11 + p.value.numel() as u64));
        }
        let x = trunc_normal::<f64>(&[2, 4], 1.0, &mut rng(12));
        let forward = |r: Option<&mut ChaCha8Rng>| {
            let tape = Tape::new();
            let vars = store.bind(&tape);
            let y = mlp.forward(&vars, tape.constant(x.clone()), r).unwrap();
            let v = y.value().clone();
            v
        };
        let eval = forward(None);
        let draws = 100_000;
        let mut acc = Tensor::<f64>::zeros(eval.shape());
        let mut r = rng(13);
        for _ in 0..draws {
            acc.add_assign(&forward(Some(&mut r)));
        }
        for (a, e) in acc.data().iter().zip(eval.data()) {
            let mean = a / draws as f64;
            assert!((mean - e).abs() <= 0.01 * e.abs(), "{mean} vs {e}");
        }
    }
}
