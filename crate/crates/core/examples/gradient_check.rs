//! Finite-difference check of every parameter gradient of a small model at
//! 64-bit precision, under both training-time and test-time pooling.
//!
//! cargo run --release --example gradient_check

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trnasformer::model::{total_loss, GeneLoss, Model, ModelConfig, Pool, TestAverage};
use trnasformer::numcore::gradcheck::check_gradients_each;
use trnasformer::numcore::Tensor;

fn main() -> trnasformer::Result<()> {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f64>::new(cfg.clone(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    // move the zero-initialised tokens off their symmetric start
    let (ct, pos) = (model.layout.class_token, model.layout.pos_embed);
    model.store.get_mut(ct).value = normal(&[1, cfg.width]);
    model.store.get_mut(pos).value = normal(&[cfg.k + 1, cfg.width]);
    let x = normal(&[cfg.k, cfg.d]).map(|v| 10.0 * v);
    let target = vec![0.2; cfg.genes];

    let params: Vec<Tensor<f64>> = model.store.params().iter().map(|p| p.value.clone()).collect();
    for pool in [Pool::TopN(2), Pool::Test(TestAverage::Mean)] {
        let errors = check_gradients_each(&params, 1e-6, |tape, vars| {
            let out = model.forward(vars, tape.constant(x.clone()), pool, None)?;
            total_loss(out.logits, 2, out.genes, &target, 0.5, GeneLoss::Mse)
        })?;
        println!("{pool:?}");
        for (name, e) in model.store.names().iter().zip(&errors) {
            println!("  {name:<24} {e:.2e}");
        }
        let worst = errors.iter().cloned().fold(0.0, f64::max);
        println!("  worst relative error {worst:.2e}");
    }
    println!("{} parameter tensors in {:.1}s", params.len(), start.elapsed().as_secs_f64());
    Ok(())
}
