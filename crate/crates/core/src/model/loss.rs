use super::config::GeneLoss;
use crate::error::{bail, Result};
use crate::numcore::{Scalar, Tensor, Var};

/// Mean squared or mean absolute error between a `1×G` prediction and the
/// target vector.
pub fn gene_loss<'t, T: Scalar>(
    pred: Var<'t, T>,
    target: &[T],
    form: GeneLoss,
) -> Result<Var<'t, T>> {
    if pred.shape() != [1, target.len()] {
        bail!(
            Dimension,
            "gene prediction {:?} against {} targets",
            pred.shape(),
            target.len()
        );
    }
    let y = pred.tape().constant(Tensor::matrix(1, target.len(), target.to_vec())?);
    let diff = pred.sub(y)?;
    match form {
        GeneLoss::Mse => diff.square()?.mean(),
        GeneLoss::Absolute => diff.abs()?.mean(),
    }
}

/// Cross-entropy plus `gamma` times the gene loss for one bag. Weight decay
/// is applied by the optimizer, not here.
pub fn total_loss<'t, T: Scalar>(
    logits: Var<'t, T>,
    label: usize,
    genes: Var<'t, T>,
    target: &[T],
    gamma: f64,
    form: GeneLoss,
) -> Result<Var<'t, T>> {
    let ce = logits.cross_entropy(label)?;
    if gamma == 0.0 || target.is_empty() {
        return Ok(ce);
    }
    ce.add(gene_loss(genes, target, form)?.scale(T::c(gamma))?)
}
