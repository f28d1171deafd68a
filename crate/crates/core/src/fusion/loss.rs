use crate::error::{Error, Result};
use crate::nn::argmax_classes;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Mean voxel cross-entropy of class-last `logits` against `labels`,
/// without recording anything for the reverse pass.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy(x, labels)?;
    Ok(tape.value(loss).item())
}

/// Fraction of voxels whose argmax class equals the label.
pub fn voxel_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pred = argmax_classes(logits);
    if pred.len() != labels.len() {
        return Err(Error::shape("voxel_accuracy", &[pred.len()], &[labels.len()]));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(labels).filter(|(&p, &l)| p as usize == l).count();
    Ok(hits as f64 / pred.len() as f64)
}
