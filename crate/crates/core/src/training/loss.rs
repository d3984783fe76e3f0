use crate::error::{ensure, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `-log softmax(logits)[label]`, evaluated as `logsumexp(logits) - logits[label]`
/// with max-subtraction.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    ensure!(logits.len() >= 2, "cross-entropy needs at least two logits");
    ensure!(
        label < logits.len(),
        "label {label} out of range for {} classes",
        logits.len()
    );
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}
