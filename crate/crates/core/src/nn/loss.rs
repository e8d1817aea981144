use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::Input(format!("logits must be N x C, got {:?}", logits.shape())));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of each sample.
pub fn per_sample_losses(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (_, c) = check(logits, labels)?;
    Ok(logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect())
}

/// Mean softmax cross-entropy over the batch.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let losses = per_sample_losses(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = check(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for ((row, g), &y) in logits.data().chunks(c).zip(grad.data_mut().chunks_mut(c)).zip(labels) {
        let lse = log_sum_exp(row);
        total += lse - row[y];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() * scale;
        }
        g[y] -= scale;
    }
    Ok((total * scale, grad))
}
