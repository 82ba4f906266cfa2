use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.matrix_dims("cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::dim(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - (row[y] - max);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (k, &z) in row.iter().enumerate() {
            let p = (z - max - log_denom).exp();
            g[k] = (p - if k == y { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok((total * inv_b, Tensor::new(&[batch, classes], grad)?))
}

/// Per-row softmax probabilities.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (batch, classes) = logits.matrix_dims("softmax")?;
    let mut out = vec![0.0; batch * classes];
    for i in 0..batch {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
        for (k, z) in row.iter().enumerate() {
            out[i * classes + k] = (z - max).exp() / denom;
        }
    }
    Tensor::new(&[batch, classes], out)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
