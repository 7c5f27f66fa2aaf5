use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of `[N, K]` logits, computed with the max-shift.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            z += e;
            *v = e as f32;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / z) as f32;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, and its
/// gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut loss = 0f64;
    let mut grad = vec![0f32; n * k];
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[label] as f64;
        for (j, &v) in row.iter().enumerate() {
            let p = (v as f64 - log_z).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            grad[b * k + j] = ((p - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], grad)?))
}
