use super::Tensor;
use crate::error::Result;

/// Per-channel spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(&[n, c], out)
}

/// Spreads each pooled gradient uniformly, `1/(H*W)` per cell.
pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let t = Tensor::zeros(input_shape);
    let (n, c, h, w) = t.dims4()?;
    if grad_out.shape() != [n, c] {
        return Err(crate::Error::Shape(format!(
            "pool grad {:?} vs input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let mut data = t.into_data();
    for (plane, &g) in data.chunks_mut(hw).zip(grad_out.data()) {
        plane.fill(g * scale);
    }
    Tensor::new(input_shape, data)
}
