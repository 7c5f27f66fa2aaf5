use super::Tensor;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

/// `x * sigmoid(x)`
pub fn silu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = silu_scalar(*v));
    out
}

/// `grad_out * sigmoid(x) * (1 + x * (1 - sigmoid(x)))`
pub fn silu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(input.shape(), grad_out.shape(), "silu_backward shape mismatch");
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
    out
}
