use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, din) = input.dims2()?;
    let (dout, wdin) = weight.dims2()?;
    if wdin != din || bias.shape() != [dout] {
        return Err(Error::Shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((n, din, dout))
}

/// `y = x W^T + b` with `x: [N, Din]`, `W: [Dout, Din]`.
///
/// Each output row depends only on its own input row, so results do not
/// change with batch composition.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = check(input, weight, bias)?;
    let mut out = vec![0f32; n * dout];
    for b in 0..n {
        let x = &input.data()[b * din..(b + 1) * din];
        for o in 0..dout {
            let wrow = &weight.data()[o * din..(o + 1) * din];
            let dot: f64 = x.iter().zip(wrow).map(|(&a, &w)| a as f64 * w as f64).sum();
            out[b * dout + o] = (dot + bias.data()[o] as f64) as f32;
        }
    }
    Tensor::new(&[n, dout], out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<LinearGrads> {
    let (n, din, dout) = check(input, weight, bias)?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::Shape(format!(
            "linear grad_out {:?}, expected [{n}, {dout}]",
            grad_out.shape()
        )));
    }
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![0f32; n * din];
    for b in 0..n {
        for i in 0..din {
            let mut acc = 0f64;
            for o in 0..dout {
                acc += dy[b * dout + o] as f64 * w[o * din + i] as f64;
            }
            dx[b * din + i] = acc as f32;
        }
    }
    let mut dw = vec![0f32; dout * din];
    let mut db = vec![0f32; dout];
    for o in 0..dout {
        for i in 0..din {
            let mut acc = 0f64;
            for b in 0..n {
                acc += dy[b * dout + o] as f64 * x[b * din + i] as f64;
            }
            dw[o * din + i] = acc as f32;
        }
        db[o] = (0..n).map(|b| dy[b * dout + o] as f64).sum::<f64>() as f32;
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, din], dx)?,
        weight: Tensor::new(&[dout, din], dw)?,
        bias: Tensor::new(&[dout], db)?,
    })
}
