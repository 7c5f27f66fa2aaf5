use super::Tensor;
use crate::error::{Error, Result};

/// Concatenates `N x C_i x H x W` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for t in parts {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        channels.push(tc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (t, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

/// Partitions the channel axis into consecutive groups of the given sizes.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
        return Err(Error::Shape(format!(
            "split sizes {sizes:?} do not partition {c} channels"
        )));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<f32>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * hw)).collect();
    for b in 0..n {
        let mut offset = b * c * hw;
        for (out, &s) in outs.iter_mut().zip(sizes) {
            out.extend_from_slice(&x.data()[offset..offset + s * hw]);
            offset += s * hw;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::new(&[n, s, h, w], d))
        .collect()
}
