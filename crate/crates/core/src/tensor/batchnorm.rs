use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_STATS_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    /// Weight of the current batch in the running-stat moving average.
    pub stats_momentum: f32,
}

/// Batch statistics saved by a training-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub x_hat: Tensor,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_EPS,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        let ch = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [ch] {
                return Err(Error::Shape(format!("batchnorm {name} has shape {:?}", t.shape())));
            }
        }
        if c != ch {
            return Err(Error::Shape(format!(
                "batchnorm has {ch} channels, input has {c}"
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidArgument("batchnorm eps must be > 0".into()));
        }
        Ok((n, c, h * w))
    }
}

/// Inference-mode normalization with the running statistics.
pub fn batchnorm_infer(input: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (n, c, hw) = p.check(input)?;
    let mut out = input.clone();
    let data = out.data_mut();
    for ch in 0..c {
        let inv_std = 1.0 / (p.running_var.data()[ch] + p.eps).sqrt();
        let scale = p.gamma.data()[ch] * inv_std;
        let shift = p.beta.data()[ch] - p.running_mean.data()[ch] * scale;
        for b in 0..n {
            for v in &mut data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Training mode normalizes with batch statistics (population variance) and
/// folds them into the running averages; inference mode uses the running
/// averages and returns no cache.
pub fn batchnorm_forward(
    input: &Tensor,
    p: &mut BatchNormParams,
    training: bool,
) -> Result<(Tensor, Option<BnCache>)> {
    if !training {
        return Ok((batchnorm_infer(input, p)?, None));
    }
    let (n, c, hw) = p.check(input)?;
    let count = (n * hw) as f64;
    let x = input.data();
    let mut x_hat = vec![0f32; x.len()];
    let mut out = vec![0f32; x.len()];
    let mut means = vec![0f32; c];
    let mut inv_stds = vec![0f32; c];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| (b * c + ch) * hw);
        let mut sum = 0f64;
        for start in planes() {
            sum += x[start..start + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0f64;
        for start in planes() {
            sq += x[start..start + hw]
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / count;
        let inv_std = 1.0 / (var + p.eps as f64).sqrt();
        let (gamma, beta) = (p.gamma.data()[ch], p.beta.data()[ch]);
        for start in planes() {
            for i in start..start + hw {
                let xh = ((x[i] as f64 - mean) * inv_std) as f32;
                x_hat[i] = xh;
                out[i] = gamma * xh + beta;
            }
        }
        let m = p.stats_momentum;
        let rm = &mut p.running_mean.data_mut()[ch];
        *rm = (1.0 - m) * *rm + m * mean as f32;
        let rv = &mut p.running_var.data_mut()[ch];
        *rv = (1.0 - m) * *rv + m * var as f32;
        means[ch] = mean as f32;
        inv_stds[ch] = inv_std as f32;
    }
    let cache = BnCache {
        mean: means,
        inv_std: inv_stds,
        x_hat: Tensor::new(input.shape(), x_hat)?,
    };
    Ok((Tensor::new(input.shape(), out)?, Some(cache)))
}

pub fn batchnorm_backward(
    input: &Tensor,
    p: &BatchNormParams,
    grad_out: &Tensor,
    cache: Option<&BnCache>,
) -> Result<BnGrads> {
    let cache = cache.ok_or(Error::MissingCache("batchnorm batch statistics"))?;
    let (n, c, hw) = p.check(input)?;
    if grad_out.shape() != input.shape() || cache.x_hat.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "batchnorm grad_out {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.x_hat.data();
    let mut dx = vec![0f32; dy.len()];
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for ch in 0..c {
        let mut sum_dy = 0f64;
        let mut sum_dy_xh = 0f64;
        for b in 0..n {
            let s = (b * c + ch) * hw;
            for i in s..s + hw {
                sum_dy += dy[i] as f64;
                sum_dy_xh += dy[i] as f64 * xh[i] as f64;
            }
        }
        dbeta[ch] = sum_dy as f32;
        dgamma[ch] = sum_dy_xh as f32;
        let k = p.gamma.data()[ch] as f64 * cache.inv_std[ch] as f64 / count;
        for b in 0..n {
            let s = (b * c + ch) * hw;
            for i in s..s + hw {
                dx[i] = (k * (count * dy[i] as f64 - sum_dy - xh[i] as f64 * sum_dy_xh)) as f32;
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(input.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
