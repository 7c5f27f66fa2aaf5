use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, concat_channels, conv2d_backward,
    conv2d_forward, global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward,
    silu, silu_backward, split_channels, BatchNormParams, BnCache, ConvParams, Tensor,
};

pub(crate) type GradSink = HashMap<String, Tensor>;

/// Collects `(name, &mut Tensor)` pairs in registry order.
pub(crate) type ParamSinkMut<'a> = Vec<(String, &'a mut Tensor)>;
pub(crate) type ParamSink<'a> = Vec<(String, &'a Tensor)>;

/// Convolution, batch norm, SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBlockCache {
    input: Tensor,
    conv_out: Tensor,
    bn: BnCache,
    bn_out: Tensor,
}

impl ConvBlock {
    /// Square kernel with "same"-style padding `k / 2`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvBlock {
            conv: ConvParams::new(in_channels, out_channels, kernel, stride, kernel / 2),
            bn: BatchNormParams::new(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.conv)?;
        Ok(silu(&batchnorm_infer(&y, &self.bn)?))
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ConvBlockCache)> {
        let conv_out = conv2d_forward(x, &self.conv)?;
        let (bn_out, bn) = batchnorm_forward(&conv_out, &mut self.bn, true)?;
        let out = silu(&bn_out);
        let cache = ConvBlockCache {
            input: x.clone(),
            conv_out,
            bn: bn.expect("training-mode batchnorm returns a cache"),
            bn_out,
        };
        Ok((out, cache))
    }

    pub(crate) fn backward(
        &self,
        cache: &ConvBlockCache,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut GradSink,
    ) -> Result<Tensor> {
        let g = silu_backward(&cache.bn_out, grad_out);
        let bn = batchnorm_backward(&cache.conv_out, &self.bn, &g, Some(&cache.bn))?;
        let conv = conv2d_backward(&cache.input, &self.conv, &bn.input)?;
        grads.insert(format!("{prefix}.conv.weight"), conv.weight);
        grads.insert(format!("{prefix}.conv.bias"), conv.bias);
        grads.insert(format!("{prefix}.bn.gamma"), bn.gamma);
        grads.insert(format!("{prefix}.bn.beta"), bn.beta);
        Ok(conv.input)
    }

    pub(crate) fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a>) {
        out.push((format!("{prefix}.conv.weight"), &self.conv.weight));
        out.push((format!("{prefix}.conv.bias"), &self.conv.bias));
        out.push((format!("{prefix}.bn.gamma"), &self.bn.gamma));
        out.push((format!("{prefix}.bn.beta"), &self.bn.beta));
    }

    pub(crate) fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamSinkMut<'a>) {
        out.push((format!("{prefix}.conv.weight"), &mut self.conv.weight));
        out.push((format!("{prefix}.conv.bias"), &mut self.conv.bias));
        out.push((format!("{prefix}.bn.gamma"), &mut self.bn.gamma));
        out.push((format!("{prefix}.bn.beta"), &mut self.bn.beta));
    }

    pub(crate) fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a>) {
        out.push((format!("{prefix}.bn.running_mean"), &self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &self.bn.running_var));
    }

    pub(crate) fn collect_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamSinkMut<'a>) {
        out.push((format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &mut self.bn.running_var));
    }
}

/// Two 3x3 conv blocks with an optional residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct BottleneckCache {
    cv1: ConvBlockCache,
    cv2: ConvBlockCache,
}

impl Bottleneck {
    pub fn new(in_channels: usize, out_channels: usize, shortcut: bool) -> Result<Self> {
        if shortcut && in_channels != out_channels {
            return Err(Error::Shape(format!(
                "bottleneck shortcut needs equal channels, got {in_channels} -> {out_channels}"
            )));
        }
        Ok(Bottleneck {
            cv1: ConvBlock::new(in_channels, out_channels, 3, 1),
            cv2: ConvBlock::new(out_channels, out_channels, 3, 1),
            shortcut,
        })
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.infer(&self.cv1.infer(x)?)?;
        if self.shortcut {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BottleneckCache)> {
        let (h, cv1) = self.cv1.forward_train(x)?;
        let (mut y, cv2) = self.cv2.forward_train(&h)?;
        if self.shortcut {
            y.add_assign(x)?;
        }
        Ok((y, BottleneckCache { cv1, cv2 }))
    }

    pub(crate) fn backward(
        &self,
        cache: &BottleneckCache,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut GradSink,
    ) -> Result<Tensor> {
        let g = self
            .cv2
            .backward(&cache.cv2, grad_out, &format!("{prefix}.cv2"), grads)?;
        let mut gx = self.cv1.backward(&cache.cv1, &g, &format!("{prefix}.cv1"), grads)?;
        if self.shortcut {
            gx.add_assign(grad_out)?;
        }
        Ok(gx)
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a>) {
        self.cv1.collect_params(&format!("{prefix}.cv1"), out);
        self.cv2.collect_params(&format!("{prefix}.cv2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamSinkMut<'a>) {
        self.cv1.collect_params_mut(&format!("{prefix}.cv1"), out);
        self.cv2.collect_params_mut(&format!("{prefix}.cv2"), out);
    }

    fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a>) {
        self.cv1.collect_buffers(&format!("{prefix}.cv1"), out);
        self.cv2.collect_buffers(&format!("{prefix}.cv2"), out);
    }

    fn collect_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamSinkMut<'a>) {
        self.cv1.collect_buffers_mut(&format!("{prefix}.cv1"), out);
        self.cv2.collect_buffers_mut(&format!("{prefix}.cv2"), out);
    }
}

/// CSP block with two convolutions: a 1x1 conv splits into two halves, `n`
/// bottlenecks are chained on the second half, and every intermediate branch
/// is concatenated and projected by a closing 1x1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct C2fBlock {
    pub cv_in: ConvBlock,
    pub bottlenecks: Vec<Bottleneck>,
    pub cv_out: ConvBlock,
    pub shortcut: bool,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct C2fCache {
    cv_in: ConvBlockCache,
    bottlenecks: Vec<BottleneckCache>,
    cv_out: ConvBlockCache,
}

impl C2fBlock {
    /// Hidden width is half the output width.
    pub fn new(in_channels: usize, out_channels: usize, shortcut: bool, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("C2f repeat count must be >= 1".into()));
        }
        if out_channels < 2 || !out_channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "C2f output width {out_channels} must be even"
            )));
        }
        let hidden = out_channels / 2;
        Ok(C2fBlock {
            cv_in: ConvBlock::new(in_channels, 2 * hidden, 1, 1),
            bottlenecks: (0..n)
                .map(|_| Bottleneck::new(hidden, hidden, shortcut))
                .collect::<Result<_>>()?,
            cv_out: ConvBlock::new((2 + n) * hidden, out_channels, 1, 1),
            shortcut,
            hidden,
        })
    }

    pub fn repeats(&self) -> usize {
        self.bottlenecks.len()
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv_in.infer(x)?;
        let mut branches = split_channels(&y, &[self.hidden, self.hidden])?;
        for b in &self.bottlenecks {
            let next = b.infer(branches.last().expect("two initial branches"))?;
            branches.push(next);
        }
        let refs: Vec<&Tensor> = branches.iter().collect();
        self.cv_out.infer(&concat_channels(&refs)?)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, C2fCache)> {
        let (y, cv_in) = self.cv_in.forward_train(x)?;
        let mut branches = split_channels(&y, &[self.hidden, self.hidden])?;
        let mut caches = Vec::with_capacity(self.bottlenecks.len());
        for b in &mut self.bottlenecks {
            let (next, cache) = b.forward_train(branches.last().expect("two initial branches"))?;
            branches.push(next);
            caches.push(cache);
        }
        let refs: Vec<&Tensor> = branches.iter().collect();
        let (out, cv_out) = self.cv_out.forward_train(&concat_channels(&refs)?)?;
        Ok((
            out,
            C2fCache {
                cv_in,
                bottlenecks: caches,
                cv_out,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        cache: &C2fCache,
        grad_out: &Tensor,
        prefix: &str,
        grads: &mut GradSink,
    ) -> Result<Tensor> {
        let n = self.bottlenecks.len();
        let g_cat = self
            .cv_out
            .backward(&cache.cv_out, grad_out, &format!("{prefix}.cv_out"), grads)?;
        let mut g_branches = split_channels(&g_cat, &vec![self.hidden; 2 + n])?;
        // Branch i+2 is the output of bottleneck i, fed by branch i+1.
        let mut carry = g_branches.pop().expect("2 + n branches");
        for (i, b) in self.bottlenecks.iter().enumerate().rev() {
            let mut g = b.backward(&cache.bottlenecks[i], &carry, &format!("{prefix}.m{i}"), grads)?;
            g.add_assign(&g_branches[i + 1])?;
            carry = g;
        }
        let g_in = concat_channels(&[&g_branches[0], &carry])?;
        self.cv_in
            .backward(&cache.cv_in, &g_in, &format!("{prefix}.cv_in"), grads)
    }

    pub(crate) fn collect_params<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a>) {
        self.cv_in.collect_params(&format!("{prefix}.cv_in"), out);
        for (i, b) in self.bottlenecks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.m{i}"), out);
        }
        self.cv_out.collect_params(&format!("{prefix}.cv_out"), out);
    }

    pub(crate) fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamSinkMut<'a>) {
        self.cv_in.collect_params_mut(&format!("{prefix}.cv_in"), out);
        for (i, b) in self.bottlenecks.iter_mut().enumerate() {
            b.collect_params_mut(&format!("{prefix}.m{i}"), out);
        }
        self.cv_out.collect_params_mut(&format!("{prefix}.cv_out"), out);
    }

    pub(crate) fn collect_buffers<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a>) {
        self.cv_in.collect_buffers(&format!("{prefix}.cv_in"), out);
        for (i, b) in self.bottlenecks.iter().enumerate() {
            b.collect_buffers(&format!("{prefix}.m{i}"), out);
        }
        self.cv_out.collect_buffers(&format!("{prefix}.cv_out"), out);
    }

    pub(crate) fn collect_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamSinkMut<'a>) {
        self.cv_in.collect_buffers_mut(&format!("{prefix}.cv_in"), out);
        for (i, b) in self.bottlenecks.iter_mut().enumerate() {
            b.collect_buffers_mut(&format!("{prefix}.m{i}"), out);
        }
        self.cv_out.collect_buffers_mut(&format!("{prefix}.cv_out"), out);
    }
}

/// Global average pool followed by one fully-connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyHead {
    /// `[num_classes, in_channels]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadCache {
    input_shape: Vec<usize>,
    pooled: Tensor,
}

impl ClassifyHead {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        ClassifyHead {
            weight: Tensor::zeros(&[num_classes, in_channels]),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(&global_avg_pool(x)?, &self.weight, &self.bias)
    }

    pub(crate) fn forward_train(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let pooled = global_avg_pool(x)?;
        let logits = linear_forward(&pooled, &self.weight, &self.bias)?;
        Ok((
            logits,
            HeadCache {
                input_shape: x.shape().to_vec(),
                pooled,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        cache: &HeadCache,
        grad_logits: &Tensor,
        grads: &mut GradSink,
    ) -> Result<Tensor> {
        let g = linear_backward(&cache.pooled, &self.weight, &self.bias, grad_logits)?;
        grads.insert("head.fc.weight".into(), g.weight);
        grads.insert("head.fc.bias".into(), g.bias);
        global_avg_pool_backward(&cache.input_shape, &g.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randomize(block: &mut C2fBlock, seed: u32) {
        let mut s = seed;
        let mut params = Vec::new();
        block.collect_params_mut("b", &mut params);
        for (_, t) in params {
            for v in t.data_mut() {
                s = s.wrapping_mul(1664525).wrapping_add(1013904223);
                *v = ((s >> 8) as f32 / (1u32 << 24) as f32 - 0.5) * 0.8;
            }
        }
    }

    #[test]
    fn c2f_preserves_shape() {
        let block = C2fBlock::new(32, 32, false, 1).unwrap();
        let x = Tensor::from_fn(&[1, 32, 32, 32], |i| (i as f32 * 0.01).sin());
        assert_eq!(block.infer(&x).unwrap().shape(), &[1, 32, 32, 32]);
    }

    #[test]
    fn zero_bottleneck_is_identity_with_shortcut() {
        let b = Bottleneck::new(4, 4, true).unwrap();
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| (i as f32).cos());
        assert_eq!(b.infer(&x).unwrap(), x);
        let mut b = b;
        let (y, _) = b.forward_train(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_bottleneck_without_shortcut_is_zero() {
        let b = Bottleneck::new(4, 4, false).unwrap();
        let x = Tensor::from_fn(&[1, 4, 3, 3], |i| i as f32);
        assert!(b.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shortcut_needs_equal_channels() {
        assert!(Bottleneck::new(4, 8, true).is_err());
        assert!(Bottleneck::new(4, 8, false).is_ok());
        assert!(C2fBlock::new(8, 8, true, 0).is_err());
    }

    #[test]
    fn c2f_channel_mismatch() {
        let block = C2fBlock::new(8, 8, true, 1).unwrap();
        assert!(block.infer(&Tensor::zeros(&[1, 4, 4, 4])).is_err());
    }

    #[test]
    fn c2f_training_forward_is_deterministic() {
        let mut a = C2fBlock::new(8, 8, true, 2).unwrap();
        randomize(&mut a, 3);
        let mut b = a.clone();
        let x = Tensor::from_fn(&[2, 8, 4, 4], |i| (i as f32 * 0.37).sin());
        let (ya, _) = a.forward_train(&x).unwrap();
        let (yb, _) = b.forward_train(&x).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(a, b);
    }
}
