//! Finite-difference checks of every primitive backward pass. Each function
//! returns `(what, worst relative error)` pairs.

use c2f_core::tensor::*;
use c2f_core::Tensor;
use rand::Rng;

use super::{check_tensor, random_tensor, rng, weighted_sum};

pub const H: f32 = 1e-3;

fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn as_tensor(shape: &[usize], w: &[f64]) -> Tensor {
    Tensor::new(shape, w.iter().map(|&v| v as f32).collect()).unwrap()
}

pub fn conv() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (stride, pad, k) in [(2, 1, 3), (1, 1, 3), (1, 0, 1)] {
        let mut r = rng(11);
        let x = random_tensor(&[1, 2, 5, 5], &mut r);
        let mut p = ConvParams::new(2, 3, k, stride, pad);
        p.weight = random_tensor(p.weight.shape(), &mut r);
        p.bias = random_tensor(&[3], &mut r);
        let y = conv2d_forward(&x, &p).unwrap();
        let rw = weights(y.numel(), 3);
        let g = conv2d_backward(&x, &p, &as_tensor(y.shape(), &rw)).unwrap();
        let tag = format!("conv k{k} s{stride} p{pad}");

        let e = check_tensor(&x, &g.input, H, |x| weighted_sum(&conv2d_forward(x, &p).unwrap(), &rw));
        out.push((format!("{tag} input"), e));
        let e = check_tensor(&p.weight, &g.weight, H, |w| {
            let q = ConvParams { weight: w.clone(), ..p.clone() };
            weighted_sum(&conv2d_forward(&x, &q).unwrap(), &rw)
        });
        out.push((format!("{tag} weight"), e));
        let e = check_tensor(&p.bias, &g.bias, H, |b| {
            let q = ConvParams { bias: b.clone(), ..p.clone() };
            weighted_sum(&conv2d_forward(&x, &q).unwrap(), &rw)
        });
        out.push((format!("{tag} bias"), e));
    }
    out
}

pub fn batchnorm() -> Vec<(String, f64)> {
    let mut r = rng(12);
    let x = random_tensor(&[3, 2, 3, 3], &mut r);
    let mut p = BatchNormParams::new(2);
    p.gamma = random_tensor(&[2], &mut r);
    p.beta = random_tensor(&[2], &mut r);
    let (y, cache) = batchnorm_forward(&x, &mut p.clone(), true).unwrap();
    let rw = weights(y.numel(), 4);
    let g = batchnorm_backward(&x, &p, &as_tensor(y.shape(), &rw), cache.as_ref()).unwrap();
    let fwd = |x: &Tensor, p: &BatchNormParams| {
        weighted_sum(&batchnorm_forward(x, &mut p.clone(), true).unwrap().0, &rw)
    };
    vec![
        ("batchnorm input".into(), check_tensor(&x, &g.input, H, |x| fwd(x, &p))),
        (
            "batchnorm gamma".into(),
            check_tensor(&p.gamma, &g.gamma, H, |t| fwd(&x, &BatchNormParams { gamma: t.clone(), ..p.clone() })),
        ),
        (
            "batchnorm beta".into(),
            check_tensor(&p.beta, &g.beta, H, |t| fwd(&x, &BatchNormParams { beta: t.clone(), ..p.clone() })),
        ),
    ]
}

pub fn silu_act() -> Vec<(String, f64)> {
    let mut r = rng(13);
    let x = Tensor::from_fn(&[200], |_| r.random_range(-6.0f32..6.0));
    let rw = weights(200, 5);
    let g = silu_backward(&x, &as_tensor(&[200], &rw));
    vec![("silu".into(), check_tensor(&x, &g, H, |x| weighted_sum(&silu(x), &rw)))]
}

pub fn linear() -> Vec<(String, f64)> {
    let mut r = rng(14);
    let x = random_tensor(&[4, 6], &mut r);
    let w = random_tensor(&[3, 6], &mut r);
    let b = random_tensor(&[3], &mut r);
    let rw = weights(12, 6);
    let g = linear_backward(&x, &w, &b, &as_tensor(&[4, 3], &rw)).unwrap();
    vec![
        ("linear input".into(), check_tensor(&x, &g.input, H, |x| weighted_sum(&linear_forward(x, &w, &b).unwrap(), &rw))),
        ("linear weight".into(), check_tensor(&w, &g.weight, H, |w| weighted_sum(&linear_forward(&x, w, &b).unwrap(), &rw))),
        ("linear bias".into(), check_tensor(&b, &g.bias, H, |b| weighted_sum(&linear_forward(&x, &w, b).unwrap(), &rw))),
    ]
}

pub fn pooling() -> Vec<(String, f64)> {
    let mut r = rng(15);
    let x = random_tensor(&[2, 3, 4, 4], &mut r);
    let rw = weights(6, 7);
    let g = global_avg_pool_backward(x.shape(), &as_tensor(&[2, 3], &rw)).unwrap();
    vec![("global avg pool".into(), check_tensor(&x, &g, H, |x| weighted_sum(&global_avg_pool(x).unwrap(), &rw)))]
}

pub fn cross_entropy() -> Vec<(String, f64)> {
    let mut r = rng(16);
    let logits = Tensor::from_fn(&[5, 2], |_| r.random_range(-3.0f32..3.0));
    let labels = [0, 1, 1, 0, 1];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let e = check_tensor(&logits, &g, H, |z| softmax_cross_entropy(z, &labels).unwrap().0);
    vec![("softmax cross-entropy".into(), e)]
}

/// Splitting the upstream gradient must be the adjoint of concatenation.
pub fn concat_split() -> Vec<(String, f64)> {
    let mut r = rng(17);
    let a = random_tensor(&[2, 3, 2, 2], &mut r);
    let b = random_tensor(&[2, 1, 2, 2], &mut r);
    let rw = weights(2 * 4 * 4, 8);
    let parts = split_channels(&as_tensor(&[2, 4, 2, 2], &rw), &[3, 1]).unwrap();
    vec![
        ("concat part a".into(), check_tensor(&a, &parts[0], H, |a| weighted_sum(&concat_channels(&[a, &b]).unwrap(), &rw))),
        ("concat part b".into(), check_tensor(&b, &parts[1], H, |b| weighted_sum(&concat_channels(&[&a, b]).unwrap(), &rw))),
    ]
}

pub fn all() -> Vec<(String, f64)> {
    [conv(), batchnorm(), silu_act(), linear(), pooling(), cross_entropy(), concat_split()].concat()
}
