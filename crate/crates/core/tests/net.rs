mod common;

use c2f_core::net::{build_network, C2fBlock, ConvBlock, Network, NetworkSpec, Stage};
use c2f_core::Tensor;
use common::*;
use rand::Rng;

/// Direct-loop convolution + inference batch norm + SiLU in f64, with no
/// shared code from the library.
fn conv_bn_silu(x: &[f64], shape: [usize; 4], b: &ConvBlock) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, w] = shape;
    let cout = b.conv.out_channels;
    let (kh, kw) = b.conv.kernel;
    let (s, p) = (b.conv.stride, b.conv.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let wt = b.conv.weight.data();
    let mut out = vec![0f64; n * cout * oh * ow];
    for bi in 0..n {
        for o in 0..cout {
            let gamma = b.bn.gamma.data()[o] as f64;
            let beta = b.bn.beta.data()[o] as f64;
            let mean = b.bn.running_mean.data()[o] as f64;
            let var = b.bn.running_var.data()[o] as f64;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.conv.bias.data()[o] as f64;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * s + i) as isize - p as isize;
                                let ix = (xx * s + j) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = x[((bi * cin + c) * h + iy as usize) * w + ix as usize];
                                acc += v * wt[((o * cin + c) * kh + i) * kw + j] as f64;
                            }
                        }
                    }
                    let z = gamma * (acc - mean) / (var + b.bn.eps as f64).sqrt() + beta;
                    out[((bi * cout + o) * oh + y) * ow + xx] = z / (1.0 + (-z).exp());
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

fn channels(x: &[f64], shape: [usize; 4], from: usize, count: usize) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let mut out = Vec::with_capacity(n * count * h * w);
    for b in 0..n {
        out.extend_from_slice(&x[(b * c + from) * h * w..(b * c + from + count) * h * w]);
    }
    out
}

fn concat(parts: &[Vec<f64>], n: usize, counts: &[usize], hw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        for (p, &c) in parts.iter().zip(counts) {
            out.extend_from_slice(&p[b * c * hw..(b + 1) * c * hw]);
        }
    }
    out
}

fn randomize(block: &mut ConvBlock, r: &mut rand_chacha::ChaCha8Rng) {
    for v in block.conv.weight.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    for v in block.conv.bias.data_mut() {
        *v = r.random_range(-0.2..0.2);
    }
    for t in [&mut block.bn.gamma, &mut block.bn.running_var] {
        for v in t.data_mut() {
            *v = r.random_range(0.5..1.5);
        }
    }
    for t in [&mut block.bn.beta, &mut block.bn.running_mean] {
        for v in t.data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn c2f_matches_straight_line_oracle() {
    for shortcut in [true, false] {
        let mut r = rng(31);
        let mut block = C2fBlock::new(8, 8, shortcut, 2).unwrap();
        randomize(&mut block.cv_in, &mut r);
        randomize(&mut block.cv_out, &mut r);
        for b in &mut block.bottlenecks {
            randomize(&mut b.cv1, &mut r);
            randomize(&mut b.cv2, &mut r);
        }
        let shape = [2, 8, 6, 6];
        let x = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0));
        let got = block.infer(&x).unwrap();

        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let hidden = 4;
        let (y, ys) = conv_bn_silu(&x64, shape, &block.cv_in);
        let a = channels(&y, ys, 0, hidden);
        let mut cur = channels(&y, ys, hidden, hidden);
        let hs = [2, hidden, 6, 6];
        let mut branches = vec![a, cur.clone()];
        for b in &block.bottlenecks {
            let (t, _) = conv_bn_silu(&cur, hs, &b.cv1);
            let (t, _) = conv_bn_silu(&t, hs, &b.cv2);
            cur = if shortcut { t.iter().zip(&cur).map(|(p, q)| p + q).collect() } else { t };
            branches.push(cur.clone());
        }
        let cat = concat(&branches, 2, &[hidden; 4], 36);
        let (expected, es) = conv_bn_silu(&cat, [2, 4 * hidden, 6, 6], &block.cv_out);

        assert_eq!(got.shape(), &es);
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((*g as f64 - e).abs() <= 1e-6 * (1.0 + e.abs()), "{g} vs {e}");
        }
    }
}

#[test]
fn shape_trace_of_128_input() {
    let net = build_network(2, 0).unwrap();
    let x = Tensor::full(&[1, 3, 128, 128], 0.5);
    let trace = net.shape_trace(&x).unwrap();
    let names: Vec<&str> = trace.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["conv1", "conv2", "c2f1", "conv3", "c2f2", "conv4", "c2f3", "conv5", "c2f4", "head"]
    );
    assert_eq!(trace[0].1, [1, 16, 64, 64]);
    assert_eq!(trace[1].1, [1, 32, 32, 32]);
    assert_eq!(trace[2].1, [1, 32, 32, 32]);
    assert_eq!(trace[8].1, [1, 256, 4, 4]);
    assert_eq!(trace[9].1, [1, 2]);
    assert_eq!(net.stage_census(), (5, 4, 1));
}

/// Closed-form count: a k x k conv block from a to b channels holds
/// k*k*a*b weights, b biases and 2b batch-norm affine parameters.
#[test]
fn parameter_count_closed_form() {
    let block = |a: usize, b: usize, k: usize| k * k * a * b + 3 * b;
    let c2f = |a: usize, b: usize, n: usize| {
        let h = b / 2;
        block(a, 2 * h, 1) + n * 2 * block(h, h, 3) + block((2 + n) * h, b, 1)
    };
    let expected = block(3, 16, 3)
        + block(16, 32, 3)
        + c2f(32, 32, 1)
        + block(32, 64, 3)
        + c2f(64, 64, 2)
        + block(64, 128, 3)
        + c2f(128, 128, 2)
        + block(128, 256, 3)
        + c2f(256, 256, 1)
        + 256 * 2
        + 2;
    let net = build_network(2, 0).unwrap();
    assert_eq!(net.num_params(), expected);
}

#[test]
fn stage_widths_shortcuts_and_kernels() {
    let net = build_network(2, 0).unwrap();
    let c2f: Vec<(usize, bool, usize, usize)> = net
        .stages()
        .filter_map(|(_, s)| match s {
            Stage::C2f(b) => Some((b.cv_out.out_channels(), b.shortcut, b.repeats(), b.hidden_channels())),
            Stage::Conv(_) => None,
        })
        .collect();
    assert_eq!(
        c2f,
        [(32, false, 1, 16), (64, true, 2, 32), (128, true, 2, 64), (256, true, 1, 128)]
    );
    for (_, s) in net.stages() {
        if let Stage::Conv(b) = s {
            assert_eq!((b.conv.kernel, b.conv.stride, b.conv.padding), ((3, 3), 2, 1));
        }
    }
}

#[test]
fn inference_is_batch_invariant() {
    let net = Network::build(&NetworkSpec::standard(2, 32), 4).unwrap();
    let mut r = rng(5);
    let x = Tensor::from_fn(&[5, 3, 32, 32], |_| r.random_range(0.0..1.0));
    let all = net.infer(&x).unwrap();
    for i in 0..5 {
        let one = Tensor::new(&[1, 3, 32, 32], x.data()[i * 3072..(i + 1) * 3072].to_vec()).unwrap();
        let y = net.infer(&one).unwrap();
        assert_eq!(y.data(), &all.data()[i * 2..i * 2 + 2]);
    }
}
