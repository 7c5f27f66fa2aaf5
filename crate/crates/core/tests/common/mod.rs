//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls into the code under test for the quantity it
//! checks.
#![allow(dead_code)]

pub mod grad;

use c2f_core::net::{Network, NetworkSpec};
use c2f_core::tensor::softmax_cross_entropy;
use c2f_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Gradient scale for primitive checks on inputs drawn from [-1, 1].
/// Rounding of f32 outputs leaves up to ~2.5e-4 of absolute noise on a
/// central difference at h = 1e-3, so entries below this scale are compared
/// against it rather than against their own magnitude.
pub const PRIMITIVE_SCALE: f64 = 1.0;
/// Same role for the whole network, whose scalar loss carries ~3e-5 of
/// difference noise.
pub const NETWORK_SCALE: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, scale)`.
pub fn rel_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale)
}

/// `sum(r * y)` accumulated in f64.
pub fn weighted_sum(y: &Tensor, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b).sum()
}

/// Central differences of `loss` with respect to every entry of `x`,
/// compared against `analytic`. Returns the worst relative error.
pub fn check_tensor(
    x: &Tensor,
    analytic: &Tensor,
    h: f32,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (loss(&plus) - loss(&minus)) / step;
        worst = worst.max(rel_error(analytic.data()[i] as f64, numeric, PRIMITIVE_SCALE));
    }
    worst
}

/// Confusion counts by direct enumeration.
pub fn naive_counts(preds: &[usize], labels: &[usize], positive: usize) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Average precision by sweeping every distinct score as a threshold and
/// integrating the interpolated precision `max_{r' >= r} p(r')` over recall.
pub fn brute_force_ap(scores: &[f64], relevant: &[bool]) -> f64 {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0f64, 1.0f64)];
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &r) in scores.iter().zip(relevant) {
            if s >= t {
                if r {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    for k in 1..points.len() {
        let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - points[k - 1].0) * envelope;
    }
    ap
}

/// Rounds to two decimals of a percentage.
pub fn pct2(v: f64) -> f64 {
    (v * 1e4).round() / 1e2
}

/// Every (tp, fp, fn, tn) with the given total whose rounded percentages
/// (accuracy, precision, F1, recall) fall within `tol` of `target`.
pub fn exhaustive_count_search(n: u64, target: [f64; 4], tol: [f64; 4]) -> Vec<(u64, u64, u64, u64)> {
    let mut hits = Vec::new();
    for tp in 0..=n {
        for fp in 0..=n - tp {
            for fn_ in 0..=n - tp - fp {
                let tn = n - tp - fp - fn_;
                if tp == 0 {
                    continue;
                }
                let acc = (tp + tn) as f64 / n as f64;
                let prec = tp as f64 / (tp + fp) as f64;
                let rec = tp as f64 / (tp + fn_) as f64;
                let f1 = 2.0 * prec * rec / (prec + rec);
                let got = [pct2(acc), pct2(prec), pct2(f1), pct2(rec)];
                if got.iter().zip(&target).zip(&tol).all(|((g, t), e)| (g - t).abs() <= e + 1e-9) {
                    hits.push((tp, fp, fn_, tn));
                }
            }
        }
    }
    hits
}

/// Mean silhouette coefficient under Euclidean distance.
pub fn silhouette(points: &[f64], dims: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dist = |i: usize, j: usize| -> f64 {
        (0..dims)
            .map(|d| (points[i * dims + d] - points[j * dims + d]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Three isotropic Gaussian clusters in `dim` dimensions, `per` points each,
/// centers spread far apart relative to the unit noise.
pub fn gaussian_clusters(per: usize, dim: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let centers: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..dim).map(|_| r.random_range(-10.0f32..10.0)).collect())
        .collect();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            x.push(center.iter().map(|&m| m + noise.sample(&mut r)).collect());
            labels.push(c);
        }
    }
    (x, labels)
}

/// Worst relative error over `samples` randomly chosen parameter entries of a
/// 16x16-input network, plus the per-sample errors for reporting.
pub fn whole_network_check(samples: usize, seed: u64) -> (f64, Vec<f64>) {
    let spec = NetworkSpec::standard(2, 16);
    let mut net = Network::build(&spec, seed).unwrap();
    let mut r = rng(seed + 100);
    let x = Tensor::from_fn(&[4, 3, 16, 16], |_| r.random_range(0.0f32..1.0));
    let labels = [0, 1, 1, 0];
    let logits = net.forward(&x, true).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let grads = net.backward(&g).unwrap();

    let sizes: Vec<(String, usize)> = net.params().into_iter().map(|(n, t)| (n, t.numel())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut errors = Vec::new();
    for _ in 0..samples {
        let mut flat = r.random_range(0..total);
        let (name, idx) = sizes
            .iter()
            .find_map(|(n, len)| {
                if flat < *len {
                    Some((n.clone(), flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .unwrap();
        let mut eval = |delta: f32| -> (f64, f64) {
            let set = |net: &mut Network, v: Option<f32>| -> f32 {
                let mut params = net.params_mut();
                let t = &mut params.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                let orig = t.data()[idx];
                t.data_mut()[idx] = v.unwrap_or(orig + delta);
                orig
            };
            let orig = set(&mut net, None);
            let actual = (orig + delta) as f64 - orig as f64;
            let loss = softmax_cross_entropy(&net.forward(&x, true).unwrap(), &labels).unwrap().0;
            set(&mut net, Some(orig));
            (loss, actual)
        };
        let (lp, dp) = eval(1e-3);
        let (lm, dm) = eval(-1e-3);
        let numeric = (lp - lm) / (dp - dm);
        errors.push(rel_error(grads[&name].data()[idx] as f64, numeric, NETWORK_SCALE));
    }
    (errors.iter().cloned().fold(0.0, f64::max), errors)
}
