//! Exact t-SNE: perplexity-calibrated Gaussian affinities in the input space,
//! Student-t affinities in the embedding, gradient descent on KL(P || Q).

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{DatasetManifest, DecodedSplit, Split};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

const FLOOR: f64 = 1e-12;
const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_SEARCH_STEPS: usize = 50;

/// Symmetric joint probabilities over `n` points (row-major `n x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    pub p: Vec<f64>,
    pub perplexity: f64,
    /// Gaussian bandwidth chosen for each row.
    pub sigmas: Vec<f64>,
    /// Perplexity actually reached by each conditional row.
    pub row_perplexity: Vec<f64>,
}

impl AffinityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// Squared Euclidean distances, accumulated in f64.
pub fn pairwise_sq_distances(rows: &[Vec<f32>]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0f64; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for (j, o) in out.iter_mut().enumerate() {
            if i != j {
                *o = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(&a, &b)| {
                        let t = a as f64 - b as f64;
                        t * t
                    })
                    .sum();
            }
        }
    });
    // identical values on both sides of the diagonal
    for i in 0..n {
        for j in 0..i {
            d[i * n + j] = d[j * n + i];
        }
    }
    d
}

/// Row `i` of `p_{j|i}` for precision `beta`; returns the entropy in nats.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let shifted = d - dmin;
        let v = (-shifted * beta).exp();
        *o = v;
        sum += v;
        weighted += shifted * v;
    }
    let sum = sum.max(FLOOR);
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Conditional probabilities `p_{j|i}` (row-major), the chosen bandwidths and
/// realized perplexities. Each row is bisected on the Gaussian precision until
/// its perplexity is within 1e-5 of the target.
pub fn conditional_probabilities(
    dist: &[f64],
    n: usize,
    perplexity: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let target = perplexity.ln();
    let mut cond = vec![0f64; n * n];
    let results: Vec<(f64, f64)> = cond
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let d = &dist[i * n..(i + 1) * n];
            let mean = d.iter().sum::<f64>() / (n - 1) as f64;
            let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut h = conditional_row(d, i, beta, row);
            for _ in 0..MAX_SEARCH_STEPS {
                if (h.exp() - perplexity).abs() < PERPLEXITY_TOL {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                h = conditional_row(d, i, beta, row);
            }
            ((1.0 / (2.0 * beta)).sqrt(), h.exp())
        })
        .collect();
    let (sigmas, realized) = results.into_iter().unzip();
    (cond, sigmas, realized)
}

/// Perplexity-calibrated joint affinities `P = (P_cond + P_cond^T) / (2n)`.
///
/// Needs `n >= 3` and `0 < perplexity <= n - 1`.
pub fn conditional_affinities(x: &[Vec<f32>], perplexity: f64) -> Result<AffinityMatrix> {
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if perplexity.is_nan() || perplexity <= 0.0 || perplexity > (n - 1) as f64 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {perplexity} must be in (0, {}] for {n} points",
            n - 1
        )));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("t-SNE input rows differ in length".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input".into()));
    }
    let dist = pairwise_sq_distances(x);
    let (cond, sigmas, row_perplexity) = conditional_probabilities(&dist, n, perplexity);
    let mut p = vec![0f64; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in i + 1..n {
            let v = (cond[i * n + j] + cond[j * n + i]) / norm;
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    Ok(AffinityMatrix {
        n,
        p,
        perplexity,
        sigmas,
        row_perplexity,
    })
}

/// `sum p * ln(p / q)` with both arguments floored at 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL of {} vs {} entries", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.max(FLOOR) / q.max(FLOOR)).ln())
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneOptions {
    pub dims: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            dims: 2,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingResult {
    /// Row-major `n x dims`.
    pub points: Vec<f64>,
    pub n: usize,
    pub dims: usize,
    pub kl: f64,
    /// KL(P || Q) after every iteration.
    pub kl_trace: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl EmbeddingResult {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    /// `x,y[,z],label,file` rows.
    pub fn to_csv(&self, labels: &[usize], files: &[String]) -> String {
        let axes = ["x", "y", "z"];
        let mut s = String::new();
        let _ = writeln!(s, "{},label,file", axes[..self.dims].join(","));
        for i in 0..self.n {
            let coords: Vec<String> = self.point(i).iter().map(|v| format!("{v:.6}")).collect();
            let label = labels.get(i).map(|l| l.to_string()).unwrap_or_default();
            let file = files.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(s, "{},{label},{file}", coords.join(","));
        }
        s
    }
}

/// Student-t numerators `1/(1+|y_i-y_j|^2)` (zero diagonal) and their sum.
fn student_t(y: &[f64], n: usize, dims: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0f64; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let yi = &y[i * dims..(i + 1) * dims];
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let yj = &y[j * dims..(j + 1) * dims];
                let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                *v = 1.0 / (1.0 + d2);
            }
        }
    });
    let z = num.iter().sum::<f64>().max(FLOOR);
    (num, z)
}

/// Runs the optimization from precomputed affinities.
pub fn embed_affinities(p: &AffinityMatrix, opts: &TsneOptions) -> Result<EmbeddingResult> {
    let (n, dims) = (p.n, opts.dims);
    if !(2..=3).contains(&dims) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be 2 or 3, got {dims}"
        )));
    }
    if n < 4 {
        return Err(Error::InvalidArgument(format!("t-SNE embedding needs at least 4 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = Normal::new(0.0, opts.init_std)
        .map_err(|e| Error::InvalidArgument(format!("init_std: {e}")))?;
    let mut y: Vec<f64> = (0..n * dims).map(|_| init.sample(&mut rng)).collect();
    let mut update = vec![0f64; n * dims];
    let mut gains = vec![1f64; n * dims];
    let mut grad = vec![0f64; n * dims];
    let mut kl_trace = Vec::with_capacity(opts.iterations);

    for iter in 0..opts.iterations {
        let exaggeration = if iter < opts.exaggeration_iters {
            opts.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < opts.momentum_switch {
            opts.initial_momentum
        } else {
            opts.final_momentum
        };
        let (num, z) = student_t(&y, n, dims);

        grad.par_chunks_mut(dims).enumerate().for_each(|(i, g)| {
            g.fill(0.0);
            let yi = &y[i * dims..(i + 1) * dims];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nij = num[i * n + j];
                // KL gradient without its constant factor 4; learning rates are
                // expressed on this scale, as in the reference implementation.
                let coeff = (exaggeration * p.p[i * n + j] - nij / z) * nij;
                for d in 0..dims {
                    g[d] += coeff * (yi[d] - y[j * dims + d]);
                }
            }
        });
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TsneDiverged(iter));
        }

        for k in 0..n * dims {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            update[k] = momentum * update[k] - opts.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for d in 0..dims {
            let mean = (0..n).map(|i| y[i * dims + d]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * dims + d] -= mean;
            }
        }

        let (num, z) = student_t(&y, n, dims);
        let kl: f64 = p
            .p
            .iter()
            .zip(&num)
            .filter(|(&pv, _)| pv > 0.0)
            .map(|(&pv, &nv)| pv * (pv.max(FLOOR) / (nv / z).max(FLOOR)).ln())
            .sum();
        kl_trace.push(kl);
    }

    let kl = match kl_trace.last() {
        Some(&kl) => kl,
        None => {
            let (num, z) = student_t(&y, n, dims);
            let q: Vec<f64> = num.iter().map(|v| v / z).collect();
            kl_divergence(&p.p, &q)?
        }
    };
    Ok(EmbeddingResult {
        points: y,
        n,
        dims,
        kl,
        kl_trace,
        iterations: opts.iterations,
        seed: opts.seed,
    })
}

pub fn tsne_embed(x: &[Vec<f32>], opts: &TsneOptions) -> Result<EmbeddingResult> {
    if !(2..=3).contains(&opts.dims) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be 2 or 3, got {}",
            opts.dims
        )));
    }
    let p = conditional_affinities(x, opts.perplexity)?;
    embed_affinities(&p, opts)
}

/// Feature vectors for a split with labels and source files for coloring.
#[derive(Clone, Debug)]
pub struct TsneFeatures {
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub files: Vec<String>,
}

fn file_names(split: &DecodedSplit) -> Vec<String> {
    split
        .paths
        .iter()
        .map(|p| {
            p.file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect()
}

/// Raw-pixel features: each decoded `3 x S x S` image flattened, in manifest order.
pub fn features_for_tsne(
    manifest: &DatasetManifest,
    split: Split,
    img_size: usize,
) -> Result<TsneFeatures> {
    let decoded = DecodedSplit::load(manifest, split, img_size)?;
    let files = file_names(&decoded);
    Ok(TsneFeatures {
        vectors: decoded.images,
        labels: decoded.labels,
        files,
    })
}

/// Pooled backbone features from a trained network instead of raw pixels.
pub fn network_features(
    net: &Network,
    manifest: &DatasetManifest,
    split: Split,
    img_size: usize,
    batch_size: usize,
) -> Result<TsneFeatures> {
    let decoded = DecodedSplit::load(manifest, split, img_size)?;
    let mut vectors = Vec::with_capacity(decoded.len());
    for batch in decoded.batches(batch_size, 0, 0, false)? {
        let feats: Tensor = net.pooled_features(&batch?.images)?;
        let (_, c) = feats.dims2()?;
        vectors.extend(feats.data().chunks(c).map(|r| r.to_vec()));
    }
    let files = file_names(&decoded);
    Ok(TsneFeatures {
        vectors,
        labels: decoded.labels,
        files,
    })
}

pub fn write_embedding_csv(
    path: &Path,
    result: &EmbeddingResult,
    features: &TsneFeatures,
) -> Result<()> {
    std::fs::write(path, result.to_csv(&features.labels, &features.files))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_points_have_uniform_rows() {
        let s = 3f32.sqrt() / 2.0;
        let x = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, s]];
        let d = pairwise_sq_distances(&x);
        let (cond, _, realized) = conditional_probabilities(&d, 3, 2.0);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((cond[i * 3 + j] - expected).abs() < 1e-6);
            }
            assert!((realized[i] - 2.0).abs() < 1e-5);
        }
        let p = conditional_affinities(&x, 2.0).unwrap();
        assert!((p.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_toy_values() {
        let kl = kl_divergence(&[0.6, 0.4], &[0.5, 0.5]).unwrap();
        assert!((kl - 0.020136).abs() < 1e-6, "{kl}");
        assert_eq!(kl_divergence(&[0.6, 0.4], &[0.6, 0.4]).unwrap(), 0.0);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn duplicate_points_do_not_produce_nan() {
        let x = vec![vec![1.0, 1.0]; 6];
        let p = conditional_affinities(&x, 2.0).unwrap();
        assert!(p.p.iter().all(|v| v.is_finite()));
        assert!((p.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argument_checks() {
        let x = vec![vec![0.0f32]; 2];
        assert!(conditional_affinities(&x, 1.0).is_err());
        let x: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32]).collect();
        assert!(conditional_affinities(&x, 30.0).is_err());
        let opts = TsneOptions {
            dims: 4,
            perplexity: 3.0,
            ..Default::default()
        };
        assert!(tsne_embed(&x, &opts).is_err());
    }

    #[test]
    fn csv_has_axis_columns() {
        let r = EmbeddingResult {
            points: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            n: 2,
            dims: 3,
            kl: 0.0,
            kl_trace: vec![],
            iterations: 0,
            seed: 0,
        };
        let csv = r.to_csv(&[0, 1], &["a.png".into(), "b.png".into()]);
        assert!(csv.starts_with("x,y,z,label,file\n1.000000,2.000000,3.000000,0,a.png\n"));
    }
}
