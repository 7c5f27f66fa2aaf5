//! Dataset tree ingestion, image decoding and deterministic batching.
//!
//! Layout: `root/{train,test,valid}/{autistic,non_autistic}/*.{png,jpg,jpeg,ppm}`.
//! Label 0 is `autistic`, label 1 is `non_autistic`.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_DIRS: [&str; 2] = ["autistic", "non_autistic"];
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "ppm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Valid,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Valid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Valid => "valid",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    train: Vec<Sample>,
    test: Vec<Sample>,
    valid: Vec<Sample>,
}

impl DatasetManifest {
    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Valid => &self.valid,
        }
    }

    pub fn class_counts(&self, split: Split) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in self.samples(split) {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Finds a child directory whose name matches `wanted` ignoring case and
/// treating `-`, ` ` and `_` alike.
fn find_dir(parent: &Path, wanted: &str) -> Result<Option<PathBuf>> {
    let norm = |s: &str| s.to_ascii_lowercase().replace(['-', ' '], "_");
    let entries = fs::read_dir(parent).map_err(|e| Error::io(parent, e))?;
    let mut found: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(parent, e))?;
        let path = entry.path();
        if path.is_dir() && norm(&entry.file_name().to_string_lossy()) == wanted {
            found.push(path);
        }
    }
    found.sort();
    Ok(found.into_iter().next())
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
}

/// Scans the dataset tree. Files within each class folder are sorted by name.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for split in Split::ALL {
        let dir = find_dir(root, split.as_str())?
            .ok_or_else(|| Error::Dataset(format!("missing split: {split}")))?;
        let mut samples = Vec::new();
        for (label, class) in CLASS_DIRS.iter().enumerate() {
            let class_dir = find_dir(&dir, class)?.ok_or_else(|| {
                Error::Dataset(format!("missing class folder: {}", dir.join(class).display()))
            })?;
            let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
                .map_err(|e| Error::io(&class_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_image(p))
                .collect();
            if files.is_empty() {
                return Err(Error::Dataset(format!(
                    "empty class folder: {}",
                    class_dir.display()
                )));
            }
            files.sort();
            samples.extend(files.into_iter().map(|path| Sample { path, label }));
        }
        splits.push(samples);
    }
    let valid = splits.pop().expect("three splits");
    let test = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        train,
        test,
        valid,
    })
}

/// Bilinear resize of a planar `[3, h, w]` image using pixel-center alignment
/// (edges clamped).
fn resize_bilinear(src: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f32 / size as f32;
        (0..out)
            .map(|d| {
                let pos = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let ys = axis(size, h);
    let xs = axis(size, w);
    let mut out = vec![0f32; 3 * size * size];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(c * size + oy) * size + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Decodes PNG/JPEG/PPM bytes into a `[3, S, S]` tensor with values in `[0, 1]`.
pub fn decode_image(bytes: &[u8], size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::InvalidArgument("target size must be >= 1".into()));
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Decode("image has a zero dimension".into()));
    }
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    let data = if h == size && w == size {
        planar
    } else {
        resize_bilinear(&planar, h, w, size)
    };
    Tensor::new(&[3, size, size], data)
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, size).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Sample order for one epoch: identity without shuffle, otherwise a
/// permutation drawn from `seed ^ epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, 3, S, S]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the samples in the split's manifest order.
    pub indices: Vec<usize>,
}

fn stack(images: &[&[f32]], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::new(&[images.len(), 3, size, size], data)
}

fn chunk_order(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    Ok(epoch_order(n, seed, epoch, shuffle)
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Lazily decoding batch sequence over one split; the final short batch is kept.
pub struct Batches<'a> {
    samples: &'a [Sample],
    size: usize,
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.chunks.next()?;
        // Decoding is parallel; collect() keeps manifest order.
        let decoded: Result<Vec<Tensor>> = indices
            .par_iter()
            .map(|&i| load_image(&self.samples[i].path, self.size))
            .collect();
        Some(decoded.and_then(|imgs| {
            let refs: Vec<&[f32]> = imgs.iter().map(|t| t.data()).collect();
            Ok(Batch {
                images: stack(&refs, self.size)?,
                labels: indices.iter().map(|&i| self.samples[i].label).collect(),
                indices,
            })
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.chunks.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

#[allow(clippy::too_many_arguments)]
pub fn batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    img_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Batches<'a>> {
    let samples = manifest.samples(split);
    let chunks = chunk_order(samples.len(), batch_size, seed, epoch, shuffle)?;
    Ok(Batches {
        samples,
        size: img_size,
        chunks: chunks.into_iter(),
    })
}

/// A split decoded once and held in memory.
#[derive(Clone, Debug)]
pub struct DecodedSplit {
    pub img_size: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl DecodedSplit {
    pub fn load(manifest: &DatasetManifest, split: Split, img_size: usize) -> Result<Self> {
        let samples = manifest.samples(split);
        let images: Result<Vec<Vec<f32>>> = samples
            .par_iter()
            .map(|s| load_image(&s.path, img_size).map(Tensor::into_data))
            .collect();
        Ok(DecodedSplit {
            img_size,
            images: images?,
            labels: samples.iter().map(|s| s.label).collect(),
            paths: samples.iter().map(|s| s.path.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        shuffle: bool,
    ) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        let chunks = chunk_order(self.len(), batch_size, seed, epoch, shuffle)?;
        Ok(chunks.into_iter().map(move |indices| {
            let refs: Vec<&[f32]> = indices.iter().map(|&i| self.images[i].as_slice()).collect();
            Ok(Batch {
                images: stack(&refs, self.img_size)?,
                labels: indices.iter().map(|&i| self.labels[i]).collect(),
                indices,
            })
        }))
    }
}

/// Per-class evaluation split size used by [`generate_synthetic`].
pub fn synthetic_holdout_size(n_per_class: usize) -> usize {
    (n_per_class / 2).max(2)
}

/// Writes a synthetic two-class dataset in the standard tree layout.
///
/// Class 0 images are red-dominant and class 1 blue-dominant, with per-image
/// tint jitter, a random soft blob and per-pixel Gaussian noise. Output bytes
/// depend only on the arguments.
pub fn generate_synthetic(
    n_per_class: usize,
    size: usize,
    seed: u64,
    out_root: impl AsRef<Path>,
) -> Result<()> {
    let out_root = out_root.as_ref();
    if n_per_class == 0 || size == 0 {
        return Err(Error::InvalidArgument(
            "n_per_class and size must be >= 1".into(),
        ));
    }
    let holdout = synthetic_holdout_size(n_per_class);
    for (split_idx, split) in Split::ALL.iter().enumerate() {
        let count = if *split == Split::Train { n_per_class } else { holdout };
        for (label, class) in CLASS_DIRS.iter().enumerate() {
            let dir = out_root.join(split.as_str()).join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let stream = ((split_idx as u64) << 40) | ((label as u64) << 32) | i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let bytes = synthetic_png(label, size, &mut rng)?;
                let path = dir.join(format!("{class}_{i:04}.png"));
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn synthetic_png(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let (strong, weak) = (0.65f32, 0.35f32);
    let mut tint = if label == 0 {
        [strong, weak, weak]
    } else {
        [weak, weak, strong]
    };
    for t in &mut tint {
        *t += rng.random_range(-0.05..0.05);
    }
    let blob_color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let cx = rng.random_range(0.0..size as f32);
    let cy = rng.random_range(0.0..size as f32);
    let radius = rng.random_range(0.1..0.3) * size as f32;
    let noise = Normal::new(0.0f32, 0.08).expect("valid sigma");
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
        let blob = 0.25 * (-d2 / (2.0 * radius * radius)).exp();
        for c in 0..3 {
            let v = tint[c] * (1.0 - blob) + blob_color[c] * blob + noise.sample(rng);
            px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out.into_inner())
}
