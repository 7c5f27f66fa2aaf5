//! The classification network: five stride-2 conv blocks interleaved with
//! four C2f blocks, then a pooled linear classifier.

mod blocks;

use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use blocks::{Bottleneck, C2fBlock, ClassifyHead, ConvBlock};
use blocks::{C2fCache, ConvBlockCache, GradSink, HeadCache};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Parameter, gradient and optimizer-buffer
/// registries all share the same key order.
pub type Registry = IndexMap<String, Tensor>;

pub const INPUT_CHANNELS: usize = 3;
pub const DEFAULT_IMG_SIZE: usize = 128;
/// Inputs must be a multiple of this so every stage sees an integral size.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSpec {
    Conv { out: usize, stride: usize },
    C2f { out: usize, shortcut: bool, n: usize },
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageSpec::Conv { out, stride } => write!(f, "conv({out},s{stride})"),
            StageSpec::C2f { out, shortcut, n } => write!(f, "c2f({out},{shortcut},{n})"),
        }
    }
}

impl std::str::FromStr for StageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized stage `{s}`"));
        let (kind, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').collect();
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match (kind, args.as_slice()) {
            ("conv", [out, stride]) => Ok(StageSpec::Conv {
                out: num(out)?,
                stride: num(stride.strip_prefix('s').ok_or_else(bad)?)?,
            }),
            ("c2f", [out, shortcut, n]) => Ok(StageSpec::C2f {
                out: num(out)?,
                shortcut: shortcut.parse().map_err(|_| bad())?,
                n: num(n)?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub img_size: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
}

impl NetworkSpec {
    /// Conv(16) Conv(32) C2f(F,1) Conv(64) C2f(T,2) Conv(128) C2f(T,2) Conv(256) C2f(T,1).
    pub fn standard(num_classes: usize, img_size: usize) -> Self {
        use StageSpec::*;
        NetworkSpec {
            img_size,
            num_classes,
            stages: vec![
                Conv { out: 16, stride: 2 },
                Conv { out: 32, stride: 2 },
                C2f { out: 32, shortcut: false, n: 1 },
                Conv { out: 64, stride: 2 },
                C2f { out: 64, shortcut: true, n: 2 },
                Conv { out: 128, stride: 2 },
                C2f { out: 128, shortcut: true, n: 2 },
                Conv { out: 256, stride: 2 },
                C2f { out: 256, shortcut: true, n: 1 },
            ],
        }
    }

    /// One-line description, stored in checkpoints for compatibility checks.
    pub fn describe(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        format!(
            "in={} img={} classes={} stages={}",
            INPUT_CHANNELS,
            self.img_size,
            self.num_classes,
            stages.join(",")
        )
    }

    /// Inverse of [`NetworkSpec::describe`].
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized network description `{text}`"));
        let mut fields = std::collections::HashMap::new();
        for part in text.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        if get("in")? != INPUT_CHANNELS.to_string() {
            return Err(bad());
        }
        let stages = get("stages")?
            .split("),")
            .map(|s| {
                if s.ends_with(')') {
                    s.parse()
                } else {
                    format!("{s})").parse()
                }
            })
            .collect::<Result<Vec<StageSpec>>>()?;
        let spec = NetworkSpec {
            img_size: get("img")?.parse().map_err(|_| bad())?,
            num_classes: get("classes")?.parse().map_err(|_| bad())?,
            stages,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.img_size == 0 || !self.img_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::InvalidArgument(format!(
                "img_size {} must be a positive multiple of {SIZE_MULTIPLE}",
                self.img_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Stage {
    Conv(ConvBlock),
    C2f(C2fBlock),
}

impl Stage {
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Stage::Conv(b) => b.infer(x),
            Stage::C2f(b) => b.infer(x),
        }
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum StageCache {
    Conv(ConvBlockCache),
    C2f(C2fCache),
}

#[derive(Clone, Debug)]
struct ForwardCache {
    stages: Vec<StageCache>,
    head: HeadCache,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    stages: Vec<(String, Stage)>,
    head: ClassifyHead,
    cache: Option<ForwardCache>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.stages == other.stages && self.head == other.head
    }
}

/// Standard network at the default 128x128 resolution.
pub fn build_network(num_classes: usize, seed: u64) -> Result<Network> {
    Network::build(&NetworkSpec::standard(num_classes, DEFAULT_IMG_SIZE), seed)
}

impl Network {
    /// Builds the stage stack and draws weights from `seed`.
    ///
    /// Conv and linear weights are uniform in `+-1/sqrt(fan_in)`; biases and
    /// BN shifts start at zero and BN scales at one.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut channels = INPUT_CHANNELS;
        let mut stages = Vec::with_capacity(spec.stages.len());
        let (mut n_conv, mut n_c2f) = (0, 0);
        for stage in &spec.stages {
            match *stage {
                StageSpec::Conv { out, stride } => {
                    n_conv += 1;
                    stages.push((
                        format!("conv{n_conv}"),
                        Stage::Conv(ConvBlock::new(channels, out, 3, stride)),
                    ));
                    channels = out;
                }
                StageSpec::C2f { out, shortcut, n } => {
                    n_c2f += 1;
                    stages.push((
                        format!("c2f{n_c2f}"),
                        Stage::C2f(C2fBlock::new(channels, out, shortcut, n)?),
                    ));
                    channels = out;
                }
            }
        }
        let mut net = Network {
            spec: spec.clone(),
            stages,
            head: ClassifyHead::new(channels, spec.num_classes),
            cache: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in net.params_mut() {
            if name.ends_with(".weight") {
                let fan_in: usize = t.shape()[1..].iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn stages(&self) -> impl Iterator<Item = (&str, &Stage)> {
        self.stages.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn stages_mut(&mut self) -> impl Iterator<Item = (&str, &mut Stage)> {
        self.stages.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn head(&self) -> &ClassifyHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ClassifyHead {
        &mut self.head
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Counts of (conv blocks, C2f blocks, classify heads).
    pub fn stage_census(&self) -> (usize, usize, usize) {
        let conv = self
            .stages
            .iter()
            .filter(|(_, s)| matches!(s, Stage::Conv(_)))
            .count();
        (conv, self.stages.len() - conv, 1)
    }

    /// Trainable tensors in registry order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, stage) in &self.stages {
            match stage {
                Stage::Conv(b) => b.collect_params(name, &mut out),
                Stage::C2f(b) => b.collect_params(name, &mut out),
            }
        }
        out.push(("head.fc.weight".into(), &self.head.weight));
        out.push(("head.fc.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, stage) in &mut self.stages {
            match stage {
                Stage::Conv(b) => b.collect_params_mut(name, &mut out),
                Stage::C2f(b) => b.collect_params_mut(name, &mut out),
            }
        }
        out.push(("head.fc.weight".into(), &mut self.head.weight));
        out.push(("head.fc.bias".into(), &mut self.head.bias));
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, stage) in &self.stages {
            match stage {
                Stage::Conv(b) => b.collect_buffers(name, &mut out),
                Stage::C2f(b) => b.collect_buffers(name, &mut out),
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, stage) in &mut self.stages {
            match stage {
                Stage::Conv(b) => b.collect_buffers_mut(name, &mut out),
                Stage::C2f(b) => b.collect_buffers_mut(name, &mut out),
            }
        }
        out
    }

    pub fn param_registry(&self) -> Registry {
        self.params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Overwrites parameters and buffers from registries holding exactly the
    /// same names and shapes.
    pub fn load_state(&mut self, params: &Registry, buffers: &Registry) -> Result<()> {
        fn fill(dst: Vec<(String, &mut Tensor)>, src: &Registry, what: &str) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::KeyMismatch(format!(
                    "{what}: expected {} tensors, found {}",
                    dst.len(),
                    src.len()
                )));
            }
            for (name, t) in dst {
                let v = src
                    .get(&name)
                    .ok_or_else(|| Error::KeyMismatch(format!("{what}: missing `{name}`")))?;
                if v.shape() != t.shape() {
                    return Err(Error::KeyMismatch(format!(
                        "{what}: `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(v.data());
            }
            Ok(())
        }
        fill(self.params_mut(), params, "parameters")?;
        fill(self.buffers_mut(), buffers, "buffers")?;
        self.cache = None;
        Ok(())
    }

    pub fn buffer_registry(&self) -> Registry {
        self.buffers()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "network expects {INPUT_CHANNELS} input channels, got {c}"
            )));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not a multiple of {SIZE_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// Output of the last C2f stage, `[N, 256, H/32, W/32]`.
    pub fn backbone(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let mut x = images.clone();
        for (_, stage) in &self.stages {
            x = stage.infer(&x)?;
        }
        Ok(x)
    }

    /// Shape after every stage, in order, for an input of the given shape.
    pub fn shape_trace(&self, images: &Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut trace = Vec::new();
        for (name, stage) in &self.stages {
            x = stage.infer(&x)?;
            trace.push((name.clone(), x.shape().to_vec()));
        }
        let logits = self.head.infer(&x)?;
        trace.push(("head".into(), logits.shape().to_vec()));
        Ok(trace)
    }

    /// Globally pooled backbone features, `[N, 256]`.
    pub fn pooled_features(&self, images: &Tensor) -> Result<Tensor> {
        crate::tensor::global_avg_pool(&self.backbone(images)?)
    }

    /// Inference-mode logits; takes `&self` so a shared network can serve
    /// concurrent callers.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        self.head.infer(&self.backbone(images)?)
    }

    /// Logits for `images`. In training mode batch statistics are used, the
    /// running statistics are updated, and activations are cached for
    /// [`Network::backward`].
    pub fn forward(&mut self, images: &Tensor, training: bool) -> Result<Tensor> {
        self.cache = None;
        if !training {
            return self.infer(images);
        }
        self.check_input(images)?;
        let mut x = images.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for (_, stage) in &mut self.stages {
            let (y, cache) = match stage {
                Stage::Conv(b) => {
                    let (y, c) = b.forward_train(&x)?;
                    (y, StageCache::Conv(c))
                }
                Stage::C2f(b) => {
                    let (y, c) = b.forward_train(&x)?;
                    (y, StageCache::C2f(c))
                }
            };
            caches.push(cache);
            x = y;
        }
        let (logits, head) = self.head.forward_train(&x)?;
        self.cache = Some(ForwardCache {
            stages: caches,
            head,
        });
        Ok(logits)
    }

    /// Gradients of every parameter given `dL/dlogits`, keyed and ordered like
    /// [`Network::params`]. Consumes the cached forward pass.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Registry> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::MissingCache("network forward (training=true)"))?;
        let mut sink = GradSink::new();
        let mut g = self.head.backward(&cache.head, grad_logits, &mut sink)?;
        for ((name, stage), sc) in self.stages.iter().zip(&cache.stages).rev() {
            g = match (stage, sc) {
                (Stage::Conv(b), StageCache::Conv(c)) => b.backward(c, &g, name, &mut sink)?,
                (Stage::C2f(b), StageCache::C2f(c)) => b.backward(c, &g, name, &mut sink)?,
                _ => unreachable!("cache layout follows the stage list"),
            };
        }
        let mut grads = Registry::with_capacity(sink.len());
        for (name, _) in self.params() {
            let t = sink
                .remove(&name)
                .ok_or_else(|| Error::KeyMismatch(format!("no gradient produced for {name}")))?;
            grads.insert(name, t);
        }
        debug_assert!(sink.is_empty());
        Ok(grads)
    }
}
