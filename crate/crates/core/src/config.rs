//! Run configuration: a flat `key=value` file plus `--key value` overrides.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::net::{DEFAULT_IMG_SIZE, SIZE_MULTIPLE};
use crate::optim::{default_weight_decay, OptimizerKind, TrainHyper};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub optimizer: OptimizerKind,
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub alpha: f32,
    pub eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub img_size: usize,
    pub seed: u64,
    pub positive_class: usize,
    pub output_dir: PathBuf,
    /// Continue from `output_dir/last.ckpt` when it exists.
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let kind = OptimizerKind::AdamW;
        let h = TrainHyper::for_kind(kind);
        RunConfig {
            data_root: PathBuf::from("data"),
            optimizer: kind,
            lr0: h.lr0,
            momentum: h.momentum,
            weight_decay: h.weight_decay,
            beta1: h.beta1,
            beta2: h.beta2,
            alpha: h.alpha,
            eps: h.eps,
            epochs: h.epochs,
            batch_size: h.batch_size,
            img_size: DEFAULT_IMG_SIZE,
            seed: 0,
            positive_class: 0,
            output_dir: PathBuf::from("runs"),
            resume: false,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "data_root",
    "optimizer",
    "lr0",
    "momentum",
    "weight_decay",
    "beta1",
    "beta2",
    "alpha",
    "eps",
    "epochs",
    "batch_size",
    "img_size",
    "seed",
    "positive_class",
    "output_dir",
    "resume",
];

fn parse<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{value}`")))
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config("config", format!("line {} is not key=value: `{line}`", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies pairs in order on top of the defaults. The weight decay
    /// follows the optimizer's default unless set explicitly.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut explicit_wd = false;
        for (k, v) in pairs {
            let (k, v) = (k.as_ref().trim(), v.as_ref());
            match k {
                "data_root" => cfg.data_root = PathBuf::from(v.trim()),
                "optimizer" => cfg.optimizer = v.trim().parse()?,
                "lr0" => cfg.lr0 = parse(k, v)?,
                "momentum" => cfg.momentum = parse(k, v)?,
                "weight_decay" => {
                    cfg.weight_decay = parse(k, v)?;
                    explicit_wd = true;
                }
                "beta1" => cfg.beta1 = parse(k, v)?,
                "beta2" => cfg.beta2 = parse(k, v)?,
                "alpha" => cfg.alpha = parse(k, v)?,
                "eps" => cfg.eps = parse(k, v)?,
                "epochs" => cfg.epochs = parse(k, v)?,
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "img_size" => cfg.img_size = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "positive_class" => cfg.positive_class = parse(k, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v.trim()),
                "resume" => cfg.resume = parse(k, v)?,
                other => return Err(Error::config(other, "unknown configuration key")),
            }
        }
        if !explicit_wd {
            cfg.weight_decay = default_weight_decay(cfg.optimizer);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if given) and applies `overrides` after it.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_key_values(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            alpha: self.alpha,
            eps: self.eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        if self.img_size == 0 || !self.img_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::config(
                "img_size",
                format!("must be a positive multiple of {SIZE_MULTIPLE}"),
            ));
        }
        if self.positive_class > 1 {
            return Err(Error::config("positive_class", "must be 0 or 1"));
        }
        Ok(())
    }

    /// Canonical pairs in [`KEYS`] order; floats use their shortest
    /// round-tripping form.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.data_root.display().to_string(),
            self.optimizer.to_string(),
            self.lr0.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.alpha.to_string(),
            self.eps.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.img_size.to_string(),
            self.seed.to_string(),
            self.positive_class.to_string(),
            self.output_dir.display().to_string(),
            self.resume.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
