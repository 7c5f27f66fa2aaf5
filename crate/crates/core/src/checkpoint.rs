//! Binary checkpoint format.
//!
//! ```text
//! "C2F1" | version: u32 LE | header_len: u64 LE | header (UTF-8) | payload
//! ```
//!
//! The header holds `key=value` lines followed by one tab-separated line per
//! tensor: `tensor name shape offset len crc32`. Offsets and lengths are in
//! bytes relative to the payload start; the payload is the tensors' f32 values
//! in little-endian order, laid out contiguously in table order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Network, NetworkSpec, Registry};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"C2F1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const OPTIM: &str = "optim/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Registry,
    /// Batch-norm running statistics.
    pub buffers: Registry,
    pub optimizer: Option<OptimizerState>,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub best_val_accuracy: Option<f64>,
    /// Run configuration echo, in the order it was recorded.
    pub config: Vec<(String, String)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        optimizer: Option<&OptimizerState>,
        epoch: u64,
        seed: u64,
    ) -> Self {
        Checkpoint {
            spec: net.spec().clone(),
            params: net.param_registry(),
            buffers: net.buffer_registry(),
            optimizer: optimizer.cloned(),
            epoch,
            seed,
            best_val_accuracy: None,
            config: Vec::new(),
        }
    }

    /// Rebuilds the network described by the spec echo and loads the weights.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::build(&self.spec, 0).map_err(|e| bad(format!("spec echo: {e}")))?;
        net.load_state(&self.params, &self.buffers)
            .map_err(|e| bad(format!("state does not fit the spec echo: {e}")))?;
        Ok(net)
    }

    /// Fails unless the checkpoint was built for this input size and class count.
    pub fn check_compatible(&self, img_size: usize, num_classes: usize) -> Result<()> {
        if self.spec.img_size != img_size {
            return Err(bad(format!(
                "incompatible checkpoint: img_size {} recorded, {img_size} requested",
                self.spec.img_size
            )));
        }
        if self.spec.num_classes != num_classes {
            return Err(bad(format!(
                "incompatible checkpoint: {} classes recorded, {num_classes} requested",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.extend(self.params.iter().map(|(n, t)| (format!("{PARAM}{n}"), t)));
        out.extend(self.buffers.iter().map(|(n, t)| (format!("{BUFFER}{n}"), t)));
        if let Some(opt) = &self.optimizer {
            for (label, reg) in opt.buffers() {
                out.extend(reg.iter().map(|(n, t)| (format!("{OPTIM}{label}/{n}"), t)));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        let mut kv = |k: &str, v: &str| -> Result<()> {
            if v.contains(['\n', '\r']) || k.contains(['=', '\n', '\t']) {
                return Err(bad(format!("header entry `{k}` cannot be encoded")));
            }
            let _ = writeln!(header, "{k}={v}");
            Ok(())
        };
        kv("spec", &self.spec.describe())?;
        kv("epoch", &self.epoch.to_string())?;
        kv("seed", &self.seed.to_string())?;
        // Shuffling for the next epoch is seeded from seed ^ epoch.
        kv("rng_state", &(self.seed ^ self.epoch).to_string())?;
        kv(
            "best_val_accuracy",
            &self
                .best_val_accuracy
                .map_or_else(|| "none".to_string(), |v| format!("{v:?}")),
        )?;
        match &self.optimizer {
            Some(o) => {
                kv("optimizer", o.kind.as_str())?;
                kv("optimizer_t", &o.t.to_string())?;
            }
            None => kv("optimizer", "none")?,
        }
        for (k, v) in &self.config {
            kv(&format!("config.{k}"), v)?;
        }

        let tensors = self.tensors();
        let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 4).sum());
        for (name, t) in &tensors {
            if name.contains(['\t', '\n']) {
                return Err(bad(format!("tensor name `{name}` cannot be encoded")));
            }
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                header,
                "tensor\t{name}\t{}\t{offset}\t{}\t{:08x}",
                shape.join("x"),
                payload.len() - offset,
                crc32fast::hash(&payload[offset..])
            );
        }

        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(bad("truncated checkpoint preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes; not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated checkpoint header"))?;
        let header = std::str::from_utf8(&bytes[16..header_end])
            .map_err(|_| bad("checkpoint header is not UTF-8"))?;
        let payload = &bytes[header_end..];

        let mut spec = None;
        let mut epoch = None;
        let mut seed = None;
        let mut best_val_accuracy = None;
        let mut kind: Option<Option<OptimizerKind>> = None;
        let mut t = 0u64;
        let mut config = Vec::new();
        let mut params = Registry::new();
        let mut buffers = Registry::new();
        let mut optim: Vec<(String, String, Tensor)> = Vec::new();
        let mut expected_offset = 0usize;

        let num = |k: &str, v: &str| -> Result<u64> {
            v.parse().map_err(|_| bad(format!("bad value for `{k}`: `{v}`")))
        };
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("tensor\t") {
                let cols: Vec<&str> = rest.split('\t').collect();
                let [name, shape, offset, len, crc] = cols[..] else {
                    return Err(bad(format!("malformed tensor line `{line}`")));
                };
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape for `{name}`"))))
                    .collect::<Result<_>>()?;
                let offset = num("offset", offset)? as usize;
                let len = num("len", len)? as usize;
                let crc = u32::from_str_radix(crc, 16)
                    .map_err(|_| bad(format!("bad checksum field for `{name}`")))?;
                if offset != expected_offset || len != shape.iter().product::<usize>() * 4 {
                    return Err(bad(format!("inconsistent tensor table entry `{name}`")));
                }
                let data = payload
                    .get(offset..offset + len)
                    .ok_or_else(|| bad(format!("truncated payload at tensor `{name}`")))?;
                if crc32fast::hash(data) != crc {
                    return Err(bad(format!("checksum mismatch for tensor `{name}`")));
                }
                expected_offset += len;
                let values = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let tensor = Tensor::new(&shape, values)
                    .map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
                if let Some(n) = name.strip_prefix(PARAM) {
                    params.insert(n.to_string(), tensor);
                } else if let Some(n) = name.strip_prefix(BUFFER) {
                    buffers.insert(n.to_string(), tensor);
                } else if let Some((label, n)) =
                    name.strip_prefix(OPTIM).and_then(|r| r.split_once('/'))
                {
                    optim.push((label.to_string(), n.to_string(), tensor));
                } else {
                    return Err(bad(format!("unknown tensor group in `{name}`")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            match k {
                "spec" => {
                    spec = Some(NetworkSpec::parse(v).map_err(|e| bad(format!("spec echo: {e}")))?)
                }
                "epoch" => epoch = Some(num(k, v)?),
                "seed" => seed = Some(num(k, v)?),
                "rng_state" => {}
                "best_val_accuracy" => {
                    best_val_accuracy = match v {
                        "none" => None,
                        _ => Some(v.parse().map_err(|_| bad(format!("bad `{k}`: `{v}`")))?),
                    }
                }
                "optimizer" => {
                    kind = Some(match v {
                        "none" => None,
                        _ => Some(v.parse().map_err(|_| bad(format!("unknown optimizer `{v}`")))?),
                    })
                }
                "optimizer_t" => t = num(k, v)?,
                _ => match k.strip_prefix("config.") {
                    Some(ck) => config.push((ck.to_string(), v.to_string())),
                    None => return Err(bad(format!("unknown header key `{k}`"))),
                },
            }
        }
        if expected_offset != payload.len() {
            return Err(bad(format!(
                "payload is {} bytes but the tensor table covers {expected_offset}",
                payload.len()
            )));
        }

        let optimizer = match kind.ok_or_else(|| bad("missing `optimizer`"))? {
            None => {
                if !optim.is_empty() {
                    return Err(bad("optimizer tensors present without an optimizer"));
                }
                None
            }
            Some(kind) => {
                let mut state = OptimizerState {
                    kind,
                    t,
                    velocity: Registry::new(),
                    first_moment: Registry::new(),
                    second_moment: Registry::new(),
                };
                for (label, name, tensor) in optim {
                    let slot = state
                        .buffers_mut()
                        .into_iter()
                        .find(|(l, _)| *l == label)
                        .map(|(_, r)| r)
                        .ok_or_else(|| bad(format!("unknown optimizer buffer `{label}`")))?;
                    slot.insert(name, tensor);
                }
                Some(state)
            }
        };

        Ok(Checkpoint {
            spec: spec.ok_or_else(|| bad("missing `spec`"))?,
            params,
            buffers,
            optimizer,
            epoch: epoch.ok_or_else(|| bad("missing `epoch`"))?,
            seed: seed.ok_or_else(|| bad("missing `seed`"))?,
            best_val_accuracy,
            config,
        })
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::make_optimizer;

    fn sample() -> Checkpoint {
        let net = Network::build(&NetworkSpec::standard(2, 32), 3).unwrap();
        let params = net.params();
        let mut opt = make_optimizer(
            OptimizerKind::AdamW,
            params.iter().map(|(n, t)| (n.as_str(), t.shape())),
        );
        opt.t = 12;
        if let Some(t) = opt.first_moment.get_index_mut(0) {
            t.1.data_mut()[0] = 0.25;
        }
        let mut c = Checkpoint::from_network(&net, Some(&opt), 4, 3);
        c.best_val_accuracy = Some(0.875);
        c.config = vec![("optimizer".into(), "adamw".into()), ("lr0".into(), "0.001".into())];
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"C2F1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.network().unwrap().param_registry(), c.params);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 5;
        flipped[last] ^= 0x40;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn compatibility_check() {
        let c = sample();
        assert!(c.check_compatible(32, 2).is_ok());
        let err = c.check_compatible(128, 2).unwrap_err().to_string();
        assert!(err.contains("img_size"), "{err}");
    }
}
