//! Minibatch training loop, validation, curve logging and run directory
//! management.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{load_manifest, DecodedSplit, Split};
use crate::error::{Error, Result};
use crate::metrics::argmax_predictions;
use crate::net::{Network, NetworkSpec};
use crate::optim::{OptimizerState, TrainHyper};
use crate::plot::{line_chart, Series};
use crate::tensor::{softmax_cross_entropy, Tensor};

pub const NUM_CLASSES: usize = 2;
pub const CURVES_FILE: &str = "curves.csv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LOCK_FILE: &str = "train.lock";
pub const CURVES_HEADER: &str = "epoch,train_loss,train_accuracy_top1,val_loss,val_accuracy_top1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8}",
            self.epoch, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed curve row `{line}`"));
        let cols: Vec<&str> = line.trim().split(',').collect();
        let [epoch, tl, ta, vl, va] = cols[..] else {
            return Err(bad());
        };
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: epoch.parse().map_err(|_| bad())?,
            train_loss: f(tl)?,
            train_accuracy: f(ta)?,
            val_loss: f(vl)?,
            val_accuracy: f(va)?,
        })
    }
}

/// Per-epoch rows of a run, strictly increasing in epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveLog {
    pub rows: Vec<EpochRecord>,
}

impl CurveLog {
    pub fn push(&mut self, row: EpochRecord) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "epoch {} does not follow {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CURVES_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.to_csv_row());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CURVES_HEADER) {
            return Err(Error::InvalidArgument("curve log header mismatch".into()));
        }
        let mut log = CurveLog::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            log.push(EpochRecord::parse_csv_row(line)?)?;
        }
        Ok(log)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_accuracy).reduce(f64::max)
    }

    pub fn loss_svg(&self) -> String {
        let pts = |f: fn(&EpochRecord) -> f64| -> Vec<(f64, f64)> {
            self.rows.iter().map(|r| (r.epoch as f64, f(r))).collect()
        };
        line_chart(
            "Loss",
            "epoch",
            "loss",
            &[
                Series { name: "train_loss", points: pts(|r| r.train_loss) },
                Series { name: "val_loss", points: pts(|r| r.val_loss) },
            ],
        )
    }

    pub fn accuracy_svg(&self) -> String {
        let pts = |f: fn(&EpochRecord) -> f64| -> Vec<(f64, f64)> {
            self.rows.iter().map(|r| (r.epoch as f64, f(r))).collect()
        };
        line_chart(
            "Top-1 accuracy",
            "epoch",
            "accuracy",
            &[
                Series { name: "train_accuracy_top1", points: pts(|r| r.train_accuracy) },
                Series { name: "val_accuracy_top1", points: pts(|r| r.val_accuracy) },
            ],
        )
    }
}

/// Inference-mode pass over a split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `[N, classes]` in manifest order.
    pub logits: Tensor,
}

pub fn evaluate(net: &Network, split: &DecodedSplit, batch_size: usize) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let classes = net.num_classes();
    let mut logits = Vec::with_capacity(split.len() * classes);
    for batch in split.batches(batch_size, 0, 0, false)? {
        logits.extend_from_slice(net.infer(&batch?.images)?.data());
    }
    let logits = Tensor::new(&[split.len(), classes], logits)?;
    let (loss, _) = softmax_cross_entropy(&logits, &split.labels)?;
    let preds = argmax_predictions(&logits)?;
    let correct = preds.iter().zip(&split.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / split.len() as f64,
        logits,
    })
}

/// Network plus optimizer state, advanced one epoch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    hyper: TrainHyper,
    net: Network,
    optimizer: OptimizerState,
    epoch: u64,
    best_val_accuracy: Option<f64>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = NetworkSpec::standard(NUM_CLASSES, config.img_size);
        let net = Network::build(&spec, config.seed)?;
        let optimizer = OptimizerState::for_params(config.optimizer, &net.params());
        Ok(Trainer {
            config: config.clone(),
            hyper: config.hyper(),
            net,
            optimizer,
            epoch: 0,
            best_val_accuracy: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        ckpt.check_compatible(config.img_size, NUM_CLASSES)?;
        if ckpt.seed != config.seed {
            return Err(Error::config(
                "seed",
                format!("checkpoint was trained with seed {}", ckpt.seed),
            ));
        }
        let net = ckpt.network()?;
        let optimizer = match &ckpt.optimizer {
            Some(o) if o.kind == config.optimizer => o.clone(),
            Some(o) => {
                return Err(Error::config(
                    "optimizer",
                    format!("checkpoint holds {} state", o.kind),
                ))
            }
            None => OptimizerState::for_params(config.optimizer, &net.params()),
        };
        Ok(Trainer {
            config: config.clone(),
            hyper: config.hyper(),
            net,
            optimizer,
            epoch: ckpt.epoch,
            best_val_accuracy: ckpt.best_val_accuracy,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.best_val_accuracy
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_network(&self.net, Some(&self.optimizer), self.epoch, self.config.seed);
        c.best_val_accuracy = self.best_val_accuracy;
        c.config = self.config.to_pairs();
        c
    }

    /// One shuffled pass over `train`. Returns the sample-weighted mean loss
    /// and the training-mode top-1 accuracy.
    pub fn train_epoch(&mut self, train: &DecodedSplit) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let epoch_no = self.epoch + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { epoch: epoch_no },
            e => e,
        };
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in train.batches(self.hyper.batch_size, self.hyper.seed, self.epoch, true)? {
            let batch = batch?;
            let logits = self.net.forward(&batch.images, true).map_err(diverged)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() || !logits.is_finite() {
                return Err(Error::Diverged { epoch: epoch_no });
            }
            loss_sum += loss * batch.labels.len() as f64;
            correct += argmax_predictions(&logits)?
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = self.net.backward(&grad).map_err(diverged)?;
            let mut params = self.net.params_mut();
            self.optimizer.step(&mut params, &grads, &self.hyper).map_err(diverged)?;
        }
        let n = train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    /// Trains one epoch, validates, and updates the best validation accuracy.
    pub fn step(&mut self, train: &DecodedSplit, valid: &DecodedSplit) -> Result<EpochRecord> {
        let (train_loss, train_accuracy) = self.train_epoch(train)?;
        self.epoch += 1;
        let epoch = self.epoch;
        let eval = evaluate(&self.net, valid, self.hyper.batch_size).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { epoch },
            e => e,
        })?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch });
        }
        if self.best_val_accuracy.is_none_or(|b| eval.accuracy > b) {
            self.best_val_accuracy = Some(eval.accuracy);
        }
        Ok(EpochRecord {
            epoch: self.epoch,
            train_loss,
            train_accuracy,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        })
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(
                "output_dir",
                format!("{} is locked by another run (remove {LOCK_FILE} if stale)", dir.display()),
            )),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub curves: CurveLog,
    pub epochs: u64,
    pub best_val_accuracy: Option<f64>,
    pub output_dir: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Full training run in `config.output_dir`: writes `curves.csv`, `last.ckpt`
/// every epoch, `best.ckpt` whenever validation accuracy strictly improves,
/// and `loss.svg` / `accuracy.svg` at the end. With `resume`, continues from
/// an existing `last.ckpt`.
pub fn run(config: &RunConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<RunSummary> {
    config.validate()?;
    let out = config.output_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _lock = RunLock::acquire(out)?;

    let manifest = load_manifest(&config.data_root)?;
    let train = DecodedSplit::load(&manifest, Split::Train, config.img_size)?;
    let valid = DecodedSplit::load(&manifest, Split::Valid, config.img_size)?;

    let curves_path = out.join(CURVES_FILE);
    let last_path = out.join(LAST_CKPT);
    let (mut trainer, mut curves) = if config.resume && last_path.exists() {
        let ckpt = load_checkpoint(&last_path)?;
        let trainer = Trainer::from_checkpoint(&ckpt, config)?;
        let text = fs::read_to_string(&curves_path).map_err(|e| Error::io(&curves_path, e))?;
        let mut curves = CurveLog::parse(&text)?;
        curves.rows.retain(|r| r.epoch <= ckpt.epoch);
        (trainer, curves)
    } else {
        (Trainer::new(config)?, CurveLog::default())
    };
    write(&out.join("config.txt"), config.to_text())?;
    write(&curves_path, curves.to_csv())?;
    if trainer.epoch() == 0 {
        save_checkpoint(&last_path, &trainer.checkpoint())?;
    }

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&curves_path)
        .map_err(|e| Error::io(&curves_path, e))?;
    while trainer.epoch() < config.epochs as u64 {
        let before = trainer.best_val_accuracy();
        let record = trainer.step(&train, &valid)?;
        curves.push(record)?;
        writeln!(log, "{}", record.to_csv_row()).map_err(|e| Error::io(&curves_path, e))?;
        let ckpt = trainer.checkpoint();
        save_checkpoint(&last_path, &ckpt)?;
        if before.is_none_or(|b| record.val_accuracy > b) {
            save_checkpoint(out.join(BEST_CKPT), &ckpt)?;
        }
        on_epoch(&record);
    }
    write(&out.join("loss.svg"), curves.loss_svg())?;
    write(&out.join("accuracy.svg"), curves.accuracy_svg())?;
    Ok(RunSummary {
        epochs: trainer.epoch(),
        best_val_accuracy: trainer.best_val_accuracy(),
        curves,
        output_dir: out.to_path_buf(),
    })
}
