//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use c2f_core::checkpoint::{load_checkpoint, Checkpoint};
use c2f_core::config::RunConfig;
use c2f_core::data::{generate_synthetic, load_image, load_manifest, DecodedSplit, Split};
use c2f_core::metrics::{self, ConfusionMatrix2, MetricsReport, CLASS_LABELS, CSV_HEADER};
use c2f_core::net::Network;
use c2f_core::plot::scatter;
use c2f_core::tensor::softmax;
use c2f_core::train::{self, evaluate};
use c2f_core::tsne::{features_for_tsne, network_features, tsne_embed, TsneOptions};
use c2f_core::Error;

use crate::exit::{CmdResult, Failure, CONFIG, DATA};
use crate::{EvalArgs, PredictArgs, ReportArgs, SynthArgs, TrainArgs, TsneArgs};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn open_checkpoint(path: &Path) -> Result<(Checkpoint, Network), Failure> {
    let ckpt = load_checkpoint(path).map_err(Failure::checkpoint)?;
    let net = ckpt.network().map_err(Failure::checkpoint)?;
    Ok((ckpt, net))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    s.parse::<Split>()
        .map_err(|_| Failure::new(CONFIG, format!("invalid config field `split`: unknown split `{s}`")))
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides())?;
    let quiet = args.quiet;
    if !quiet {
        println!("{}", train::CURVES_HEADER);
    }
    let summary = train::run(&config, |r| {
        if !quiet {
            println!("{}", r.to_csv_row());
        }
    })?;
    println!(
        "finished {} epochs; best val_accuracy_top1 = {}; outputs in {}",
        summary.epochs,
        summary
            .best_val_accuracy
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}")),
        summary.output_dir.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let (ckpt, net) = open_checkpoint(&args.checkpoint)?;
    let split = parse_split(&args.split)?;
    if args.positive_class > 1 {
        return Err(Error::config("positive_class", "must be 0 or 1").into());
    }
    if args.batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1").into());
    }
    let manifest = load_manifest(&args.data_root)?;
    let data = DecodedSplit::load(&manifest, split, ckpt.spec.img_size)?;
    let result = evaluate(&net, &data, args.batch_size)?;
    let report = metrics::report(&result.logits, &data.labels, args.positive_class)?;
    let optimizer = ckpt.config_value("optimizer").unwrap_or("unknown");

    ensure_dir(&args.output_dir)?;
    write(
        &args.output_dir.join("report.csv"),
        format!("{CSV_HEADER}\n{}\n", report.to_csv_row(optimizer)),
    )?;
    write(&args.output_dir.join("confusion.txt"), report.counts.to_text())?;
    let probs = softmax(&result.logits)?;
    let preds = metrics::argmax_predictions(&result.logits)?;
    let mut csv = String::from("file,label,prediction,prob_autistic,prob_non_autistic\n");
    for (i, path) in data.paths.iter().enumerate() {
        let p = &probs.data()[i * 2..i * 2 + 2];
        let _ = writeln!(
            csv,
            "{},{},{},{:.9},{:.9}",
            path.display(),
            data.labels[i],
            preds[i],
            p[0],
            p[1]
        );
    }
    write(&args.output_dir.join("predictions.csv"), csv)?;
    print!("split={}\nsamples={}\nloss={}\n", split, data.len(), result.loss);
    print!("{}", report.to_key_value());
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    let (ckpt, net) = open_checkpoint(&args.checkpoint)?;
    let size = ckpt.spec.img_size;
    let image = load_image(&args.image, size)?.reshape(&[1, 3, size, size])?;
    let probs = softmax(&net.infer(&image)?)?;
    let p = probs.data();
    let class = metrics::argmax_predictions(&probs)?[0];
    println!("class={class}");
    println!("label={}", CLASS_LABELS[class]);
    println!("prob_autistic={:.9}", p[0]);
    println!("prob_non_autistic={:.9}", p[1]);
    Ok(())
}

pub fn tsne(args: &TsneArgs) -> CmdResult {
    if !(2..=3).contains(&args.dims) {
        return Err(Error::config("dims", format!("must be 2 or 3, got {}", args.dims)).into());
    }
    let split = parse_split(&args.split)?;
    let manifest = load_manifest(&args.data_root)?;
    let features = match &args.checkpoint {
        Some(path) => {
            let (ckpt, net) = open_checkpoint(path)?;
            network_features(&net, &manifest, split, ckpt.spec.img_size, 16)?
        }
        None => features_for_tsne(&manifest, split, args.img_size)?,
    };
    let opts = TsneOptions {
        dims: args.dims,
        perplexity: args.perplexity,
        iterations: args.iterations,
        seed: args.seed,
        ..TsneOptions::default()
    };
    let result = tsne_embed(&features.vectors, &opts)?;
    ensure_dir(&args.output_dir)?;
    write(
        &args.output_dir.join("embedding.csv"),
        result.to_csv(&features.labels, &features.files),
    )?;
    let title = format!("t-SNE of {} split ({}-D)", split, args.dims);
    write(
        &args.output_dir.join("embedding.svg"),
        scatter(&title, &result.points, result.dims, &features.labels, &CLASS_LABELS),
    )?;
    println!("points={}\ndims={}\nkl={}", result.n, result.dims, result.kl);
    Ok(())
}

fn parse_counts(text: &str, positive_class: usize) -> Result<ConfusionMatrix2, Failure> {
    let bad = || Failure::new(CONFIG, format!("invalid config field `counts`: expected tp,fp,fn,tn, got `{text}`"));
    let v: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [tp, fp, fn_, tn] = v[..] else {
        return Err(bad());
    };
    Ok(ConfusionMatrix2::new(tp, fp, fn_, tn, positive_class))
}

fn report_from_predictions(path: &Path, positive_class: usize) -> Result<MetricsReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let bad = |line: usize| Failure::new(DATA, format!("{}: malformed row {line}", path.display()));
    let (mut labels, mut preds, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        // File names may contain commas; the numeric columns are the last four.
        let cols: Vec<&str> = line.rsplitn(5, ',').collect();
        if cols.len() != 5 {
            return Err(bad(i + 1));
        }
        let label: usize = cols[3].parse().map_err(|_| bad(i + 1))?;
        let pred: usize = cols[2].parse().map_err(|_| bad(i + 1))?;
        let p0: f64 = cols[1].parse().map_err(|_| bad(i + 1))?;
        let p1: f64 = cols[0].parse().map_err(|_| bad(i + 1))?;
        labels.push(label);
        preds.push(pred);
        scores.push(if positive_class == 0 { p0 } else { p1 });
    }
    if labels.is_empty() {
        return Err(Failure::new(DATA, format!("{}: no predictions", path.display())));
    }
    Ok(MetricsReport::from_scores(&preds, &scores, &labels, positive_class)?)
}

pub fn report(args: &ReportArgs) -> CmdResult {
    if args.positive_class > 1 {
        return Err(Error::config("positive_class", "must be 0 or 1").into());
    }
    let report = match (&args.counts, &args.predictions) {
        (Some(c), _) => MetricsReport::from_counts(parse_counts(c, args.positive_class)?)?,
        (None, Some(p)) => report_from_predictions(p, args.positive_class)?,
        (None, None) => {
            return Err(Failure::new(CONFIG, "report needs --counts or --predictions"));
        }
    };
    let [acc, prec, f1, rec] = report.percent_row();
    print!("{}", report.to_key_value());
    println!("accuracy_pct={acc:.2}\nprecision_pct={prec:.2}\nf1_pct={f1:.2}\nrecall_pct={rec:.2}");
    let csv = format!("{CSV_HEADER}\n{}\n", report.to_csv_row(&args.optimizer));
    print!("{csv}");
    if let Some(dir) = &args.output_dir {
        ensure_dir(dir)?;
        write(&dir.join("report.csv"), csv)?;
        write(&dir.join("confusion.txt"), report.counts.to_text())?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    generate_synthetic(args.per_class, args.size, args.seed, &args.output)?;
    println!("wrote synthetic dataset to {}", args.output.display());
    Ok(())
}
