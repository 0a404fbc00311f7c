use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{BatchStream, SliceDataset};
use super::{adamw_update, collect_grads, l1_loss, TrainConfig};
use crate::config::ConfigSection;
use crate::error::{Error, Result};
use crate::field::FieldStrength;
use crate::metrics::{aggregate, GroupBy, MetricSample};
use crate::model::{forward, Model, ModelConfig, ModelParams};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, RngState};
use crate::nn;
use crate::synthdata::{derive_seed, DatasetManifest, Split};
use crate::tensor::{Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
}

/// One optimizer step on a batch; returns the batch loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = nn::leaves(&mut tape, params);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let yhat = forward(&mut tape, &p, &xv)?;
    let loss = l1_loss(&mut tape, &yhat, &yv)?;
    let value = loss.value().item()?;
    tape.backward(&loss)?;
    let grads = collect_grads(&tape, &p)?;
    drop(tape);
    adamw_update(params, &grads, state, cfg)?;
    Ok(value)
}

/// One epoch: a full pass, or `steps_per_epoch` batches when that is set.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    ds: &SliceDataset,
    stream: &mut BatchStream,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let full_pass = cfg.steps_per_epoch == 0;
    let steps = if full_pass {
        BatchStream::steps_per_pass(ds.len(), cfg.batch_size)
    } else {
        cfg.steps_per_epoch
    };
    let mut losses = Vec::with_capacity(steps);
    for b in 0..steps {
        let batch = stream.next_batch(ds, cfg.batch_size, cfg.augment_flip, full_pass)?;
        let loss = train_step(params, state, &batch.x, &batch.y, cfg)
            .map_err(|e| e.context(format!("batch {b}")))?;
        losses.push(loss);
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok(EpochStats { mean_loss, losses })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValScores {
    pub nmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn predictions(model: &Model, ds: &SliceDataset, batch_size: usize) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = ds.stack(chunk)?;
        let pred = model.predict(&x)?;
        for b in 0..chunk.len() {
            out.push(pred.batch_item(b)?);
        }
    }
    Ok(out)
}

/// Mean slice-wise NMSE, PSNR and SSIM on `ds`.
pub fn validate(model: &Model, ds: &SliceDataset, batch_size: usize) -> Result<ValScores> {
    if ds.is_empty() {
        return Err(Error::invalid("validate", "empty split"));
    }
    let preds = predictions(model, ds, batch_size)?;
    let samples = ds
        .items
        .iter()
        .zip(&preds)
        .map(|(item, p)| {
            let d = item.y.dims();
            MetricSample::compute(
                &item.case_id,
                item.slice_index,
                item.field,
                item.y.data(),
                p.data(),
                d[2],
                d[3],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let r = &aggregate("val", &samples, GroupBy::All)?[0];
    Ok(ValScores {
        nmse: r.nmse.mean,
        psnr_db: r.psnr_db.map_or(f64::INFINITY, |s| s.mean),
        ssim: r.ssim.mean,
    })
}

/// Mean absolute error over every voxel of `ds`, without augmentation.
pub fn evaluate_l1(model: &Model, ds: &SliceDataset, batch_size: usize) -> Result<f64> {
    let preds = predictions(model, ds, batch_size)?;
    let (mut s, mut n) = (0.0, 0usize);
    for (item, p) in ds.items.iter().zip(&preds) {
        s += item
            .y
            .data()
            .iter()
            .zip(p.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        n += p.numel();
    }
    Ok(s / n.max(1) as f64)
}

/// A row of the training log. Wall-clock time lives in a separate file so
/// the log itself is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse: f64,
    pub val_psnr_db: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    epoch: usize,
    wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<LogRow>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

struct RunState {
    model: Model,
    opt: OptimizerState,
    stream: BatchStream,
    done_epochs: usize,
    best_val: f64,
    best_epoch: usize,
    log: Vec<LogRow>,
    timing: Vec<TimingRow>,
}

fn datasets(
    manifest: &DatasetManifest,
    fields: Option<&[FieldStrength]>,
) -> Result<(SliceDataset, SliceDataset)> {
    let train = SliceDataset::from_manifest(manifest, Split::Train, fields)?;
    let val = SliceDataset::from_manifest(manifest, Split::Val, fields)?;
    if train.is_empty() {
        return Err(Error::invalid("fit", "training split is empty"));
    }
    if val.is_empty() {
        return Err(Error::invalid("fit", "validation split is empty"));
    }
    Ok((train, val))
}

/// Trains from scratch, writing the log, timing file and checkpoints to `out_dir`.
pub fn fit(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    model_config: &ModelConfig,
    out_dir: &Path,
    fields: Option<&[FieldStrength]>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let (train, val) = datasets(manifest, fields)?;
    let model = Model::new(model_config.clone(), derive_seed(cfg.seed, "init"))?;
    let opt = OptimizerState::zeros(&model.params)?;
    let state = RunState {
        model,
        opt,
        stream: BatchStream::new(
            train.len(),
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order")),
        ),
        done_epochs: 0,
        best_val: cfg.val_metric.worst(),
        best_epoch: 0,
        log: Vec::new(),
        timing: Vec::new(),
    };
    run(state, cfg, &train, &val, out_dir)
}

const RESUME_FREE_KEYS: [&str; 1] = ["epochs"];

/// Continues a run from its last checkpoint. Every training setting except
/// `epochs` must match the one the checkpoint was written with.
pub fn resume_from(
    checkpoint: &Path,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    fields: Option<&[FieldStrength]>,
    expected_model: Option<&ModelConfig>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint, expected_model)?;
    let meta = |k: &str| {
        ckpt.meta
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
    };
    let mut diffs = Vec::new();
    for (k, v) in cfg.entries() {
        if RESUME_FREE_KEYS.contains(&k) {
            continue;
        }
        let stored = meta(&format!("train.{k}"));
        if stored != Some(v.as_str()) {
            diffs.push(format!(
                "{k}: checkpoint {}, requested {v}",
                stored.unwrap_or("<missing>")
            ));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::ConfigMismatch(diffs.join("; ")));
    }
    let opt = ckpt.optimizer.clone().ok_or_else(|| {
        Error::Malformed(format!("{} has no optimizer state", checkpoint.display()))
    })?;
    let parse = |k: &str| -> Result<&str> {
        meta(k).ok_or_else(|| Error::Malformed(format!("{} lacks `{k}`", checkpoint.display())))
    };
    let order: Vec<usize> = parse("stream_order")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Malformed(format!("bad stream_order entry `{s}`")))
        })
        .collect::<Result<_>>()?;
    let pos: usize = parse("stream_pos")?
        .parse()
        .map_err(|_| Error::Malformed("bad stream_pos".into()))?;
    let best_val: f64 = parse("best_val")?
        .parse()
        .map_err(|_| Error::Malformed("bad best_val".into()))?;
    let best_epoch: usize = parse("best_epoch")?
        .parse()
        .map_err(|_| Error::Malformed("bad best_epoch".into()))?;

    let (train, val) = datasets(manifest, fields)?;
    if order.len() != train.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was trained on {} slices, manifest provides {}",
            order.len(),
            train.len()
        )));
    }
    let done = ckpt.epoch as usize;
    let log: Vec<LogRow> = read_rows(&out_dir.join(LOG_FILE))?
        .into_iter()
        .filter(|r: &LogRow| r.epoch <= done)
        .collect();
    let timing: Vec<TimingRow> = read_rows(&out_dir.join(TIMING_FILE))?
        .into_iter()
        .filter(|r: &TimingRow| r.epoch <= done)
        .collect();
    let state = RunState {
        model: Model {
            config: ckpt.config,
            params: ckpt.params,
        },
        opt,
        stream: BatchStream {
            order,
            pos,
            rng: ckpt.rng.restore(),
        },
        done_epochs: done,
        best_val,
        best_epoch,
        log,
        timing,
    };
    run(state, cfg, &train, &val, out_dir)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run(
    mut s: RunState,
    cfg: &TrainConfig,
    train: &SliceDataset,
    val: &SliceDataset,
    out_dir: &Path,
) -> Result<FitOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    for epoch in s.done_epochs + 1..=cfg.epochs {
        let t0 = Instant::now();
        let stats = train_epoch(&mut s.model.params, &mut s.opt, train, &mut s.stream, cfg)
            .map_err(|e| e.context(format!("epoch {epoch}")))?;
        let scores = validate(&s.model, val, cfg.batch_size)?;
        s.log.push(LogRow {
            epoch,
            train_loss: stats.mean_loss,
            val_nmse: scores.nmse,
            val_psnr_db: scores.psnr_db,
            val_ssim: scores.ssim,
        });
        let score = match cfg.val_metric {
            super::ValMetric::Nmse => scores.nmse,
            super::ValMetric::Psnr => scores.psnr_db,
            super::ValMetric::Ssim => scores.ssim,
        };
        let mut ckpt = Checkpoint {
            config: s.model.config.clone(),
            params: s.model.params.clone(),
            optimizer: None,
            epoch: epoch as u32,
            rng: RngState::capture(&s.stream.rng),
            val_metric: score,
            meta: Vec::new(),
        };
        if cfg.val_metric.better(score, s.best_val) || s.best_epoch == 0 {
            s.best_val = score;
            s.best_epoch = epoch;
            ckpt.meta = run_meta(cfg, &s);
            save_checkpoint(&ckpt, &best_path)?;
        }
        ckpt.optimizer = Some(s.opt.clone());
        ckpt.meta = run_meta(cfg, &s);
        save_checkpoint(&ckpt, &last_path)?;
        s.timing.push(TimingRow {
            epoch,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        write_rows(
            &out_dir.join(LOG_FILE),
            &s.log,
            &["epoch", "train_loss", "val_nmse", "val_psnr_db", "val_ssim"],
        )?;
        write_rows(
            &out_dir.join(TIMING_FILE),
            &s.timing,
            &["epoch", "wall_seconds"],
        )?;
    }
    if s.log.is_empty() {
        write_rows(
            &out_dir.join(LOG_FILE),
            &s.log,
            &["epoch", "train_loss", "val_nmse", "val_psnr_db", "val_ssim"],
        )?;
    }
    Ok(FitOutcome {
        model: s.model,
        best_epoch: s.best_epoch,
        best_val: s.best_val,
        log: s.log,
        best_path,
        last_path,
    })
}

fn run_meta(cfg: &TrainConfig, s: &RunState) -> Vec<(String, String)> {
    let mut meta: Vec<(String, String)> = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect();
    meta.push(("best_val".into(), s.best_val.to_string()));
    meta.push(("best_epoch".into(), s.best_epoch.to_string()));
    meta.push((
        "stream_order".into(),
        s.stream
            .order
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(","),
    ));
    meta.push(("stream_pos".into(), s.stream.pos.to_string()));
    meta
}
