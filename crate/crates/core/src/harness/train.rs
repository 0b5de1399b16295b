//! Pre-training and fine-tuning loops, evaluation and feature extraction.
//!
//! All randomness is counter based: the epoch permutation, each sample's
//! clip start and both mask plans derive from the run seed and the sample's
//! position. Resuming from a checkpoint therefore needs only the parameters,
//! the optimizer moments and the step counter.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::finetune::{classify_loss, infer_two_clip, regress_loss, Modalities, Prediction, Task};
use crate::masking::sample_seed;
use crate::model::{ClipInputs, FinetuneModel, PretrainModel, PretrainSample};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::objectives::PretrainLossReport;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::data::{ClipChoice, Dataset, FailureBudget, Target};
use super::metrics::{compute_metrics, MetricReport};
use super::optim::{AdamW, Schedule};

pub const PRETRAIN_KIND: &str = "pretrain";
pub const FINETUNE_KIND: &str = "finetune";

const STREAM_CLIP: u64 = 0;
const STREAM_AUDIO_MASK: u64 = 1;
const STREAM_VIDEO_MASK: u64 = 2;
const STREAM_ORDER: u64 = 3;

/// Parameter prefixes shared with the pre-training model.
pub const BACKBONE: [&str; 5] = ["audio.embed", "video.embed", "audio.encoder", "video.encoder", "fusion"];

/// Shuffled sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch as u64, u64::MAX, STREAM_ORDER));
    order.shuffle(&mut rng);
    order
}

fn is_data_error(e: &Error) -> bool {
    matches!(e, Error::Input(_) | Error::Format(_) | Error::Io(_))
}

fn finite_grads<T: Real>(grads: &[Tensor<T>], step: usize) -> Result<()> {
    if grads.iter().any(|g| !g.all_finite()) {
        bail!(Numeric, "non-finite gradient at step {step}");
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Per-step CSV log.
struct CsvLog {
    writer: csv::Writer<fs::File>,
}

impl CsvLog {
    /// Opens `path`, keeping existing rows whose first field (the step) is
    /// below `keep_below`. Rows past a resume point are dropped so a resumed
    /// run does not log them twice.
    fn open(path: &Path, header: &[String], keep_below: usize) -> Result<Self> {
        let mut kept: Vec<csv::StringRecord> = Vec::new();
        if keep_below > 0 && path.exists() {
            let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            for rec in reader.records() {
                let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                if rec.get(0).and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < keep_below) {
                    kept.push(rec);
                }
            }
        }
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer.write_record(header).map_err(csv_err)?;
        for rec in &kept {
            writer.write_record(rec).map_err(csv_err)?;
        }
        Ok(Self { writer })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Loss components of one pre-training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: PretrainLossReport,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Steps run by this invocation (after any resume point).
    pub history: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub skipped: usize,
}

fn loss_header(layers: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "lr", "l_mae_a", "l_mae_v", "l_mae"].map(String::from).to_vec();
    h.extend(layers.iter().map(|l| format!("infonce_l{l}")));
    h.extend(["hcmcl", "total"].map(String::from));
    h
}

/// Configuration fields that must agree between a checkpoint and the run
/// resuming it.
fn resume_key(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { max_steps: None, checkpoint_every: 0, max_failures: 0, ..cfg.clone() }
}

fn snapshot(cfg: &TrainConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))
}

fn config_from_meta(meta: &serde_json::Value) -> Result<TrainConfig> {
    serde_json::from_value(meta.get("train").cloned().unwrap_or_default())
        .map_err(|e| Error::Format(format!("checkpoint carries no usable run configuration: {e}")))
}

fn rng_state(cfg: &TrainConfig, done: usize, per_epoch: usize) -> RngState {
    RngState { seed: cfg.seed, epoch: (done / per_epoch) as u64, cursor: ((done % per_epoch) * cfg.batch_size) as u64 }
}

/// Masked pre-training over every manifest row.
///
/// Writes `config.json`, `loss.csv`, periodic `step{N}.hckp` checkpoints,
/// `last.hckp` and `summary.txt` into `out`. With `resume`, restores the
/// checkpoint and continues from its step.
pub fn pretrain<T: Real>(cfg: &TrainConfig, data: &Dataset, out: &Path, resume: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Input, "manifest has no clips");
    }
    fs::create_dir_all(out)?;
    let mut store = ParamStore::<T>::new();
    let model = PretrainModel::declare(&mut store, &cfg.model)?;
    store.initialize(cfg.seed);
    let mut opt = AdamW::new(&store, cfg.optim.clone());

    let n = data.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let total = cfg.epochs * per_epoch;
    let schedule = Schedule::new(cfg.base_lr, cfg.warmup_epochs * per_epoch, total);
    let end = cfg.max_steps.map_or(total, |m| m.min(total));

    let mut start = 0;
    if let Some(path) = resume {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.kind != PRETRAIN_KIND {
            bail!(Config, "{} is a {} checkpoint, not a pre-training one", path.display(), ck.kind);
        }
        if resume_key(&config_from_meta(&ck.meta)?) != resume_key(cfg) {
            bail!(Config, "{} was written by a different run configuration", path.display());
        }
        ck.restore(&mut store, Some(&mut opt))?;
        start = ck.step as usize;
        log::info!("resuming from step {start}");
    }

    write_json(&out.join("config.json"), cfg)?;
    let layers = cfg.model.contrastive_layers();
    let mut csv = CsvLog::open(&out.join("loss.csv"), &loss_header(&layers), start)?;
    let mut budget = FailureBudget::new(cfg.max_failures);
    let meta = serde_json::json!({ "train": snapshot(cfg)? });
    let save = |store: &ParamStore<T>, opt: &AdamW<T>, done: usize, path: &Path| {
        Checkpoint::capture(PRETRAIN_KIND, done as u64, rng_state(cfg, done, per_epoch), meta.clone(), store, Some(opt))
            .save(path)
    };

    let mut history = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    for step in start..end {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let first = (step % per_epoch) * cfg.batch_size;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for &idx in &order[first..(first + cfg.batch_size).min(n)] {
            let seed = |stream| sample_seed(cfg.seed, epoch as u64, idx as u64, stream);
            let sample = data
                .load(idx, ClipChoice::Train(seed(STREAM_CLIP)))
                .and_then(|(spec, clip)| PretrainSample::<T>::new(&spec, &clip, &cfg.model, seed(STREAM_AUDIO_MASK), seed(STREAM_VIDEO_MASK)));
            match sample {
                Ok(s) => batch.push(s),
                Err(e) if is_data_error(&e) => budget.record(&data.manifest.rows[idx].id, &e)?,
                Err(e) => return Err(e),
            }
        }
        let lr = schedule.lr(step);
        if batch.is_empty() {
            log::warn!("step {step}: every sample of the batch failed to load; no update");
            continue;
        }
        let (report, grads) = {
            let g = Graph::new(&store);
            let loss = model.loss(&g, &batch)?;
            let report = loss.report(&g);
            if !report.total.is_finite() {
                bail!(Numeric, "non-finite loss at step {step}");
            }
            (report, g.backward_params(loss.total)?)
        };
        finite_grads(&grads, step)?;
        opt.update(&mut store, &grads, lr)?;

        let mut row = vec![step.to_string(), epoch.to_string(), lr.to_string()];
        row.extend([report.mae_audio, report.mae_video, report.mae].map(|v| v.to_string()));
        row.extend(report.infonce.iter().map(f64::to_string));
        row.extend([report.hcmcl, report.total].map(|v| v.to_string()));
        csv.row(&row)?;
        history.push(StepRecord { step, epoch, lr, loss: report });

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save(&store, &opt, done, &out.join(format!("step{done:06}.hckp")))?;
        }
    }
    let checkpoint = out.join("last.hckp");
    save(&store, &opt, end.max(start), &checkpoint)?;

    let mut summary = format!(
        "pre-training\nprecision {}\nsteps {}..{} of {total} ({per_epoch} per epoch)\nskipped samples {}\n",
        T::NAME,
        start,
        end.max(start),
        budget.count
    );
    if let (Some(a), Some(b)) = (history.first(), history.last()) {
        summary += &format!("total loss {} -> {}\nmae {} -> {}\n", a.loss.total, b.loss.total, a.loss.mae, b.loss.mae);
    }
    summary += &format!("checkpoint {}\n", checkpoint.display());
    fs::write(out.join("summary.txt"), summary)?;
    Ok(PretrainOutcome { history, checkpoint, skipped: budget.count })
}

/// What a fine-tuning checkpoint needs to rebuild its model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub train: TrainConfig,
    pub task: Task,
    pub modalities: Modalities,
    /// Per-dimension `(min, max)` of the training targets; regression
    /// outputs live in `[-1, 1]` and are mapped back through this.
    pub scaler: Vec<(f64, f64)>,
    pub classes: Vec<String>,
}

impl FinetuneMeta {
    pub fn from_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.kind != FINETUNE_KIND {
            bail!(Config, "expected a fine-tuning checkpoint, got a {} one", ck.kind);
        }
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
    }

    fn scale(&self, values: &[f64]) -> Vec<f64> {
        values.iter().zip(&self.scaler).map(|(&v, &(lo, hi))| if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 }).collect()
    }

    fn unscale(&self, values: &[f64]) -> Vec<f64> {
        values.iter().zip(&self.scaler).map(|(&v, &(lo, hi))| if hi > lo { lo + (v + 1.0) * (hi - lo) / 2.0 } else { lo }).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub task: Task,
    pub modalities: Modalities,
    /// Pre-training checkpoint whose shared parameters seed the model.
    pub init: Option<PathBuf>,
    /// Train only the head and layer weights.
    pub freeze_backbone: bool,
    pub train_split: String,
    pub eval_split: Option<String>,
}

impl FinetuneOptions {
    pub fn new(task: Task, modalities: Modalities) -> Self {
        Self {
            task,
            modalities,
            init: None,
            freeze_backbone: false,
            train_split: "train".into(),
            eval_split: Some("test".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the sampled training clips (classification only).
    pub train_war: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub history: Vec<EpochRecord>,
    /// Two-clip inference on the training split after training.
    pub train_report: MetricReport,
    pub eval_report: Option<MetricReport>,
    pub checkpoint: PathBuf,
    /// Parameters initialized from the pre-training checkpoint.
    pub loaded: Vec<String>,
}

fn scalars<T: Real>(g: &Graph<'_, T>, v: Var) -> Vec<f64> {
    g.value(v).data().iter().map(|x| x.as_f64()).collect()
}

/// Supervised fine-tuning on full, unmasked clips.
///
/// Writes `config.json`, `finetune_loss.csv`, `finetune.hckp`, metric
/// reports and `summary.txt` into `out`.
pub fn finetune<T: Real>(cfg: &TrainConfig, data: &Dataset, opts: &FinetuneOptions, out: &Path) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    opts.task.validate()?;
    let train_rows = data.manifest.indices(Some(&opts.train_split));
    if train_rows.is_empty() {
        bail!(Input, "split {:?} has no clips", opts.train_split);
    }
    fs::create_dir_all(out)?;
    let targets = data.manifest.targets(opts.task)?;
    let scaler = match opts.task {
        Task::Classify(_) => Vec::new(),
        Task::Regress(d) => (0..d)
            .map(|j| {
                let col = train_rows.iter().map(|&i| match &targets[i] {
                    Target::Values(v) => v[j],
                    Target::Class(_) => unreachable!("regression targets"),
                });
                col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            })
            .collect(),
    };
    let meta = FinetuneMeta {
        train: cfg.clone(),
        task: opts.task,
        modalities: opts.modalities,
        scaler,
        classes: match opts.task {
            Task::Classify(_) => data.manifest.class_names(),
            Task::Regress(_) => Vec::new(),
        },
    };

    let mut store = ParamStore::<T>::new();
    let model = FinetuneModel::declare(&mut store, &cfg.model, opts.modalities, opts.task)?;
    store.initialize(cfg.seed);
    let mut loaded = Vec::new();
    if let Some(path) = &opts.init {
        let ck = Checkpoint::<T>::load(path)?;
        loaded = ck.restore_matching(&mut store);
        if loaded.is_empty() {
            bail!(Config, "{} shares no parameters with the fine-tuning model", path.display());
        }
        log::info!("initialized {} parameter tensors from {}", loaded.len(), path.display());
    }
    let mut opt = AdamW::new(&store, cfg.optim.clone());
    if opts.freeze_backbone {
        opt.freeze(&store, &BACKBONE);
    }

    let n = train_rows.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let total = cfg.epochs * per_epoch;
    let schedule = Schedule::new(cfg.base_lr, cfg.warmup_epochs * per_epoch, total);
    let end = cfg.max_steps.map_or(total, |m| m.min(total));
    write_json(&out.join("config.json"), &meta)?;
    let header = ["step", "epoch", "lr", "loss", "batch_accuracy"].map(String::from);
    let mut csv = CsvLog::open(&out.join("finetune_loss.csv"), &header, 0)?;
    let mut budget = FailureBudget::new(cfg.max_failures);

    let mut history: Vec<EpochRecord> = Vec::new();
    let (mut loss_sum, mut batches, mut correct, mut seen) = (0.0, 0usize, 0usize, 0usize);
    for step in 0..end {
        let epoch = step / per_epoch;
        let order = epoch_order(n, cfg.seed, epoch);
        let first = (step % per_epoch) * cfg.batch_size;
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut batch_targets = Vec::with_capacity(cfg.batch_size);
        for &pos in &order[first..(first + cfg.batch_size).min(n)] {
            let idx = train_rows[pos];
            let seed = sample_seed(cfg.seed, epoch as u64, idx as u64, STREAM_CLIP);
            let loaded = data.load(idx, ClipChoice::Train(seed)).and_then(|(s, c)| ClipInputs::<T>::new(&s, &c, &cfg.model));
            match loaded {
                Ok(x) => {
                    inputs.push(x);
                    batch_targets.push(&targets[idx]);
                }
                Err(e) if is_data_error(&e) => budget.record(&data.manifest.rows[idx].id, &e)?,
                Err(e) => return Err(e),
            }
        }
        let lr = schedule.lr(step);
        if !inputs.is_empty() {
            let refs: Vec<&ClipInputs<T>> = inputs.iter().collect();
            let (loss, outputs, grads) = {
                let g = Graph::new(&store);
                let outputs = model.outputs(&g, &refs)?;
                let loss = match opts.task {
                    Task::Classify(_) => {
                        let labels: Vec<usize> = batch_targets
                            .iter()
                            .map(|t| match t {
                                Target::Class(c) => *c,
                                Target::Values(_) => unreachable!("classification targets"),
                            })
                            .collect();
                        classify_loss(&g, outputs, &labels)?
                    }
                    Task::Regress(d) => {
                        let flat: Vec<f64> = batch_targets
                            .iter()
                            .flat_map(|t| match t {
                                Target::Values(v) => meta.scale(v),
                                Target::Class(_) => unreachable!("regression targets"),
                            })
                            .collect();
                        regress_loss(&g, outputs, &Tensor::from_f64(&[refs.len(), d], &flat)?)?
                    }
                };
                let value = g.scalar(loss).as_f64();
                if !value.is_finite() {
                    bail!(Numeric, "non-finite loss at step {step}");
                }
                (value, scalars(&g, outputs), g.backward_params(loss)?)
            };
            finite_grads(&grads, step)?;
            opt.update(&mut store, &grads, lr)?;

            let k = opts.task.outputs();
            let mut accuracy = String::new();
            if let Task::Classify(_) = opts.task {
                let hits = outputs
                    .chunks(k)
                    .zip(&batch_targets)
                    .filter(|(row, t)| **t == &Target::Class(Prediction { scores: row.to_vec() }.argmax()))
                    .count();
                correct += hits;
                seen += batch_targets.len();
                accuracy = (hits as f64 / batch_targets.len() as f64).to_string();
            }
            loss_sum += loss;
            batches += 1;
            csv.row(&[step.to_string(), epoch.to_string(), lr.to_string(), loss.to_string(), accuracy])?;
        }
        if (step + 1) % per_epoch == 0 || step + 1 == end {
            let war = matches!(opts.task, Task::Classify(_)).then(|| correct as f64 / seen.max(1) as f64);
            history.push(EpochRecord { epoch, lr, loss: loss_sum / batches.max(1) as f64, train_war: war });
            (loss_sum, batches, correct, seen) = (0.0, 0, 0, 0);
        }
    }

    let checkpoint = out.join("finetune.hckp");
    let meta_json = serde_json::to_value(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let rng = rng_state(cfg, end, per_epoch);
    Checkpoint::capture(FINETUNE_KIND, end as u64, rng, meta_json, &store, Some(&opt)).save(&checkpoint)?;

    let train_report = predict_split(&model, &store, &meta, data, &train_rows, &mut budget)?.2;
    write_json(&out.join("train_metrics.json"), &train_report)?;
    let eval_rows = opts.eval_split.as_deref().map(|s| data.manifest.indices(Some(s))).unwrap_or_default();
    let eval_report = if eval_rows.is_empty() {
        None
    } else {
        let r = predict_split(&model, &store, &meta, data, &eval_rows, &mut budget)?.2;
        write_json(&out.join("eval_metrics.json"), &r)?;
        Some(r)
    };

    let mut summary = format!(
        "fine-tuning {:?} on {} ({})\nprecision {}\nsteps {end} ({per_epoch} per epoch)\nparameters from checkpoint {}\nskipped samples {}\n",
        opts.task,
        opts.modalities,
        opts.train_split,
        T::NAME,
        loaded.len(),
        budget.count
    );
    for (name, report) in [("train", Some(&train_report)), ("eval", eval_report.as_ref())] {
        if let Some(r) = report {
            let items: Vec<String> = r.entries().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            summary += &format!("{name} {}\n", items.join(" "));
        }
    }
    fs::write(out.join("summary.txt"), summary)?;
    Ok(FinetuneOutcome { history, train_report, eval_report, checkpoint, loaded })
}

type SplitPredictions = (Vec<String>, Vec<Prediction>, MetricReport);

fn predict_split<T: Real>(
    model: &FinetuneModel,
    store: &ParamStore<T>,
    meta: &FinetuneMeta,
    data: &Dataset,
    rows: &[usize],
    budget: &mut FailureBudget,
) -> Result<SplitPredictions> {
    let targets = data.manifest.targets(meta.task)?;
    let (mut ids, mut preds, mut kept) = (Vec::new(), Vec::new(), Vec::new());
    for &idx in rows {
        let clips = [0, 1].map(|i| data.load(idx, ClipChoice::Inference(i)).and_then(|(s, c)| ClipInputs::<T>::new(&s, &c, &meta.train.model)));
        let clips = match clips {
            [Ok(a), Ok(b)] => [a, b],
            [Err(e), _] | [_, Err(e)] if is_data_error(&e) => {
                budget.record(&data.manifest.rows[idx].id, &e)?;
                continue;
            }
            [Err(e), _] | [_, Err(e)] => return Err(e),
        };
        let pred = infer_two_clip([&clips[0], &clips[1]], |inputs| {
            let g = Graph::new(store);
            let out = scalars(&g, model.outputs(&g, &[inputs])?);
            Ok(match meta.task {
                Task::Classify(_) => Prediction::from_logits(&out),
                Task::Regress(_) => Prediction { scores: meta.unscale(&out) },
            })
        })?;
        ids.push(data.manifest.rows[idx].id.clone());
        preds.push(pred);
        kept.push(targets[idx].clone());
    }
    if preds.is_empty() {
        bail!(Input, "no clip of the split could be loaded");
    }
    let report = compute_metrics(&preds, &kept, meta.task)?;
    Ok((ids, preds, report))
}

/// Predictions and metrics of a fine-tuned checkpoint on one split.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub ids: Vec<String>,
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
}

/// Two-clip evaluation of a fine-tuning checkpoint on `split` (every row
/// for `None`).
pub fn evaluate<T: Real>(ck: &Checkpoint<T>, data: &Dataset, split: Option<&str>) -> Result<EvalOutcome> {
    let meta = FinetuneMeta::from_checkpoint(ck)?;
    let mut store = ParamStore::<T>::new();
    let model = FinetuneModel::declare(&mut store, &meta.train.model, meta.modalities, meta.task)?;
    store.initialize(0);
    ck.restore(&mut store, None)?;
    let rows = data.manifest.indices(split);
    if rows.is_empty() {
        bail!(Input, "split {split:?} has no clips");
    }
    let mut budget = FailureBudget::new(meta.train.max_failures);
    let (ids, predictions, report) = predict_split(&model, &store, &meta, data, &rows, &mut budget)?;
    Ok(EvalOutcome { ids, predictions, report })
}

/// Run configuration stored in any checkpoint written by this crate.
pub fn checkpoint_config<T: Real>(ck: &Checkpoint<T>) -> Result<TrainConfig> {
    match ck.kind.as_str() {
        FINETUNE_KIND => Ok(FinetuneMeta::from_checkpoint(ck)?.train),
        _ => config_from_meta(&ck.meta),
    }
}

/// Pooled fine-tuning features (before the head) averaged over the two
/// inference clips. A pre-training checkpoint yields the audio-visual
/// feature with uniform layer weights.
pub fn extract_features<T: Real>(ck: &Checkpoint<T>, data: &Dataset, split: Option<&str>) -> Result<Vec<(String, Vec<f64>)>> {
    let cfg = checkpoint_config(ck)?;
    let (modalities, task) = match ck.kind.as_str() {
        FINETUNE_KIND => {
            let meta = FinetuneMeta::from_checkpoint(ck)?;
            (meta.modalities, meta.task)
        }
        _ => (Modalities::AudioVisual, Task::Classify(2)),
    };
    let mut store = ParamStore::<T>::new();
    let model = FinetuneModel::declare(&mut store, &cfg.model, modalities, task)?;
    store.initialize(cfg.seed);
    if ck.kind == FINETUNE_KIND {
        ck.restore(&mut store, None)?;
    } else if ck.restore_matching(&mut store).is_empty() {
        bail!(Config, "checkpoint shares no parameters with the feature model");
    }
    let mut budget = FailureBudget::new(cfg.max_failures);
    let mut out = Vec::new();
    for idx in data.manifest.indices(split) {
        let mut feats: Vec<Vec<f64>> = Vec::with_capacity(2);
        for i in 0..2 {
            let inputs = match data.load(idx, ClipChoice::Inference(i)).and_then(|(s, c)| ClipInputs::<T>::new(&s, &c, &cfg.model)) {
                Ok(x) => x,
                Err(e) if is_data_error(&e) => {
                    budget.record(&data.manifest.rows[idx].id, &e)?;
                    break;
                }
                Err(e) => return Err(e),
            };
            let g = Graph::new(&store);
            feats.push(scalars(&g, model.features(&g, &inputs)?));
        }
        if feats.len() == 2 {
            let mean = feats[0].iter().zip(&feats[1]).map(|(a, b)| (a + b) / 2.0).collect();
            out.push((data.manifest.rows[idx].id.clone(), mean));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelSize;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 0);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        assert_ne!(a, epoch_order(10, 4, 0));
    }

    #[test]
    fn loss_columns() {
        assert_eq!(
            loss_header(&[2, 4]).join(","),
            "step,epoch,lr,l_mae_a,l_mae_v,l_mae,infonce_l2,infonce_l4,hcmcl,total"
        );
        assert_eq!(loss_header(&[]).len(), 8);
    }

    #[test]
    fn regression_scaling_round_trips() {
        let meta = FinetuneMeta {
            train: TrainConfig::finetune(ModelSize::Micro),
            task: Task::Regress(2),
            modalities: Modalities::AudioVisual,
            scaler: vec![(-2.0, 6.0), (1.0, 1.0)],
            classes: vec![],
        };
        assert_eq!(meta.scale(&[-2.0, 1.0]), vec![-1.0, 0.0]);
        assert_eq!(meta.scale(&[6.0, 1.0])[0], 1.0);
        assert_eq!(meta.unscale(&meta.scale(&[3.0, 1.0])), vec![3.0, 1.0]);
    }

    #[test]
    fn csv_log_drops_rows_past_resume_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let header = ["step", "v"].map(String::from);
        let mut log = CsvLog::open(&path, &header, 0).unwrap();
        for s in 0..5 {
            log.row(&[s.to_string(), (s * 10).to_string()]).unwrap();
        }
        drop(log);
        let mut log = CsvLog::open(&path, &header, 3).unwrap();
        log.row(&["3".into(), "x".into()]).unwrap();
        drop(log);
        assert_eq!(fs::read_to_string(&path).unwrap(), "step,v\n0,0\n1,10\n2,20\n3,x\n");
    }

    #[test]
    fn resume_key_ignores_run_length_fields() {
        let a = TrainConfig::pretrain(ModelSize::Micro);
        let b = TrainConfig { max_steps: Some(3), checkpoint_every: 2, max_failures: 1, ..a.clone() };
        assert_eq!(resume_key(&a), resume_key(&b));
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(resume_key(&a), resume_key(&c));
    }
}
