//! Training loop, evaluation and checkpointing.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::crm::Crm;
use crate::error::{Error, Result};
use crate::losses::{
    cyclic_consistency_loss_tensor, mse, regen_loss_tensor, text_supervision_loss_tensor, LossTerms,
    PerceptualExtractor, TextEmbedder, FROZEN_SEED,
};
use crate::nn::{cosine_lr, Adam, AdamConfig, Mode, ParamStore};
use crate::redaction::BatchRedactor;
use crate::rng::{derive_seed, make_rng};
use crate::sa::SaModule;
use crate::tasks::basenet::{BaseNet, Predictions};
use crate::tasks::loss::total_base_loss;
use crate::tasks::{generate_synthetic_dataset, Dataset, MetricAccumulator, MetricSet, Scene, TruthBatch};
use crate::tensor::{stack_arrays, unstack_arrays, DenseCondition};

use super::config::TrainConfig;

pub const METRICS_HEADER: &str = "epoch,split,task,metric,value";

/// Every trainable module of a run, with parameters in one store.
pub struct Model {
    pub store: ParamStore,
    pub basenet: BaseNet,
    pub crm: Option<Crm>,
    pub sa: Option<SaModule>,
}

impl Model {
    /// Parameter prefixes: `base.`, `crm.`, `sa.`.
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, cfg.precision.dtype(), device.clone());
        let basenet = BaseNet::new(&mut store.root().sub("base"), cfg.basenet())?;
        let crm = if cfg.crm.enabled {
            Some(Crm::new(&mut store.root().sub("crm"), cfg.crm_config())?)
        } else {
            None
        };
        let sa = if cfg.sa.enabled {
            let task = cfg.task.tasks()[0];
            Some(SaModule::new(&mut store.root().sub("sa"), cfg.sa.config.clone(), task, cfg.data.classes())?)
        } else {
            None
        };
        Ok(Self { store, basenet, crm, sa })
    }

    /// Final predictions: the base network's, enhanced by the attention module when present.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<(Predictions, Predictions)> {
        let base = self.basenet.forward(x, mode)?;
        let fin = match &self.sa {
            Some(sa) => Predictions(vec![sa.enhance(x, &base.0[0])?.0]),
            None => base.clone(),
        };
        Ok((base, fin))
    }
}

/// Frozen feature networks used by the losses.
pub struct FrozenNets {
    pub perceptual: PerceptualExtractor,
    pub text: TextEmbedder,
}

impl FrozenNets {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            perceptual: PerceptualExtractor::new(FROZEN_SEED, dtype, device)?,
            text: TextEmbedder::new(FROZEN_SEED, dtype, device)?,
        })
    }
}

/// A split as stacked tensors.
pub struct SplitTensors {
    pub images: Tensor,
    pub truth: TruthBatch,
}

impl SplitTensors {
    pub fn new(scenes: &[Scene], classes: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            images: stack_arrays(scenes.iter().map(|s| s.image.data()), dtype, device)?,
            truth: TruthBatch::from_truths(scenes.iter().map(|s| &s.truth), classes, dtype, device)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, TruthBatch)> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let t = Tensor::new(ids.as_slice(), self.images.device())?;
        Ok((self.images.index_select(&t, 0)?, self.truth.index_select(&t)?))
    }
}

/// Scalar losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub base: f64,
    pub regen: f64,
    pub text: f64,
    pub cyclic: f64,
}

/// Per-epoch summary kept in the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: StepLosses,
    pub val: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment_id: String,
    pub config: String,
    pub history: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Set when the run stopped before its last epoch.
    pub interrupted: bool,
}

impl RunRecord {
    pub fn final_metrics(&self) -> Option<MetricSet> {
        self.history.iter().rev().find_map(|e| e.val)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    step: usize,
    config: String,
    history: Vec<EpochRecord>,
    checkpoint: String,
}

/// Optional knobs for [`train_with`].
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the output directory if there is one.
    pub resume: bool,
    /// Stop after this many completed epochs, as if interrupted.
    pub stop_after_epoch: Option<usize>,
    /// Reuse an already rendered dataset matching the config.
    pub dataset: Option<Arc<Dataset>>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub frozen: FrozenNets,
    opt: Adam,
    redactor: Option<BatchRedactor>,
    sa_redactor: Option<BatchRedactor>,
    pub train_data: SplitTensors,
    pub val_data: SplitTensors,
    dataset: Arc<Dataset>,
    step: usize,
    epoch: usize,
    history: Vec<EpochRecord>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: Option<Arc<Dataset>>) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let dtype = cfg.precision.dtype();
        let dataset = match dataset {
            Some(d) if d.spec == cfg.data => d,
            Some(_) => return Err(Error::Config("supplied dataset does not match data.* settings".into())),
            None => Arc::new(generate_synthetic_dataset(&cfg.data)?),
        };
        let model = Model::new(&cfg, &device)?;
        let trainable: Vec<(&String, &candle_core::Var)> = model
            .store
            .vars()
            .iter()
            .filter(|(k, _)| !(cfg.train.freeze_base && k.starts_with("base.")))
            .collect();
        let opt = Adam::new(trainable, AdamConfig { lr: cfg.train.lr, ..Default::default() })?;
        let (h, w) = (cfg.data.height, cfg.data.width);
        let redactor = if cfg.crm.enabled {
            Some(BatchRedactor::new(cfg.redaction.clone(), h, w, dtype, &device)?)
        } else {
            None
        };
        let sa_redactor = if cfg.sa.enabled {
            Some(BatchRedactor::new(cfg.sa.config.redaction.clone(), h, w, dtype, &device)?)
        } else {
            None
        };
        let classes = cfg.data.classes();
        let train_data = SplitTensors::new(&dataset.train, classes, dtype, &device)?;
        let val_data = SplitTensors::new(&dataset.val, classes, dtype, &device)?;
        Ok(Self {
            frozen: FrozenNets::new(dtype, &device)?,
            cfg,
            model,
            opt,
            redactor,
            sa_redactor,
            train_data,
            val_data,
            dataset,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_data.len().div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.train.epochs
    }

    /// Seed of the redaction draw at a given step.
    pub fn batch_seed(&self, step: usize) -> u64 {
        derive_seed(self.cfg.seed, "redaction", step as u64)
    }

    /// Builds every loss term for one batch. `mode` is the batch-norm mode of the forward passes.
    pub fn losses(&self, x: &Tensor, truth: &TruthBatch, batch_seed: u64, mode: Mode) -> Result<LossTerms> {
        let (base_preds, final_preds) = self.model.predict(x, mode)?;
        let base = total_base_loss(&final_preds, truth)?;
        let cond = base_preds.condition()?;
        let w = &self.cfg.loss.weights;
        let mut regen: Option<Tensor> = None;
        let mut generated: Option<Tensor> = None;
        if let (Some(crm), Some(redactor)) = (&self.model.crm, &self.redactor) {
            let img_r = redactor.apply(x, &mut make_rng(batch_seed))?.detach();
            let gen = crm.forward(&img_r, &cond, mode)?;
            regen = Some(regen_loss_tensor(&gen, x, w, &self.frozen.perceptual)?);
            generated = Some(gen);
        }
        if let (Some(sa), Some(redactor)) = (&self.model.sa, &self.sa_redactor) {
            let img_r = redactor.apply(x, &mut make_rng(batch_seed))?.detach();
            let (gen, _) = sa.regenerate(&img_r, &cond)?;
            let l = regen_loss_tensor(&gen, x, w, &self.frozen.perceptual)?;
            regen = Some(match regen {
                Some(r) => (r + l)?,
                None => l,
            });
            generated.get_or_insert(gen);
        }
        let text = match (&generated, self.cfg.loss.use_text) {
            (Some(gen), true) => Some(text_supervision_loss_tensor(x, gen, &self.frozen.text)?),
            _ => None,
        };
        let cyclic = match (&generated, self.cfg.loss.use_cyclic) {
            (Some(gen), true) if self.cfg.loss.cyclic_detach => {
                Some(cyclic_consistency_loss_tensor(&cond, gen, &self.model.basenet)?)
            }
            (Some(gen), true) => {
                let again = self.model.basenet.forward(gen, Mode::TrainFrozenStats)?.condition()?;
                Some(mse(&again, &cond)?)
            }
            _ => None,
        };
        Ok(LossTerms { base, regen, text, cyclic })
    }

    /// One optimizer step on the given training indices.
    pub fn train_step(&mut self, idx: &[usize]) -> Result<StepLosses> {
        let (x, truth) = self.train_data.batch(idx)?;
        let batch_seed = self.batch_seed(self.step);
        let abort = |this: &Self, reason: String| -> Error {
            this.dump_failure(idx, batch_seed, &reason);
            Error::TrainingAborted { step: this.step, batch_seed, reason }
        };
        let terms = match self.losses(&x, &truth, batch_seed, Mode::Train) {
            Ok(t) => t,
            Err(e @ Error::UndefinedLoss(_)) => return Err(abort(self, e.to_string())),
            Err(e) => return Err(e),
        };
        let total = terms.total(&self.cfg.loss.weights)?;
        let values = terms.values()?;
        let total_value = scalar(&total)?;
        if let Err(e) = crate::losses::total_loss(values[0].1, values[1].1, values[2].1, values[3].1, &self.cfg.loss.weights) {
            return Err(abort(self, e.to_string()));
        }
        if !total_value.is_finite() {
            return Err(abort(self, format!("total loss is {total_value}")));
        }
        let grads = total.backward()?;
        let lr = cosine_lr(self.cfg.train.lr, self.step, self.total_steps());
        self.opt.step(&grads, lr)?;
        self.step += 1;
        Ok(StepLosses {
            total: total_value,
            base: values[0].1,
            regen: values[1].1,
            text: values[2].1,
            cyclic: values[3].1,
        })
    }

    fn dump_failure(&self, idx: &[usize], batch_seed: u64, reason: &str) {
        let dump = serde_json::json!({
            "step": self.step,
            "epoch": self.epoch,
            "batch_seed": batch_seed,
            "batch_indices": idx,
            "reason": reason,
        });
        if fs::create_dir_all(&self.cfg.out_dir).is_ok() {
            let _ = fs::write(self.cfg.out_dir.join("failure.json"), dump.to_string());
        }
    }

    /// Training order of one epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_data.len()).collect();
        make_rng(self.cfg.seed).substream_indexed("data", epoch as u64).shuffle(&mut order);
        order
    }

    /// Runs one epoch and returns the mean step losses.
    pub fn train_epoch(&mut self) -> Result<StepLosses> {
        let order = self.epoch_order(self.epoch);
        let mut sum = StepLosses { total: 0.0, base: 0.0, regen: 0.0, text: 0.0, cyclic: 0.0 };
        let mut n = 0.0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let l = self.train_step(chunk)?;
            sum.total += l.total;
            sum.base += l.base;
            sum.regen += l.regen;
            sum.text += l.text;
            sum.cyclic += l.cyclic;
            n += 1.0;
        }
        self.epoch += 1;
        Ok(StepLosses {
            total: sum.total / n,
            base: sum.base / n,
            regen: sum.regen / n,
            text: sum.text / n,
            cyclic: sum.cyclic / n,
        })
    }

    /// Metrics of the final predictions on a split.
    pub fn evaluate(&self, split: Split) -> Result<MetricSet> {
        let (data, scenes) = match split {
            Split::Train => (&self.train_data, &self.dataset.train),
            Split::Val => (&self.val_data, &self.dataset.val),
        };
        let mut acc = MetricAccumulator::new(self.cfg.data.classes());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(self.cfg.train.batch_size.max(8)) {
            let (x, _) = data.batch(chunk)?;
            let (_, preds) = self.model.predict(&x, Mode::Eval)?;
            for p in &preds.0 {
                for (i, arr) in chunk.iter().zip(unstack_arrays(&p.cond)?) {
                    acc.add(&DenseCondition::new(p.task, arr), &scenes[*i].truth)?;
                }
            }
        }
        Ok(acc.finish())
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("checkpoints")
    }

    /// Writes `checkpoints/epoch_NNNN.safetensors` with its `.json` sidecar and
    /// repoints `checkpoints/latest.json`, each through a temporary file and rename.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.checkpoint_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = format!("epoch_{:04}.safetensors", self.epoch);
        let path = dir.join(&name);
        let mut tensors: std::collections::HashMap<String, Tensor> = self.model.store.snapshot().into_iter().collect();
        tensors.extend(self.opt.state());
        let tmp = dir.join(format!("{name}.tmp"));
        candle_core::safetensors::save(&tensors, &tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            step: self.step,
            config: self.cfg.to_string(),
            history: self.history.clone(),
            checkpoint: name.clone(),
        };
        let text = serde_json::to_string_pretty(&meta)?;
        write_atomic(&dir.join(format!("epoch_{:04}.json", self.epoch)), &text)?;
        write_atomic(&dir.join("latest.json"), &text)?;
        Ok(path)
    }

    /// Restores weights, buffers, optimizer state and counters from a checkpoint file.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let meta = read_meta(&path.with_extension("json"))?;
        let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?
            .into_iter()
            .collect();
        self.model.store.restore(&tensors)?;
        self.opt.load_state(&tensors)?;
        self.step = meta.step;
        self.epoch = meta.epoch;
        self.history = meta.history;
        Ok(())
    }

    fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let latest = self.checkpoint_dir().join("latest.json");
        if !latest.exists() {
            return Ok(None);
        }
        let meta = read_meta(&latest)?;
        Ok(Some(self.checkpoint_dir().join(meta.checkpoint)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub(crate) fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn metric_rows(epoch: usize, task_label: &str, losses: &StepLosses, val: Option<&MetricSet>) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("loss_total", losses.total),
        ("loss_base", losses.base),
        ("loss_regen", losses.regen),
        ("loss_text", losses.text),
        ("loss_cyclic", losses.cyclic),
    ] {
        s.push_str(&format!("{epoch},train,{task_label},{k},{v}\n"));
    }
    if let Some(m) = val {
        for (task, k, v) in m.entries() {
            s.push_str(&format!("{epoch},val,{task},{k},{v}\n"));
        }
    }
    s
}

/// Drops rows of epochs after `keep_epochs`, leaving the header.
fn truncate_metrics(path: &Path, keep_epochs: usize) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
            Some(epoch) => epoch <= keep_epochs,
            None => true,
        };
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, &kept)
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn train(cfg: TrainConfig) -> Result<RunRecord> {
    train_with(cfg, RunOptions::default())
}

/// Full run: per epoch, train, evaluate, append metric rows, then checkpoint.
///
/// Files under `cfg.out_dir`: `config.cfg`, `metrics.csv`, `checkpoints/`, `run.json`.
pub fn train_with(cfg: TrainConfig, opts: RunOptions) -> Result<RunRecord> {
    let start = Instant::now();
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trainer = Trainer::new(cfg, opts.dataset.clone())?;
    let metrics_path = out.join("metrics.csv");
    let mut last_ckpt = None;
    let resumed = if opts.resume { trainer.latest_checkpoint()? } else { None };
    match resumed {
        Some(path) => {
            trainer.load_checkpoint(&path)?;
            if trainer.cfg.to_string() != read_meta(&path.with_extension("json"))?.config {
                return Err(Error::Checkpoint("checkpoint was written with a different config".into()));
            }
            truncate_metrics(&metrics_path, trainer.epoch())?;
            last_ckpt = Some(path);
        }
        None => {
            write_atomic(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
            write_atomic(&out.join("config.cfg"), &trainer.cfg.to_string())?;
        }
    }
    let task_label = trainer.cfg.task.to_string();
    let epochs = trainer.cfg.train.epochs;
    let mut interrupted = false;
    while trainer.epoch() < epochs {
        if opts.stop_after_epoch.is_some_and(|k| trainer.epoch() >= k) {
            interrupted = true;
            break;
        }
        let losses = trainer.train_epoch()?;
        let e = trainer.epoch();
        let val = if e % trainer.cfg.train.eval_every == 0 || e == epochs {
            Some(trainer.evaluate(Split::Val)?)
        } else {
            None
        };
        if opts.verbose {
            let headline = val
                .map(|m| {
                    m.entries()
                        .iter()
                        .map(|(t, k, v)| format!("{t}/{k}={v:.4}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default();
            eprintln!("epoch {e}/{epochs} loss={:.4} {headline}", losses.total);
        }
        trainer.history.push(EpochRecord { epoch: e, train: losses, val });
        append(&metrics_path, &metric_rows(e, &task_label, &losses, val.as_ref()))?;
        last_ckpt = Some(trainer.save_checkpoint()?);
    }
    let record = RunRecord {
        experiment_id: trainer.cfg.experiment.id.clone(),
        config: trainer.cfg.to_string(),
        history: trainer.history.clone(),
        final_checkpoint: last_ckpt,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        interrupted,
    };
    write_atomic(&out.join("run.json"), &serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Evaluates a checkpoint using the config stored beside it.
pub fn evaluate_checkpoint(path: &Path, split: Split) -> Result<MetricSet> {
    let meta = read_meta(&path.with_extension("json"))?;
    let cfg: TrainConfig = meta.config.parse()?;
    let mut trainer = Trainer::new(cfg, None)?;
    trainer.load_checkpoint(path)?;
    trainer.evaluate(split)
}

/// Baseline and DejaVu runs of one config under one experiment id, in `baseline/` and `dejavu/`.
pub fn train_paired(cfg: &TrainConfig, opts: RunOptions) -> Result<(RunRecord, RunRecord)> {
    let dataset = match opts.dataset.clone() {
        Some(d) => d,
        None => Arc::new(generate_synthetic_dataset(&cfg.data)?),
    };
    let mut dejavu = cfg.clone();
    dejavu.crm.enabled = true;
    dejavu.out_dir = cfg.out_dir.join("dejavu");
    let mut baseline = cfg.baseline();
    baseline.out_dir = cfg.out_dir.join("baseline");
    let opts = RunOptions { dataset: Some(dataset), ..opts };
    let b = train_with(baseline, opts.clone())?;
    let d = train_with(dejavu, opts)?;
    Ok((b, d))
}
