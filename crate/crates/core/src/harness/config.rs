//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; keys
//! that are not part of the schema, and repeated keys, are errors. Writing a
//! parsed config and parsing it again yields the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;

use crate::crm::{Combine, CrmConfig, CrmMode};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::redaction::{RedactionSpec, RedactionVariant};
use crate::sa::SaConfig;
use crate::tasks::{BaseNetConfig, SyntheticSceneSpec, TaskSelection};
use crate::tensor::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// `auto` picks the mode from the redaction variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrmModeSetting {
    Auto,
    Fixed(CrmMode),
}

impl std::fmt::Display for CrmModeSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CrmModeSetting::Auto => f.write_str("auto"),
            CrmModeSetting::Fixed(m) => m.fmt(f),
        }
    }
}

impl FromStr for CrmModeSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(CrmModeSetting::Auto),
            other => Ok(CrmModeSetting::Fixed(other.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrmSettings {
    pub enabled: bool,
    pub mode: CrmModeSetting,
    pub combine: Combine,
    pub width: usize,
    pub depth: usize,
    pub steps: usize,
}

impl Default for CrmSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: CrmModeSetting::Auto,
            combine: Combine::Concat,
            width: 64,
            depth: 4,
            steps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub use_text: bool,
    pub use_cyclic: bool,
    /// Stop the gradient through the cyclic target.
    pub cyclic_detach: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_text: false,
            use_cyclic: false,
            cyclic_detach: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SaSettings {
    pub enabled: bool,
    pub config: SaConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate on the validation split every this many epochs (and after the last).
    pub eval_every: usize,
    /// Keep base network weights fixed; only the other modules train.
    pub freeze_base: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            eval_every: 1,
            freeze_base: false,
        }
    }
}

/// Settings used by the experiment drivers rather than a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub id: String,
    pub seeds: usize,
    /// Block size of the spatial arm of the redaction ablation.
    pub ablate_block: usize,
    /// Band of the spectral arm of the redaction ablation.
    pub ablate_band: (f64, f64),
    /// Width of the stop band in the frequency sweep.
    pub band_width: f64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            id: "default".into(),
            seeds: 3,
            ablate_block: 8,
            ablate_band: (0.3, 0.6),
            band_width: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSelection,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data: SyntheticSceneSpec,
    pub base_width: usize,
    pub base_levels: usize,
    pub redaction: RedactionSpec,
    pub crm: CrmSettings,
    pub loss: LossSettings,
    pub sa: SaSettings,
    pub train: OptimSettings,
    pub experiment: ExperimentSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskSelection::Single(Task::Segmentation),
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            data: SyntheticSceneSpec::default(),
            base_width: 32,
            base_levels: 3,
            redaction: RedactionSpec::random_blocks(8),
            crm: CrmSettings::default(),
            loss: LossSettings::default(),
            sa: SaSettings::default(),
            train: OptimSettings::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn basenet(&self) -> BaseNetConfig {
        BaseNetConfig {
            tasks: self.task,
            classes: self.data.classes(),
            width: self.base_width,
            levels: self.base_levels,
        }
    }

    pub fn crm_config(&self) -> CrmConfig {
        let mode = match self.crm.mode {
            CrmModeSetting::Auto => CrmMode::for_redaction(&self.redaction),
            CrmModeSetting::Fixed(m) => m,
        };
        CrmConfig {
            mode,
            combine: self.crm.combine,
            width: self.crm.width,
            depth: self.crm.depth,
            steps: self.crm.steps,
            condition_channels: self.basenet().condition_channels(),
        }
    }

    /// The same run with every regeneration pathway removed.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.crm.enabled = false;
        c.loss.weights.gamma = 0.0;
        c.loss.use_text = false;
        c.loss.use_cyclic = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.basenet().validate()?;
        self.loss.weights.validate()?;
        self.redaction.validate_for(self.data.height, self.data.width)?;
        if self.crm.enabled {
            self.crm_config().validate()?;
        }
        if self.sa.enabled {
            self.sa.config.validate()?;
            self.sa.config.check_size(self.data.height, self.data.width)?;
            if self.task == TaskSelection::Multitask {
                return Err(Error::Config("sa supports single-task runs only".into()));
            }
        }
        if (self.loss.use_text || self.loss.use_cyclic) && !(self.crm.enabled || self.sa.enabled) {
            return Err(Error::Config("text and cyclic losses need a regeneration module".into()));
        }
        if self.train.batch_size == 0 || self.train.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.train.lr)));
        }
        if self.data.train == 0 {
            return Err(Error::Config("empty training split".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

fn write_redaction(out: &mut String, prefix: &str, spec: &RedactionSpec) {
    let _ = writeln!(out, "{prefix}.domain = {}", spec.domain);
    let _ = writeln!(out, "{prefix}.variant = {}", spec.variant);
    if let Some(t) = spec.drop_prob {
        let _ = writeln!(out, "{prefix}.t = {t}");
    }
    if let Some(b) = spec.block {
        let _ = writeln!(out, "{prefix}.b = {b}");
    }
    if let Some((lo, hi)) = spec.band {
        let _ = writeln!(out, "{prefix}.band_lo = {lo}");
        let _ = writeln!(out, "{prefix}.band_hi = {hi}");
    }
}

impl std::fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "task = {}", self.task);
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "precision = {}", self.precision);
        let _ = writeln!(w, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(w);
        let d = &self.data;
        let _ = writeln!(w, "data.height = {}", d.height);
        let _ = writeln!(w, "data.width = {}", d.width);
        let _ = writeln!(w, "data.num_shapes = {}", d.num_shapes);
        let _ = writeln!(w, "data.shape_classes = {}", d.shape_classes);
        let _ = writeln!(w, "data.seed = {}", d.seed);
        let _ = writeln!(w, "data.train = {}", d.train);
        let _ = writeln!(w, "data.val = {}", d.val);
        let _ = writeln!(w);
        let _ = writeln!(w, "base.width = {}", self.base_width);
        let _ = writeln!(w, "base.levels = {}", self.base_levels);
        let _ = writeln!(w);
        write_redaction(w, "redaction", &self.redaction);
        let _ = writeln!(w);
        let c = &self.crm;
        let _ = writeln!(w, "crm.enabled = {}", c.enabled);
        let _ = writeln!(w, "crm.mode = {}", c.mode);
        let _ = writeln!(w, "crm.combine = {}", c.combine);
        let _ = writeln!(w, "crm.width = {}", c.width);
        let _ = writeln!(w, "crm.depth = {}", c.depth);
        let _ = writeln!(w, "crm.steps = {}", c.steps);
        let _ = writeln!(w);
        let l = &self.loss;
        let _ = writeln!(w, "loss.gamma = {}", l.weights.gamma);
        let _ = writeln!(w, "loss.gamma1 = {}", l.weights.gamma1);
        let _ = writeln!(w, "loss.gamma2 = {}", l.weights.gamma2);
        let _ = writeln!(w, "loss.gamma_text = {}", l.weights.gamma_text);
        let _ = writeln!(w, "loss.gamma_cyc = {}", l.weights.gamma_cyc);
        let _ = writeln!(w, "loss.use_text = {}", l.use_text);
        let _ = writeln!(w, "loss.use_cyclic = {}", l.use_cyclic);
        let _ = writeln!(w, "loss.cyclic_detach = {}", l.cyclic_detach);
        let _ = writeln!(w);
        let sa = &self.sa;
        let _ = writeln!(w, "sa.enabled = {}", sa.enabled);
        let _ = writeln!(w, "sa.patch = {}", sa.config.patch);
        let _ = writeln!(w, "sa.dim = {}", sa.config.dim);
        let _ = writeln!(w, "sa.heads = {}", sa.config.heads);
        write_redaction(w, "sa.redaction", &sa.config.redaction);
        let _ = writeln!(w);
        let t = &self.train;
        let _ = writeln!(w, "train.lr = {}", t.lr);
        let _ = writeln!(w, "train.epochs = {}", t.epochs);
        let _ = writeln!(w, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(w, "train.eval_every = {}", t.eval_every);
        let _ = writeln!(w, "train.freeze_base = {}", t.freeze_base);
        let _ = writeln!(w);
        let e = &self.experiment;
        let _ = writeln!(w, "experiment.id = {}", e.id);
        let _ = writeln!(w, "experiment.seeds = {}", e.seeds);
        let _ = writeln!(w, "experiment.ablate_block = {}", e.ablate_block);
        let _ = writeln!(w, "experiment.ablate_band_lo = {}", e.ablate_band.0);
        let _ = writeln!(w, "experiment.ablate_band_hi = {}", e.ablate_band.1);
        let _ = writeln!(w, "experiment.band_width = {}", e.band_width);
        f.write_str(&s)
    }
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), (i + 1, v)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Self { map })
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|e| Error::Config(format!("line {line}: bad value for `{key}`: {e}"))),
        }
    }

    fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value for `{key}`: {e}"))),
        }
    }

    fn redaction(&mut self, prefix: &str, default: &RedactionSpec) -> Result<RedactionSpec> {
        let variant: RedactionVariant = self.take(&format!("{prefix}.variant"), default.variant)?;
        let domain = self.take(&format!("{prefix}.domain"), variant.domain())?;
        if domain != variant.domain() {
            return Err(Error::Config(format!(
                "{prefix}: variant {variant} does not belong to the {domain} domain"
            )));
        }
        let same = variant == default.variant;
        let mut spec = RedactionSpec::bare(variant);
        spec.drop_prob = self
            .take_opt(&format!("{prefix}.t"))?
            .or(if same { default.drop_prob } else { None });
        spec.block = self
            .take_opt(&format!("{prefix}.b"))?
            .or(if same { default.block } else { None });
        let lo: Option<f64> = self.take_opt(&format!("{prefix}.band_lo"))?;
        let hi: Option<f64> = self.take_opt(&format!("{prefix}.band_hi"))?;
        spec.band = match (lo, hi, if same { default.band } else { None }) {
            (Some(l), Some(h), _) => Some((l, h)),
            (None, None, d) => d,
            (l, h, d) => {
                let implied = match variant {
                    RedactionVariant::Lowpass => (Some(0.0), None),
                    RedactionVariant::Highpass => (None, Some(1.0)),
                    _ => (None, None),
                };
                let lo = l.or(implied.0).or(d.map(|b| b.0));
                let hi = h.or(implied.1).or(d.map(|b| b.1));
                match (lo, hi) {
                    (Some(l), Some(h)) => Some((l, h)),
                    _ => {
                        return Err(Error::Config(format!(
                            "{prefix}: {variant} needs both band_lo and band_hi"
                        )))
                    }
                }
            }
        };
        spec.validate().map_err(|e| Error::Config(format!("{prefix}: {e}")))?;
        Ok(spec)
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().next() {
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let d = TrainConfig::default();
        let mut f = Fields::parse(text)?;
        let data = SyntheticSceneSpec {
            height: f.take("data.height", d.data.height)?,
            width: f.take("data.width", d.data.width)?,
            num_shapes: f.take("data.num_shapes", d.data.num_shapes)?,
            shape_classes: f.take("data.shape_classes", d.data.shape_classes)?,
            seed: f.take("data.seed", d.data.seed)?,
            train: f.take("data.train", d.data.train)?,
            val: f.take("data.val", d.data.val)?,
        };
        let cfg = TrainConfig {
            task: f.take("task", d.task)?,
            seed: f.take("seed", d.seed)?,
            precision: f.take("precision", d.precision)?,
            out_dir: f.take("out_dir", d.out_dir.clone())?,
            data,
            base_width: f.take("base.width", d.base_width)?,
            base_levels: f.take("base.levels", d.base_levels)?,
            redaction: f.redaction("redaction", &d.redaction)?,
            crm: CrmSettings {
                enabled: f.take("crm.enabled", d.crm.enabled)?,
                mode: f.take("crm.mode", d.crm.mode)?,
                combine: f.take("crm.combine", d.crm.combine)?,
                width: f.take("crm.width", d.crm.width)?,
                depth: f.take("crm.depth", d.crm.depth)?,
                steps: f.take("crm.steps", d.crm.steps)?,
            },
            loss: LossSettings {
                weights: LossWeights {
                    gamma: f.take("loss.gamma", d.loss.weights.gamma)?,
                    gamma1: f.take("loss.gamma1", d.loss.weights.gamma1)?,
                    gamma2: f.take("loss.gamma2", d.loss.weights.gamma2)?,
                    gamma_text: f.take("loss.gamma_text", d.loss.weights.gamma_text)?,
                    gamma_cyc: f.take("loss.gamma_cyc", d.loss.weights.gamma_cyc)?,
                },
                use_text: f.take("loss.use_text", d.loss.use_text)?,
                use_cyclic: f.take("loss.use_cyclic", d.loss.use_cyclic)?,
                cyclic_detach: f.take("loss.cyclic_detach", d.loss.cyclic_detach)?,
            },
            sa: SaSettings {
                enabled: f.take("sa.enabled", d.sa.enabled)?,
                config: SaConfig {
                    patch: f.take("sa.patch", d.sa.config.patch)?,
                    dim: f.take("sa.dim", d.sa.config.dim)?,
                    heads: f.take("sa.heads", d.sa.config.heads)?,
                    redaction: f.redaction("sa.redaction", &d.sa.config.redaction)?,
                },
            },
            train: OptimSettings {
                lr: f.take("train.lr", d.train.lr)?,
                epochs: f.take("train.epochs", d.train.epochs)?,
                batch_size: f.take("train.batch_size", d.train.batch_size)?,
                eval_every: f.take("train.eval_every", d.train.eval_every)?,
                freeze_base: f.take("train.freeze_base", d.train.freeze_base)?,
            },
            experiment: ExperimentSettings {
                id: f.take("experiment.id", d.experiment.id.clone())?,
                seeds: f.take("experiment.seeds", d.experiment.seeds)?,
                ablate_block: f.take("experiment.ablate_block", d.experiment.ablate_block)?,
                ablate_band: (
                    f.take("experiment.ablate_band_lo", d.experiment.ablate_band.0)?,
                    f.take("experiment.ablate_band_hi", d.experiment.ablate_band.1)?,
                ),
                band_width: f.take("experiment.band_width", d.experiment.band_width)?,
            },
        };
        f.finish()?;
        Ok(cfg)
    }
}
