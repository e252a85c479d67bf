//! Conditional regeneration: rebuild an image from its redacted version and
//! the base network's dense predictions.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Mode, Scope};
use crate::redaction::{RedactionSpec, RedactionVariant};
use crate::tensor::{tensor_to_array, DenseCondition, ImageTensor};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrmMode {
    /// Stacked blocks applied once.
    Forward,
    /// One shared block applied repeatedly as a residual update.
    Recursive,
}

string_enum!(CrmMode { Forward => "forward", Recursive => "recursive" });

impl CrmMode {
    /// Recursive for random pixel dropout, forward for structured and spectral redaction.
    pub fn for_redaction(spec: &RedactionSpec) -> Self {
        match spec.variant {
            RedactionVariant::Random => CrmMode::Recursive,
            _ => CrmMode::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combine {
    Multiply,
    Concat,
}

string_enum!(Combine { Multiply => "multiply", Concat => "concat" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrmConfig {
    pub mode: CrmMode,
    pub combine: Combine,
    pub width: usize,
    /// Stacked blocks in forward mode.
    pub depth: usize,
    /// Recursion count in recursive mode.
    pub steps: usize,
    pub condition_channels: usize,
}

impl CrmConfig {
    pub fn new(mode: CrmMode, combine: Combine, condition_channels: usize) -> Self {
        Self {
            mode,
            combine,
            width: 64,
            depth: 4,
            steps: 4,
            condition_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.condition_channels == 0 {
            return Err(Error::Config("crm width and condition channels must be positive".into()));
        }
        if self.mode == CrmMode::Forward && self.depth == 0 {
            return Err(Error::Config("forward crm needs depth ≥ 1".into()));
        }
        Ok(())
    }

    /// Channels produced by [`combine_tensors`].
    pub fn combined_channels(&self) -> usize {
        match self.combine {
            Combine::Multiply => self.condition_channels,
            Combine::Concat => 3 + self.condition_channels,
        }
    }
}

/// `B×3×H×W` image with `B×N×H×W` condition.
pub fn combine_tensors(img_r: &Tensor, cond: &Tensor, combine: Combine) -> Result<Tensor> {
    let (ib, ic, ih, iw) = img_r.dims4()?;
    let (cb, _, ch, cw) = cond.dims4()?;
    if (ib, ih, iw) != (cb, ch, cw) || ic != 3 {
        return Err(Error::Dimension(format!(
            "cannot combine image {:?} with condition {:?}",
            img_r.dims(),
            cond.dims()
        )));
    }
    Ok(match combine {
        Combine::Multiply => cond.broadcast_mul(&img_r.mean_keepdim(1)?)?,
        Combine::Concat => Tensor::cat(&[img_r, cond], 1)?,
    })
}

/// Single-image combine on host arrays.
pub fn combine_inputs(img_r: &ImageTensor, cond: &DenseCondition, combine: Combine) -> Result<Array3<f64>> {
    let x = img_r.to_tensor(DType::F64, &candle_core::Device::Cpu)?.unsqueeze(0)?;
    let c = cond.to_tensor(DType::F64, &candle_core::Device::Cpu)?.unsqueeze(0)?;
    tensor_to_array(&combine_tensors(&x, &c, combine)?)
}

/// Trainable regeneration module.
#[derive(Debug, Clone)]
pub struct Crm {
    cfg: CrmConfig,
    blocks: Vec<ConvBnRelu>,
    head: Conv2d,
}

impl Crm {
    /// Parameters are `block<i>.*` and `head.*` under `scope`.
    pub fn new(scope: &mut Scope<'_>, cfg: CrmConfig) -> Result<Self> {
        cfg.validate()?;
        let cin = cfg.combined_channels();
        let blocks = match cfg.mode {
            CrmMode::Forward => (0..cfg.depth)
                .map(|i| {
                    let input = if i == 0 { cin } else { cfg.width };
                    ConvBnRelu::new(&mut scope.sub(&format!("block{i}")), input, cfg.width, 1)
                })
                .collect::<Result<Vec<_>>>()?,
            CrmMode::Recursive => vec![ConvBnRelu::new(&mut scope.sub("block0"), 3 + cin, cfg.width, 1)?],
        };
        let gain = match cfg.mode {
            CrmMode::Forward => 1.0,
            CrmMode::Recursive => 0.1,
        };
        let head = Conv2d::new(&mut scope.sub("head"), cfg.width, 3, 1, 1, 0, true, gain)?;
        Ok(Self { cfg, blocks, head })
    }

    pub fn config(&self) -> &CrmConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ConvBnRelu] {
        &self.blocks
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    fn check(&self, img_r: &Tensor, cond: &Tensor) -> Result<()> {
        let n = cond.dim(1)?;
        if n != self.cfg.condition_channels {
            return Err(Error::Config(format!(
                "crm expects {} condition channels, got {n}",
                self.cfg.condition_channels
            )));
        }
        if img_r.dims4()?.1 != 3 {
            return Err(Error::Dimension("crm input image must have 3 channels".into()));
        }
        Ok(())
    }

    /// Runs the configured mode.
    pub fn forward(&self, img_r: &Tensor, cond: &Tensor, mode: Mode) -> Result<Tensor> {
        match self.cfg.mode {
            CrmMode::Forward => self.forward_stacked(img_r, cond, mode),
            CrmMode::Recursive => Ok(self
                .recursive_trace(img_r, cond, mode)?
                .pop()
                .expect("trace holds x0")),
        }
    }

    fn forward_stacked(&self, img_r: &Tensor, cond: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check(img_r, cond)?;
        let mut h = combine_tensors(img_r, cond, self.cfg.combine)?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        self.head.forward(&h)
    }

    /// Every iterate `x0 = img_r, x1, …, xT`.
    pub fn recursive_trace(&self, img_r: &Tensor, cond: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.check(img_r, cond)?;
        let combined = combine_tensors(img_r, cond, self.cfg.combine)?;
        let block = &self.blocks[0];
        let mut xs = vec![img_r.clone()];
        for _ in 0..self.cfg.steps {
            let x = xs.last().expect("nonempty");
            let h = block.forward(&Tensor::cat(&[x, &combined], 1)?, mode)?;
            let next = (x + self.head.forward(&h)?)?;
            xs.push(next);
        }
        Ok(xs)
    }
}

fn host_run(img_r: &ImageTensor, cond: &DenseCondition, crm: &Crm, mode: Mode) -> Result<ImageTensor> {
    let dtype = crm.head.weight.dtype();
    let device = crm.head.weight.device().clone();
    let x = img_r.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let c = cond.to_tensor(dtype, &device)?.unsqueeze(0)?;
    ImageTensor::from_tensor(&crm.forward(&x, &c, mode)?)
}

/// Forward-mode regeneration of a single image.
pub fn crm_forward(img_r: &ImageTensor, cond: &DenseCondition, crm: &Crm, mode: Mode) -> Result<ImageTensor> {
    if crm.cfg.mode != CrmMode::Forward {
        return Err(Error::Config("crm_forward needs a forward-mode crm".into()));
    }
    host_run(img_r, cond, crm, mode)
}

/// Recursive-mode regeneration of a single image.
pub fn crm_recursive(img_r: &ImageTensor, cond: &DenseCondition, crm: &Crm, mode: Mode) -> Result<ImageTensor> {
    if crm.cfg.mode != CrmMode::Recursive {
        return Err(Error::Config("crm_recursive needs a recursive-mode crm".into()));
    }
    host_run(img_r, cond, crm, mode)
}
