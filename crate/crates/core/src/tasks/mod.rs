//! Base networks, task losses, metrics and the synthetic scene dataset.

pub mod basenet;
pub mod loss;
pub mod metrics;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Task;

pub use basenet::{BaseNet, BaseNetConfig, Prediction, Predictions};
pub use loss::{base_loss, base_loss_tensor};
pub use metrics::{compute_metrics, MetricAccumulator, MetricSet};
pub use synth::{
    generate_synthetic_dataset, load_dataset, render_scene, save_dataset, Dataset, Scene,
    SyntheticSceneSpec,
};

/// Which heads a base network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskSelection {
    Single(Task),
    Multitask,
}

impl TaskSelection {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TaskSelection::Single(t) => vec![t],
            TaskSelection::Multitask => Task::ALL.to_vec(),
        }
    }
}

impl fmt::Display for TaskSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSelection::Single(t) => t.fmt(f),
            TaskSelection::Multitask => f.write_str("multitask"),
        }
    }
}

impl FromStr for TaskSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multitask" => Ok(TaskSelection::Multitask),
            other => Ok(TaskSelection::Single(other.parse()?)),
        }
    }
}

/// Per-pixel targets for all three tasks.
///
/// `valid` gates segmentation and depth; `normal_valid` additionally drops the
/// silhouette band where analytic normals are discontinuous.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub seg: Array2<usize>,
    pub depth: Array3<f64>,
    pub normals: Array3<f64>,
    pub valid: Array2<bool>,
    pub normal_valid: Array2<bool>,
}

impl GroundTruth {
    pub fn dim(&self) -> (usize, usize) {
        self.seg.dim()
    }

    pub fn mask(&self, task: Task) -> Array2<bool> {
        match task {
            Task::Normals => ndarray::Zip::from(&self.valid)
                .and(&self.normal_valid)
                .map_collect(|&a, &b| a && b),
            _ => self.valid.clone(),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let (h, w) = self.seg.dim();
        if self.depth.dim() != (1, h, w)
            || self.normals.dim() != (3, h, w)
            || self.valid.dim() != (h, w)
            || self.normal_valid.dim() != (h, w)
        {
            return Err(Error::Dimension("ground-truth maps disagree in shape".into()));
        }
        if let Some(l) = self.seg.iter().find(|&&l| l >= classes) {
            return Err(Error::Dimension(format!("label {l} out of range for {classes} classes")));
        }
        for y in 0..h {
            for x in 0..w {
                if !self.valid[[y, x]] {
                    continue;
                }
                if self.depth[[0, y, x]] <= 0.0 {
                    return Err(Error::Dimension(format!("non-positive depth at ({y}, {x})")));
                }
                let n = (0..3).map(|c| self.normals[[c, y, x]].powi(2)).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-4 {
                    return Err(Error::Dimension(format!("normal at ({y}, {x}) has norm {n}")));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth for a batch, as `B×·×H×W` tensors.
#[derive(Debug, Clone)]
pub struct TruthBatch {
    /// One-hot labels, `B×N×H×W`.
    pub seg: Tensor,
    pub depth: Tensor,
    pub normals: Tensor,
    /// `B×1×H×W` 0/1 masks.
    pub valid: Tensor,
    pub normal_valid: Tensor,
}

impl TruthBatch {
    pub fn from_truths<'a>(
        truths: impl IntoIterator<Item = &'a GroundTruth>,
        classes: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let truths: Vec<&GroundTruth> = truths.into_iter().collect();
        let onehot: Vec<Array3<f64>> = truths
            .iter()
            .map(|t| {
                let (h, w) = t.dim();
                Array3::from_shape_fn((classes, h, w), |(c, y, x)| {
                    if t.seg[[y, x]] == c {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let mask = |f: &dyn Fn(&GroundTruth) -> Array3<f64>| -> Vec<Array3<f64>> {
            truths.iter().map(|t| f(t)).collect()
        };
        let to3 = |a: &Array2<bool>| a.mapv(|b| if b { 1.0 } else { 0.0 }).insert_axis(ndarray::Axis(0));
        let valid = mask(&|t| to3(&t.valid));
        let normal_valid = mask(&|t| to3(&t.mask(Task::Normals)));
        let stack = |v: Vec<Array3<f64>>| crate::tensor::stack_arrays(v.iter(), dtype, device);
        Ok(Self {
            seg: stack(onehot)?,
            depth: stack(truths.iter().map(|t| t.depth.clone()).collect())?,
            normals: stack(truths.iter().map(|t| t.normals.clone()).collect())?,
            valid: stack(valid)?,
            normal_valid: stack(normal_valid)?,
        })
    }

    pub fn index_select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            seg: self.seg.index_select(idx, 0)?,
            depth: self.depth.index_select(idx, 0)?,
            normals: self.normals.index_select(idx, 0)?,
            valid: self.valid.index_select(idx, 0)?,
            normal_valid: self.normal_valid.index_select(idx, 0)?,
        })
    }

    pub fn mask(&self, task: Task) -> &Tensor {
        match task {
            Task::Normals => &self.normal_valid,
            _ => &self.valid,
        }
    }
}
