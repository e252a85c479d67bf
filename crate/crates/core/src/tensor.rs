//! Host-side tensor types shared by every module.
//!
//! Everything is channel-first (`C×H×W`). Images live in `[0, 1]`; dense
//! predictions carry the task they belong to so that their invariants can be
//! checked.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense prediction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Depth,
    Normals,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Segmentation, Task::Depth, Task::Normals];

    /// Channel count of a prediction for this task.
    pub fn channels(self, classes: usize) -> usize {
        match self {
            Task::Segmentation => classes,
            Task::Depth => 1,
            Task::Normals => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Depth => "depth",
            Task::Normals => "normals",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" | "seg" => Ok(Task::Segmentation),
            "depth" => Ok(Task::Depth),
            "normals" | "normal" => Ok(Task::Normals),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// An RGB (or generally `C`-channel) image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn(shape, f),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// Whether every value lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        array_to_tensor(&self.data, dtype, device)
    }

    /// Builds an image from a `C×H×W` tensor (a leading batch axis of 1 is accepted).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(tensor_to_array(t)?)
    }
}

/// A task prediction `N×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCondition {
    task: Task,
    data: Array3<f64>,
}

impl DenseCondition {
    /// Wraps a prediction without checking the task invariants.
    pub fn new(task: Task, data: Array3<f64>) -> Self {
        Self { task, data }
    }

    /// Wraps a prediction and checks the task invariants.
    pub fn checked(task: Task, data: Array3<f64>) -> Result<Self> {
        let cond = Self { task, data };
        cond.validate()?;
        Ok(cond)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        array_to_tensor(&self.data, dtype, device)
    }

    pub fn from_tensor(task: Task, t: &Tensor) -> Result<Self> {
        Ok(Self::new(task, tensor_to_array(t)?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("prediction contains non-finite values".into()));
        }
        let (n, h, w) = self.data.dim();
        match self.task {
            Task::Segmentation => {
                if n < 2 {
                    return Err(Error::Dimension(format!(
                        "segmentation needs at least 2 channels, got {n}"
                    )));
                }
                if self.data.iter().any(|&v| v < 0.0) {
                    return Err(Error::Dimension("negative class probability".into()));
                }
                let sums = self.data.sum_axis(Axis(0));
                if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > 1e-5) {
                    return Err(Error::Dimension(format!(
                        "class probabilities sum to {s}, expected 1"
                    )));
                }
            }
            Task::Depth => {
                if n != 1 {
                    return Err(Error::Dimension(format!("depth needs 1 channel, got {n}")));
                }
                if self.data.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Dimension("depth must be positive".into()));
                }
            }
            Task::Normals => {
                if n != 3 {
                    return Err(Error::Dimension(format!("normals need 3 channels, got {n}")));
                }
                for y in 0..h {
                    for x in 0..w {
                        let norm = (0..3)
                            .map(|c| self.data[[c, y, x]].powi(2))
                            .sum::<f64>()
                            .sqrt();
                        if (norm - 1.0).abs() > 1e-4 {
                            return Err(Error::Dimension(format!(
                                "normal at ({y}, {x}) has norm {norm}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn array_to_tensor(a: &Array3<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (c, h, w), device)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_to_array(t: &Tensor) -> Result<Array3<f64>> {
    let t = match t.rank() {
        3 => t.clone(),
        4 if t.dim(0)? == 1 => t.squeeze(0)?,
        r => {
            return Err(Error::Dimension(format!(
                "expected a C×H×W tensor, got rank {r}"
            )))
        }
    };
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Dimension(e.to_string()))
}

/// Stacks equally-shaped arrays into a `B×C×H×W` tensor.
pub fn stack_arrays<'a>(
    items: impl IntoIterator<Item = &'a Array3<f64>>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut count = 0;
    for a in items {
        match shape {
            None => shape = Some(a.dim()),
            Some(s) if s != a.dim() => {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} with {:?}",
                    s,
                    a.dim()
                )))
            }
            _ => {}
        }
        data.extend(a.iter().copied());
        count += 1;
    }
    let (c, h, w) = shape.ok_or_else(|| Error::Dimension("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (count, c, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `B×C×H×W` tensor into per-item arrays.
pub fn unstack_arrays(t: &Tensor) -> Result<Vec<Array3<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let per = c * h * w;
    (0..b)
        .map(|i| {
            Array3::from_shape_vec((c, h, w), flat[i * per..(i + 1) * per].to_vec())
                .map_err(|e| Error::Dimension(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_invariants() {
        let mut a = Array3::from_elem((2, 2, 2), 0.5);
        assert!(DenseCondition::checked(Task::Segmentation, a.clone()).is_ok());
        a[[0, 0, 0]] = 0.7;
        assert!(DenseCondition::checked(Task::Segmentation, a).is_err());
    }

    #[test]
    fn depth_and_normal_invariants() {
        assert!(DenseCondition::checked(Task::Depth, Array3::from_elem((1, 2, 2), 0.1)).is_ok());
        assert!(DenseCondition::checked(Task::Depth, Array3::zeros((1, 2, 2))).is_err());
        let mut n = Array3::zeros((3, 1, 2));
        n[[2, 0, 0]] = 1.0;
        n[[0, 0, 1]] = -1.0;
        assert!(DenseCondition::checked(Task::Normals, n.clone()).is_ok());
        n[[0, 0, 1]] = 0.5;
        assert!(DenseCondition::checked(Task::Normals, n).is_err());
    }

    #[test]
    fn non_finite_image_rejected() {
        let mut a = Array3::zeros((3, 1, 1));
        a[[1, 0, 0]] = f64::NAN;
        assert!(ImageTensor::new(a).is_err());
    }

    #[test]
    fn stack_roundtrip() {
        let a = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let b = a.mapv(|v| -v);
        let t = stack_arrays([&a, &b], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 3, 4]);
        let back = unstack_arrays(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
