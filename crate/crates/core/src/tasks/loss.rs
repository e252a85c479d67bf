//! Supervised task losses: cross-entropy, L1 depth, cosine normals.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::log_softmax_channels;
use crate::tensor::{DenseCondition, Task};

use super::basenet::{Prediction, Predictions};
use super::{GroundTruth, TruthBatch};

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Masked mean of a per-pixel loss over the task's valid pixels.
pub fn base_loss_tensor(pred: &Prediction, truth: &TruthBatch) -> Result<Tensor> {
    let mask = truth.mask(pred.task);
    let count = scalar(&mask.sum_all()?)?;
    if count == 0.0 {
        return Err(Error::UndefinedLoss(format!(
            "no valid pixels for {} loss",
            pred.task
        )));
    }
    let per_pixel = match pred.task {
        Task::Segmentation => (log_softmax_channels(&pred.raw)? * &truth.seg)?
            .sum_keepdim(1)?
            .neg()?,
        Task::Depth => (&pred.cond - &truth.depth)?.abs()?,
        Task::Normals => (1.0 - (&pred.cond * &truth.normals)?.sum_keepdim(1)?)?,
    };
    Ok(((per_pixel * mask)?.sum_all()? / count)?)
}

/// Sum of the per-task losses.
pub fn total_base_loss(preds: &Predictions, truth: &TruthBatch) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for p in &preds.0 {
        let l = base_loss_tensor(p, truth)?;
        total = Some(match total {
            None => l,
            Some(t) => (t + l)?,
        });
    }
    total.ok_or_else(|| Error::UndefinedLoss("no task heads".into()))
}

/// Host-side loss for a single prediction.
pub fn base_loss(cond: &DenseCondition, gt: &GroundTruth, task: Task) -> Result<f64> {
    if cond.task() != task {
        return Err(Error::Dimension(format!(
            "{} prediction passed for {task} loss",
            cond.task()
        )));
    }
    let (h, w) = gt.dim();
    if (cond.height(), cond.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "prediction is {}×{}, ground truth {h}×{w}",
            cond.height(),
            cond.width()
        )));
    }
    let mask = gt.mask(task);
    let c = cond.data();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            n += 1;
            sum += match task {
                Task::Segmentation => -c[[gt.seg[[y, x]], y, x]].max(f64::MIN_POSITIVE).ln(),
                Task::Depth => (c[[0, y, x]] - gt.depth[[0, y, x]]).abs(),
                Task::Normals => {
                    let p = [c[[0, y, x]], c[[1, y, x]], c[[2, y, x]]];
                    let g = [gt.normals[[0, y, x]], gt.normals[[1, y, x]], gt.normals[[2, y, x]]];
                    let dot: f64 = (0..3).map(|i| p[i] * g[i]).sum();
                    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    1.0 - dot / (np * ng)
                }
            };
        }
    }
    if n == 0 {
        return Err(Error::UndefinedLoss(format!("no valid pixels for {task} loss")));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::{Array2, Array3};

    fn truth() -> GroundTruth {
        GroundTruth {
            seg: Array2::from_shape_vec((2, 2), vec![0, 1, 1, 0]).unwrap(),
            depth: Array3::from_shape_fn((1, 2, 2), |(_, y, x)| 1.0 + (y + x) as f64),
            normals: Array3::from_shape_fn((3, 2, 2), |(c, _, _)| if c == 2 { 1.0 } else { 0.0 }),
            valid: Array2::from_elem((2, 2), true),
            normal_valid: Array2::from_elem((2, 2), true),
        }
    }

    #[test]
    fn perfect_predictions() {
        let gt = truth();
        let onehot = Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (gt.seg[[y, x]] == c) as u8 as f64);
        let seg = DenseCondition::new(Task::Segmentation, onehot);
        assert_eq!(base_loss(&seg, &gt, Task::Segmentation).unwrap(), 0.0);
        let depth = DenseCondition::new(Task::Depth, gt.depth.clone());
        assert_eq!(base_loss(&depth, &gt, Task::Depth).unwrap(), 0.0);
        let normals = DenseCondition::new(Task::Normals, gt.normals.clone());
        assert_eq!(base_loss(&normals, &gt, Task::Normals).unwrap(), 0.0);
        let flipped = DenseCondition::new(Task::Normals, gt.normals.mapv(|v| -v));
        assert_eq!(base_loss(&flipped, &gt, Task::Normals).unwrap(), 2.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut gt = truth();
        gt.valid.fill(false);
        let depth = DenseCondition::new(Task::Depth, gt.depth.clone());
        assert!(matches!(
            base_loss(&depth, &gt, Task::Depth),
            Err(Error::UndefinedLoss(_))
        ));
        let tb = TruthBatch::from_truths([&gt], 2, DType::F64, &Device::Cpu).unwrap();
        let pred = Prediction::from_raw(Task::Depth, tb.depth.log().unwrap()).unwrap();
        assert!(base_loss_tensor(&pred, &tb).is_err());
    }

    #[test]
    fn tensor_and_host_losses_agree() {
        let gt = truth();
        let tb = TruthBatch::from_truths([&gt], 2, DType::F64, &Device::Cpu).unwrap();
        let raw = Tensor::new(&[[[[0.3f64, -1.0], [2.0, 0.1]], [[-0.2, 0.5], [0.0, 1.5]]]], &Device::Cpu).unwrap();
        let pred = Prediction::from_raw(Task::Segmentation, raw.clone()).unwrap();
        let t = scalar(&base_loss_tensor(&pred, &tb).unwrap()).unwrap();
        let cond = DenseCondition::from_tensor(Task::Segmentation, &pred.cond).unwrap();
        let h = base_loss(&cond, &gt, Task::Segmentation).unwrap();
        assert!((t - h).abs() < 1e-12);

        let normals = Prediction::from_raw(Task::Normals, Tensor::new(&[[[[1.0f64, 0.0], [2.0, -1.0]], [[0.0, 1.0], [1.0, 0.0]], [[1.0, 1.0], [0.5, 0.2]]]], &Device::Cpu).unwrap()).unwrap();
        let t = scalar(&base_loss_tensor(&normals, &tb).unwrap()).unwrap();
        let cond = DenseCondition::from_tensor(Task::Normals, &normals.cond).unwrap();
        let h = base_loss(&cond, &gt, Task::Normals).unwrap();
        assert!((t - h).abs() < 1e-12);
    }
}
