//! Evaluation metrics accumulated over a split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseCondition, Task};

use super::GroundTruth;

/// Only the fields of evaluated tasks are populated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub miou: Option<f64>,
    pub a_err: Option<f64>,
    pub m_err_deg: Option<f64>,
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub delta1: Option<f64>,
}

impl MetricSet {
    /// `(task, metric, value)` triples in a fixed order.
    pub fn entries(&self) -> Vec<(Task, &'static str, f64)> {
        let fields = [
            (Task::Segmentation, "miou", self.miou),
            (Task::Depth, "a_err", self.a_err),
            (Task::Depth, "abs_rel", self.abs_rel),
            (Task::Depth, "sq_rel", self.sq_rel),
            (Task::Depth, "delta1", self.delta1),
            (Task::Normals, "m_err_deg", self.m_err_deg),
        ];
        fields
            .into_iter()
            .filter_map(|(t, k, v)| v.map(|v| (t, k, v)))
            .collect()
    }

    /// The headline number per task: mIoU, aErr, mErr.
    pub fn headline(&self, task: Task) -> Option<f64> {
        match task {
            Task::Segmentation => self.miou,
            Task::Depth => self.a_err,
            Task::Normals => self.m_err_deg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    classes: usize,
    inter: Vec<u64>,
    union: Vec<u64>,
    seg_seen: bool,
    depth_n: u64,
    abs_rel: f64,
    sq_rel: f64,
    delta1: u64,
    normal_n: u64,
    angle: f64,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            inter: vec![0; classes],
            union: vec![0; classes],
            seg_seen: false,
            depth_n: 0,
            abs_rel: 0.0,
            sq_rel: 0.0,
            delta1: 0,
            normal_n: 0,
            angle: 0.0,
        }
    }

    pub fn add(&mut self, cond: &DenseCondition, gt: &GroundTruth) -> Result<()> {
        let (h, w) = gt.dim();
        if (cond.height(), cond.width()) != (h, w) {
            return Err(Error::Dimension("prediction and ground truth differ in size".into()));
        }
        let mask = gt.mask(cond.task());
        let c = cond.data();
        match cond.task() {
            Task::Segmentation => {
                if cond.channels() != self.classes {
                    return Err(Error::Dimension(format!(
                        "{} class channels, accumulator expects {}",
                        cond.channels(),
                        self.classes
                    )));
                }
                self.seg_seen = true;
                for y in 0..h {
                    for x in 0..w {
                        if !mask[[y, x]] {
                            continue;
                        }
                        let pred = (0..self.classes)
                            .max_by(|&a, &b| c[[a, y, x]].total_cmp(&c[[b, y, x]]).then(b.cmp(&a)))
                            .expect("at least one class");
                        let truth = gt.seg[[y, x]];
                        if pred == truth {
                            self.inter[pred] += 1;
                            self.union[pred] += 1;
                        } else {
                            self.union[pred] += 1;
                            self.union[truth] += 1;
                        }
                    }
                }
            }
            Task::Depth => {
                for y in 0..h {
                    for x in 0..w {
                        if !mask[[y, x]] {
                            continue;
                        }
                        let (p, d) = (c[[0, y, x]], gt.depth[[0, y, x]]);
                        self.depth_n += 1;
                        self.abs_rel += (p - d).abs() / d;
                        self.sq_rel += (p - d).powi(2) / d;
                        if (p / d).max(d / p) < 1.25 {
                            self.delta1 += 1;
                        }
                    }
                }
            }
            Task::Normals => {
                for y in 0..h {
                    for x in 0..w {
                        if !mask[[y, x]] {
                            continue;
                        }
                        let p = [c[[0, y, x]], c[[1, y, x]], c[[2, y, x]]];
                        let g = [gt.normals[[0, y, x]], gt.normals[[1, y, x]], gt.normals[[2, y, x]]];
                        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot = (0..3).map(|i| p[i] * g[i]).sum::<f64>() / (np * ng);
                        self.normal_n += 1;
                        self.angle += dot.clamp(-1.0, 1.0).acos().to_degrees();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricSet {
        let mut m = MetricSet::default();
        if self.seg_seen {
            let ious: Vec<f64> = self
                .inter
                .iter()
                .zip(&self.union)
                .filter(|(_, &u)| u > 0)
                .map(|(&i, &u)| i as f64 / u as f64)
                .collect();
            if !ious.is_empty() {
                m.miou = Some(ious.iter().sum::<f64>() / ious.len() as f64);
            }
        }
        if self.depth_n > 0 {
            let n = self.depth_n as f64;
            m.abs_rel = Some(self.abs_rel / n);
            m.a_err = m.abs_rel;
            m.sq_rel = Some(self.sq_rel / n);
            m.delta1 = Some(self.delta1 as f64 / n);
        }
        if self.normal_n > 0 {
            m.m_err_deg = Some(self.angle / self.normal_n as f64);
        }
        m
    }
}

/// Metrics for one prediction.
pub fn compute_metrics(cond: &DenseCondition, gt: &GroundTruth, task: Task) -> Result<MetricSet> {
    if cond.task() != task {
        return Err(Error::Dimension(format!("{} prediction passed as {task}", cond.task())));
    }
    let classes = match task {
        Task::Segmentation => cond.channels(),
        _ => 2,
    };
    let mut acc = MetricAccumulator::new(classes);
    acc.add(cond, gt)?;
    Ok(acc.finish())
}
