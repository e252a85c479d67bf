//! Adam with cosine learning-rate decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    cfg: AdamConfig,
    slots: BTreeMap<String, Slot>,
    step: usize,
}

impl Adam {
    pub fn new<'a>(vars: impl IntoIterator<Item = (&'a String, &'a Var)>, cfg: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(k, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok((
                    k.clone(),
                    Slot {
                        var: var.clone(),
                        m,
                        v,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update with learning rate `lr`. Variables without a gradient are skipped.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.m = ((&slot.m * b1)? + (g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let mhat = (&slot.m / c1)?;
            let vhat = (&slot.v / c2)?;
            let update = (mhat / (vhat.sqrt()? + self.cfg.eps)?)?;
            slot.var.set(&(slot.var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, s) in &self.slots {
            out.insert(format!("adam.m.{k}"), s.m.clone());
            out.insert(format!("adam.v.{k}"), s.v.clone());
        }
        out.insert(
            "adam.step".to_string(),
            Tensor::new(&[self.step as f64], &candle_core::Device::Cpu).expect("cpu tensor"),
        );
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing = |k: &str| Error::Checkpoint(format!("optimizer state missing `{k}`"));
        for (k, s) in self.slots.iter_mut() {
            let mk = format!("adam.m.{k}");
            let vk = format!("adam.v.{k}");
            s.m = state.get(&mk).ok_or_else(|| missing(&mk))?.to_dtype(s.var.dtype())?;
            s.v = state.get(&vk).ok_or_else(|| missing(&vk))?.to_dtype(s.var.dtype())?;
        }
        let step = state.get("adam.step").ok_or_else(|| missing("adam.step"))?;
        self.step = step.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0] as usize;
        Ok(())
    }
}
