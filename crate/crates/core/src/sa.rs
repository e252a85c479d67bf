//! Shared attention: one multi-head attention block used by a training-time
//! regeneration pass and an inference-time prediction enhancement pass.
//!
//! Regeneration: redacted-image queries attend to prediction keys/values and
//! decode to an image. Enhancement: prediction queries attend to image
//! keys/values and decode to a residual added to the prediction's logits (or
//! log-depth, or unnormalized normals), so the output passes through the same
//! head transform as the base network.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Init, Linear, Scope};
use crate::redaction::{redact, RedactionDomain, RedactionSpec};
use crate::rng::make_rng;
use crate::tasks::basenet::{head_inverse, Prediction};
use crate::tensor::{DenseCondition, ImageTensor, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct SaConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Spectral redaction applied before the regeneration pass.
    pub redaction: RedactionSpec,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 64,
            heads: 4,
            redaction: RedactionSpec::bandstop(0.3, 0.6),
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("sa patch, dim and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "sa dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.redaction.domain != RedactionDomain::Spectral {
            return Err(Error::Config("sa redaction must be spectral".into()));
        }
        self.redaction.validate()
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "{h}×{w} input is not divisible by patch size {}",
                self.patch
            )));
        }
        Ok(())
    }

    /// Multiply-accumulates of one enhancement pass on an `h×w` input with `n` prediction channels.
    pub fn macs(&self, h: usize, w: usize, n: usize) -> usize {
        let t = (h / self.patch) * (w / self.patch);
        let p2 = self.patch * self.patch;
        let d = self.dim;
        // q from the prediction, k and v from the image
        let embed = t * n * p2 * d + 2 * t * 3 * p2 * d;
        let projections = 4 * t * d * d;
        let attention = 2 * t * t * d;
        let decode = t * d * n * p2;
        embed + projections + attention + decode
    }
}

/// `B×C×H×W` → `B×T×(C·p·p)` with tokens in row-major grid order.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}×{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(x.reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let b = tokens.dim(0)?;
    let (gh, gw) = (h / p, w / p);
    Ok(tokens
        .reshape((b, gh, gw, c, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &mut Scope<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(&mut scope.sub("wq"), dim, dim, true)?,
            wk: Linear::new(&mut scope.sub("wk"), dim, dim, true)?,
            wv: Linear::new(&mut scope.sub("wv"), dim, dim, true)?,
            wo: Linear::new(&mut scope.sub("wo"), dim, dim, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights `B×heads×Tq×Tk`; every row sums to one.
    pub fn weights(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let qh = self.split(&self.wq.forward(q)?)?;
        let kh = self.split(&self.wk.forward(k)?)?;
        let dh = (qh.dim(3)? as f64).sqrt();
        softmax_last(&(qh.matmul(&kh.t()?.contiguous()?)? / dh)?)
    }

    /// Attended output `B×Tq×d` and the weights.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let attn = self.weights(q, k)?;
        let vh = self.split(&self.wv.forward(v)?)?;
        let (b, _, tq, _) = attn.dims4()?;
        let mixed = attn.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((b, tq, ()))?;
        Ok((self.wo.forward(&mixed)?, attn))
    }
}

/// Token embedders, shared attention and both decoders.
#[derive(Debug, Clone)]
pub struct SaModule {
    cfg: SaConfig,
    task: Task,
    channels: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    q_regen: Linear,
    k_regen: Linear,
    v_regen: Linear,
    mha: MultiHeadAttention,
    decode_regen: Linear,
    decode_enhance: Linear,
}

impl SaModule {
    pub fn new(scope: &mut Scope<'_>, cfg: SaConfig, task: Task, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let n = task.channels(classes);
        let p2 = cfg.patch * cfg.patch;
        let d = cfg.dim;
        let mut emb = scope.sub("embed");
        let q = Linear::new(&mut emb.sub("q"), n * p2, d, true)?;
        let k = Linear::new(&mut emb.sub("k"), 3 * p2, d, true)?;
        let v = Linear::new(&mut emb.sub("v"), 3 * p2, d, true)?;
        let q_regen = Linear::new(&mut emb.sub("q_regen"), 3 * p2, d, true)?;
        let k_regen = Linear::new(&mut emb.sub("k_regen"), n * p2, d, true)?;
        let v_regen = Linear::new(&mut emb.sub("v_regen"), n * p2, d, true)?;
        drop(emb);
        let mha = MultiHeadAttention::new(&mut scope.sub("mha"), d, cfg.heads)?;
        let mut dec = scope.sub("decoder");
        let decode_regen = Linear::new(&mut dec.sub("regen"), d, 3 * p2, true)?;
        let decode_enhance = {
            let mut s = dec.sub("enhance");
            // a small residual at initialization keeps the base predictions in charge early on
            let weight = s.var("weight", &[n * p2, d], Init::FanIn { fan_in: d, gain: 0.1 })?;
            let bias = s.var("bias", &[n * p2], Init::Zeros)?;
            Linear { weight, bias: Some(bias) }
        };
        Ok(Self {
            cfg,
            task,
            channels: n,
            q,
            k,
            v,
            q_regen,
            k_regen,
            v_regen,
            mha,
            decode_regen,
            decode_enhance,
        })
    }

    pub fn config(&self) -> &SaConfig {
        &self.cfg
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn mha(&self) -> &MultiHeadAttention {
        &self.mha
    }

    fn tokens(&self, x: &Tensor, proj: &Linear) -> Result<Tensor> {
        proj.forward(&patchify(x, self.cfg.patch)?)
    }

    fn check(&self, img: &Tensor, cond: &Tensor) -> Result<(usize, usize)> {
        let (_, _, h, w) = img.dims4()?;
        self.cfg.check_size(h, w)?;
        if cond.dim(1)? != self.channels {
            return Err(Error::Dimension(format!(
                "sa expects {} prediction channels, got {}",
                self.channels,
                cond.dim(1)?
            )));
        }
        Ok((h, w))
    }

    /// Regenerates `B×3×H×W` from an already redacted image and predictions.
    pub fn regenerate(&self, img_r: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, w) = self.check(img_r, cond)?;
        let q = self.tokens(img_r, &self.q_regen)?;
        let k = self.tokens(cond, &self.k_regen)?;
        let v = self.tokens(cond, &self.v_regen)?;
        let (mixed, attn) = self.mha.forward(&q, &k, &v)?;
        let out = unpatchify(&self.decode_regen.forward(&mixed)?, 3, h, w, self.cfg.patch)?;
        Ok((out, attn))
    }

    /// Enhanced prediction and attention weights.
    pub fn enhance(&self, img: &Tensor, pred: &Prediction) -> Result<(Prediction, Tensor)> {
        if pred.task != self.task {
            return Err(Error::Dimension(format!("sa built for {}, got {}", self.task, pred.task)));
        }
        let (h, w) = self.check(img, &pred.cond)?;
        let q = self.tokens(&pred.cond, &self.q)?;
        let k = self.tokens(img, &self.k)?;
        let v = self.tokens(img, &self.v)?;
        let (mixed, attn) = self.mha.forward(&q, &k, &v)?;
        let delta = unpatchify(&self.decode_enhance.forward(&mixed)?, self.channels, h, w, self.cfg.patch)?;
        Ok((Prediction::from_raw(self.task, (&pred.raw + delta)?)?, attn))
    }
}

fn device_of(sa: &SaModule) -> (DType, Device) {
    (sa.mha.wq.weight.dtype(), sa.mha.wq.weight.device().clone())
}

/// Redacts `img` with the configured spectral spec, then regenerates it.
pub fn sa_regeneration_pass(img: &ImageTensor, cond: &DenseCondition, sa: &SaModule) -> Result<ImageTensor> {
    let (dtype, device) = device_of(sa);
    // spectral redaction is deterministic; the rng is never drawn from
    let redacted = redact(img, &sa.cfg.redaction, &mut make_rng(sa.cfg.redaction.seed))?;
    let x = redacted.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let c = cond.to_tensor(dtype, &device)?.unsqueeze(0)?;
    ImageTensor::from_tensor(&sa.regenerate(&x, &c)?.0)
}

pub fn sa_enhancement_pass(img: &ImageTensor, cond: &DenseCondition, sa: &SaModule) -> Result<DenseCondition> {
    let (dtype, device) = device_of(sa);
    let x = img.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let c = cond.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let pred = Prediction {
        task: cond.task(),
        raw: head_inverse(cond.task(), &c)?,
        cond: c,
    };
    DenseCondition::from_tensor(cond.task(), &sa.enhance(&x, &pred)?.0.cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ndarray::Array3;

    fn module(store: &mut ParamStore, patch: usize, dim: usize, heads: usize) -> SaModule {
        let cfg = SaConfig { patch, dim, heads, ..Default::default() };
        SaModule::new(&mut store.root().sub("sa"), cfg, Task::Segmentation, 3).unwrap()
    }

    fn seg(h: usize, w: usize) -> DenseCondition {
        DenseCondition::new(
            Task::Segmentation,
            Array3::from_shape_fn((3, h, w), |(c, y, x)| if (y + 2 * x) % 3 == c { 0.8 } else { 0.1 }),
        )
    }

    fn img(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn((3, h, w), |(c, y, x)| ((c + y * 3 + x * 7) % 11) as f64 / 10.0)
    }

    #[test]
    fn patchify_roundtrip() {
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 8.0 * 4.0, &Device::Cpu).unwrap().reshape((2, 3, 8, 4)).unwrap();
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.dims(), &[2, 8, 12]);
        let back = unpatchify(&t, 3, 8, 4, 2).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f64>().unwrap(), x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        // first token is the top-left 2×2 block of channel 0, then channel 1, …
        let first = t.get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&first[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn shapes_and_renormalization() {
        let mut store = ParamStore::new(5, DType::F64, Device::Cpu);
        let sa = module(&mut store, 4, 16, 4);
        let out = sa_enhancement_pass(&img(8, 12), &seg(8, 12), &sa).unwrap();
        assert_eq!(out.dim(), (3, 8, 12));
        out.validate().unwrap();
        let regen = sa_regeneration_pass(&img(8, 12), &seg(8, 12), &sa).unwrap();
        assert_eq!(regen.dim(), (3, 8, 12));
        assert!(matches!(sa_enhancement_pass(&img(6, 12), &seg(6, 12), &sa), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut store = ParamStore::new(5, DType::F64, Device::Cpu);
        let mha = MultiHeadAttention::new(&mut store.root().sub("mha"), 4, 1).unwrap();
        let eye = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        for l in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            l.weight.set(&eye).unwrap();
        }
        let q = Tensor::new(&[[[0.3f64, -1.0, 2.0, 0.5]]], &Device::Cpu).unwrap();
        let k = Tensor::new(&[[[1.0f64, 1.0, -4.0, 0.0]]], &Device::Cpu).unwrap();
        let v = Tensor::new(&[[[7.0f64, 8.0, 9.0, 10.0]]], &Device::Cpu).unwrap();
        let (out, attn) = mha.forward(&q, &k, &v).unwrap();
        assert_eq!(attn.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0]);
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn macs_formula() {
        let cfg = SaConfig { patch: 4, dim: 32, heads: 4, ..Default::default() };
        // T = 16 tokens, N = 3 channels, p² = 16
        let expected = 16 * 48 * 32 + 2 * 16 * 48 * 32 + 4 * 16 * 32 * 32 + 2 * 16 * 16 * 32 + 16 * 32 * 48;
        assert_eq!(cfg.macs(16, 16, 3), expected);
    }
}
