//! Training objective: task loss plus weighted regeneration, text-feature and
//! cyclic terms.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{conv2d, Init, Mode, ParamStore};
use crate::tasks::BaseNet;
use crate::tensor::{DenseCondition, ImageTensor};

/// Seed of the frozen feature networks; fixed so that the loss is the same
/// function in every run.
pub const FROZEN_SEED: u64 = 0x5eed_f00d;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the regeneration loss in the total.
    pub gamma: f64,
    /// Perceptual share of the regeneration loss.
    pub gamma1: f64,
    /// Pixel MSE share of the regeneration loss.
    pub gamma2: f64,
    pub gamma_text: f64,
    pub gamma_cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma_text: 0.05,
            gamma_cyc: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gamma", self.gamma),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma_text", self.gamma_text),
            ("gamma_cyc", self.gamma_cyc),
        ];
        match all.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            Some((k, v)) => Err(Error::Config(format!("loss weight {k} = {v} must be finite and ≥ 0"))),
            None => Ok(()),
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn mse_loss(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// A convolution whose weights are plain tensors and never receive gradients.
#[derive(Debug, Clone)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl FrozenConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let scope = store.root();
        let weight = scope.constant(
            &format!("{name}.weight"),
            &[cout, cin, 3, 3],
            Init::FanIn { fan_in: cin * 9, gain: 2f64.sqrt() },
        )?;
        let bias = scope.constant(&format!("{name}.bias"), &[cout], Init::Normal(0.1))?;
        Ok(Self { weight, bias, stride })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::nn::relu(&conv2d(x, &self.weight, Some(&self.bias), self.stride, 1)?)?)
    }

    fn hash_into(&self, h: &mut Sha256) -> Result<()> {
        for t in [&self.weight, &self.bias] {
            for v in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(())
    }
}

fn hex(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen three-stage strided conv net with LPIPS-style unit-normalized taps.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    stages: Vec<FrozenConv>,
}

impl PerceptualExtractor {
    pub const CHANNELS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            stages.push(FrozenConv::new(&mut store, &format!("perceptual.stage{i}"), cin, c, 2)?);
            cin = c;
        }
        Ok(Self { stages })
    }

    /// Features at every tap, each unit-normalized over channels.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = ((x * 2.0)? - 1.0)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.forward(&h)?;
            let norm = (h.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
            taps.push(h.broadcast_div(&norm)?);
        }
        Ok(taps)
    }

    /// Batch-mean perceptual distance between `B×3×H×W` tensors.
    ///
    /// Each tap contributes the channel mean of its squared unit-feature
    /// difference, i.e. uniform per-channel weights `1/C`, which keeps the value
    /// on the scale of a calibrated LPIPS score (at most `4/C` per tap).
    pub fn distance(&self, gen: &Tensor, reference: &Tensor) -> Result<Tensor> {
        same_shape(gen, reference)?;
        let b = gen.dim(0)?;
        // one pass over the concatenated batch keeps the extractor cost single
        let taps = self.features(&Tensor::cat(&[gen, reference], 0)?)?;
        let mut total: Option<Tensor> = None;
        for t in taps {
            let d = (t.narrow(0, 0, b)? - t.narrow(0, b, b)?)?
                .sqr()?
                .mean_all()?;
            total = Some(match total {
                None => d,
                Some(acc) => (acc + d)?,
            });
        }
        Ok(total.expect("at least one stage"))
    }

    pub fn dtype(&self) -> DType {
        self.stages[0].weight.dtype()
    }

    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for s in &self.stages {
            s.hash_into(&mut h)?;
        }
        Ok(hex(h))
    }
}

pub fn perceptual_loss(gen: &ImageTensor, reference: &ImageTensor, ext: &PerceptualExtractor) -> Result<f64> {
    let g = gen.to_tensor(DType::F64, &Device::Cpu)?.unsqueeze(0)?;
    let r = reference.to_tensor(DType::F64, &Device::Cpu)?.unsqueeze(0)?;
    scalar(&ext.distance(&g.to_dtype(ext.dtype())?, &r.to_dtype(ext.dtype())?)?)
}

/// γ1·perceptual + γ2·MSE on batches.
pub fn regen_loss_tensor(gen: &Tensor, reference: &Tensor, w: &LossWeights, ext: &PerceptualExtractor) -> Result<Tensor> {
    let p = ext.distance(gen, reference)?;
    let m = mse(gen, reference)?;
    Ok(((p * w.gamma1)? + (m * w.gamma2)?)?)
}

pub fn regen_loss(gen: &ImageTensor, reference: &ImageTensor, w: &LossWeights, ext: &PerceptualExtractor) -> Result<f64> {
    Ok(w.gamma1 * perceptual_loss(gen, reference, ext)? + w.gamma2 * mse_loss(gen.data(), reference.data())?)
}

/// `l_base + γ·l_regen + γ_text·l_text + γ_cyc·l_cyc`; non-finite inputs are an error.
pub fn total_loss(l_base: f64, l_regen: f64, l_text: f64, l_cyc: f64, w: &LossWeights) -> Result<f64> {
    let terms = [("base", l_base), ("regen", l_regen), ("text", l_text), ("cyclic", l_cyc)];
    if let Some((k, v)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{k} loss is {v}")));
    }
    Ok(l_base + w.gamma * l_regen + w.gamma_text * l_text + w.gamma_cyc * l_cyc)
}

/// Loss terms of one step; absent terms are disabled.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub base: Tensor,
    pub regen: Option<Tensor>,
    pub text: Option<Tensor>,
    pub cyclic: Option<Tensor>,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let mut total = self.base.clone();
        for (term, weight) in [(&self.regen, w.gamma), (&self.text, w.gamma_text), (&self.cyclic, w.gamma_cyc)] {
            if let Some(t) = term {
                total = (total + (t * weight)?)?;
            }
        }
        Ok(total)
    }

    /// Scalar values as `(name, value)`; disabled terms report 0.
    pub fn values(&self) -> Result<[(&'static str, f64); 4]> {
        let v = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map_or(Ok(0.0), scalar) };
        Ok([
            ("base", scalar(&self.base)?),
            ("regen", v(&self.regen)?),
            ("text", v(&self.text)?),
            ("cyclic", v(&self.cyclic)?),
        ])
    }
}

/// A finite, non-empty feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("embedding must be finite and non-empty".into()));
        }
        Ok(Self(data))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(1/D)·‖self − other‖²`.
    pub fn mean_sq_distance(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!("{} vs {}", self.len(), other.len())));
        }
        let s: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(s / self.len() as f64)
    }
}

/// Frozen image embedder: two strided convs, global average pool, linear map to `D`.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    convs: Vec<FrozenConv>,
    proj: Tensor,
}

impl TextEmbedder {
    pub const DIM: usize = 64;

    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let convs = vec![
            FrozenConv::new(&mut store, "embed.conv0", 3, 16, 2)?,
            FrozenConv::new(&mut store, "embed.conv1", 16, 32, 2)?,
        ];
        let proj = store.root().constant("embed.proj", &[32, Self::DIM], Init::FanIn { fan_in: 32, gain: 1.0 })?;
        Ok(Self { convs, proj })
    }

    /// `B×3×H×W` → `B×D`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = ((x * 2.0)? - 1.0)?;
        for c in &self.convs {
            h = c.forward(&h)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok(pooled.matmul(&self.proj)?)
    }

    pub fn embed_image(&self, img: &ImageTensor) -> Result<EmbeddingVector> {
        let x = img.to_tensor(self.proj.dtype(), self.proj.device())?.unsqueeze(0)?;
        let v = self.embed(&x)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        EmbeddingVector::new(v)
    }

    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for c in &self.convs {
            c.hash_into(&mut h)?;
        }
        for v in self.proj.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
        Ok(hex(h))
    }
}

/// Batch mean of `(1/D)·‖f(gen) − f(img)‖²`.
pub fn text_supervision_loss_tensor(img: &Tensor, gen: &Tensor, embedder: &TextEmbedder) -> Result<Tensor> {
    same_shape(img, gen)?;
    let b = img.dim(0)?;
    let f = embedder.embed(&Tensor::cat(&[gen, img], 0)?)?;
    let diff = (f.narrow(0, 0, b)? - f.narrow(0, b, b)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

pub fn text_supervision_loss(img: &ImageTensor, gen: &ImageTensor, embedder: &TextEmbedder) -> Result<f64> {
    embedder.embed_image(gen)?.mean_sq_distance(&embedder.embed_image(img)?)
}

/// MSE between the base network's predictions on `gen` and the detached `cond`.
///
/// The second pass uses batch statistics without touching the running ones.
pub fn cyclic_consistency_loss_tensor(cond: &Tensor, gen: &Tensor, basenet: &BaseNet) -> Result<Tensor> {
    let regenerated = basenet.forward(gen, Mode::TrainFrozenStats)?.condition()?;
    mse(&regenerated, &cond.detach())
}

pub fn cyclic_consistency_loss(cond: &DenseCondition, gen: &ImageTensor, basenet: &BaseNet, dtype: DType) -> Result<f64> {
    let x = gen.to_tensor(dtype, &Device::Cpu)?.unsqueeze(0)?;
    let c = cond.to_tensor(dtype, &Device::Cpu)?.unsqueeze(0)?;
    scalar(&cyclic_consistency_loss_tensor(&c, &x, basenet)?)
}
