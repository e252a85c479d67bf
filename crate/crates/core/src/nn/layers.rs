use candle_core::{Tensor, Var, D};

use super::conv::conv2d;
use super::fused::{batch_norm, channel_moments};
use super::params::{Init, Scope};
use crate::error::Result;

/// Forward mode for layers with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics untouched (secondary passes, gradient probes).
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut Scope<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = scope.var("weight", &[cout, cin, kernel, kernel], Init::FanIn { fan_in, gain })?;
        let bias = if bias {
            Some(scope.var("bias", &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(scope: &mut Scope<'_>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(scope, cin, cout, 3, 1, 1, bias, 2f64.sqrt())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.stride,
            self.padding,
        )?)
    }

    pub fn macs(&self, out_h: usize, out_w: usize) -> usize {
        self.weight.elem_count() * out_h * out_w
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.var("gamma", &[channels], Init::Ones)?,
            beta: scope.var("beta", &[channels], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_act(x, mode, false)
    }

    /// Normalization optionally fused with a trailing ReLU.
    pub fn forward_act(&self, x: &Tensor, mode: Mode, relu: bool) -> Result<Tensor> {
        let stats = match mode {
            Mode::Eval => Some((vec_of(&self.running_mean)?, vec_of(&self.running_var)?)),
            Mode::TrainFrozenStats => None,
            Mode::Train => {
                let (b, _, h, w) = x.dims4()?;
                let n = (b * h * w) as f64;
                let m = self.momentum;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let (mean, var) = channel_moments(&x.detach())?;
                let blend = |old: &Var, new: Vec<f64>, k: f64| -> Result<()> {
                    let new = Tensor::new(new.as_slice(), old.device())?.to_dtype(old.dtype())?;
                    Ok(old.set(&((old.as_tensor() * (1.0 - m))? + (new * (m * k))?)?)?)
                };
                blend(&self.running_mean, mean, 1.0)?;
                blend(&self.running_var, var, unbiased)?;
                None
            }
        };
        Ok(batch_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), stats, self.eps, relu)?)
    }
}

fn vec_of(v: &Var) -> Result<Vec<f64>> {
    Ok(v.as_tensor().to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

/// Convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(scope: &mut Scope<'_>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let conv = Conv2d::new(&mut scope.sub("conv"), cin, cout, 3, stride, 1, false, 2f64.sqrt())?;
        let bn = BatchNorm2d::new(&mut scope.sub("bn"), cout)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward_act(&self.conv.forward(x)?, mode, true)
    }
}

/// Dense layer acting on the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = scope.var("weight", &[output, input], Init::FanIn { fan_in: input, gain: 1.0 })?;
        let bias = if bias {
            Some(scope.var("bias", &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

/// Softmax over the channel axis of `[B, C, H, W]`.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

pub fn log_softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Divides each pixel's channel vector by its L2 norm.
pub fn normalize_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_running() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let bn = BatchNorm2d::new(&mut store.root().sub("bn"), 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 4)).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = y.mean_all().unwrap();
        assert!(scalar(&mean).abs() < 1e-12);
        // running stats moved towards the batch stats
        let rm = bn.running_mean.to_vec1::<f64>().unwrap();
        assert!(rm[0] > 0.0 && rm[1] > rm[0]);
        let before = store.fingerprint();
        bn.forward(&x, Mode::TrainFrozenStats).unwrap();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(store.fingerprint(), before);
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let x = Tensor::new(&[[[[1.0f64]], [[2.0]], [[-3.0]]]], &Device::Cpu).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert!((scalar(&p.sum_all().unwrap()) - 1.0).abs() < 1e-12);
        let lp = log_softmax_channels(&x).unwrap().exp().unwrap();
        let d = (p - lp).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d) < 1e-12);
    }

    #[test]
    fn linear_shapes() {
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        let l = Linear::new(&mut store.root().sub("l"), 5, 3, true).unwrap();
        let x = Tensor::zeros((2, 7, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 7, 3]);
    }
}
