//! Batch normalization and ReLU as single autograd nodes with hand-written backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

/// Per-channel mean and biased variance of `[B, C, H, W]` data.
fn moments<T: WithDType>(x: &[T], c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let b = x.len() / (c * hw);
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut q = 0.0;
        for bi in 0..b {
            q += x[(bi * c + ch) * hw..][..hw].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / n;
    }
    (mean, var)
}

/// Per-channel mean and biased variance of a `[B, C, H, W]` tensor.
pub fn channel_moments(x: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let (_, c, h, w) = x.dims4()?;
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(moments(&v, c, h * w))
}

#[derive(Debug, Clone)]
struct BatchNormOp {
    eps: f64,
    relu: bool,
    /// Fixed statistics; batch statistics when absent.
    stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNormOp {
    fn stats<T: WithDType>(&self, x: &[T], c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
        match &self.stats {
            Some((m, v)) => (m.clone(), v.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()),
            None => {
                let (m, v) = moments(x, c, hw);
                (m, v.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect())
            }
        }
    }

    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], c: usize, hw: usize) -> Vec<T> {
        let (mean, inv) = self.stats(x, c, hw);
        let mut out = Vec::with_capacity(x.len());
        for (i, plane) in x.chunks(hw).enumerate() {
            let ch = i % c;
            let scale = gamma[ch].to_f64() * inv[ch];
            let shift = beta[ch].to_f64() - mean[ch] * scale;
            out.extend(plane.iter().map(|v| {
                let y = v.to_f64() * scale + shift;
                T::from_f64(if self.relu && y <= 0.0 { 0.0 } else { y })
            }));
        }
        out
    }

    /// Packed `[dx (B·C·H·W), dgamma (C), dbeta (C)]`.
    fn backward<T: WithDType>(&self, x: &[T], res: &[T], grad: &[T], gamma: &[f64], c: usize, hw: usize) -> Vec<T> {
        let (mean, inv) = self.stats(x, c, hw);
        let b = x.len() / (c * hw);
        let n = (b * hw) as f64;
        let g = |i: usize| -> f64 {
            if self.relu && res[i].to_f64() <= 0.0 {
                0.0
            } else {
                grad[i].to_f64()
            }
        };
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let gi = g(i);
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * (x[i].to_f64() - mean[ch]) * inv[ch];
                }
            }
        }
        let mut out = Vec::with_capacity(x.len() + 2 * c);
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let k = gamma[ch] * inv[ch];
                for i in base..base + hw {
                    let gi = g(i);
                    let dx = if self.stats.is_some() {
                        k * gi
                    } else {
                        let xhat = (x[i].to_f64() - mean[ch]) * inv[ch];
                        k * (gi - sum_g[ch] / n - xhat * sum_gx[ch] / n)
                    };
                    out.push(T::from_f64(dx));
                }
            }
        }
        out.extend(sum_gx.iter().map(|&v| T::from_f64(v)));
        out.extend(sum_g.iter().map(|&v| T::from_f64(v)));
        out
    }
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let (c, hw) = (dims[1], dims[2] * dims[3]);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                contiguous(x, l1, "batch-norm")?,
                contiguous(g, l2, "batch-norm")?,
                contiguous(b, l3, "batch-norm")?,
                c,
                hw,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                contiguous(x, l1, "batch-norm")?,
                contiguous(g, l2, "batch-norm")?,
                contiguous(b, l3, "batch-norm")?,
                c,
                hw,
            )),
            _ => return Err(candle_core::Error::Msg("batch-norm supports matching f32/f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.elem_count();
        let n = x.elem_count();
        let op = BatchNormGrad {
            op: self.clone(),
            gamma: gamma.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        };
        let packed = x.apply_op3_no_bwd(res, &grad.contiguous()?, &op)?;
        let dx = x.track_op().then(|| packed.narrow(0, 0, n)?.reshape(x.shape())).transpose()?;
        let dgamma = gamma.track_op().then(|| packed.narrow(0, n, c)).transpose()?;
        let dbeta = beta.track_op().then(|| packed.narrow(0, n + c, c)).transpose()?;
        Ok((dx, dgamma, dbeta))
    }
}

/// `(x, output, grad_output) -> packed gradients`.
struct BatchNormGrad {
    op: BatchNormOp,
    gamma: Vec<f64>,
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let (c, hw) = (dims[1], dims[2] * dims[3]);
        let name = "batch-norm-grad";
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(r), CpuStorage::F32(g)) => CpuStorage::F32(self.op.backward(
                contiguous(x, l1, name)?,
                contiguous(r, l2, name)?,
                contiguous(g, l3, name)?,
                &self.gamma,
                c,
                hw,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(r), CpuStorage::F64(g)) => CpuStorage::F64(self.op.backward(
                contiguous(x, l1, name)?,
                contiguous(r, l2, name)?,
                contiguous(g, l3, name)?,
                &self.gamma,
                c,
                hw,
            )),
            _ => return Err(candle_core::Error::Msg("batch-norm-grad supports matching f32/f64 only".into())),
        };
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * c)))
    }
}

/// `gamma·(x − mean)/sqrt(var + eps) + beta`, optionally followed by ReLU.
///
/// With `stats = None` the statistics come from the batch and take part in the gradient.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: Option<(Vec<f64>, Vec<f64>)>,
    eps: f64,
    relu: bool,
) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormOp { eps, relu, stats })
}

struct ReluOp;
struct ReluGrad;

impl CustomOp1 for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(contiguous(x, l, "relu")?.iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect()),
            CpuStorage::F64(x) => CpuStorage::F64(contiguous(x, l, "relu")?.iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect()),
            _ => return Err(candle_core::Error::Msg("relu supports f32/f64 only".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &ReluGrad)?))
    }
}

impl CustomOp2 for ReluGrad {
    fn name(&self) -> &'static str {
        "relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(r), CpuStorage::F32(g)) => CpuStorage::F32(
                contiguous(r, l1, "relu-grad")?
                    .iter()
                    .zip(contiguous(g, l2, "relu-grad")?)
                    .map(|(r, g)| if *r > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            (CpuStorage::F64(r), CpuStorage::F64(g)) => CpuStorage::F64(
                contiguous(r, l1, "relu-grad")?
                    .iter()
                    .zip(contiguous(g, l2, "relu-grad")?)
                    .map(|(r, g)| if *r > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            _ => return Err(candle_core::Error::Msg("relu-grad supports matching f32/f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(ReluOp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::make_rng(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn reference(x: &Tensor, g: &Tensor, b: &Tensor, stats: Option<(Vec<f64>, Vec<f64>)>, relu: bool) -> Tensor {
        let c = g.elem_count();
        let (mean, var) = match stats {
            Some((m, v)) => (
                Tensor::from_vec(m, (1, c, 1, 1), &Device::Cpu).unwrap(),
                Tensor::from_vec(v, (1, c, 1, 1), &Device::Cpu).unwrap(),
            ),
            None => {
                let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
                let d = x.broadcast_sub(&mean).unwrap();
                let var = d.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
                (mean, var)
            }
        };
        let y = x
            .broadcast_sub(&mean)
            .unwrap()
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap();
        if relu {
            y.relu().unwrap()
        } else {
            y
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_composed_ops_with_gradients() {
        for (stats, relu) in [
            (None, false),
            (None, true),
            (Some((vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0])), true),
        ] {
            let x = Var::from_tensor(&rand(&[2, 3, 4, 5], 1)).unwrap();
            let g = Var::from_tensor(&rand(&[3], 2)).unwrap();
            let b = Var::from_tensor(&rand(&[3], 3)).unwrap();
            let probe = rand(&[2, 3, 4, 5], 4);
            let ours = batch_norm(&x, &g, &b, stats.clone(), 1e-5, relu).unwrap();
            let theirs = reference(&x, &g, &b, stats.clone(), relu);
            assert!(max_diff(&ours, &theirs) < 1e-12);
            let go = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gt = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &g, &b] {
                let d = max_diff(go.get(v).unwrap(), gt.get(v).unwrap());
                assert!(d < 1e-10, "{stats:?} {relu}: {d}");
            }
        }
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let x = Var::from_tensor(&Tensor::new(&[-1.0f64, 0.0, 2.0], &Device::Cpu).unwrap()).unwrap();
        let y = relu(&x).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, 0.0, 2.0]);
        let g = (y * 3.0).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let x = Tensor::new(&[f32::NAN, -1.0], &Device::Cpu).unwrap();
        let y = relu(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(y[0].is_nan());
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn moments_are_biased() {
        let x = Tensor::new(&[1.0f64, 3.0, 5.0, 7.0], &Device::Cpu).unwrap().reshape((2, 1, 1, 2)).unwrap();
        let (m, v) = channel_moments(&x).unwrap();
        assert_eq!(m, vec![4.0]);
        assert_eq!(v, vec![5.0]);
    }
}
