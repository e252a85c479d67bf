//! Encoder-decoder base network with per-task heads.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{normalize_channels, softmax_channels, Conv2d, ConvBnRelu, Mode, Scope};
use crate::tensor::{DenseCondition, ImageTensor, Task};

use super::TaskSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseNetConfig {
    pub tasks: TaskSelection,
    pub classes: usize,
    pub width: usize,
    /// Number of strided encoder stages.
    pub levels: usize,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        Self {
            tasks: TaskSelection::Single(Task::Segmentation),
            classes: 4,
            width: 32,
            levels: 3,
        }
    }
}

impl BaseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 && self.tasks.tasks().contains(&Task::Segmentation) {
            return Err(Error::Config(format!(
                "segmentation needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.width == 0 || self.levels == 0 {
            return Err(Error::Config("base width and levels must be positive".into()));
        }
        Ok(())
    }

    /// Total channels of the concatenated predictions.
    pub fn condition_channels(&self) -> usize {
        self.tasks.tasks().iter().map(|t| t.channels(self.classes)).sum()
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.width << i.min(2)
    }
}

/// Maps pre-activation outputs to a valid prediction.
pub fn head_transform(task: Task, raw: &Tensor) -> Result<Tensor> {
    match task {
        Task::Segmentation => softmax_channels(raw),
        Task::Depth => Ok(raw.exp()?),
        Task::Normals => normalize_channels(raw, 1e-12),
    }
}

/// Inverse of [`head_transform`] up to the softmax shift.
pub fn head_inverse(task: Task, cond: &Tensor) -> Result<Tensor> {
    match task {
        Task::Segmentation | Task::Depth => Ok(cond.clamp(1e-12, f64::INFINITY)?.log()?),
        Task::Normals => Ok(cond.clone()),
    }
}

/// One task's output: `raw` is logits, log-depth or unnormalized normals.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub task: Task,
    pub raw: Tensor,
    pub cond: Tensor,
}

impl Prediction {
    pub fn from_raw(task: Task, raw: Tensor) -> Result<Self> {
        let cond = head_transform(task, &raw)?;
        Ok(Self { task, raw, cond })
    }
}

#[derive(Debug, Clone)]
pub struct Predictions(pub Vec<Prediction>);

impl Predictions {
    pub fn get(&self, task: Task) -> Option<&Prediction> {
        self.0.iter().find(|p| p.task == task)
    }

    /// Conditioning tensor: all task outputs concatenated along channels.
    pub fn condition(&self) -> Result<Tensor> {
        let conds: Vec<&Tensor> = self.0.iter().map(|p| &p.cond).collect();
        Ok(if conds.len() == 1 {
            conds[0].clone()
        } else {
            Tensor::cat(&conds, 1)?
        })
    }
}

/// Nearest-neighbour 2× upsampling cropped to `(h, w)`.
pub fn upsample2_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, xh, xw) = x.dims4()?;
    let up = x
        .reshape((b, c, xh, 1, xw, 1))?
        .broadcast_as((b, c, xh, 2, xw, 2))?
        .contiguous()?
        .reshape((b, c, 2 * xh, 2 * xw))?;
    Ok(if (2 * xh, 2 * xw) == (h, w) {
        up
    } else {
        up.narrow(2, 0, h)?.narrow(3, 0, w)?
    })
}

#[derive(Debug, Clone)]
pub struct BaseNet {
    cfg: BaseNetConfig,
    stem: ConvBnRelu,
    down: Vec<ConvBnRelu>,
    up: Vec<ConvBnRelu>,
    heads: Vec<(Task, Conv2d)>,
}

impl BaseNet {
    /// Encoder parameters live under `encoder.`, decoder under `decoder.`,
    /// heads under `head.<task>.`.
    pub fn new(scope: &mut Scope<'_>, cfg: BaseNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc = scope.sub("encoder");
        let stem = ConvBnRelu::new(&mut enc.sub("stem"), 3, cfg.width, 1)?;
        let mut down = Vec::with_capacity(cfg.levels);
        let mut cin = cfg.width;
        for i in 0..cfg.levels {
            let cout = cfg.stage_channels(i + 1);
            down.push(ConvBnRelu::new(&mut enc.sub(&format!("down{i}")), cin, cout, 2)?);
            cin = cout;
        }
        drop(enc);
        let mut dec = scope.sub("decoder");
        let mut up = Vec::with_capacity(cfg.levels);
        for i in (0..cfg.levels).rev() {
            let skip = cfg.stage_channels(i);
            up.push(ConvBnRelu::new(&mut dec.sub(&format!("up{i}")), cin + skip, skip, 1)?);
            cin = skip;
        }
        drop(dec);
        let mut heads_scope = scope.sub("head");
        let heads = cfg
            .tasks
            .tasks()
            .into_iter()
            .map(|t| {
                let conv = Conv2d::new(
                    &mut heads_scope.sub(t.as_str()),
                    cfg.width,
                    t.channels(cfg.classes),
                    1,
                    1,
                    0,
                    true,
                    1.0,
                )?;
                if t == Task::Normals {
                    // start from the plane normal so that dead features still give a unit vector
                    let bias = conv.bias.as_ref().expect("head has bias");
                    let up = Tensor::new(&[0.0f64, 0.0, 1.0], bias.device())?.to_dtype(bias.dtype())?;
                    bias.set(&up)?;
                }
                Ok((t, conv))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            stem,
            down,
            up,
            heads,
        })
    }

    pub fn config(&self) -> &BaseNetConfig {
        &self.cfg
    }

    /// Shared decoder features at full resolution.
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut skips = vec![self.stem.forward(x, mode)?];
        for block in &self.down {
            let next = block.forward(skips.last().expect("stem present"), mode)?;
            skips.push(next);
        }
        let mut y = skips.pop().expect("at least one stage");
        for block in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let (_, _, h, w) = skip.dims4()?;
            let cat = Tensor::cat(&[&upsample2_to(&y, h, w)?, &skip], 1)?;
            y = block.forward(&cat, mode)?;
        }
        Ok(y)
    }

    /// `x` is `B×3×H×W`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Predictions> {
        if x.rank() != 4 || x.dim(1)? != 3 {
            return Err(Error::Dimension(format!("expected B×3×H×W input, got {:?}", x.dims())));
        }
        let f = self.features(x, mode)?;
        Ok(Predictions(
            self.heads
                .iter()
                .map(|(t, head)| Prediction::from_raw(*t, head.forward(&f)?))
                .collect::<Result<_>>()?,
        ))
    }

    /// Single-image convenience wrapper; returns one condition per task, in evaluation mode.
    pub fn predict(&self, img: &ImageTensor, dtype: candle_core::DType) -> Result<Vec<DenseCondition>> {
        let device = self.stem.conv.weight.device().clone();
        let x = img.to_tensor(dtype, &device)?.unsqueeze(0)?;
        self.forward(&x, Mode::Eval)?
            .0
            .iter()
            .map(|p| DenseCondition::from_tensor(p.task, &p.cond))
            .collect()
    }

    /// Multiply-accumulates for one `h×w` image.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let mut sizes = vec![(h, w)];
        for _ in 0..self.cfg.levels {
            let (sh, sw) = *sizes.last().expect("nonempty");
            sizes.push((sh.div_ceil(2), sw.div_ceil(2)));
        }
        let mut total = self.stem.conv.macs(h, w);
        for (i, b) in self.down.iter().enumerate() {
            total += b.conv.macs(sizes[i + 1].0, sizes[i + 1].1);
        }
        for (b, i) in self.up.iter().zip((0..self.cfg.levels).rev()) {
            total += b.conv.macs(sizes[i].0, sizes[i].1);
        }
        total + self.heads.iter().map(|(_, c)| c.macs(h, w)).sum::<usize>()
    }
}

/// Argmax over channels of a `B×N×H×W` tensor.
pub fn argmax_channels(x: &Tensor) -> Result<Tensor> {
    Ok(x.argmax_keepdim(D::Minus(3))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn net(store: &mut ParamStore, tasks: TaskSelection) -> BaseNet {
        let cfg = BaseNetConfig {
            tasks,
            classes: 3,
            width: 4,
            levels: 2,
        };
        BaseNet::new(&mut store.root().sub("base"), cfg).unwrap()
    }

    #[test]
    fn outputs_satisfy_invariants() {
        let mut store = ParamStore::new(1, DType::F64, Device::Cpu);
        let n = net(&mut store, TaskSelection::Multitask);
        let img = ImageTensor::from_fn((3, 7, 10), |(c, y, x)| ((c + 2 * y + 3 * x) % 5) as f64 / 5.0);
        let out = n.predict(&img, DType::F64).unwrap();
        assert_eq!(out.len(), 3);
        for cond in out {
            assert_eq!((cond.height(), cond.width()), (7, 10));
            cond.validate().unwrap();
        }
    }

    #[test]
    fn multitask_shares_encoder() {
        let mut single = ParamStore::new(1, DType::F32, Device::Cpu);
        let s = net(&mut single, TaskSelection::Single(Task::Depth));
        let mut multi = ParamStore::new(1, DType::F32, Device::Cpu);
        let _ = net(&mut multi, TaskSelection::Multitask);
        let trunk = |st: &ParamStore| st.num_params_under("base.encoder.") + st.num_params_under("base.decoder.");
        assert_eq!(trunk(&single), trunk(&multi));
        // heads: segmentation 4·3+3, depth 4+1, normals 4·3+3
        let heads = 15 + 5 + 15;
        assert_eq!(multi.num_params(), trunk(&multi) + heads);
        assert_eq!(single.num_params(), trunk(&single) + 5);
        assert_eq!(s.heads.len(), 1);
    }

    #[test]
    fn upsample_crops() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = upsample2_to(&x, 3, 4).unwrap();
        assert_eq!(
            y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![0., 0., 1., 1.], vec![0., 0., 1., 1.], vec![2., 2., 3., 3.]]
        );
    }
}
