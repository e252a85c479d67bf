//! Image redaction in the spatial and spectral domains.
//!
//! Spatial redaction zeroes pixels (independently at random, on a
//! checkerboard, or on a randomly shifted checkerboard). Spectral redaction
//! masks coefficients of a full-image orthonormal type-II DCT using a radial
//! band on the coefficient index grid and transforms back. Both are linear
//! in the image for a fixed mask.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedactionDomain {
    Spatial,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedactionVariant {
    Random,
    Checkerboard,
    RandomBlocks,
    Lowpass,
    Highpass,
    Bandstop,
}

impl RedactionDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            RedactionDomain::Spatial => "spatial",
            RedactionDomain::Spectral => "spectral",
        }
    }
}

impl RedactionVariant {
    pub fn domain(self) -> RedactionDomain {
        match self {
            RedactionVariant::Random
            | RedactionVariant::Checkerboard
            | RedactionVariant::RandomBlocks => RedactionDomain::Spatial,
            RedactionVariant::Lowpass | RedactionVariant::Highpass | RedactionVariant::Bandstop => {
                RedactionDomain::Spectral
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RedactionVariant::Random => "random",
            RedactionVariant::Checkerboard => "checkerboard",
            RedactionVariant::RandomBlocks => "random_blocks",
            RedactionVariant::Lowpass => "lowpass",
            RedactionVariant::Highpass => "highpass",
            RedactionVariant::Bandstop => "bandstop",
        }
    }
}

impl fmt::Display for RedactionDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for RedactionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RedactionDomain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(RedactionDomain::Spatial),
            "spectral" => Ok(RedactionDomain::Spectral),
            other => Err(Error::InvalidSpec(format!("unknown redaction domain `{other}`"))),
        }
    }
}

impl FromStr for RedactionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(RedactionVariant::Random),
            "checkerboard" => Ok(RedactionVariant::Checkerboard),
            "random_blocks" => Ok(RedactionVariant::RandomBlocks),
            "lowpass" => Ok(RedactionVariant::Lowpass),
            "highpass" => Ok(RedactionVariant::Highpass),
            "bandstop" => Ok(RedactionVariant::Bandstop),
            other => Err(Error::InvalidSpec(format!("unknown redaction variant `{other}`"))),
        }
    }
}

/// Declarative description of one redaction.
///
/// Only the fields relevant to the variant may be set: `drop_prob` for
/// `random`, `block` for the checkerboards, `band` for every spectral variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedactionSpec {
    pub domain: RedactionDomain,
    pub variant: RedactionVariant,
    pub drop_prob: Option<f64>,
    pub block: Option<usize>,
    pub band: Option<(f64, f64)>,
    pub seed: u64,
}

impl RedactionSpec {
    pub fn random(t: f64) -> Self {
        Self::bare(RedactionVariant::Random).with_drop_prob(t)
    }

    pub fn checkerboard(b: usize) -> Self {
        Self::bare(RedactionVariant::Checkerboard).with_block(b)
    }

    pub fn random_blocks(b: usize) -> Self {
        Self::bare(RedactionVariant::RandomBlocks).with_block(b)
    }

    pub fn lowpass(f_hi: f64) -> Self {
        Self::bare(RedactionVariant::Lowpass).with_band(0.0, f_hi)
    }

    pub fn highpass(f_lo: f64) -> Self {
        Self::bare(RedactionVariant::Highpass).with_band(f_lo, 1.0)
    }

    pub fn bandstop(f_lo: f64, f_hi: f64) -> Self {
        Self::bare(RedactionVariant::Bandstop).with_band(f_lo, f_hi)
    }

    /// A spec with the variant set and no parameters.
    pub fn bare(variant: RedactionVariant) -> Self {
        Self {
            domain: variant.domain(),
            variant,
            drop_prob: None,
            block: None,
            band: None,
            seed: 0,
        }
    }

    pub fn with_drop_prob(mut self, t: f64) -> Self {
        self.drop_prob = Some(t);
        self
    }

    pub fn with_block(mut self, b: usize) -> Self {
        self.block = Some(b);
        self
    }

    pub fn with_band(mut self, lo: f64, hi: f64) -> Self {
        self.band = Some((lo, hi));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks field consistency independent of image size.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.variant.domain() != self.domain {
            return bad(format!(
                "variant `{}` does not belong to domain `{}`",
                self.variant, self.domain
            ));
        }
        let (want_t, want_b, want_band) = match self.variant {
            RedactionVariant::Random => (true, false, false),
            RedactionVariant::Checkerboard | RedactionVariant::RandomBlocks => (false, true, false),
            _ => (false, false, true),
        };
        for (name, want, have) in [
            ("t", want_t, self.drop_prob.is_some()),
            ("b", want_b, self.block.is_some()),
            ("band", want_band, self.band.is_some()),
        ] {
            if want && !have {
                return bad(format!("variant `{}` requires `{name}`", self.variant));
            }
            if !want && have {
                return bad(format!("variant `{}` does not accept `{name}`", self.variant));
            }
        }
        if let Some(t) = self.drop_prob {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("t = {t} outside [0, 1]"));
            }
        }
        if self.block == Some(0) {
            return bad("b must be at least 1".into());
        }
        if let Some((lo, hi)) = self.band {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad(format!("band ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"));
            }
        }
        Ok(())
    }

    /// Checks field consistency and size constraints for an `h×w` image.
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if let Some(b) = self.block {
            if b > h.min(w) {
                return Err(Error::InvalidSpec(format!(
                    "b = {b} exceeds min(H, W) = {}",
                    h.min(w)
                )));
            }
        }
        Ok(())
    }
}

/// Binary `H×W` mask, stored as 0.0/1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    data: Array2<f64>,
}

impl SpatialMask {
    pub fn from_fn(h: usize, w: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((h, w), |(y, x)| if keep(y, x) { 1.0 } else { 0.0 }),
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |_, _| true)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |_, _| false)
    }

    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dimension("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn kept(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]] == 1.0
    }

    pub fn zero_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 0.0).count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.mapv(|v| 1.0 - v),
        }
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dim();
        Ok(Tensor::from_vec(self.data.iter().copied().collect::<Vec<_>>(), (h, w), device)?
            .to_dtype(dtype)?)
    }
}

fn checker(h: usize, w: usize, b: usize, shift_y: usize, shift_x: usize) -> SpatialMask {
    SpatialMask::from_fn(h, w, |y, x| ((y + shift_y) / b + (x + shift_x) / b) % 2 == 0)
}

/// Checkerboard with the grid origin moved by `(shift_y, shift_x)`.
pub fn shifted_checkerboard(h: usize, w: usize, b: usize, shift_y: usize, shift_x: usize) -> SpatialMask {
    checker(h, w, b, shift_y, shift_x)
}

pub fn make_spatial_mask(
    h: usize,
    w: usize,
    spec: &RedactionSpec,
    rng: &mut SeededRng,
) -> Result<SpatialMask> {
    if spec.domain != RedactionDomain::Spatial {
        return Err(Error::InvalidSpec(format!(
            "spatial mask requested for a {} spec",
            spec.domain
        )));
    }
    spec.validate_for(h, w)?;
    Ok(match spec.variant {
        RedactionVariant::Random => {
            let t = spec.drop_prob.expect("validated");
            SpatialMask::from_fn(h, w, |_, _| rng.uniform() >= t)
        }
        RedactionVariant::Checkerboard => checker(h, w, spec.block.expect("validated"), 0, 0),
        RedactionVariant::RandomBlocks => {
            let b = spec.block.expect("validated");
            let sy = rng.below(2 * b);
            let sx = rng.below(2 * b);
            checker(h, w, b, sy, sx)
        }
        _ => unreachable!("spatial domain validated"),
    })
}

pub fn apply_spatial_mask(img: &ImageTensor, mask: &SpatialMask) -> Result<ImageTensor> {
    let (c, h, w) = img.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "mask {:?} does not match image {h}×{w}",
            mask.dim()
        )));
    }
    let mut out = img.data().clone();
    for ch in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ch);
        plane.zip_mut_with(mask.data(), |v, &m| {
            if m == 0.0 {
                *v = 0.0;
            }
        });
    }
    ImageTensor::new(out)
}

/// Orthonormal type-II DCT coefficients, `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DctCoefficients {
    data: Array3<f64>,
}

impl DctCoefficients {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn masked(&self, mask: &SpatialMask) -> Result<Self> {
        let (c, h, w) = self.data.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match coefficients {h}×{w}",
                mask.dim()
            )));
        }
        let mut out = self.data.clone();
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch)
                .zip_mut_with(mask.data(), |v, &m| *v *= m);
        }
        Ok(Self { data: out })
    }
}

/// Orthonormal DCT-II basis matrix: `basis[k][n] = a(k) cos(pi (2n+1) k / 2N)`.
pub fn dct_basis(n: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

/// Precomputed basis matrices for an `H×W` transform.
#[derive(Debug, Clone)]
pub struct DctPlan {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

impl DctPlan {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            rows: dct_basis(h),
            cols: dct_basis(w),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    fn check(&self, dim: (usize, usize, usize)) -> Result<()> {
        if (dim.1, dim.2) != self.dim() {
            return Err(Error::Dimension(format!(
                "plan is {:?} but input is {}×{}",
                self.dim(),
                dim.1,
                dim.2
            )));
        }
        Ok(())
    }

    pub fn forward(&self, img: &ImageTensor) -> Result<DctCoefficients> {
        self.check(img.dim())?;
        let mut out = Array3::zeros(img.dim());
        for (src, mut dst) in img.data().outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.rows.dot(&src).dot(&self.cols.t()));
        }
        Ok(DctCoefficients { data: out })
    }

    pub fn inverse(&self, coef: &DctCoefficients) -> Result<ImageTensor> {
        self.check(coef.data.dim())?;
        let mut out = Array3::zeros(coef.data.dim());
        for (src, mut dst) in coef.data.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.rows.t().dot(&src).dot(&self.cols));
        }
        ImageTensor::new(out)
    }

    /// `rows` and `cols` basis matrices as tensors, for batched filtering.
    pub fn tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let conv = |m: &Array2<f64>| -> Result<Tensor> {
            let (r, c) = m.dim();
            Ok(Tensor::from_vec(m.iter().copied().collect::<Vec<_>>(), (r, c), device)?
                .to_dtype(dtype)?)
        };
        Ok((conv(&self.rows)?, conv(&self.cols)?))
    }
}

pub fn dct2(img: &ImageTensor) -> DctCoefficients {
    let (_, h, w) = img.dim();
    DctPlan::new(h, w).forward(img).expect("plan built for this size")
}

pub fn idct2(coef: &DctCoefficients) -> ImageTensor {
    let (_, h, w) = coef.data.dim();
    DctPlan::new(h, w)
        .inverse(coef)
        .expect("plan built for this size")
}

/// Normalized radial index of DCT cell `(u, v)` on an `h×w` grid, in `[0, 1]`.
pub fn radial_index(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let denom = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    ((u * u + v * v) as f64).sqrt() / denom
}

pub fn make_spectral_mask(h: usize, w: usize, spec: &RedactionSpec) -> Result<SpatialMask> {
    if spec.domain != RedactionDomain::Spectral {
        return Err(Error::InvalidSpec(format!(
            "spectral mask requested for a {} spec",
            spec.domain
        )));
    }
    spec.validate_for(h, w)?;
    let (lo, hi) = spec.band.expect("validated");
    let variant = spec.variant;
    Ok(SpatialMask::from_fn(h, w, |u, v| {
        let r = radial_index(u, v, h, w);
        match variant {
            RedactionVariant::Lowpass => r <= hi,
            RedactionVariant::Highpass => r >= lo,
            RedactionVariant::Bandstop => !(lo..=hi).contains(&r),
            _ => unreachable!("spectral domain validated"),
        }
    }))
}

/// Mask the DCT of `img` and transform back. No clamping.
pub fn spectral_filter(img: &ImageTensor, mask: &SpatialMask) -> Result<ImageTensor> {
    let (_, h, w) = img.dim();
    let plan = DctPlan::new(h, w);
    plan.inverse(&plan.forward(img)?.masked(mask)?)
}

/// Redacts one image. Spectral output is left unclamped.
pub fn redact(img: &ImageTensor, spec: &RedactionSpec, rng: &mut SeededRng) -> Result<ImageTensor> {
    let (_, h, w) = img.dim();
    match spec.domain {
        RedactionDomain::Spatial => apply_spatial_mask(img, &make_spatial_mask(h, w, spec, rng)?),
        RedactionDomain::Spectral => spectral_filter(img, &make_spectral_mask(h, w, spec)?),
    }
}

/// Batched redaction on `B×C×H×W` tensors.
///
/// Spatial masks are drawn per image from `rng`; the spectral mask is shared.
/// The result is a linear function of the input, so gradients flow through it
/// when the input is tracked.
#[derive(Debug, Clone)]
pub struct BatchRedactor {
    spec: RedactionSpec,
    h: usize,
    w: usize,
    spectral: Option<(Tensor, Tensor, Tensor)>,
}

impl BatchRedactor {
    pub fn new(spec: RedactionSpec, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate_for(h, w)?;
        let spectral = match spec.domain {
            RedactionDomain::Spatial => None,
            RedactionDomain::Spectral => {
                let (rows, cols) = DctPlan::new(h, w).tensors(dtype, device)?;
                let mask = make_spectral_mask(h, w, &spec)?.to_tensor(dtype, device)?;
                Some((rows, cols, mask))
            }
        };
        Ok(Self { spec, h, w, spectral })
    }

    pub fn spec(&self) -> &RedactionSpec {
        &self.spec
    }

    pub fn apply(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::Dimension(format!(
                "redactor built for {}×{}, got {h}×{w}",
                self.h, self.w
            )));
        }
        match &self.spectral {
            Some((rows, cols, mask)) => {
                let coef = rows.broadcast_matmul(x)?.broadcast_matmul(&cols.t()?)?;
                let coef = coef.broadcast_mul(mask)?;
                Ok(rows.t()?.broadcast_matmul(&coef)?.broadcast_matmul(cols)?)
            }
            None => {
                let masks = (0..b)
                    .map(|_| make_spatial_mask(h, w, &self.spec, rng)?.to_tensor(x.dtype(), x.device()))
                    .collect::<Result<Vec<_>>>()?;
                let masks = Tensor::stack(&masks, 0)?.unsqueeze(1)?;
                Ok(x.broadcast_mul(&masks)?)
            }
        }
    }
}
