//! Image and raw tensor files.
//!
//! Images are 8-bit RGB PNG. Quantization is `floor(255·v + 0.5)` after
//! clamping to `[0, 1]`. Raw tensors use a small little-endian container:
//! magic `DJVT`, a `u32` rank, `u64` dims, then `f64` values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ColorType, ImageReader, RgbImage};
use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

const TENSOR_MAGIC: &[u8; 4] = b"DJVT";

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Format(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    ImageTensor::new(data)
}

/// Quantizes one value to a byte (clamp, then round half up).
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.dim();
    if c != 3 && c != 1 {
        return Err(Error::Dimension(format!(
            "can only save 1- or 3-channel images, got {c}"
        )));
    }
    let data = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |ch: usize| quantize(data[[if c == 1 { 0 } else { ch }, y, x]]);
        image::Rgb([px(0), px(1), px(2)])
    });
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    out.write_to(&mut writer, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn save_array(array: &ArrayD<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + array.len() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
    for &d in array.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("not a tensor file"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + rank * 8;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    if bytes.len() != header + count * 8 {
        return Err(bad("payload size does not match shape"));
    }
    let values = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| bad(&e.to_string()))
}
