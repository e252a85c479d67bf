//! Minimal raster line plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// 3×5 glyphs, one row per entry, most significant bit on the left.
fn glyph(c: char) -> [u8; GLYPH_H as usize] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        '-' => [0, 0, 7, 0, 0],
        '=' => [0, 7, 0, 7, 0],
        ':' => [0, 2, 0, 2, 0],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '/' => [1, 1, 2, 4, 4],
        '%' => [5, 1, 2, 4, 5],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [7, 4, 4, 4, 7],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [7, 4, 5, 5, 7],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 7],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [7, 5, 5, 5, 7],
        'P' => [7, 5, 7, 4, 4],
        'Q' => [7, 5, 5, 7, 1],
        'R' => [6, 5, 6, 5, 5],
        'S' => [7, 4, 7, 1, 7],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        _ => [0; 5],
    }
}

pub struct Canvas {
    img: RgbImage,
    scale: u32,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: [u8; 3]) -> Self {
        Self {
            img: RgbImage::from_pixel(width, height, Rgb(background)),
            scale: 2,
        }
    }

    pub fn image(&self) -> &RgbImage {
        &self.img
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    /// Bresenham line, `thickness` pixels wide.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3], thickness: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let r = thickness / 2;
        loop {
            self.fill_rect(x - r, y - r, x + r, y + r, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn text_width(&self, s: &str) -> i64 {
        (s.chars().count() as u32 * (GLYPH_W + 1) * self.scale) as i64
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        let k = self.scale as i64;
        for (i, c) in s.chars().enumerate() {
            let ox = x + i as i64 * (GLYPH_W as i64 + 1) * k;
            for (row, bits) in glyph(c).iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        let px = ox + col as i64 * k;
                        let py = y + row as i64 * k;
                        self.fill_rect(px, py, px + k - 1, py + k - 1, color);
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// One series over a shared x axis.
#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
    /// Point drawn as a marker, e.g. the minimum.
    pub marker: Option<usize>,
    /// Shaded x interval with a caption.
    pub band: Option<(f64, f64, String)>,
}

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [20, 20, 20];
const GRID: [u8; 3] = [225, 225, 225];
const SERIES: [u8; 3] = [31, 119, 180];
const MARKER: [u8; 3] = [214, 39, 40];
const SHADE: [u8; 3] = [255, 236, 200];

impl LinePlot {
    pub fn render(&self, width: u32, height: u32) -> Result<Canvas> {
        if self.points.is_empty() {
            return Err(Error::Config("cannot plot an empty series".into()));
        }
        if self.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Config("cannot plot non-finite points".into()));
        }
        let mut c = Canvas::new(width, height, WHITE);
        let (left, right, top, bottom) = (84i64, width as i64 - 20, 40i64, height as i64 - 50);
        let (mut x_lo, mut x_hi) = span(self.points.iter().map(|p| p.0));
        if let Some((lo, hi, _)) = &self.band {
            x_lo = x_lo.min(*lo);
            x_hi = x_hi.max(*hi);
        }
        let (y_lo, y_hi) = span(self.points.iter().map(|p| p.1));
        let pad = (y_hi - y_lo).max(1e-9) * 0.1;
        let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
        let px = |x: f64| left + ((x - x_lo) / (x_hi - x_lo).max(1e-12) * (right - left) as f64).round() as i64;
        let py = |y: f64| bottom - ((y - y_lo) / (y_hi - y_lo) * (bottom - top) as f64).round() as i64;

        if let Some((lo, hi, caption)) = &self.band {
            c.fill_rect(px(*lo), top, px(*hi), bottom, SHADE);
            let tx = ((px(*lo) + px(*hi)) - c.text_width(caption)) / 2;
            c.text(tx.max(left), top + 4, caption, BLACK);
        }
        let step = (y_hi - y_lo) / 4.0;
        let decimals = (1.0 - step.log10().floor()).clamp(0.0, 8.0) as usize;
        for i in 0..=4 {
            let y = y_lo + step * i as f64;
            c.line((left, py(y)), (right, py(y)), GRID, 1);
            let label = format!("{y:.decimals$}");
            c.text(left - 6 - c.text_width(&label), py(y) - 5, &label, BLACK);
        }
        for &(x, _) in &self.points {
            let label = format!("{x:.2}");
            c.text(px(x) - c.text_width(&label) / 2, bottom + 8, &label, BLACK);
        }
        c.line((left, top), (left, bottom), BLACK, 1);
        c.line((left, bottom), (right, bottom), BLACK, 1);
        for w in self.points.windows(2) {
            c.line((px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), SERIES, 2);
        }
        for &(x, y) in &self.points {
            c.fill_rect(px(x) - 2, py(y) - 2, px(x) + 2, py(y) + 2, SERIES);
        }
        if let Some(&(x, y)) = self.marker.and_then(|i| self.points.get(i)) {
            c.fill_rect(px(x) - 4, py(y) - 4, px(x) + 4, py(y) + 4, MARKER);
        }
        let tw = c.text_width(&self.title);
        c.text((width as i64 - tw) / 2, 10, &self.title, BLACK);
        let tw = c.text_width(&self.x_label);
        c.text((left + right - tw) / 2, height as i64 - 18, &self.x_label, BLACK);
        c.text(6, top - 16, &self.y_label, BLACK);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render(640, 400)?.save(path)
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_and_marker() {
        let plot = LinePlot {
            title: "ERROR VS CENTER".into(),
            x_label: "CENTER".into(),
            y_label: "AERR".into(),
            points: vec![(0.1, 0.5), (0.5, 0.2), (0.9, 0.4)],
            marker: Some(1),
            band: Some((0.4, 0.6, "MIDDLE".into())),
        };
        let canvas = plot.render(320, 200).unwrap();
        let img = canvas.image();
        assert_eq!(img.dimensions(), (320, 200));
        let count = |color: [u8; 3]| img.pixels().filter(|p| p.0 == color).count();
        assert!(count(MARKER) > 0);
        assert!(count(SERIES) > 0);
        assert!(count(SHADE) > 0);
    }

    #[test]
    fn rejects_empty_and_nan() {
        let mut plot = LinePlot {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            points: vec![],
            marker: None,
            band: None,
        };
        assert!(plot.render(100, 100).is_err());
        plot.points = vec![(0.0, f64::NAN)];
        assert!(plot.render(100, 100).is_err());
    }

    #[test]
    fn every_digit_has_ink() {
        for c in "0123456789".chars() {
            assert!(glyph(c).iter().any(|&r| r != 0), "{c}");
        }
    }
}
