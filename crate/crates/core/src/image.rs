//! RGB float images, PNG I/O and the few drawing primitives the generator
//! and overlay writer need.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::Point2;
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Png { path: PathBuf, message: String },
}

/// Row-major `H×W×3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-blend `rgb` into pixel `(x, y)`.
    pub fn blend(&mut self, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] += alpha * (rgb[c] - self.data[i + c]);
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamping to the border.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        std::array::from_fn(|k| {
            let top = a[k] + tx * (b[k] - a[k]);
            let bottom = c[k] + tx * (d[k] - c[k]);
            top + ty * (bottom - top)
        })
    }

    /// Bilinear resize.
    pub fn resized(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let (sx, sy) = (
            self.width as f64 / width as f64,
            self.height as f64 / height as f64,
        );
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                out.set(x, y, self.sample((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy));
            }
        }
        out
    }

    /// `3×H×W` tensor.
    pub fn to_chw<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            T::of(self.data[p * 3 + c] as f64)
        })
    }

    /// Write into a `3×H×W` slice of a batch buffer.
    pub fn write_chw<T: Scalar>(&self, out: &mut [T]) {
        let plane = self.width * self.height;
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = T::of(self.data[p * 3 + c] as f64);
            }
        }
    }

    /// Anti-aliased segment: each pixel is blended with alpha equal to its
    /// coverage by a stroke of the given width.
    pub fn draw_segment(&mut self, a: Point2, b: Point2, width: f64, rgb: [f32; 3], opacity: f32) {
        let half = width / 2.0;
        let pad = half + 1.0;
        let clampi = |v: f64, hi: usize| v.floor().clamp(0.0, hi as f64) as usize;
        let (x0, x1) = (
            clampi(a.x.min(b.x) - pad, self.width - 1),
            clampi(a.x.max(b.x) + pad, self.width - 1),
        );
        let (y0, y1) = (
            clampi(a.y.min(b.y) - pad, self.height - 1),
            clampi(a.y.max(b.y) + pad, self.height - 1),
        );
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0);
                let d = ((px - a.x - t * dx).powi(2) + (py - a.y - t * dy).powi(2)).sqrt();
                let coverage = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
                if coverage > 0.0 {
                    self.blend(x, y, rgb, coverage * opacity);
                }
            }
        }
    }

    pub fn draw_polyline(&mut self, pts: &[Point2], width: f64, rgb: [f32; 3]) {
        for w in pts.windows(2) {
            self.draw_segment(w[0], w[1], width, rgb, 1.0);
        }
    }

    pub fn draw_cross(&mut self, c: Point2, arm: f64, width: f64, rgb: [f32; 3]) {
        self.draw_segment(
            Point2::new(c.x - arm, c.y - arm),
            Point2::new(c.x + arm, c.y + arm),
            width,
            rgb,
            1.0,
        );
        self.draw_segment(
            Point2::new(c.x - arm, c.y + arm),
            Point2::new(c.x + arm, c.y - arm),
            width,
            rgb,
            1.0,
        );
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let io = |source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        };
        let png_err = |e: png::EncodingError| ImageError::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = File::create(path).map_err(io)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer.write_image_data(&bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    /// Load an 8- or 16-bit grayscale, RGB or RGBA PNG.
    pub fn load_png(path: &Path) -> Result<RgbImage, ImageError> {
        let file = File::open(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |message: String| ImageError::Png {
            path: path.to_path_buf(),
            message,
        };
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(bad(format!("unsupported color type {other:?}"))),
        };
        let mut img = RgbImage::new(w, h);
        for (p, px) in buf[..w * h * channels].chunks_exact(channels).enumerate() {
            let rgb = if channels < 3 {
                [px[0]; 3]
            } else {
                [px[0], px[1], px[2]]
            };
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb.map(|v| v as f32 / 255.0));
        }
        Ok(img)
    }
}
