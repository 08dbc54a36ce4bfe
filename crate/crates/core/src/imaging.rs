//! Floating-point images and bilinear sampling.
//!
//! Pixel `(i, j)` is column `i`, row `j`, with its center at continuous
//! position `(i + 0.5, j + 0.5)`. Bilinear lookups clamp to the border.

use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Bilinear tap layout around a continuous position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    /// Weight derivatives w.r.t. x and y of the sample position.
    pub dwx: [f64; 4],
    pub dwy: [f64; 4],
}

pub(crate) fn bilinear_taps(width: usize, height: usize, pos: Vector2<f64>) -> Taps {
    let px = pos.x - 0.5;
    let py = pos.y - 0.5;
    let x0f = px.floor();
    let y0f = py.floor();
    let fx = px - x0f;
    let fy = py - y0f;
    let clamp = |v: f64, hi: usize| -> usize { v.max(0.0).min((hi - 1) as f64) as usize };
    let x0 = clamp(x0f, width);
    let x1 = clamp(x0f + 1.0, width);
    let y0 = clamp(y0f, height);
    let y1 = clamp(y0f + 1.0, height);
    Taps {
        idx: [
            y0 * width + x0,
            y0 * width + x1,
            y1 * width + x0,
            y1 * width + x1,
        ],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        dwx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dwy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        RgbImage {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(
                "image dimensions must be positive".into(),
            ));
        }
        Error::check_dim("image pixels", width * height, data.len())?;
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.data[y * self.width + x] = c;
    }

    /// Bilinear sample at a continuous position.
    pub fn sample(&self, pos: Vector2<f64>) -> Rgb {
        let taps = bilinear_taps(self.width, self.height, pos);
        let mut out = [0.0; 3];
        for k in 0..4 {
            let p = self.data[taps.idx[k]];
            for c in 0..3 {
                out[c] += taps.w[k] * p[c];
            }
        }
        out
    }

    /// Bilinear sample plus its derivatives w.r.t. the sample position.
    pub fn sample_with_gradient(&self, pos: Vector2<f64>) -> (Rgb, [Rgb; 2]) {
        let taps = bilinear_taps(self.width, self.height, pos);
        let mut out = [0.0; 3];
        let mut dx = [0.0; 3];
        let mut dy = [0.0; 3];
        for k in 0..4 {
            let p = self.data[taps.idx[k]];
            for c in 0..3 {
                out[c] += taps.w[k] * p[c];
                dx[c] += taps.dwx[k] * p[c];
                dy[c] += taps.dwy[k] * p[c];
            }
        }
        // Clamped directions have zero derivative.
        let px = pos.x - 0.5;
        let py = pos.y - 0.5;
        if px < 0.0 || px >= (self.width - 1) as f64 {
            dx = [0.0; 3];
        }
        if py < 0.0 || py >= (self.height - 1) as f64 {
            dy = [0.0; 3];
        }
        (out, [dx, dy])
    }

    /// Luma-free gray conversion: channel mean.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| (p[0] + p[1] + p[2]) / 3.0)
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Multiplies every channel by `factor`, clamping to `[0, 1]`.
    pub fn scaled_intensity(&self, factor: f64) -> RgbImage {
        self.map(|p| p.map(|c| (c * factor).clamp(0.0, 1.0)))
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> RgbImage {
        self.map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.data) {
            *dst = image::Rgb(src.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img
                .pixels()
                .map(|p| p.0.map(|c| c as f64 / 255.0))
                .collect(),
        }
    }

    /// Writes 8-bit PNG or binary PPM, chosen by extension (`.ppm` → PPM).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = if is_ppm(path) {
            image::ImageFormat::Pnm
        } else {
            image::ImageFormat::Png
        };
        self.to_rgb8()
            .save_with_format(path, format)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// PNG bytes of the 8-bit image.
    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        buf.into_inner()
    }
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sample(&self, pos: Vector2<f64>) -> f64 {
        let taps = bilinear_taps(self.width, self.height, pos);
        (0..4).map(|k| taps.w[k] * self.data[taps.idx[k]]).sum()
    }

    /// Central-difference gradient (one-sided at borders).
    pub fn gradient(&self) -> (GrayImage, GrayImage) {
        let (w, h) = (self.width, self.height);
        let mut gx = GrayImage::new(w, h, 0.0);
        let mut gy = GrayImage::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                let i = y * w + x;
                if xr > xl {
                    gx.data[i] = (self.get(xr, y) - self.get(xl, y)) / (xr - xl) as f64;
                }
                if yd > yu {
                    gy.data[i] = (self.get(x, yd) - self.get(x, yu)) / (yd - yu) as f64;
                }
            }
        }
        (gx, gy)
    }

    /// Box mean over a `(2r+1)²` window, normalized by the in-image count.
    pub fn box_mean(&self, r: usize) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let stride = w + 1;
        let mut integral = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += self.data[y * w + x];
                integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
            }
        }
        let mut out = GrayImage::new(w, h, 0.0);
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r + 1).min(h);
            for x in 0..w {
                let x0 = x.saturating_sub(r);
                let x1 = (x + r + 1).min(w);
                let s = integral[y1 * stride + x1]
                    - integral[y0 * stride + x1]
                    - integral[y1 * stride + x0]
                    + integral[y0 * stride + x0];
                out.data[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        out
    }
}
