//! Dense optical flow.
//!
//! Coarse-to-fine Horn-Schunck with warping. [`estimate_flow`]`(from, to)`
//! returns a field `w` on the grid of `to` such that `to(x) ≈ from(x + w(x))`,
//! i.e. [`warp_image`]`(from, w) ≈ to`.
//!
//! Each pyramid level repeats a fixed number of warps; every warp linearizes
//! the data term around the current field and runs Gauss-Seidel sweeps on the
//! per-pixel 2×2 normal equations with a quadratic smoothness term. An
//! optional gradient-constancy term and an optional local contrast
//! normalization make the data term robust to brightness changes.
//! Intensities are gray levels in `[0, 255]`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bilinear_taps, GrayImage, RgbImage};
use crate::render::VisibilityMask;

/// Per-pixel displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, d: Vector2<f64>) -> Self {
        FlowField {
            width,
            height,
            u: vec![d.x; width * height],
            v: vec![d.y; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, idx: usize) -> Vector2<f64> {
        Vector2::new(self.u[idx], self.v[idx])
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Writes the Middlebury `.flo` layout.
    pub fn write_flo(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(b"PIEH")?;
        w.write_all(&(self.width as i32).to_le_bytes())?;
        w.write_all(&(self.height as i32).to_le_bytes())?;
        for (u, v) in self.u.iter().zip(&self.v) {
            w.write_all(&(*u as f32).to_le_bytes())?;
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_flo(mut r: impl Read) -> Result<Self> {
        let fmt = |m: &str| Error::Format {
            kind: "flo",
            message: m.to_string(),
        };
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| fmt("truncated header"))?;
        if &head[0..4] != b"PIEH" {
            return Err(fmt("bad magic"));
        }
        let w = i32::from_le_bytes(head[4..8].try_into().unwrap());
        let h = i32::from_le_bytes(head[8..12].try_into().unwrap());
        if w <= 0 || h <= 0 {
            return Err(fmt("bad dimensions"));
        }
        let (w, h) = (w as usize, h as usize);
        let mut buf = vec![0u8; w * h * 8];
        r.read_exact(&mut buf).map_err(|_| fmt("truncated data"))?;
        let mut out = FlowField::zeros(w, h);
        for (i, c) in buf.chunks_exact(8).enumerate() {
            out.u[i] = f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64;
            out.v[i] = f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64;
        }
        Ok(out)
    }

    pub fn save_flo(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_flo(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub levels: usize,
    pub scale: f64,
    pub warps: usize,
    /// Smoothness weight, in gray levels.
    pub alpha: f64,
    pub inner_iterations: usize,
    /// Weight of the gradient-constancy term; 0 disables it.
    pub gradient_weight: f64,
    /// Local contrast normalization of both images before matching.
    pub normalize: bool,
    /// Gaussian pre-smoothing of every pyramid level, in pixels.
    pub presmooth: f64,
    /// Displacements are clamped to this magnitude.
    pub max_magnitude: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            levels: 4,
            scale: 0.5,
            warps: 5,
            alpha: 15.0,
            inner_iterations: 15,
            gradient_weight: 0.0,
            normalize: false,
            presmooth: 0.8,
            max_magnitude: 32.0,
        }
    }
}

impl FlowConfig {
    /// Settings that tolerate global brightness and contrast changes.
    pub fn robust() -> Self {
        FlowConfig {
            normalize: true,
            gradient_weight: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.levels >= 1
            && self.scale > 0.0
            && self.scale < 1.0
            && self.alpha > 0.0
            && self.gradient_weight >= 0.0
            && self.presmooth >= 0.0
            && self.max_magnitude > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid flow config: {self:?}"
            )))
        }
    }
}

/// Window radius and stabilizer of the local contrast normalization.
const NORM_RADIUS: usize = 7;
const NORM_EPS: f64 = 0.02;
/// Normalized images are rescaled so unit local contrast spans this many
/// gray levels.
pub const NORM_GAIN: f64 = 40.0;

/// Gray conversion in `[0, 255]`, optionally contrast-normalized.
///
/// Also returns the per-pixel derivative of the output w.r.t. the input gray
/// level (in `[0, 1]` units) with the local statistics held fixed.
pub fn flow_gray(img: &RgbImage, normalize: bool) -> (GrayImage, GrayImage) {
    let g = img.to_gray();
    if !normalize {
        let scaled = GrayImage::from_vec(
            g.width(),
            g.height(),
            g.data().iter().map(|v| v * 255.0).collect(),
        );
        return (scaled, GrayImage::new(g.width(), g.height(), 255.0));
    }
    let mean = g.box_mean(NORM_RADIUS);
    let sq = GrayImage::from_vec(
        g.width(),
        g.height(),
        g.data().iter().map(|v| v * v).collect(),
    );
    let mean_sq = sq.box_mean(NORM_RADIUS);
    let n = g.data().len();
    let mut out = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for i in 0..n {
        let m = mean.data()[i];
        let sd = (mean_sq.data()[i] - m * m).max(0.0).sqrt();
        let s = NORM_GAIN / (sd + NORM_EPS);
        out[i] = (g.data()[i] - m) * s;
        slope[i] = s;
    }
    (
        GrayImage::from_vec(g.width(), g.height(), out),
        GrayImage::from_vec(g.width(), g.height(), slope),
    )
}

fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut tmp = vec![0.0; img.data().len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x + k as isize - r).clamp(0, w - 1);
                s += kv * img.data()[(y * w + xx) as usize];
            }
            tmp[(y * w + x) as usize] = s;
        }
    }
    let mut out = vec![0.0; tmp.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y + k as isize - r).clamp(0, h - 1);
                s += kv * tmp[(yy * w + x) as usize];
            }
            out[(y * w + x) as usize] = s;
        }
    }
    GrayImage::from_vec(img.width(), img.height(), out)
}

fn resample(img: &GrayImage, nw: usize, nh: usize) -> GrayImage {
    let sx = img.width() as f64 / nw as f64;
    let sy = img.height() as f64 / nh as f64;
    GrayImage::from_fn(nw, nh, |x, y| {
        img.sample(Vector2::new((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy))
    })
}

fn pyramid(img: &GrayImage, cfg: &FlowConfig) -> Vec<GrayImage> {
    let mut levels = vec![img.clone()];
    for _ in 1..cfg.levels {
        let prev = levels.last().unwrap();
        let nw = (prev.width() as f64 * cfg.scale).round() as usize;
        let nh = (prev.height() as f64 * cfg.scale).round() as usize;
        if nw < 8 || nh < 8 {
            break;
        }
        let blurred = gaussian_blur(prev, 0.5 / cfg.scale * 0.8);
        levels.push(resample(&blurred, nw, nh));
    }
    levels
}

fn upsample_flow(flow: &FlowField, nw: usize, nh: usize) -> FlowField {
    let rx = nw as f64 / flow.width as f64;
    let ry = nh as f64 / flow.height as f64;
    let u = GrayImage::from_vec(flow.width, flow.height, flow.u.clone());
    let v = GrayImage::from_vec(flow.width, flow.height, flow.v.clone());
    let mut out = FlowField::zeros(nw, nh);
    for y in 0..nh {
        for x in 0..nw {
            let p = Vector2::new((x as f64 + 0.5) / rx, (y as f64 + 0.5) / ry);
            out.u[y * nw + x] = u.sample(p) * rx;
            out.v[y * nw + x] = v.sample(p) * ry;
        }
    }
    out
}

fn inside(p: Vector2<f64>, w: usize, h: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= w as f64 && p.y <= h as f64
}

/// Refines `flow` at one pyramid level.
fn refine_level(from: &GrayImage, to: &GrayImage, flow: &mut FlowField, cfg: &FlowConfig) {
    let (w, h) = (to.width(), to.height());
    let n = w * h;
    let (fx, fy) = from.gradient();
    let (tx, ty) = to.gradient();
    let grad_terms = cfg.gradient_weight > 0.0;
    let (fxx, fxy, fyy, txx, txy, tyy) = if grad_terms {
        let (fxx, fxy) = fx.gradient();
        let (_, fyy) = fy.gradient();
        let (txx, txy) = tx.gradient();
        let (_, tyy) = ty.gradient();
        (fxx, fxy, fyy, txx, txy, tyy)
    } else {
        let z = GrayImage::new(1, 1, 0.0);
        (z.clone(), z.clone(), z.clone(), z.clone(), z.clone(), z)
    };
    let alpha2 = cfg.alpha * cfg.alpha;
    let gw = cfg.gradient_weight;
    for _ in 0..cfg.warps {
        let u0 = flow.u.clone();
        let v0 = flow.v.clone();
        // Linearized data term per pixel: J (w - w0) + b, stored as J and b.
        let mut jm = vec![Matrix2::zeros(); n];
        let mut bv = vec![Vector2::zeros(); n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let p = Vector2::new(x as f64 + 0.5 + u0[i], y as f64 + 0.5 + v0[i]);
                if !inside(p, w, h) {
                    continue;
                }
                let it = from.sample(p) - to.data()[i];
                let ix = 0.5 * (fx.sample(p) + tx.data()[i]);
                let iy = 0.5 * (fy.sample(p) + ty.data()[i]);
                let a = Vector2::new(ix, iy);
                let mut j = a * a.transpose();
                let mut b = a * it;
                if grad_terms {
                    let ixt = fx.sample(p) - tx.data()[i];
                    let iyt = fy.sample(p) - ty.data()[i];
                    let ixx = 0.5 * (fxx.sample(p) + txx.data()[i]);
                    let ixy = 0.5 * (fxy.sample(p) + txy.data()[i]);
                    let iyy = 0.5 * (fyy.sample(p) + tyy.data()[i]);
                    let ax = Vector2::new(ixx, ixy);
                    let ay = Vector2::new(ixy, iyy);
                    j += (ax * ax.transpose() + ay * ay.transpose()) * gw;
                    b += (ax * ixt + ay * iyt) * gw;
                }
                jm[i] = j;
                bv[i] = b;
            }
        }
        for _ in 0..cfg.inner_iterations {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let mut su = 0.0;
                    let mut sv = 0.0;
                    let mut cnt = 0.0;
                    let mut add = |k: usize| {
                        su += flow.u[k];
                        sv += flow.v[k];
                        cnt += 1.0;
                    };
                    if x > 0 {
                        add(i - 1);
                    }
                    if x + 1 < w {
                        add(i + 1);
                    }
                    if y > 0 {
                        add(i - w);
                    }
                    if y + 1 < h {
                        add(i + w);
                    }
                    let avg = Vector2::new(su / cnt, sv / cnt);
                    let w0 = Vector2::new(u0[i], v0[i]);
                    // (J + α² I) w = α² avg + J w0 - b
                    let lhs = jm[i] + Matrix2::identity() * alpha2;
                    let rhs = avg * alpha2 + jm[i] * w0 - bv[i];
                    let sol = lhs.try_inverse().map(|m| m * rhs).unwrap_or(avg);
                    let mag = sol.norm();
                    let sol = if mag > cfg.max_magnitude {
                        sol * (cfg.max_magnitude / mag)
                    } else {
                        sol
                    };
                    flow.u[i] = sol.x;
                    flow.v[i] = sol.y;
                }
            }
        }
    }
}

/// Estimates the flow from `from` to `to`; see the module docs for the
/// convention.
pub fn estimate_flow(from: &RgbImage, to: &RgbImage, cfg: &FlowConfig) -> Result<FlowField> {
    cfg.validate()?;
    if from.dims() != to.dims() {
        return Err(Error::DimensionMismatch {
            what: "flow image pair",
            expected: from.width() * from.height(),
            got: to.width() * to.height(),
        });
    }
    let (gf, _) = flow_gray(from, cfg.normalize);
    let (gt, _) = flow_gray(to, cfg.normalize);
    Ok(estimate_flow_gray(&gf, &gt, cfg))
}

/// Flow between two already converted gray images.
pub fn estimate_flow_gray(from: &GrayImage, to: &GrayImage, cfg: &FlowConfig) -> FlowField {
    let pf = pyramid(from, cfg);
    let pt = pyramid(to, cfg);
    let top = pf.len() - 1;
    let mut flow = FlowField::zeros(pf[top].width(), pf[top].height());
    for level in (0..=top).rev() {
        let f = gaussian_blur(&pf[level], cfg.presmooth);
        let t = gaussian_blur(&pt[level], cfg.presmooth);
        if flow.width != t.width() || flow.height != t.height() {
            flow = upsample_flow(&flow, t.width(), t.height());
        }
        refine_level(&f, &t, &mut flow, cfg);
    }
    flow
}

/// `Σ_{u ∈ mask} |w(u)|²`.
pub fn flow_magnitude(flow: &FlowField, mask: &VisibilityMask) -> f64 {
    assert_eq!(
        (flow.width, flow.height),
        (mask.width(), mask.height()),
        "mask size mismatch"
    );
    (0..flow.u.len())
        .filter(|&i| mask.contains(i))
        .map(|i| flow.u[i] * flow.u[i] + flow.v[i] * flow.v[i])
        .sum()
}

/// Backward warp: `out(x) = image(x + w(x))`, bilinear with border clamping.
pub fn warp_image(image: &RgbImage, flow: &FlowField) -> RgbImage {
    assert_eq!(
        image.dims(),
        (flow.width, flow.height),
        "flow size mismatch"
    );
    let w = image.width();
    RgbImage::from_fn(w, image.height(), |x, y| {
        let i = y * w + x;
        image.sample(Vector2::new(
            x as f64 + 0.5 + flow.u[i],
            y as f64 + 0.5 + flow.v[i],
        ))
    })
}

/// Bilinear taps of `image` at `x + w(x)` for one pixel.
pub(crate) fn warp_taps(flow: &FlowField, idx: usize) -> crate::imaging::Taps {
    let x = idx % flow.width;
    let y = idx / flow.width;
    bilinear_taps(
        flow.width,
        flow.height,
        Vector2::new(x as f64 + 0.5 + flow.u[idx], y as f64 + 0.5 + flow.v[idx]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture: a sum of random sinusoids.
    pub(crate) fn texture(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..12)
            .map(|_| {
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.15..0.6);
                (
                    freq * ang.cos(),
                    freq * ang.sin(),
                    rng.random_range(0.0..6.3),
                    rng.random_range(0.02..0.06),
                )
            })
            .collect();
        RgbImage::from_fn(w, h, |x, y| {
            let mut g = 0.5;
            for &(a, b, ph, amp) in &waves {
                g += amp * (a * x as f64 + b * y as f64 + ph).sin();
            }
            let g = g.clamp(0.0, 1.0);
            [g, g, g]
        })
    }

    fn shifted(img: &RgbImage, dx: i64, dy: i64) -> RgbImage {
        let (w, h) = img.dims();
        RgbImage::from_fn(w, h, |x, y| {
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            img.get(sx, sy)
        })
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn identical_images_give_near_zero_flow() {
        let img = texture(64, 64, 1);
        let f = estimate_flow(&img, &img, &FlowConfig::default()).unwrap();
        assert!(f.max_magnitude() < 0.05);
    }

    #[test]
    fn recovers_integer_shift() {
        let img = texture(80, 80, 2);
        // to(x) = img(x - d) = from(x - d): flow is -d.
        let to = shifted(&img, 3, 0);
        let f = estimate_flow(&img, &to, &FlowConfig::default()).unwrap();
        let mut errs = Vec::new();
        for y in 10..70 {
            for x in 10..70 {
                let i = y * 80 + x;
                errs.push(((f.u[i] + 3.0).powi(2) + f.v[i].powi(2)).sqrt());
            }
        }
        let m = median(errs);
        assert!(m < 0.25, "median error {m}");
    }

    #[test]
    fn recovers_shifts_up_to_eight_pixels() {
        let img = texture(96, 96, 8);
        for (dx, dy) in [(8, 0), (0, -8), (5, 5), (-6, 3), (-8, -1)] {
            let to = shifted(&img, dx, dy);
            let f = estimate_flow(&img, &to, &FlowConfig::default()).unwrap();
            let mut errs = Vec::new();
            for y in 12..84 {
                for x in 12..84 {
                    let i = y * 96 + x;
                    errs.push(((f.u[i] + dx as f64).powi(2) + (f.v[i] + dy as f64).powi(2)).sqrt());
                }
            }
            let m = median(errs);
            assert!(m < 0.25, "shift ({dx}, {dy}): median error {m}");
        }
    }

    #[test]
    fn brightness_change_is_tolerated_with_normalization() {
        let img = texture(64, 64, 3);
        let bright = img.scaled_intensity(1.5);
        let f = estimate_flow(&img, &bright, &FlowConfig::robust()).unwrap();
        let mags: Vec<f64> = (0..64 * 64).map(|i| f.at(i).norm()).collect();
        assert!(median(mags) < 0.5);
    }

    #[test]
    fn flow_reduces_residual() {
        let img = texture(64, 64, 4);
        let to = shifted(&img, 2, -1);
        let f = estimate_flow(&img, &to, &FlowConfig::default()).unwrap();
        let warped = warp_image(&img, &f);
        let err = |a: &RgbImage| -> f64 {
            a.pixels()
                .iter()
                .zip(to.pixels())
                .map(|(p, q)| (p[0] - q[0]).abs())
                .sum::<f64>()
        };
        assert!(err(&warped) <= err(&img));
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let a = RgbImage::new(8, 8, [0.0; 3]);
        let b = RgbImage::new(9, 8, [0.0; 3]);
        assert!(estimate_flow(&a, &b, &FlowConfig::default()).is_err());
    }

    #[test]
    fn magnitude_closed_forms_and_loop_oracle() {
        let m = VisibilityMask::new(10, 10, true);
        assert_eq!(flow_magnitude(&FlowField::zeros(10, 10), &m), 0.0);
        let ones = FlowField::uniform(10, 10, Vector2::new(1.0, 1.0));
        let band = VisibilityMask::from_vec(10, 10, (0..100).map(|i| i < 37).collect());
        assert_eq!(flow_magnitude(&ones, &band), 74.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = FlowField::zeros(10, 10);
        for i in 0..100 {
            f.u[i] = rng.random_range(-3.0..3.0);
            f.v[i] = rng.random_range(-3.0..3.0);
        }
        let mut want = 0.0;
        for y in 0..10 {
            for x in 0..10 {
                if band.get(x, y) {
                    want += f.u[y * 10 + x].powi(2) + f.v[y * 10 + x].powi(2);
                }
            }
        }
        assert!((flow_magnitude(&f, &band) - want).abs() < 1e-12);
    }

    #[test]
    fn warp_zero_and_integer_flow() {
        let img = texture(16, 12, 6);
        assert_eq!(warp_image(&img, &FlowField::zeros(16, 12)), img);
        let out = warp_image(&img, &FlowField::uniform(16, 12, Vector2::new(1.0, 0.0)));
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(out.get(x, y), img.get((x + 1).min(15), y));
            }
        }
    }

    #[test]
    fn warp_matches_four_tap_oracle() {
        let img = texture(20, 20, 7);
        let mut f = FlowField::zeros(20, 20);
        for y in 0..20 {
            for x in 0..20 {
                f.u[y * 20 + x] = 1.3 * ((x as f64) * 0.2).sin();
                f.v[y * 20 + x] = 0.7 * ((y as f64) * 0.3).cos();
            }
        }
        let out = warp_image(&img, &f);
        for y in 2..18 {
            for x in 2..18 {
                let i = y * 20 + x;
                let px = x as f64 + f.u[i];
                let py = y as f64 + f.v[i];
                let (x0, y0) = (px.floor(), py.floor());
                let (ax, ay) = (px - x0, py - y0);
                let g = |xx: f64, yy: f64| {
                    img.get(xx.clamp(0.0, 19.0) as usize, yy.clamp(0.0, 19.0) as usize)[1]
                };
                let want = g(x0, y0) * (1.0 - ax) * (1.0 - ay)
                    + g(x0 + 1.0, y0) * ax * (1.0 - ay)
                    + g(x0, y0 + 1.0) * (1.0 - ax) * ay
                    + g(x0 + 1.0, y0 + 1.0) * ax * ay;
                assert!((out.get(x, y)[1] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flo_round_trip() {
        let mut f = FlowField::zeros(3, 2);
        f.u[4] = 1.5;
        f.v[1] = -2.25;
        let mut buf = Vec::new();
        f.write_flo(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"PIEH");
        assert_eq!(FlowField::read_flo(&buf[..]).unwrap(), f);
    }
}
