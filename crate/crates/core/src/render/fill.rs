//! Deterministic background pattern for flow estimation.
//!
//! Pixels outside a mask are replaced by a checkerboard of 8-pixel cells with
//! random gray levels plus per-pixel noise. The pattern depends only on the
//! seed and the pixel position, so two images filled with the same seed agree
//! exactly outside their masks and carry strong texture for flow to lock on.

use crate::imaging::{Rgb, RgbImage};

use super::mask::VisibilityMask;

pub const CELL: usize = 8;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(seed: u64, a: u64, b: u64, salt: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(a.wrapping_mul(0x1_0000_0001) ^ splitmix(b ^ (salt << 48))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Pattern color at pixel `(x, y)`.
pub fn pattern_color(seed: u64, x: usize, y: usize) -> Rgb {
    let (cx, cy) = ((x / CELL) as u64, (y / CELL) as u64);
    let base = if (cx + cy) % 2 == 0 { 0.2 } else { 0.8 };
    let cell = 0.15 * (unit(seed, cx, cy, 1) - 0.5);
    let noise = 0.1 * (unit(seed, x as u64, y as u64, 2) - 0.5);
    let g = (base + cell + noise).clamp(0.0, 1.0);
    [g, g, g]
}

/// Replaces pixels outside `mask` by the seeded pattern.
pub fn fill_background(image: &RgbImage, mask: &VisibilityMask, seed: u64) -> RgbImage {
    assert_eq!(
        image.dims(),
        (mask.width(), mask.height()),
        "mask size mismatch"
    );
    let w = image.width();
    RgbImage::from_fn(w, image.height(), |x, y| {
        if mask.get(x, y) {
            image.get(x, y)
        } else {
            pattern_color(seed, x, y)
        }
    })
}
