//! Photometric consistency over the union of two masks.

use crate::imaging::{Rgb, RgbImage};
use crate::render::VisibilityMask;

use super::Reduction;

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoTerm {
    pub value: f64,
    /// `∂L/∂rendered` per pixel and channel.
    pub d_rendered: Vec<Rgb>,
    pub union_count: usize,
    pub warning: Option<String>,
}

/// `Σ_{u ∈ M_obs ∪ M_rend} ‖obs[u] − rend[u]‖²`, divided by the union size
/// under [`Reduction::Mean`]. An empty union yields 0 and a warning.
pub fn photometric_loss(
    observed: &RgbImage,
    rendered: &RgbImage,
    mask_obs: &VisibilityMask,
    mask_rend: &VisibilityMask,
    reduction: Reduction,
) -> PhotoTerm {
    assert_eq!(observed.dims(), rendered.dims(), "image size mismatch");
    let union = mask_obs.union(mask_rend);
    let n = union.count();
    let mut d_rendered = vec![[0.0; 3]; observed.width() * observed.height()];
    if n == 0 {
        return PhotoTerm {
            value: 0.0,
            d_rendered,
            union_count: 0,
            warning: Some("empty photometric mask union".into()),
        };
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum => 1.0,
    };
    let mut value = 0.0;
    for (i, (o, r)) in observed.pixels().iter().zip(rendered.pixels()).enumerate() {
        if !union.contains(i) {
            continue;
        }
        for c in 0..3 {
            let d = r[c] - o[c];
            value += d * d * scale;
            d_rendered[i][c] = 2.0 * d * scale;
        }
    }
    PhotoTerm {
        value,
        d_rendered,
        union_count: n,
        warning: None,
    }
}
