//! Bi-directional flow alignment.
//!
//! Both images are filled with the shared background pattern outside their
//! masks, then two flows are estimated: `w1 = F(obs, rend)` on the rendered
//! grid and `w2 = F(rend, obs)` on the observed grid. The loss is
//! `Σ_{u ∈ M_obs ∪ M_rend} |w1(u)|² + |w2(u)|²`.
//!
//! Flow estimation is not differentiated. Instead each flow is linearized
//! around the build point: a change `ΔR` of the rendered gray levels shifts
//! the flow by the least-squares displacement that explains it,
//!
//! * `w1(x) + k1(x) ΔR(x)` with `k1 = s(x) ∇Ô(x + w1) / (|∇Ô|² + ε)`,
//! * `w2(x) − ∇R̂(x + w2) / (|∇R̂|² + ε) · Σ_taps β s ΔR`,
//!
//! where hats denote the (optionally contrast-normalized) flow images, `s` the
//! derivative of the normalized rendered image w.r.t. its gray level and `β`
//! the bilinear taps at `x + w2`. At the build point the linearized loss equals
//! the flow loss exactly. Rendered pixels outside the rendered mask carry the
//! background pattern and do not vary.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::flow::{estimate_flow_gray, flow_gray, warp_taps, FlowConfig, FlowField};
use crate::imaging::{Rgb, RgbImage, Taps};
use crate::render::{fill_background, VisibilityMask};

use super::Reduction;

#[derive(Clone, Debug)]
pub struct AlignmentLinearization {
    union: VisibilityMask,
    mask_rend: VisibilityMask,
    gray0: Vec<f64>,
    slope: Vec<f64>,
    forward: FlowField,
    backward: FlowField,
    k1: Vec<Vector2<f64>>,
    k2: Vec<Vector2<f64>>,
    taps2: Vec<Option<Taps>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignTerm {
    pub value: f64,
    pub d_rendered: Vec<Rgb>,
    pub warning: Option<String>,
}

impl AlignmentLinearization {
    /// Fills both images, estimates both flows and freezes the linearization.
    pub fn build(
        observed: &RgbImage,
        rendered: &RgbImage,
        mask_obs: &VisibilityMask,
        mask_rend: &VisibilityMask,
        fill_seed: u64,
        cfg: &FlowConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if observed.dims() != rendered.dims() {
            return Err(Error::DimensionMismatch {
                what: "alignment image pair",
                expected: observed.width() * observed.height(),
                got: rendered.width() * rendered.height(),
            });
        }
        let (w, h) = observed.dims();
        let obs_f = fill_background(observed, mask_obs, fill_seed);
        let rend_f = fill_background(rendered, mask_rend, fill_seed);
        let (on, _) = flow_gray(&obs_f, cfg.normalize);
        let (rn, slope) = flow_gray(&rend_f, cfg.normalize);
        let forward = estimate_flow_gray(&on, &rn, cfg);
        let backward = estimate_flow_gray(&rn, &on, cfg);
        let (ogx, ogy) = on.gradient();
        let (rgx, rgy) = rn.gradient();
        let eps = cfg.alpha * cfg.alpha;
        let union = mask_obs.union(mask_rend);
        let n = w * h;
        let mut k1 = vec![Vector2::zeros(); n];
        let mut k2 = vec![Vector2::zeros(); n];
        let mut taps2 = vec![None; n];
        for i in 0..n {
            if !union.contains(i) {
                continue;
            }
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let p1 = Vector2::new(x + forward.u[i], y + forward.v[i]);
            let g1 = Vector2::new(ogx.sample(p1), ogy.sample(p1));
            k1[i] = g1 * (slope.data()[i] / (g1.norm_squared() + eps));
            let p2 = Vector2::new(x + backward.u[i], y + backward.v[i]);
            let g2 = Vector2::new(rgx.sample(p2), rgy.sample(p2));
            k2[i] = -g2 / (g2.norm_squared() + eps);
            taps2[i] = Some(warp_taps(&backward, i));
        }
        Ok(AlignmentLinearization {
            union,
            mask_rend: mask_rend.clone(),
            gray0: rendered.to_gray().data().to_vec(),
            slope: slope.data().to_vec(),
            forward,
            backward,
            k1,
            k2,
            taps2,
        })
    }

    pub fn forward_flow(&self) -> &FlowField {
        &self.forward
    }

    pub fn backward_flow(&self) -> &FlowField {
        &self.backward
    }

    pub fn union(&self) -> &VisibilityMask {
        &self.union
    }

    /// Linearized loss and its gradient w.r.t. the rendered pixels.
    pub fn evaluate(&self, rendered: &RgbImage, reduction: Reduction) -> AlignTerm {
        let n = self.gray0.len();
        assert_eq!(rendered.pixels().len(), n, "image size mismatch");
        let mut d_rendered = vec![[0.0; 3]; n];
        let count = self.union.count();
        if count == 0 {
            return AlignTerm {
                value: 0.0,
                d_rendered,
                warning: Some("empty alignment mask union".into()),
            };
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        // ΔR in gray units, zero outside the rendered mask.
        let delta: Vec<f64> = rendered
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if self.mask_rend.contains(i) {
                    (p[0] + p[1] + p[2]) / 3.0 - self.gray0[i]
                } else {
                    0.0
                }
            })
            .collect();
        let mut value = 0.0;
        let mut d_gray = vec![0.0; n];
        for i in 0..n {
            if !self.union.contains(i) {
                continue;
            }
            let e1 = self.forward.at(i) + self.k1[i] * delta[i];
            value += e1.norm_squared() * scale;
            if self.mask_rend.contains(i) {
                d_gray[i] += 2.0 * scale * e1.dot(&self.k1[i]);
            }
            let taps = self.taps2[i].as_ref().expect("taps exist on the union");
            let mut c = 0.0;
            for t in 0..4 {
                let j = taps.idx[t];
                c += taps.w[t] * self.slope[j] * delta[j];
            }
            let e2 = self.backward.at(i) + self.k2[i] * c;
            value += e2.norm_squared() * scale;
            let g = 2.0 * scale * e2.dot(&self.k2[i]);
            if g != 0.0 {
                for t in 0..4 {
                    let j = taps.idx[t];
                    if self.mask_rend.contains(j) {
                        d_gray[j] += g * taps.w[t] * self.slope[j];
                    }
                }
            }
        }
        for (d, g) in d_rendered.iter_mut().zip(&d_gray) {
            *d = [g / 3.0; 3];
        }
        AlignTerm {
            value,
            d_rendered,
            warning: None,
        }
    }
}

/// Builds the linearization and evaluates it at the build point.
pub fn alignment_loss(
    observed: &RgbImage,
    rendered: &RgbImage,
    mask_obs: &VisibilityMask,
    mask_rend: &VisibilityMask,
    fill_seed: u64,
    cfg: &FlowConfig,
    reduction: Reduction,
) -> Result<AlignTerm> {
    let lin =
        AlignmentLinearization::build(observed, rendered, mask_obs, mask_rend, fill_seed, cfg)?;
    Ok(lin.evaluate(rendered, reduction))
}
