//! Loss terms and their gradients.
//!
//! Supervised objective: `λ1·landmark + λ2·pose + λ3·3dmm + λ4·reg`.
//! Self-supervised objective: `λ5·landmark + λ6·photo + λ7·align`, with the
//! photometric and alignment terms summed over directed view pairs and the
//! landmark term summed over views.
//!
//! Every term can be normalized by its pixel or landmark count
//! ([`Reduction::Mean`], the default) or left as a plain sum.

pub mod align;
pub mod landmark;
pub mod photo;
pub mod selfsup;
pub mod supervised;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::model::{MorphableModel, ShapeParams};

pub use align::{alignment_loss, AlignmentLinearization};
pub use landmark::{landmark_loss, LandmarkTerm};
pub use photo::{photometric_loss, PhotoTerm};
pub use selfsup::{
    default_pairs, selfsup_total, Linearization, Observation, SelfSupConfig, ViewPair,
};
pub use supervised::{param_supervision_losses, reg_loss, supervised_total, SupervisionTerms};

/// Term weights. Defaults: λ1=0.1, λ2=10, λ3=1, λ4=1, λ5=1, λ6=10, λ7=0.1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sup_landmark: f64,
    pub pose: f64,
    pub mm: f64,
    pub reg: f64,
    pub landmark: f64,
    pub photo: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sup_landmark: 0.1,
            pose: 10.0,
            mm: 1.0,
            reg: 1.0,
            landmark: 1.0,
            photo: 10.0,
            align: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sup_landmark,
            self.pose,
            self.mm,
            self.reg,
            self.landmark,
            self.photo,
            self.align,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )))
        }
    }
}

/// How sums over pixels or landmarks are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Gradient w.r.t. shape coefficients and per-view poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGradient {
    #[serde(with = "crate::model::plain_vector")]
    pub id: DVector<f64>,
    #[serde(with = "crate::model::plain_vector")]
    pub exp: DVector<f64>,
    pub poses: Vec<[f64; 6]>,
}

impl ParamGradient {
    pub fn zeros(id_dims: usize, exp_dims: usize, views: usize) -> Self {
        ParamGradient {
            id: DVector::zeros(id_dims),
            exp: DVector::zeros(exp_dims),
            poses: vec![[0.0; 6]; views],
        }
    }

    pub fn for_model(model: &MorphableModel, views: usize) -> Self {
        Self::zeros(model.id_dims(), model.exp_dims(), views)
    }

    pub fn len(&self) -> usize {
        self.id.len() + self.exp.len() + 6 * self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat layout: `[id, exp, pose_0, pose_1, ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.id.iter());
        v.extend(self.exp.iter());
        for p in &self.poses {
            v.extend(p.iter());
        }
        v
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, s: f64) {
        self.id.axpy(s, &other.id, 1.0);
        self.exp.axpy(s, &other.exp, 1.0);
        for (a, b) in self.poses.iter_mut().zip(&other.poses) {
            for k in 0..6 {
                a[k] += s * b[k];
            }
        }
    }

    pub fn scaled(&self, s: f64) -> ParamGradient {
        let mut out = self.clone();
        out.id *= s;
        out.exp *= s;
        for p in &mut out.poses {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Adds a flat `3V` vertex gradient through the model bases.
    pub fn add_vertex_gradient(&mut self, model: &MorphableModel, flat: &DVector<f64>) {
        let (gi, ge) = model.project_vertex_gradient(flat);
        self.id += gi;
        self.exp += ge;
    }
}

/// Shape coefficients plus per-view poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub shape: ShapeParams,
    pub poses: Vec<CameraPose>,
}

impl Params {
    /// Flat layout matching [`ParamGradient::to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .shape
            .id
            .iter()
            .chain(self.shape.exp.iter())
            .copied()
            .collect();
        for p in &self.poses {
            v.extend(p.to_array());
        }
        v
    }

    pub fn from_vec(&self, flat: &[f64]) -> Params {
        let (ni, ne) = (self.shape.id.len(), self.shape.exp.len());
        assert_eq!(
            flat.len(),
            ni + ne + 6 * self.poses.len(),
            "parameter vector length"
        );
        let shape = ShapeParams {
            id: DVector::from_column_slice(&flat[..ni]),
            exp: DVector::from_column_slice(&flat[ni..ni + ne]),
        };
        let poses = (0..self.poses.len())
            .map(|k| {
                let o = ni + ne + 6 * k;
                CameraPose::from_array(flat[o..o + 6].try_into().unwrap())
            })
            .collect();
        Params { shape, poses }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Value of one named term, skipped terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<f64>,
    #[serde(default, rename = "3dmm", skip_serializing_if = "Option::is_none")]
    pub mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
}

/// Term values, weights, weighted total and gradients of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: TermValues,
    pub weights: TermValues,
    pub total: f64,
    #[serde(skip)]
    pub gradient: Option<ParamGradient>,
    /// Unweighted per-term gradients, in the order landmark, pose, 3dmm,
    /// reg, photo, align; absent for skipped terms.
    #[serde(skip)]
    pub term_gradients: Vec<(&'static str, ParamGradient)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl LossReport {
    pub(crate) fn new() -> Self {
        LossReport {
            terms: TermValues::default(),
            weights: TermValues::default(),
            total: 0.0,
            gradient: None,
            term_gradients: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// `Σ weight · term` over the present terms.
    pub fn weighted_sum(&self) -> f64 {
        let t = &self.terms;
        let w = &self.weights;
        [
            (t.landmark, w.landmark),
            (t.pose, w.pose),
            (t.mm, w.mm),
            (t.reg, w.reg),
            (t.photo, w.photo),
            (t.align, w.align),
        ]
        .iter()
        .map(|(v, w)| v.unwrap_or(0.0) * w.unwrap_or(0.0))
        .sum()
    }

    pub fn term_gradient(&self, name: &str) -> Option<&ParamGradient> {
        self.term_gradients
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g)
    }
}
