//! Parameter supervision, regularization and the supervised total.

use nalgebra::{DVector, Vector2};

use crate::error::{Error, Result};
use crate::model::{assemble_shape, MorphableModel, ShapeParams};

use super::landmark::landmark_loss;
use super::{LossReport, LossWeights, ParamGradient, Params, Reduction};

/// Normalization applied to pose parameters before comparison: angles by π,
/// scale and translation by the image diagonal.
fn pose_scales(diag: f64) -> [f64; 6] {
    let pi = std::f64::consts::PI;
    [
        1.0 / diag,
        1.0 / pi,
        1.0 / pi,
        1.0 / pi,
        1.0 / diag,
        1.0 / diag,
    ]
}

/// Pose and 3DMM supervision values with gradients w.r.t. the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTerms {
    pub pose: f64,
    pub mm: f64,
    pub d_pose: Vec<[f64; 6]>,
    pub d_id: DVector<f64>,
    pub d_exp: DVector<f64>,
}

/// Mean squared differences of normalized poses and of raw coefficients.
pub fn param_supervision_losses(
    pred: &Params,
    truth: &Params,
    diag: f64,
) -> Result<SupervisionTerms> {
    Error::check_dim("views", truth.poses.len(), pred.poses.len())?;
    Error::check_dim(
        "identity coefficients",
        truth.shape.id.len(),
        pred.shape.id.len(),
    )?;
    Error::check_dim(
        "expression coefficients",
        truth.shape.exp.len(),
        pred.shape.exp.len(),
    )?;
    let sc = pose_scales(diag);
    let n_pose = (6 * pred.poses.len()).max(1) as f64;
    let mut pose = 0.0;
    let mut d_pose = vec![[0.0; 6]; pred.poses.len()];
    for (v, (p, t)) in pred.poses.iter().zip(&truth.poses).enumerate() {
        let (pa, ta) = (p.to_array(), t.to_array());
        for k in 0..6 {
            let d = (pa[k] - ta[k]) * sc[k];
            pose += d * d / n_pose;
            d_pose[v][k] = 2.0 * d * sc[k] / n_pose;
        }
    }
    let n_mm = (pred.shape.id.len() + pred.shape.exp.len()).max(1) as f64;
    let di = &pred.shape.id - &truth.shape.id;
    let de = &pred.shape.exp - &truth.shape.exp;
    let mm = (di.norm_squared() + de.norm_squared()) / n_mm;
    Ok(SupervisionTerms {
        pose,
        mm,
        d_pose,
        d_id: di * (2.0 / n_mm),
        d_exp: de * (2.0 / n_mm),
    })
}

/// `Σ (x_id/σ_id)² + Σ (x_exp/σ_exp)²` and its gradient `2x/σ²`.
pub fn reg_loss(
    params: &ShapeParams,
    model: &MorphableModel,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    Error::check_dim("identity coefficients", model.id_dims(), params.id.len())?;
    Error::check_dim(
        "expression coefficients",
        model.exp_dims(),
        params.exp.len(),
    )?;
    let zi = params.id.component_div(model.id_sigma());
    let ze = params.exp.component_div(model.exp_sigma());
    let value = zi.norm_squared() + ze.norm_squared();
    let gi = zi.component_div(model.id_sigma()) * 2.0;
    let ge = ze.component_div(model.exp_sigma()) * 2.0;
    Ok((value, gi, ge))
}

/// `λ1·landmark + λ2·pose + λ3·3dmm + λ4·reg` with gradients w.r.t. `pred`.
pub fn supervised_total(
    model: &MorphableModel,
    pred: &Params,
    truth: &Params,
    landmarks: &[Vec<Vector2<f64>>],
    weights: &LossWeights,
    diag: f64,
    reduction: Reduction,
) -> Result<LossReport> {
    weights.validate()?;
    Error::check_dim("landmark sets", pred.poses.len(), landmarks.len())?;
    let views = pred.poses.len();
    let mesh = assemble_shape(model, &pred.shape)?;
    let mut report = LossReport::new();

    let mut g_lm = ParamGradient::for_model(model, views);
    let mut flat = DVector::zeros(3 * model.vertex_count());
    let mut lm = 0.0;
    for (v, (pose, obs)) in pred.poses.iter().zip(landmarks).enumerate() {
        let t = landmark_loss(&mesh, pose, obs, diag, reduction)?;
        lm += t.value;
        for (vi, g) in &t.d_vertices {
            for c in 0..3 {
                flat[3 * vi + c] += g[c];
            }
        }
        g_lm.poses[v] = t.d_pose;
    }
    g_lm.add_vertex_gradient(model, &flat);

    let sup = param_supervision_losses(pred, truth, diag)?;
    let mut g_pose = ParamGradient::for_model(model, views);
    g_pose.poses = sup.d_pose.clone();
    let mut g_mm = ParamGradient::for_model(model, views);
    g_mm.id = sup.d_id.clone();
    g_mm.exp = sup.d_exp.clone();

    let (reg, gi, ge) = reg_loss(&pred.shape, model)?;
    let mut g_reg = ParamGradient::for_model(model, views);
    g_reg.id = gi;
    g_reg.exp = ge;

    report.terms.landmark = Some(lm);
    report.terms.pose = Some(sup.pose);
    report.terms.mm = Some(sup.mm);
    report.terms.reg = Some(reg);
    report.weights.landmark = Some(weights.sup_landmark);
    report.weights.pose = Some(weights.pose);
    report.weights.mm = Some(weights.mm);
    report.weights.reg = Some(weights.reg);

    let mut total = ParamGradient::for_model(model, views);
    total.add_scaled(&g_lm, weights.sup_landmark);
    total.add_scaled(&g_pose, weights.pose);
    total.add_scaled(&g_mm, weights.mm);
    total.add_scaled(&g_reg, weights.reg);
    report.total = report.weighted_sum();
    report.gradient = Some(total);
    report.term_gradients = vec![
        ("landmark", g_lm),
        ("pose", g_pose),
        ("3dmm", g_mm),
        ("reg", g_reg),
    ];
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project_vertex, CameraPose};
    use crate::model::generate_synthetic_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nudged(p: &CameraPose, k: usize, d: f64) -> CameraPose {
        let mut a = p.to_array();
        a[k] += d;
        CameraPose::from_array(a)
    }

    fn truth(model: &MorphableModel) -> Params {
        Params {
            shape: ShapeParams::for_model(model),
            poses: vec![
                CameraPose::new(50.0, 0.0, -0.5, 0.0, 64.0, 64.0),
                CameraPose::new(52.0, 0.05, 0.0, 0.01, 63.0, 65.0),
                CameraPose::new(49.0, -0.02, 0.5, 0.0, 64.0, 63.0),
            ],
        }
    }

    fn landmarks(model: &MorphableModel, p: &Params) -> Vec<Vec<Vector2<f64>>> {
        let mesh = assemble_shape(model, &p.shape).unwrap();
        p.poses
            .iter()
            .map(|pose| {
                mesh.landmarks()
                    .iter()
                    .map(|v| project_vertex(v, pose))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn equal_prediction_and_truth_give_zero() {
        let model = generate_synthetic_model(1, 400, 4, 3).unwrap();
        let t = truth(&model);
        let s = param_supervision_losses(&t, &t, 181.0).unwrap();
        assert_eq!((s.pose, s.mm), (0.0, 0.0));
        let lm = landmarks(&model, &t);
        let r = supervised_total(
            &model,
            &t,
            &t,
            &lm,
            &LossWeights::default(),
            181.0,
            Reduction::Mean,
        )
        .unwrap();
        assert!(r.total < 1e-20);
    }

    #[test]
    fn single_coefficient_offset_closed_form() {
        let model = generate_synthetic_model(1, 400, 4, 3).unwrap();
        let t = truth(&model);
        let mut p = t.clone();
        p.shape.exp[1] += 0.3;
        let s = param_supervision_losses(&p, &t, 181.0).unwrap();
        assert!((s.mm - 0.09 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn supervision_matches_loop_oracle() {
        let model = generate_synthetic_model(1, 400, 4, 3).unwrap();
        let t = truth(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = t.clone();
        for v in p.shape.id.iter_mut().chain(p.shape.exp.iter_mut()) {
            *v += rng.random_range(-1.0..1.0);
        }
        for pose in &mut p.poses {
            *pose =
                CameraPose::from_array(pose.to_array().map(|x| x + rng.random_range(-0.1..0.1)));
        }
        let diag = 181.0;
        let s = param_supervision_losses(&p, &t, diag).unwrap();
        let mut mm = 0.0;
        let mut n = 0.0;
        for i in 0..4 {
            mm += (p.shape.id[i] - t.shape.id[i]).powi(2);
            n += 1.0;
        }
        for i in 0..3 {
            mm += (p.shape.exp[i] - t.shape.exp[i]).powi(2);
            n += 1.0;
        }
        assert!((s.mm - mm / n).abs() < 1e-14);
        let mut pose = 0.0;
        let pi = std::f64::consts::PI;
        for v in 0..3 {
            let (a, b) = (p.poses[v], t.poses[v]);
            pose += ((a.f - b.f) / diag).powi(2)
                + ((a.alpha - b.alpha) / pi).powi(2)
                + ((a.beta - b.beta) / pi).powi(2)
                + ((a.gamma - b.gamma) / pi).powi(2)
                + ((a.tx - b.tx) / diag).powi(2)
                + ((a.ty - b.ty) / diag).powi(2);
        }
        assert!((s.pose - pose / 18.0).abs() < 1e-14);
    }

    #[test]
    fn reg_closed_forms_and_gradient() {
        let model = generate_synthetic_model(1, 400, 4, 3).unwrap();
        let zero = ShapeParams::for_model(&model);
        assert_eq!(reg_loss(&zero, &model).unwrap().0, 0.0);
        let p = ShapeParams {
            id: model.id_sigma().clone(),
            exp: DVector::zeros(3),
        };
        assert!((reg_loss(&p, &model).unwrap().0 - 4.0).abs() < 1e-12);
        let p = ShapeParams {
            id: DVector::from_vec(vec![0.01, -0.02, 0.03, 0.0]),
            exp: DVector::from_vec(vec![0.005, 0.0, -0.01]),
        };
        let (_, gi, ge) = reg_loss(&p, &model).unwrap();
        let h = 1e-7;
        for i in 0..4 {
            let mut a = p.clone();
            a.id[i] += h;
            let mut b = p.clone();
            b.id[i] -= h;
            let fd =
                (reg_loss(&a, &model).unwrap().0 - reg_loss(&b, &model).unwrap().0) / (2.0 * h);
            assert!((fd - gi[i]).abs() <= 1e-6 * gi[i].abs().max(1.0));
            assert!((gi[i] - 2.0 * p.id[i] / model.id_sigma()[i].powi(2)).abs() < 1e-9);
        }
        assert!((ge[0] - 2.0 * 0.005 / model.exp_sigma()[0].powi(2)).abs() < 1e-9);
    }

    #[test]
    fn total_matches_hand_sum_and_fd() {
        let model = generate_synthetic_model(1, 400, 4, 3).unwrap();
        let t = truth(&model);
        let lm = landmarks(&model, &t);
        let mut p = t.clone();
        p.shape.id[0] = 0.05;
        p.shape.exp[2] = -0.02;
        p.poses[1] = nudged(&p.poses[1], 4, 2.0);
        p.poses[2] = nudged(&p.poses[2], 2, 0.05);
        let w = LossWeights::default();
        let r = supervised_total(&model, &p, &t, &lm, &w, 181.0, Reduction::Mean).unwrap();
        let hand = 0.1 * r.terms.landmark.unwrap()
            + 10.0 * r.terms.pose.unwrap()
            + r.terms.mm.unwrap()
            + r.terms.reg.unwrap();
        assert!((r.total - hand).abs() < 1e-10);
        assert!(r.total > 0.0);
        let g = r.gradient.unwrap().to_vec();
        let x = p.to_vec();
        let f = |x: &[f64]| {
            supervised_total(&model, &p.from_vec(x), &t, &lm, &w, 181.0, Reduction::Mean)
                .unwrap()
                .total
        };
        for k in 0..x.len() {
            let h = 1e-5 * x[k].abs().max(1.0);
            let mut a = x.clone();
            a[k] += h;
            let mut b = x.clone();
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let scale = fd.abs().max(g[k].abs());
            if scale > 1e-8 {
                assert!(
                    (fd - g[k]).abs() / scale < 1e-4,
                    "coord {k}: fd {fd} an {}",
                    g[k]
                );
            }
        }
    }
}
