//! Residuals of the smoothing problem and their Jacobians with respect to
//! the right-perturbed keyframe error states and the extrinsics rotation.

use nalgebra::{SMatrix, SVector};

use crate::geometry::{
    project, project_jacobian, right_jacobian_inv, skew, so3_exp, so3_log, Extrinsics, GeometryError, Mat3, Quat,
    Vec2, Vec3,
};
use crate::model::{block, state_boxminus, CornerMeasurement, NominalState, Vec6};

use super::preint::PreintegratedImu;

pub type Vec9 = SVector<f64, 9>;
pub type Mat9x15 = SMatrix<f64, 9, 15>;
pub type Mat6x15 = SMatrix<f64, 6, 15>;
pub type Mat2x15 = SMatrix<f64, 2, 15>;
pub type Mat2x3 = SMatrix<f64, 2, 3>;

fn rot(q: &Quat) -> Mat3 {
    q.to_rotation_matrix().into_inner()
}

/// Increments at the bias of `x_k`, first-order corrected when it differs
/// from the preintegration's linearization point.
fn corrected_increments(x_k: &NominalState, pre: &PreintegratedImu) -> (Vec3, Vec3, Quat) {
    let dba = x_k.b_a - pre.bias_a;
    let dbw = x_k.b_w - pre.bias_w;
    if dba == Vec3::zeros() && dbw == Vec3::zeros() {
        return (pre.dp, pre.dv, pre.dq);
    }
    (
        pre.dp + pre.dp_dba * dba + pre.dp_dbw * dbw,
        pre.dv + pre.dv_dba * dba + pre.dv_dbw * dbw,
        pre.dq * so3_exp(&(pre.dr_dbw * dbw)),
    )
}

/// Position, velocity and log-attitude discrepancy between two keyframes and
/// the preintegrated increments.
pub fn imu_residual(x_k: &NominalState, x_k1: &NominalState, pre: &PreintegratedImu, g: &Vec3) -> Vec9 {
    imu_residual_jacobians(x_k, x_k1, pre, g).0
}

pub fn imu_residual_jacobians(
    x_k: &NominalState,
    x_k1: &NominalState,
    pre: &PreintegratedImu,
    g: &Vec3,
) -> (Vec9, Mat9x15, Mat9x15) {
    let dt = pre.dt_total;
    let (dp, dv, dq) = corrected_increments(x_k, pre);
    let r_k_t = rot(&x_k.q).transpose();
    let y_p = x_k1.p - x_k.p - x_k.v * dt - 0.5 * g * dt * dt;
    let y_v = x_k1.v - x_k.v - g * dt;
    let e = dq.inverse() * x_k.q.inverse() * x_k1.q;
    let r_theta = so3_log(&e);

    let mut r = Vec9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(r_k_t * y_p - dp));
    r.fixed_rows_mut::<3>(3).copy_from(&(r_k_t * y_v - dv));
    r.fixed_rows_mut::<3>(6).copy_from(&r_theta);

    let jr_inv = right_jacobian_inv(&r_theta);
    let mut j0 = Mat9x15::zeros();
    let mut j1 = Mat9x15::zeros();
    j0.fixed_view_mut::<3, 3>(0, block::P).copy_from(&(-r_k_t));
    j0.fixed_view_mut::<3, 3>(0, block::V).copy_from(&(-r_k_t * dt));
    j0.fixed_view_mut::<3, 3>(0, block::THETA).copy_from(&skew(&(r_k_t * y_p)));
    j0.fixed_view_mut::<3, 3>(0, block::BA).copy_from(&(-pre.dp_dba));
    j0.fixed_view_mut::<3, 3>(0, block::BW).copy_from(&(-pre.dp_dbw));
    j0.fixed_view_mut::<3, 3>(3, block::V).copy_from(&(-r_k_t));
    j0.fixed_view_mut::<3, 3>(3, block::THETA).copy_from(&skew(&(r_k_t * y_v)));
    j0.fixed_view_mut::<3, 3>(3, block::BA).copy_from(&(-pre.dv_dba));
    j0.fixed_view_mut::<3, 3>(3, block::BW).copy_from(&(-pre.dv_dbw));
    let r_rel = rot(&(x_k1.q.inverse() * x_k.q));
    j0.fixed_view_mut::<3, 3>(6, block::THETA).copy_from(&(-jr_inv * r_rel));
    let dbw = x_k.b_w - pre.bias_w;
    let jr_bw = crate::geometry::right_jacobian(&(pre.dr_dbw * dbw));
    j0.fixed_view_mut::<3, 3>(6, block::BW)
        .copy_from(&(-jr_inv * rot(&e).transpose() * jr_bw * pre.dr_dbw));

    j1.fixed_view_mut::<3, 3>(0, block::P).copy_from(&r_k_t);
    j1.fixed_view_mut::<3, 3>(3, block::V).copy_from(&r_k_t);
    j1.fixed_view_mut::<3, 3>(6, block::THETA).copy_from(&jr_inv);
    (r, j0, j1)
}

/// Bias random walk between consecutive keyframes: `[b_a,k+1 − b_a,k; b_ω,k+1 − b_ω,k]`.
pub fn bias_walk_residual(x_k: &NominalState, x_k1: &NominalState) -> Vec6 {
    let mut r = Vec6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(x_k1.b_a - x_k.b_a));
    r.fixed_rows_mut::<3>(3).copy_from(&(x_k1.b_w - x_k.b_w));
    r
}

pub fn bias_walk_jacobians() -> (Mat6x15, Mat6x15) {
    let mut j1 = Mat6x15::zeros();
    j1.fixed_view_mut::<6, 6>(0, block::BA).fill_with_identity();
    (-j1, j1)
}

fn camera_point(x: &NominalState, r_bc: &Quat, p_bc: &Vec3, p_gw: &Vec3) -> Vec3 {
    let ext = Extrinsics::new(*r_bc, *p_bc);
    crate::geometry::world_to_camera(p_gw, &x.p, &x.q, &ext)
}

/// `ū − π(p_C)` with the camera rotation taken from the decision variable.
pub fn corner_residual(x: &NominalState, r_bc: &Quat, p_bc: &Vec3, z: &CornerMeasurement) -> Result<Vec2, GeometryError> {
    Ok(z.u_norm - project(&camera_point(x, r_bc, p_bc, &z.p_gw))?)
}

pub fn corner_residual_jacobians(
    x: &NominalState,
    r_bc: &Quat,
    p_bc: &Vec3,
    z: &CornerMeasurement,
) -> Result<(Vec2, Mat2x15, Mat2x3), GeometryError> {
    let p_c = camera_point(x, r_bc, p_bc, &z.p_gw);
    let r = z.u_norm - project(&p_c)?;
    let j_proj = project_jacobian(&p_c)?;
    let r_wb_t = rot(&x.q).transpose();
    let r_bc_t = rot(r_bc).transpose();
    let mut jx = Mat2x15::zeros();
    jx.fixed_view_mut::<2, 3>(0, block::P).copy_from(&(j_proj * r_bc_t * r_wb_t));
    jx.fixed_view_mut::<2, 3>(0, block::THETA)
        .copy_from(&(-j_proj * r_bc_t * skew(&(r_wb_t * (z.p_gw - x.p)))));
    let je = -j_proj * skew(&p_c);
    Ok((r, jx, je))
}

/// Pose-only anchor `x ⊖ x̄`.
pub fn prior_residual(x: &NominalState, prior: &NominalState) -> Vec6 {
    state_boxminus(x, prior)
}

pub fn prior_jacobian(x: &NominalState, prior: &NominalState) -> Mat6x15 {
    let r = prior_residual(x, prior);
    let mut j = Mat6x15::zeros();
    j.fixed_view_mut::<3, 3>(0, block::P).fill_with_identity();
    j.fixed_view_mut::<3, 3>(3, block::THETA)
        .copy_from(&right_jacobian_inv(&r.fixed_rows::<3>(3).into_owned()));
    j
}

/// `Log(R̄_bcᵀ R_bc)`.
pub fn extrinsics_residual(r_bc: &Quat, nominal: &Quat) -> Vec3 {
    so3_log(&(nominal.inverse() * r_bc))
}

pub fn extrinsics_jacobian(r_bc: &Quat, nominal: &Quat) -> Mat3 {
    right_jacobian_inv(&extrinsics_residual(r_bc, nominal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::{corner_residual_and_jacobian, propagate_nominal};
    use crate::fgo::preint::preintegrate;
    use crate::geometry::default_gravity;
    use crate::model::{compose_state, CornerLabel, ErrorVector, ImuSample, NoiseParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NominalState {
        NominalState {
            t: 0.0,
            p: rv(rng, 5.0),
            v: rv(rng, 3.0),
            q: so3_exp(&rv(rng, 2.0)),
            b_a: rv(rng, 0.2),
            b_w: rv(rng, 0.05),
        }
    }

    fn samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImuSample> {
        (1..=n)
            .map(|k| ImuSample { t: k as f64 * 0.002, a_m: rv(rng, 10.0), w_m: rv(rng, 2.0) })
            .collect()
    }

    #[test]
    fn imu_residual_zero_on_forward_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = random_state(&mut rng);
        let s = samples(&mut rng, 25);
        let pre = preintegrate(0.0, &s, x0.b_a, x0.b_w, &NoiseParams::default()).unwrap();
        let g = default_gravity();
        let mut x1 = x0;
        let mut t = 0.0;
        for smp in &s {
            x1 = propagate_nominal(&x1, &smp.a_m, &smp.w_m, smp.t - t, &g);
            t = smp.t;
        }
        assert!(imu_residual(&x0, &x1, &pre, &g).amax() < 1e-9);
        let mut moved = x1;
        moved.p.x += 0.1;
        let r = imu_residual(&x0, &moved, &pre, &g) - imu_residual(&x0, &x1, &pre, &g);
        let expected = rot(&x0.q).transpose() * Vec3::new(0.1, 0.0, 0.0);
        assert!((r.fixed_rows::<3>(0) - expected).amax() < 1e-12);
    }

    #[test]
    fn imu_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = default_gravity();
        for _ in 0..100 {
            let x0 = random_state(&mut rng);
            let x1 = random_state(&mut rng);
            let s = samples(&mut rng, 10);
            let pre = preintegrate(0.0, &s, x0.b_a + rv(&mut rng, 0.01), x0.b_w + rv(&mut rng, 0.01), &NoiseParams::default()).unwrap();
            let (_, j0, j1) = imu_residual_jacobians(&x0, &x1, &pre, &g);
            let eps = 1e-6;
            for (which, j) in [(0, j0), (1, j1)] {
                let mut fd = Mat9x15::zeros();
                for c in 0..15 {
                    let mut d = ErrorVector::zeros();
                    d[c] = eps;
                    let eval = |dx: &ErrorVector| {
                        if which == 0 {
                            imu_residual(&compose_state(&x0, dx), &x1, &pre, &g)
                        } else {
                            imu_residual(&x0, &compose_state(&x1, dx), &pre, &g)
                        }
                    };
                    fd.set_column(c, &((eval(&d) - eval(&(-d))) / (2.0 * eps)));
                }
                let rel = (fd - j).amax() / j.amax().max(1.0);
                assert!(rel < 1e-4, "block {which} relative error {rel}");
            }
        }
    }

    fn measurement(rng: &mut ChaCha8Rng, x: &NominalState, ext: &Extrinsics) -> CornerMeasurement {
        let p_c = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..12.0));
        CornerMeasurement {
            t: 0.0,
            u_norm: Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            p_gw: crate::geometry::camera_to_world(&p_c, &x.p, &x.q, ext),
            gate_id: 0,
            corner_label: CornerLabel::TL,
            score: 1.0,
        }
    }

    #[test]
    fn corner_residual_matches_filter_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let ext = Extrinsics::new(so3_exp(&rv(&mut rng, 2.0)), rv(&mut rng, 0.2));
            let z = measurement(&mut rng, &x, &ext);
            let (r_f, h_f) = corner_residual_and_jacobian(&x, &z, &ext).unwrap();
            let (r, jx, _) = corner_residual_jacobians(&x, &ext.r_bc, &ext.p_bc, &z).unwrap();
            assert!((r - r_f).amax() < 1e-12);
            assert!((jx + h_f).amax() < 1e-9);
        }
    }

    #[test]
    fn corner_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let ext = Extrinsics::new(so3_exp(&rv(&mut rng, 2.0)), rv(&mut rng, 0.2));
            let z = measurement(&mut rng, &x, &ext);
            let (_, jx, je) = corner_residual_jacobians(&x, &ext.r_bc, &ext.p_bc, &z).unwrap();
            let eps = 1e-6;
            let mut fdx = Mat2x15::zeros();
            for c in 0..15 {
                let mut d = ErrorVector::zeros();
                d[c] = eps;
                let rp = corner_residual(&compose_state(&x, &d), &ext.r_bc, &ext.p_bc, &z).unwrap();
                let rm = corner_residual(&compose_state(&x, &(-d)), &ext.r_bc, &ext.p_bc, &z).unwrap();
                fdx.set_column(c, &((rp - rm) / (2.0 * eps)));
            }
            let mut fde = Mat2x3::zeros();
            for c in 0..3 {
                let mut d = Vec3::zeros();
                d[c] = eps;
                let rp = corner_residual(&x, &(ext.r_bc * so3_exp(&d)), &ext.p_bc, &z).unwrap();
                let rm = corner_residual(&x, &(ext.r_bc * so3_exp(&(-d))), &ext.p_bc, &z).unwrap();
                fde.set_column(c, &((rp - rm) / (2.0 * eps)));
            }
            assert!((fdx - jx).amax() / jx.amax().max(1e-3) < 1e-4);
            assert!((fde - je).amax() / je.amax().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn prior_and_extrinsics_examples() {
        let x = NominalState::default();
        assert_eq!(prior_residual(&x, &x), Vec6::zeros());
        let mut yawed = x;
        yawed.q = so3_exp(&Vec3::new(0.0, 0.0, 0.2));
        let r = prior_residual(&yawed, &x);
        assert!((r - Vec6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.2)).amax() < 1e-12);

        let nominal = so3_exp(&Vec3::new(0.3, 0.1, -0.2));
        assert!(extrinsics_residual(&nominal, &nominal).amax() < 1e-15);
        let r = extrinsics_residual(&(nominal * so3_exp(&Vec3::new(0.1, 0.0, 0.0))), &nominal);
        assert!((r - Vec3::new(0.1, 0.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn prior_and_extrinsics_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let eps = 1e-6;
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let mut prior = x;
            prior.p += rv(&mut rng, 0.5);
            prior.q = x.q * so3_exp(&rv(&mut rng, 0.5));
            let j = prior_jacobian(&x, &prior);
            let mut fd = Mat6x15::zeros();
            for c in 0..15 {
                let mut d = ErrorVector::zeros();
                d[c] = eps;
                fd.set_column(
                    c,
                    &((prior_residual(&compose_state(&x, &d), &prior) - prior_residual(&compose_state(&x, &(-d)), &prior))
                        / (2.0 * eps)),
                );
            }
            assert!((fd - j).amax() < 1e-4);

            let nominal = so3_exp(&rv(&mut rng, 2.0));
            let r_bc = nominal * so3_exp(&rv(&mut rng, 0.5));
            let je = extrinsics_jacobian(&r_bc, &nominal);
            let mut fde = Mat3::zeros();
            for c in 0..3 {
                let mut d = Vec3::zeros();
                d[c] = eps;
                fde.set_column(
                    c,
                    &((extrinsics_residual(&(r_bc * so3_exp(&d)), &nominal)
                        - extrinsics_residual(&(r_bc * so3_exp(&(-d))), &nominal))
                        / (2.0 * eps)),
                );
            }
            assert!((fde - je).amax() < 1e-4);
        }
    }
}
