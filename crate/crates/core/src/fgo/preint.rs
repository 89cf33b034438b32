use nalgebra::SMatrix;
use thiserror::Error;

use crate::geometry::{right_jacobian, skew, so3_exp, Mat3, Quat, Vec3};
use crate::model::{ImuSample, NoiseParams};

pub type Mat9 = SMatrix<f64, 9, 9>;

/// Diagonal floor added to the increment covariance so short segments stay
/// positive definite.
pub const COV_FLOOR: f64 = 1e-14;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum PreintError {
    #[error("no IMU samples in the integration window")]
    EmptyStream,
    #[error("IMU sample {index} is not after its predecessor")]
    NonMonotonicTimestamp { index: usize },
}

/// Relative motion between two keyframes, expressed in the first body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedImu {
    pub t0: f64,
    pub dp: Vec3,
    pub dv: Vec3,
    pub dq: Quat,
    pub dt_total: f64,
    /// Covariance of `[δΔp, δΔv, δΔθ]`.
    pub cov9: Mat9,
    pub bias_a: Vec3,
    pub bias_w: Vec3,
    pub dp_dba: Mat3,
    pub dp_dbw: Mat3,
    pub dv_dba: Mat3,
    pub dv_dbw: Mat3,
    pub dr_dbw: Mat3,
    pub samples: Vec<ImuSample>,
    pub noise: NoiseParams,
}

/// Integrates `samples` starting at `t0`. Each sample holds over the interval
/// ending at its timestamp; the update order matches the filter's nominal
/// propagation (old attitude and velocity on the right-hand side).
pub fn preintegrate(
    t0: f64,
    samples: &[ImuSample],
    bias_a: Vec3,
    bias_w: Vec3,
    noise: &NoiseParams,
) -> Result<PreintegratedImu, PreintError> {
    if samples.is_empty() {
        return Err(PreintError::EmptyStream);
    }
    let mut out = PreintegratedImu {
        t0,
        dp: Vec3::zeros(),
        dv: Vec3::zeros(),
        dq: Quat::identity(),
        dt_total: 0.0,
        cov9: Mat9::zeros(),
        bias_a,
        bias_w,
        dp_dba: Mat3::zeros(),
        dp_dbw: Mat3::zeros(),
        dv_dba: Mat3::zeros(),
        dv_dbw: Mat3::zeros(),
        dr_dbw: Mat3::zeros(),
        samples: samples.to_vec(),
        noise: *noise,
    };
    let mut t_prev = t0;
    let var_a = noise.sigma_a * noise.sigma_a;
    let var_w = noise.sigma_w * noise.sigma_w;
    for (index, s) in samples.iter().enumerate() {
        let dt = s.t - t_prev;
        if !(dt > 0.0) {
            return Err(PreintError::NonMonotonicTimestamp { index });
        }
        t_prev = s.t;
        let acc = s.a_m - bias_a;
        let phi = (s.w_m - bias_w) * dt;
        let dr = out.dq.to_rotation_matrix().into_inner();
        let step = so3_exp(&phi);
        let step_t = step.to_rotation_matrix().into_inner().transpose();
        let jr = right_jacobian(&phi);
        let r_acc_x = dr * skew(&acc);
        let dt2 = 0.5 * dt * dt;

        let mut a = Mat9::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Mat3::identity() * dt));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-r_acc_x * dt2));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r_acc_x * dt));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&step_t);
        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(dr * dt2));
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dr * dt));
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(jr * dt));
        let mut qd = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            qd[(i, i)] = var_a / dt;
            qd[(i + 3, i + 3)] = var_w / dt;
        }
        out.cov9 = a * out.cov9 * a.transpose() + b * qd * b.transpose();

        out.dp_dba += out.dv_dba * dt - dr * dt2;
        out.dp_dbw += out.dv_dbw * dt - r_acc_x * out.dr_dbw * dt2;
        out.dv_dba -= dr * dt;
        out.dv_dbw -= r_acc_x * out.dr_dbw * dt;
        out.dr_dbw = step_t * out.dr_dbw - jr * dt;

        out.dp += out.dv * dt + dr * acc * dt2;
        out.dv += dr * acc * dt;
        out.dq = Quat::new_normalize((out.dq * step).into_inner());
        out.dt_total += dt;
    }
    out.cov9 = (out.cov9 + out.cov9.transpose()) * 0.5 + Mat9::identity() * COV_FLOOR;
    Ok(out)
}

impl PreintegratedImu {
    /// Rebuilds the increments from the retained samples at a new bias.
    pub fn repreintegrate(&self, bias_a: Vec3, bias_w: Vec3) -> PreintegratedImu {
        preintegrate(self.t0, &self.samples, bias_a, bias_w, &self.noise)
            .expect("retained samples were validated at construction")
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.dt_total
    }
}

/// Samples covering `(t0, t1]`, with the last one clipped to end at `t1`.
pub fn imu_window(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let start = samples.partition_point(|s| s.t <= t0);
    let mut out = Vec::new();
    for s in &samples[start..] {
        if s.t >= t1 {
            if t1 > t0 {
                out.push(ImuSample { t: t1, ..*s });
            }
            break;
        }
        out.push(*s);
    }
    out
}
