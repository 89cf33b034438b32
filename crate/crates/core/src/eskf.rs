//! Error-state Kalman filter fusing IMU propagation with direct corner
//! reprojection residuals.
//!
//! The nominal state is integrated at IMU rate; a 15-dimensional error state
//! `[δp, δv, δθ, δb_a, δb_ω]` carries the covariance. Corner measurements
//! are applied one at a time, each robustly reweighted by its Mahalanobis
//! distance, injected into the nominal state and the error reset to zero.

use nalgebra::{Matrix2, SMatrix, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project, project_jacobian, skew, so3_exp, world_to_camera, Extrinsics, GeometryError, Mat3, Quat, Vec2, Vec3,
};
use crate::model::{block, compose_state, CornerLabel, CornerMeasurement, Covariance15, ErrorVector, ImuSample, NoiseParams, NominalState};

pub type Mat2x15 = SMatrix<f64, 2, 15>;
pub type Mat15x2 = SMatrix<f64, 15, 2>;

/// Largest IMU interval (s) for which the first-order transition is trusted.
pub const MAX_PROPAGATION_DT: f64 = 0.1;

/// 95% χ² quantile for two degrees of freedom.
pub const CHI2_95_2DOF: f64 = 5.99;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum EskfError {
    #[error("IMU timestamp {t} does not follow {last}")]
    NonMonotonicTimestamp { last: f64, t: f64 },
    #[error("IMU interval {dt} s exceeds the propagation limit")]
    ExcessiveDt { dt: f64 },
}

/// How a measurement's Mahalanobis distance affects the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobustMode {
    /// Inflate the measurement covariance by `e/τ` beyond `τ`.
    Huber,
    /// Reject measurements whose squared distance exceeds the threshold.
    Chi2 { threshold: f64 },
    /// Accept every measurement at full weight.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EskfConfig {
    pub noise: NoiseParams,
    /// Corner measurement standard deviation in normalized image units.
    pub r_pixel_sigma: f64,
    /// Huber threshold on the Mahalanobis distance.
    pub huber_tau: f64,
    pub min_corners_per_gate: usize,
    pub initial_cov_diag: [f64; 15],
    pub robust: RobustMode,
    /// Measurements older than this relative to the filter time are dropped (s).
    pub max_measurement_age: f64,
    /// Scale the measurement covariance by the inverse detector score.
    pub score_weighting: bool,
}

impl Default for EskfConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let mut diag = [0.0; 15];
        diag[0..3].fill(0.5 * 0.5);
        diag[3..6].fill(0.1 * 0.1);
        diag[6..9].fill((3.0 * deg).powi(2));
        diag[9..12].fill(0.1 * 0.1);
        diag[12..15].fill(0.01 * 0.01);
        Self {
            noise: NoiseParams::default(),
            r_pixel_sigma: 2.0 / 300.0,
            huber_tau: 3.0,
            min_corners_per_gate: 2,
            initial_cov_diag: diag,
            robust: RobustMode::Huber,
            max_measurement_age: 0.05,
            score_weighting: false,
        }
    }
}

impl EskfConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.huber_tau > 0.0) {
            return Err("huber_tau must be positive");
        }
        if !(self.r_pixel_sigma > 0.0) {
            return Err("r_pixel_sigma must be positive");
        }
        if self.initial_cov_diag.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err("initial covariance must be non-negative");
        }
        if self.min_corners_per_gate == 0 {
            return Err("min_corners_per_gate must be at least 1");
        }
        self.noise.validate().map_err(|_| "noise densities must be positive")
    }
}

/// One IMU step of the nominal kinematics.
pub fn propagate_nominal(x: &NominalState, a_m: &Vec3, w_m: &Vec3, dt: f64, gravity: &Vec3) -> NominalState {
    let acc = x.q.transform_vector(&(a_m - x.b_a)) + gravity;
    let q = x.q * so3_exp(&((w_m - x.b_w) * dt));
    NominalState {
        t: x.t + dt,
        p: x.p + x.v * dt + acc * (0.5 * dt * dt),
        v: x.v + acc * dt,
        q: Quat::new_normalize(q.into_inner()),
        b_a: x.b_a,
        b_w: x.b_w,
    }
}

/// Continuous-time error dynamics `F_c` for a right (body-frame) attitude
/// error. The velocity/attitude block is `−R [a_m − b_a]×`, the derivative of
/// `R Exp(δθ)(a_m − b_a)` with respect to `δθ`.
pub fn error_dynamics(x: &NominalState, a_m: &Vec3, w_m: &Vec3) -> Covariance15 {
    let r = x.q.to_rotation_matrix().into_inner();
    let mut f = Covariance15::zeros();
    f.fixed_view_mut::<3, 3>(block::P, block::V).copy_from(&Mat3::identity());
    f.fixed_view_mut::<3, 3>(block::V, block::THETA).copy_from(&(-r * skew(&(a_m - x.b_a))));
    f.fixed_view_mut::<3, 3>(block::V, block::BA).copy_from(&(-r));
    f.fixed_view_mut::<3, 3>(block::THETA, block::THETA).copy_from(&(-skew(&(w_m - x.b_w))));
    f.fixed_view_mut::<3, 3>(block::THETA, block::BW).copy_from(&(-Mat3::identity()));
    f
}

/// Discrete process noise with the position/velocity coupling of a
/// white-noise acceleration model.
pub fn process_noise(noise: &NoiseParams, dt: f64) -> Covariance15 {
    let mut q = Covariance15::zeros();
    let sa2 = noise.sigma_a * noise.sigma_a;
    let i3 = Mat3::identity();
    q.fixed_view_mut::<3, 3>(block::P, block::P).copy_from(&(i3 * (sa2 * dt.powi(3) / 3.0)));
    q.fixed_view_mut::<3, 3>(block::P, block::V).copy_from(&(i3 * (sa2 * dt * dt / 2.0)));
    q.fixed_view_mut::<3, 3>(block::V, block::P).copy_from(&(i3 * (sa2 * dt * dt / 2.0)));
    q.fixed_view_mut::<3, 3>(block::V, block::V).copy_from(&(i3 * (sa2 * dt)));
    q.fixed_view_mut::<3, 3>(block::THETA, block::THETA).copy_from(&(i3 * (noise.sigma_w.powi(2) * dt)));
    q.fixed_view_mut::<3, 3>(block::BA, block::BA).copy_from(&(i3 * (noise.sigma_ba.powi(2) * dt)));
    q.fixed_view_mut::<3, 3>(block::BW, block::BW).copy_from(&(i3 * (noise.sigma_bw.powi(2) * dt)));
    q
}

/// Corner residual `ũ − π(p_C)` and its Jacobian with respect to the error state.
pub fn corner_residual_and_jacobian(
    x: &NominalState,
    z: &CornerMeasurement,
    ext: &Extrinsics,
) -> Result<(Vec2, Mat2x15), GeometryError> {
    let p_c = world_to_camera(&z.p_gw, &x.p, &x.q, ext);
    let predicted = project(&p_c)?;
    let j_proj = project_jacobian(&p_c)?;
    let r_wb_t = x.q.to_rotation_matrix().into_inner().transpose();
    let r_bc_t = ext.r_bc.to_rotation_matrix().into_inner().transpose();
    let mut d_pc = SMatrix::<f64, 3, 15>::zeros();
    d_pc.fixed_view_mut::<3, 3>(0, block::P).copy_from(&(-r_bc_t * r_wb_t));
    d_pc.fixed_view_mut::<3, 3>(0, block::THETA)
        .copy_from(&(r_bc_t * skew(&(r_wb_t * (z.p_gw - x.p)))));
    Ok((z.u_norm - predicted, j_proj * d_pc))
}

/// Mahalanobis distance `sqrt(rᵀ S⁻¹ r)`.
pub fn mahalanobis(r: &Vec2, s: &Matrix2<f64>) -> f64 {
    match s.try_inverse() {
        Some(s_inv) => (r.transpose() * s_inv * r)[0].max(0.0).sqrt(),
        None => f64::INFINITY,
    }
}

/// Huber weight `min(1, τ/e)`.
pub fn huber_weight(r: &Vec2, s: &Matrix2<f64>, tau: f64) -> f64 {
    let e = mahalanobis(r, s);
    if e <= tau {
        1.0
    } else {
        tau / e
    }
}

/// `P Hᵀ (H P Hᵀ + R)⁻¹`, or `None` when the innovation covariance is singular.
pub fn kalman_gain(p: &Covariance15, h: &Mat2x15, r: &Matrix2<f64>) -> Option<Mat15x2> {
    let s = h * p * h.transpose() + r;
    Some(p * h.transpose() * s.try_inverse()?)
}

fn symmetrize(p: &mut Covariance15) {
    *p = (*p + p.transpose()) * 0.5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStatus {
    Applied,
    /// Rejected by the χ² gate.
    Rejected,
    BehindCamera,
    TooFewCorners,
    Stale,
    SingularInnovation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateEntry {
    pub gate_id: u32,
    pub label: CornerLabel,
    pub status: UpdateStatus,
    /// Mahalanobis distance against the unweighted innovation covariance.
    pub mahalanobis: Option<f64>,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub t: f64,
    pub entries: Vec<UpdateEntry>,
}

impl UpdateReport {
    pub fn applied(&self) -> usize {
        self.entries.iter().filter(|e| e.status == UpdateStatus::Applied).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EskfEstimator {
    pub nominal: NominalState,
    pub cov: Covariance15,
    pub cfg: EskfConfig,
    pub last_imu_t: f64,
}

impl EskfEstimator {
    /// Starts at rest at the given pose with zero biases.
    pub fn initialize(t0: f64, p0: Vec3, q0: Quat, cfg: EskfConfig) -> Self {
        Self::from_state(NominalState::at_pose(t0, p0, q0), cfg)
    }

    pub fn from_state(state: NominalState, cfg: EskfConfig) -> Self {
        let cov = Covariance15::from_diagonal(&ErrorVector::from_column_slice(&cfg.initial_cov_diag));
        Self {
            nominal: state,
            cov,
            cfg,
            last_imu_t: state.t,
        }
    }

    pub fn time(&self) -> f64 {
        self.nominal.t
    }

    pub fn propagate(&mut self, imu: &ImuSample) -> Result<(), EskfError> {
        let dt = imu.t - self.last_imu_t;
        if !(dt > 0.0) {
            return Err(EskfError::NonMonotonicTimestamp { last: self.last_imu_t, t: imu.t });
        }
        if dt > MAX_PROPAGATION_DT {
            return Err(EskfError::ExcessiveDt { dt });
        }
        let f = Covariance15::identity() + error_dynamics(&self.nominal, &imu.a_m, &imu.w_m) * dt;
        self.nominal = propagate_nominal(&self.nominal, &imu.a_m, &imu.w_m, dt, &self.cfg.noise.gravity);
        self.nominal.t = imu.t;
        self.cov = f * self.cov * f.transpose() + process_noise(&self.cfg.noise, dt);
        symmetrize(&mut self.cov);
        self.last_imu_t = imu.t;
        Ok(())
    }

    pub fn measurement_residual(&self, z: &CornerMeasurement, ext: &Extrinsics) -> Result<(Vec2, Mat2x15), GeometryError> {
        corner_residual_and_jacobian(&self.nominal, z, ext)
    }

    fn measurement_covariance(&self, z: &CornerMeasurement) -> Matrix2<f64> {
        let mut var = self.cfg.r_pixel_sigma * self.cfg.r_pixel_sigma;
        if self.cfg.score_weighting {
            var /= z.score.max(1e-3);
        }
        Matrix2::from_diagonal(&Vector2::new(var, var))
    }

    /// Applies a frame of corner measurements sequentially.
    pub fn update(&mut self, measurements: &[CornerMeasurement], ext: &Extrinsics) -> UpdateReport {
        let mut report = UpdateReport {
            t: self.nominal.t,
            entries: Vec::with_capacity(measurements.len()),
        };
        let skip = |z: &CornerMeasurement, status| UpdateEntry {
            gate_id: z.gate_id,
            label: z.corner_label,
            status,
            mahalanobis: None,
            weight: None,
        };
        for z in measurements {
            if self.nominal.t - z.t > self.cfg.max_measurement_age {
                report.entries.push(skip(z, UpdateStatus::Stale));
                continue;
            }
            let same_gate = measurements
                .iter()
                .filter(|o| o.gate_id == z.gate_id && self.nominal.t - o.t <= self.cfg.max_measurement_age)
                .count();
            if same_gate < self.cfg.min_corners_per_gate {
                report.entries.push(skip(z, UpdateStatus::TooFewCorners));
                continue;
            }
            let (r, h) = match self.measurement_residual(z, ext) {
                Ok(rh) => rh,
                Err(_) => {
                    report.entries.push(skip(z, UpdateStatus::BehindCamera));
                    continue;
                }
            };
            let r_cov = self.measurement_covariance(z);
            let s = h * self.cov * h.transpose() + r_cov;
            let e = mahalanobis(&r, &s);
            let weight = match self.cfg.robust {
                RobustMode::Huber => {
                    if e <= self.cfg.huber_tau {
                        1.0
                    } else {
                        self.cfg.huber_tau / e
                    }
                }
                RobustMode::Chi2 { threshold } => {
                    if e * e > threshold {
                        report.entries.push(UpdateEntry {
                            mahalanobis: Some(e),
                            ..skip(z, UpdateStatus::Rejected)
                        });
                        continue;
                    }
                    1.0
                }
                RobustMode::Naive => 1.0,
            };
            let Some(k) = kalman_gain(&self.cov, &h, &(r_cov / weight)) else {
                report.entries.push(skip(z, UpdateStatus::SingularInnovation));
                continue;
            };
            let dx: ErrorVector = k * r;
            self.nominal = compose_state(&self.nominal, &dx);
            self.cov = (Covariance15::identity() - k * h) * self.cov;
            symmetrize(&mut self.cov);
            report.entries.push(UpdateEntry {
                gate_id: z.gate_id,
                label: z.corner_label,
                status: UpdateStatus::Applied,
                mahalanobis: Some(e),
                weight: Some(weight),
            });
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::default_gravity;
    use crate::model::state_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NominalState {
        NominalState {
            t: 0.0,
            p: random_vec(rng, 5.0),
            v: random_vec(rng, 3.0),
            q: so3_exp(&random_vec(rng, 2.0)),
            b_a: random_vec(rng, 0.2),
            b_w: random_vec(rng, 0.02),
        }
    }

    fn hover_imu(t: f64) -> ImuSample {
        ImuSample {
            t,
            a_m: -default_gravity(),
            w_m: Vec3::zeros(),
        }
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let mut est = EskfEstimator::initialize(0.0, Vec3::new(1.0, 2.0, 3.0), Quat::identity(), EskfConfig::default());
        for k in 1..=1000 {
            est.propagate(&hover_imu(k as f64 * 0.002)).unwrap();
        }
        assert!((est.nominal.p - Vec3::new(1.0, 2.0, 3.0)).amax() < 1e-12);
        assert!(est.nominal.v.amax() < 1e-12);
        assert!((est.nominal.q.coords - Quat::identity().coords).amax() < 1e-12);
    }

    #[test]
    fn free_fall_integrates_gravity() {
        let mut est = EskfEstimator::initialize(0.0, Vec3::zeros(), Quat::identity(), EskfConfig::default());
        let dt = 0.002;
        for k in 1..=500 {
            est.propagate(&ImuSample { t: k as f64 * dt, a_m: Vec3::zeros(), w_m: Vec3::zeros() }).unwrap();
            assert!((est.nominal.v.z + 9.81 * k as f64 * dt).abs() < 1e-9);
        }
        assert!((est.nominal.p.z + 0.5 * 9.81).abs() < 1e-9);
    }

    #[test]
    fn timestamp_errors() {
        let mut est = EskfEstimator::initialize(1.0, Vec3::zeros(), Quat::identity(), EskfConfig::default());
        assert!(matches!(est.propagate(&hover_imu(1.0)), Err(EskfError::NonMonotonicTimestamp { .. })));
        assert!(matches!(est.propagate(&hover_imu(1.2)), Err(EskfError::ExcessiveDt { .. })));
        assert!(est.propagate(&hover_imu(1.05)).is_ok());
    }

    /// Time derivative of the error between a perturbed and the nominal
    /// trajectory, from a symmetric pair of Euler steps.
    fn error_rate(x: &NominalState, dx: &ErrorVector, a: &Vec3, w: &Vec3) -> ErrorVector {
        let h = 1e-4;
        let g = default_gravity();
        let truth = compose_state(x, dx);
        let step = |dt: f64| {
            state_difference(&propagate_nominal(&truth, a, w, dt, &g), &propagate_nominal(x, a, w, dt, &g))
        };
        (step(h) - step(-h)) / (2.0 * h)
    }

    #[test]
    fn error_dynamics_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let a = random_vec(&mut rng, 15.0);
            let w = random_vec(&mut rng, 3.0);
            let analytic = error_dynamics(&x, &a, &w);
            let eps = 1e-5;
            let mut fd = Covariance15::zeros();
            for j in 0..15 {
                let mut d = ErrorVector::zeros();
                d[j] = eps;
                fd.set_column(j, &((error_rate(&x, &d, &a, &w) - error_rate(&x, &(-d), &a, &w)) / (2.0 * eps)));
            }
            let rel = (fd - analytic).amax() / analytic.amax().max(1.0);
            assert!(rel < 1e-4, "relative error {rel}");
        }
    }

    fn gate_measurement(p_gw: Vec3, truth: &NominalState, ext: &Extrinsics) -> CornerMeasurement {
        CornerMeasurement {
            t: truth.t,
            u_norm: project(&world_to_camera(&p_gw, &truth.p, &truth.q, ext)).unwrap(),
            p_gw,
            gate_id: 1,
            corner_label: CornerLabel::TL,
            score: 1.0,
        }
    }

    #[test]
    fn residual_is_zero_at_truth_and_matches_projection_offset() {
        let ext = Extrinsics::default();
        let truth = NominalState::default();
        let z = gate_measurement(Vec3::new(5.0, 0.6, 0.4), &truth, &ext);
        let est = EskfEstimator::from_state(truth, EskfConfig::default());
        let (r, _) = est.measurement_residual(&z, &ext).unwrap();
        assert_eq!(r, Vec2::zeros());

        let mut shifted = truth;
        shifted.p.x += 0.1;
        let est = EskfEstimator::from_state(shifted, EskfConfig::default());
        let (r, _) = est.measurement_residual(&z, &ext).unwrap();
        // Camera 0.1 m closer: landmark at depth 4.9.
        let expected = z.u_norm - Vec2::new(-0.6 / 4.9, -0.4 / 4.9);
        assert!((r - expected).amax() < 1e-12);
    }

    #[test]
    fn measurement_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ext = Extrinsics::forward_camera(0.2, Vec3::new(0.1, 0.0, 0.05));
        let mut checked = 0;
        while checked < 100 {
            let x = random_state(&mut rng);
            let p_c = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..12.0));
            let p_gw = crate::geometry::camera_to_world(&p_c, &x.p, &x.q, &ext);
            let z = CornerMeasurement { u_norm: Vec2::new(0.1, -0.2), ..gate_measurement(p_gw, &x, &ext) };
            let (_, h) = corner_residual_and_jacobian(&x, &z, &ext).unwrap();
            let eps = 1e-6;
            let mut fd = Mat2x15::zeros();
            for j in 0..15 {
                let mut d = ErrorVector::zeros();
                d[j] = eps;
                let rp = corner_residual_and_jacobian(&compose_state(&x, &d), &z, &ext).unwrap().0;
                let rm = corner_residual_and_jacobian(&compose_state(&x, &(-d)), &z, &ext).unwrap().0;
                // r = z − h, so ∂r/∂δx = −H.
                fd.set_column(j, &(-(rp - rm) / (2.0 * eps)));
            }
            let rel = (fd - h).amax() / h.amax();
            assert!(rel < 1e-4, "relative error {rel}");
            checked += 1;
        }
    }

    #[test]
    fn huber_weight_examples() {
        let s = Matrix2::identity();
        assert_eq!(huber_weight(&Vec2::zeros(), &s, 3.0), 1.0);
        assert_eq!(huber_weight(&Vec2::new(3.0, 0.0), &s, 3.0), 1.0);
        assert_eq!(huber_weight(&Vec2::new(0.0, 6.0), &s, 3.0), 0.5);
    }

    #[test]
    fn huber_never_increases_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ext = Extrinsics::default();
        for _ in 0..200 {
            let x = NominalState::default();
            let p_gw = Vec3::new(rng.random_range(3.0..10.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut z = gate_measurement(p_gw, &x, &ext);
            z.u_norm += Vec2::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let est = EskfEstimator::from_state(x, EskfConfig::default());
            let (r, h) = est.measurement_residual(&z, &ext).unwrap();
            let r_cov = Matrix2::identity() * est.cfg.r_pixel_sigma.powi(2);
            let s = h * est.cov * h.transpose() + r_cov;
            let w = huber_weight(&r, &s, est.cfg.huber_tau);
            assert!(w > 0.0 && w <= 1.0);
            let k_naive = kalman_gain(&est.cov, &h, &r_cov).unwrap();
            let k_huber = kalman_gain(&est.cov, &h, &(r_cov / w)).unwrap();
            assert!(k_huber.norm() <= k_naive.norm() + 1e-15);
        }
    }

    #[test]
    fn empty_update_changes_nothing() {
        let mut est = EskfEstimator::initialize(0.0, Vec3::new(1.0, 0.0, 0.0), Quat::identity(), EskfConfig::default());
        let before = est.clone();
        let report = est.update(&[], &Extrinsics::default());
        assert!(report.entries.is_empty());
        assert_eq!(est, before);
    }

    fn gate_corners() -> [Vec3; 4] {
        [
            Vec3::new(5.0, 0.75, 0.75),
            Vec3::new(5.0, -0.75, 0.75),
            Vec3::new(5.0, -0.75, -0.75),
            Vec3::new(5.0, 0.75, -0.75),
        ]
    }

    #[test]
    fn two_corner_update_reduces_position_error() {
        let ext = Extrinsics::default();
        let truth = NominalState::default();
        let zs: Vec<_> = gate_corners()[..2].iter().map(|p| gate_measurement(*p, &truth, &ext)).collect();
        let mut start = truth;
        start.p += Vec3::new(0.0, 0.4, -0.3);
        let mut est = EskfEstimator::from_state(start, EskfConfig::default());
        let before = (est.nominal.p - truth.p).norm();
        let report = est.update(&zs, &ext);
        assert_eq!(report.applied(), 2);
        assert!((est.nominal.p - truth.p).norm() < before);
    }

    #[test]
    fn lone_corner_is_not_applied() {
        let ext = Extrinsics::default();
        let truth = NominalState::default();
        let z = gate_measurement(gate_corners()[0], &truth, &ext);
        let mut est = EskfEstimator::from_state(truth, EskfConfig::default());
        let report = est.update(&[z], &ext);
        assert_eq!(report.entries[0].status, UpdateStatus::TooFewCorners);
        assert_eq!(report.applied(), 0);
    }

    #[test]
    fn stale_and_behind_camera_measurements_are_skipped() {
        let ext = Extrinsics::default();
        let truth = NominalState { t: 1.0, ..NominalState::default() };
        let mut zs: Vec<_> = gate_corners().iter().map(|p| gate_measurement(*p, &truth, &ext)).collect();
        zs[0].t = 0.9;
        zs[1].p_gw.x = -5.0;
        let mut est = EskfEstimator::from_state(truth, EskfConfig::default());
        let report = est.update(&zs, &ext);
        assert_eq!(report.entries[0].status, UpdateStatus::Stale);
        assert_eq!(report.entries[1].status, UpdateStatus::BehindCamera);
        assert_eq!(report.applied(), 2);
    }

    #[test]
    fn covariance_stays_symmetric_psd_and_trace_shrinks() {
        let ext = Extrinsics::default();
        let truth = NominalState::default();
        let cfg = EskfConfig { r_pixel_sigma: 1e-9, ..EskfConfig::default() };
        let mut est = EskfEstimator::from_state(truth, cfg);
        for k in 1..=50 {
            est.propagate(&hover_imu(k as f64 * 0.002)).unwrap();
        }
        let zs: Vec<_> = gate_corners().iter().map(|p| gate_measurement(*p, &est.nominal, &ext)).collect();
        let trace_before = est.cov.trace();
        est.update(&zs, &ext);
        assert!(est.cov.trace() <= trace_before);
        assert!((est.cov - est.cov.transpose()).amax() < 1e-9);
        let min_eig = est.cov.symmetric_eigenvalues().min();
        assert!(min_eig > -1e-9, "min eigenvalue {min_eig}");
    }

    #[test]
    fn quaternion_norm_does_not_drift() {
        let mut est = EskfEstimator::initialize(0.0, Vec3::zeros(), Quat::identity(), EskfConfig::default());
        let dt = 0.002;
        for k in 1..=1_000_000u32 {
            let t = k as f64 * dt;
            est.nominal = propagate_nominal(&est.nominal, &Vec3::new(0.3, -0.1, 9.0), &Vec3::new(1.3, -2.1, 0.7), dt, &default_gravity());
            est.nominal.t = t;
        }
        assert!((est.nominal.q.norm() - 1.0).abs() < 1e-9);
    }
}
