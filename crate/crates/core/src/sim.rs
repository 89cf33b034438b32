//! Synthetic ground truth: closed-form flight paths, IMU streams consistent
//! with the filter's discrete kinematics, and corrupted gate-corner
//! detections.
//!
//! Trajectories follow a path `c(θ)` with phase `θ(t)`. Velocity and
//! acceleration are analytic; position is accumulated with the trapezoid rule
//! from the analytic velocity, so that the synthesized IMU reproduces the
//! sampled states exactly under first-order propagation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3_log, world_to_camera, CameraModel, Extrinsics, Quat, Vec2, Vec3};
use crate::model::{
    CornerLabel, DetectedCorner, Gate, GateDetection, GateMap, ImuSample, ModelError, NoiseParams, NominalState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(&'static str),
    #[error("invalid corruption spec: {0}")]
    InvalidCorruption(&'static str),
    #[error(transparent)]
    Map(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Ellipse,
    Lemniscate,
    /// Closed 3D loop with a steep descending segment and a tight banked turn.
    Racetrack3d,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Semi-axes of the horizontal footprint (m).
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Mean altitude (m).
    pub height: f64,
    /// Altitude variation amplitude (m).
    pub height_amplitude: f64,
    /// Time for one lap at full speed (s).
    pub period: f64,
    pub duration: f64,
    /// Time constant of the speed ramp from rest (s); zero starts at full speed.
    pub ramp_time: f64,
    /// Stationary time before the ramp starts (s).
    pub hold_time: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Ellipse,
            semi_major: 5.0,
            semi_minor: 3.0,
            height: 1.5,
            height_amplitude: 0.0,
            period: 4.0,
            duration: 5.0,
            ramp_time: 0.0,
            hold_time: 0.0,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(SimError::InvalidSpec("period must be positive"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::InvalidSpec("duration must be positive"));
        }
        if self.kind != TrajectoryKind::Static && !(self.semi_major > 0.0 && self.semi_minor > 0.0) {
            return Err(SimError::InvalidSpec("semi-axes must be positive"));
        }
        if self.ramp_time < 0.0 || self.hold_time < 0.0 {
            return Err(SimError::InvalidSpec("ramp and hold times must be non-negative"));
        }
        Ok(())
    }

    /// Path point and its first two derivatives with respect to the phase.
    fn path(&self, th: f64) -> (Vec3, Vec3, Vec3) {
        let (a, b, h, hz) = (self.semi_major, self.semi_minor, self.height, self.height_amplitude);
        let (s, c) = th.sin_cos();
        match self.kind {
            TrajectoryKind::Static => (Vec3::new(0.0, 0.0, h), Vec3::x(), Vec3::zeros()),
            TrajectoryKind::Ellipse => (
                Vec3::new(a * c, b * s, h + hz * (2.0 * th).sin()),
                Vec3::new(-a * s, b * c, 2.0 * hz * (2.0 * th).cos()),
                Vec3::new(-a * c, -b * s, -4.0 * hz * (2.0 * th).sin()),
            ),
            TrajectoryKind::Lemniscate => {
                let (s2, c2) = (2.0 * th).sin_cos();
                (
                    Vec3::new(a * s, 0.5 * b * s2, h + hz * c2),
                    Vec3::new(a * c, b * c2, -2.0 * hz * s2),
                    Vec3::new(-a * s, -2.0 * b * s2, -4.0 * hz * c2),
                )
            }
            TrajectoryKind::Racetrack3d => {
                // A sin 3θ term on the altitude gives a steep descent on one side;
                // the lateral cos 2θ pinch tightens the turns.
                let (s3, c3) = (3.0 * th).sin_cos();
                let (s2, c2) = (2.0 * th).sin_cos();
                let k = 0.25;
                (
                    Vec3::new(a * c, b * s * (1.0 + k * c2), h + hz * (0.6 * s + 0.4 * s3)),
                    Vec3::new(-a * s, b * (c * (1.0 + k * c2) - 2.0 * k * s * s2), hz * (0.6 * c + 1.2 * c3)),
                    Vec3::new(
                        -a * c,
                        b * (-s * (1.0 + k * c2) - 4.0 * k * c * s2 - 4.0 * k * s * c2),
                        hz * (-0.6 * s - 3.6 * s3),
                    ),
                )
            }
        }
    }

    /// Phase and its first two time derivatives.
    fn phase(&self, t: f64) -> (f64, f64, f64) {
        if self.kind == TrajectoryKind::Static {
            return (0.0, 0.0, 0.0);
        }
        let w = 2.0 * std::f64::consts::PI / self.period;
        let u = t - self.hold_time;
        if u < 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if self.ramp_time <= 0.0 {
            return (w * u, w, 0.0);
        }
        // Rate 1 − (1 + u/τ)e^{−u/τ}: starts with zero phase acceleration.
        let tau = self.ramp_time;
        let e = (-u / tau).exp();
        (
            w * (u - 2.0 * tau * (1.0 - e) + u * e),
            w * (1.0 - (1.0 + u / tau) * e),
            w * u / (tau * tau) * e,
        )
    }

    /// Closed-form position, velocity and acceleration at `t`.
    pub fn kinematics(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let (th, th_d, th_dd) = self.phase(t);
        let (c, c1, c2) = self.path(th);
        (c, c1 * th_d, c2 * th_d * th_d + c1 * th_dd)
    }

    /// Attitude: yaw and pitch from the path tangent, roll from the lateral
    /// acceleration of a coordinated turn, softly limited to 60°.
    pub fn attitude(&self, t: f64) -> Quat {
        let (th, _, _) = self.phase(t);
        let (_, tangent, _) = self.path(th);
        let (_, _, acc) = self.kinematics(t);
        let yaw = tangent.y.atan2(tangent.x);
        let pitch = -tangent.z.atan2(tangent.xy().norm());
        let left = Vec3::new(-yaw.sin(), yaw.cos(), 0.0);
        let lateral = acc.dot(&left);
        let limit = 60f64.to_radians();
        let bank = -(lateral.atan2(crate::geometry::GRAVITY_MAGNITUDE));
        let roll = limit * (bank / limit).tanh();
        Quat::from_euler_angles(roll, pitch, yaw)
    }
}

/// True state sample with its analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthSample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    /// World-frame acceleration.
    pub a: Vec3,
    pub q: Quat,
    /// Body-frame angular rate.
    pub w: Vec3,
    pub b_a: Vec3,
    pub b_w: Vec3,
}

impl GroundTruthSample {
    pub fn state(&self) -> NominalState {
        NominalState {
            t: self.t,
            p: self.p,
            v: self.v,
            q: self.q,
            b_a: self.b_a,
            b_w: self.b_w,
        }
    }
}

/// Samples the trajectory at `rate_hz` from `t = 0` through `duration`.
/// Biases are left at zero; [`synthesize_imu`] fills them in.
pub fn generate_trajectory(spec: &TrajectorySpec, rate_hz: f64) -> Result<Vec<GroundTruthSample>, SimError> {
    spec.validate()?;
    if !(rate_hz > 0.0) {
        return Err(SimError::InvalidSpec("sample rate must be positive"));
    }
    let dt = 1.0 / rate_hz;
    let n = (spec.duration * rate_hz).round() as usize;
    let h = 1e-5;
    let mut out: Vec<GroundTruthSample> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let (p_closed, v, a) = spec.kinematics(t);
        let q = spec.attitude(t);
        let w = if spec.kind == TrajectoryKind::Static {
            Vec3::zeros()
        } else {
            so3_log(&(spec.attitude(t - h).inverse() * spec.attitude(t + h))) / (2.0 * h)
        };
        let p = match out.last() {
            Some(prev) => prev.p + 0.5 * (prev.v + v) * (t - prev.t),
            None => p_closed,
        };
        out.push(GroundTruthSample {
            t,
            p,
            v,
            a,
            q,
            w,
            b_a: Vec3::zeros(),
            b_w: Vec3::zeros(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub pixel_noise_sigma: f64,
    /// Per-corner dropout probability.
    pub dropout_prob: f64,
    /// Additional dropout probability per label `[TL, TR, BR, BL]`.
    pub label_dropout: [f64; 4],
    /// Probability that a detection's labels are randomly permuted.
    pub label_swap_prob: f64,
    /// Probability that a corner is replaced by a gross outlier.
    pub outlier_prob: f64,
    /// Standard deviation of the gross-outlier displacement (px).
    pub outlier_sigma: f64,
    pub detection_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub bias_a: Vec3,
    pub bias_w: Vec3,
    /// Scale on the IMU noise densities; zero gives exact IMU data.
    pub imu_noise_scale: f64,
    /// Lower the score of corrupted corners.
    pub score_corruption: bool,
    /// Gates beyond this distance from the camera are not detected (m).
    pub max_range_m: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            pixel_noise_sigma: 1.0,
            dropout_prob: 0.0,
            label_dropout: [0.0; 4],
            label_swap_prob: 0.0,
            outlier_prob: 0.0,
            outlier_sigma: 50.0,
            detection_rate_hz: 85.0,
            imu_rate_hz: 500.0,
            bias_a: Vec3::zeros(),
            bias_w: Vec3::zeros(),
            imu_noise_scale: 1.0,
            score_corruption: false,
            max_range_m: 15.0,
        }
    }
}

impl CorruptionSpec {
    /// No pixel noise, dropouts, outliers, biases or IMU noise.
    pub fn clean() -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            imu_noise_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [self.dropout_prob, self.label_swap_prob, self.outlier_prob];
        if probs.iter().chain(self.label_dropout.iter()).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SimError::InvalidCorruption("probabilities must lie in [0, 1]"));
        }
        if !(self.detection_rate_hz > 0.0 && self.imu_rate_hz > 0.0) {
            return Err(SimError::InvalidCorruption("rates must be positive"));
        }
        if self.pixel_noise_sigma < 0.0 || self.outlier_sigma < 0.0 || self.imu_noise_scale < 0.0 {
            return Err(SimError::InvalidCorruption("noise levels must be non-negative"));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("finite non-negative sigma")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> Vec3 {
    Vec3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

/// IMU readings over each sampling interval that reproduce the next truth
/// sample exactly under first-order propagation, plus biases and noise.
/// Sample `n` covers `(t_{n-1}, t_n]`. The truth biases are written back into
/// `truth` so that it carries the full state.
pub fn synthesize_imu(
    truth: &mut [GroundTruthSample],
    corruption: &CorruptionSpec,
    noise: &NoiseParams,
    seed: u64,
) -> Vec<ImuSample> {
    let mut rng = stream_rng(seed, 1);
    let scale = corruption.imu_noise_scale;
    let mut b_a = corruption.bias_a;
    let mut b_w = corruption.bias_w;
    if let Some(first) = truth.first_mut() {
        first.b_a = b_a;
        first.b_w = b_w;
    }
    let mut out = Vec::with_capacity(truth.len().saturating_sub(1));
    for n in 1..truth.len() {
        let (prev, cur) = (truth[n - 1], truth[n]);
        let dt = cur.t - prev.t;
        let a_true = prev.q.inverse_transform_vector(&((cur.v - prev.v) / dt - noise.gravity));
        let w_true = so3_log(&(prev.q.inverse() * cur.q)) / dt;
        let mut a_m = a_true + b_a;
        let mut w_m = w_true + b_w;
        if scale > 0.0 {
            let na = gaussian(scale * noise.sigma_a / dt.sqrt());
            let nw = gaussian(scale * noise.sigma_w / dt.sqrt());
            a_m += gaussian_vec(&mut rng, &na);
            w_m += gaussian_vec(&mut rng, &nw);
            let nba = gaussian(scale * noise.sigma_ba * dt.sqrt());
            let nbw = gaussian(scale * noise.sigma_bw * dt.sqrt());
            b_a += gaussian_vec(&mut rng, &nba);
            b_w += gaussian_vec(&mut rng, &nbw);
        }
        truth[n].b_a = b_a;
        truth[n].b_w = b_w;
        out.push(ImuSample { t: cur.t, a_m, w_m });
    }
    out
}

/// Indices of truth samples at which frames are captured: the sample nearest
/// to each multiple of the detection period.
pub fn detection_indices(truth: &[GroundTruthSample], rate_hz: f64) -> Vec<usize> {
    let Some(last) = truth.last() else {
        return Vec::new();
    };
    let period = 1.0 / rate_hz;
    let mut out: Vec<usize> = Vec::new();
    let mut k = 1usize;
    loop {
        let t = k as f64 * period;
        if t > last.t {
            break;
        }
        let i = truth.partition_point(|s| s.t < t);
        let i = if i > 0 && (i == truth.len() || (t - truth[i - 1].t) <= (truth[i].t - t)) { i - 1 } else { i };
        if out.last().is_none_or(|&j| i > j) {
            out.push(i);
        }
        k += 1;
    }
    out
}

/// True pixel positions of a gate's corners in detector label order, or
/// `None` for corners outside the image or behind the camera. Labels are
/// mirrored when the camera is behind the gate plane.
pub fn visible_corners(
    gate: &Gate,
    state: &NominalState,
    cam: &CameraModel,
    ext: &Extrinsics,
    max_range: f64,
) -> Option<[Option<Vec2>; 4]> {
    let cam_pos = state.p + state.q.transform_vector(&ext.p_bc);
    if (gate.center() - cam_pos).norm() > max_range {
        return None;
    }
    let rear = (cam_pos - gate.center()).dot(&gate.normal()) > 0.0;
    let mut out = [None; 4];
    let mut any = false;
    for label in CornerLabel::ALL {
        let p_c = world_to_camera(&gate.corner(label), &state.p, &state.q, ext);
        if p_c.z < 0.1 {
            continue;
        }
        let Ok(px) = cam.project_to_pixel(&p_c) else {
            continue;
        };
        if !cam.in_image(&px) {
            continue;
        }
        let slot = if rear { label.mirrored() } else { label };
        out[slot.index()] = Some(px);
        any = true;
    }
    any.then_some(out)
}

/// Score given to corrupted corners when score corruption is enabled.
pub const CORRUPTED_SCORE: f64 = 0.5;

/// Projects every gate at each detection frame and applies the corruption
/// model: pixel noise, gross outliers, dropout and label permutation.
pub fn synthesize_detections(
    truth: &[GroundTruthSample],
    map: &GateMap,
    cam: &CameraModel,
    ext: &Extrinsics,
    corruption: &CorruptionSpec,
    seed: u64,
) -> Vec<GateDetection> {
    let mut rng = stream_rng(seed, 2);
    let pixel = gaussian(corruption.pixel_noise_sigma);
    let outlier = gaussian(corruption.outlier_sigma);
    let mut out = Vec::new();
    for i in detection_indices(truth, corruption.detection_rate_hz) {
        let s = &truth[i];
        let state = s.state();
        for gate in map.gates() {
            let Some(px) = visible_corners(gate, &state, cam, ext, corruption.max_range_m) else {
                continue;
            };
            let mut corners: [Option<DetectedCorner>; 4] = [None; 4];
            for (k, slot) in corners.iter_mut().enumerate() {
                let Some(p) = px[k] else { continue };
                let mut p = p;
                let mut corrupted = false;
                if corruption.pixel_noise_sigma > 0.0 {
                    p += Vec2::new(pixel.sample(&mut rng), pixel.sample(&mut rng));
                }
                if corruption.outlier_prob > 0.0 && rng.random::<f64>() < corruption.outlier_prob {
                    p += Vec2::new(outlier.sample(&mut rng), outlier.sample(&mut rng));
                    corrupted = true;
                }
                let drop_p = corruption.dropout_prob + corruption.label_dropout[k];
                if drop_p > 0.0 && rng.random::<f64>() < drop_p {
                    continue;
                }
                let score = if corrupted && corruption.score_corruption { CORRUPTED_SCORE } else { 1.0 };
                *slot = Some(DetectedCorner { px: p, norm: None, score });
            }
            if corners.iter().all(Option::is_none) {
                continue;
            }
            if corruption.label_swap_prob > 0.0 && rng.random::<f64>() < corruption.label_swap_prob {
                let mut perm = [0usize, 1, 2, 3];
                while perm == [0, 1, 2, 3] {
                    perm.shuffle(&mut rng);
                }
                let orig = corners;
                for k in 0..4 {
                    corners[perm[k]] = orig[k];
                }
            }
            out.push(GateDetection::new(s.t, corners));
        }
    }
    out
}

/// Places `count` gates evenly in phase along the path, centred on it and
/// facing along the direction of travel. A static trajectory gets gates in a
/// row straight ahead.
pub fn gates_along_path(spec: &TrajectorySpec, count: usize, width: f64, height: f64, phase_offset: f64) -> Result<GateMap, SimError> {
    spec.validate()?;
    let mut gates = Vec::with_capacity(count);
    for i in 0..count {
        let gate = if spec.kind == TrajectoryKind::Static {
            let center = Vec3::new(4.0 + 3.0 * i as f64, 0.8 * i as f64, spec.height);
            Gate::from_pose(i as u32, center, 0.0, 0.0, 0.0, width, height)?
        } else {
            let th = phase_offset + 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let (c, d, _) = spec.path(th);
            let yaw = d.y.atan2(d.x);
            let pitch = -d.z.atan2(d.xy().norm());
            Gate::from_pose(i as u32, c, yaw, pitch, 0.0, width, height)?
        };
        gates.push(gate);
    }
    Ok(GateMap::new(gates)?)
}

/// Camera mounting described by an up-tilt angle and lever arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraMount {
    pub uptilt_deg: f64,
    pub p_bc: Vec3,
}

impl Default for CameraMount {
    fn default() -> Self {
        Self {
            uptilt_deg: 0.0,
            p_bc: Vec3::new(0.1, 0.0, 0.02),
        }
    }
}

impl CameraMount {
    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics::forward_camera(self.uptilt_deg.to_radians(), self.p_bc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateLayout {
    pub count: usize,
    pub width: f64,
    pub height: f64,
    /// Phase of the first gate along the path (rad).
    pub phase_offset: f64,
}

impl Default for GateLayout {
    fn default() -> Self {
        Self {
            count: 4,
            width: 1.5,
            height: 1.5,
            phase_offset: 0.9,
        }
    }
}

/// Everything needed to generate one synthetic run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub trajectory: TrajectorySpec,
    pub corruption: CorruptionSpec,
    pub noise: NoiseParams,
    pub camera: CameraModel,
    pub mount: CameraMount,
    pub gates: GateLayout,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            corruption: CorruptionSpec::default(),
            noise: NoiseParams::default(),
            camera: CameraModel::default(),
            mount: CameraMount::default(),
            gates: GateLayout::default(),
        }
    }
}

impl Scenario {
    /// 5 s ellipse at full speed.
    pub fn ellipse() -> Self {
        Self::default()
    }

    /// Figure-eight with gentle altitude changes.
    pub fn lemniscate() -> Self {
        Self {
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::Lemniscate,
                semi_major: 7.0,
                semi_minor: 4.0,
                height_amplitude: 0.3,
                period: 7.0,
                duration: 14.0,
                ramp_time: 0.5,
                hold_time: 1.0,
                ..TrajectorySpec::default()
            },
            gates: GateLayout {
                count: 6,
                phase_offset: 0.55,
                ..GateLayout::default()
            },
            ..Self::default()
        }
    }

    /// 3D loop with a steep descent and tight turns, starting from rest.
    pub fn racetrack3d() -> Self {
        Self {
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::Racetrack3d,
                semi_major: 9.0,
                semi_minor: 5.0,
                height: 2.5,
                height_amplitude: 1.2,
                period: 8.0,
                duration: 17.0,
                ramp_time: 0.5,
                hold_time: 1.0,
                ..TrajectorySpec::default()
            },
            gates: GateLayout {
                count: 7,
                phase_offset: 0.7,
                ..GateLayout::default()
            },
            ..Self::default()
        }
    }

    /// Stationary vehicle facing a row of gates.
    pub fn podium() -> Self {
        Self {
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::Static,
                duration: 2.0,
                ..TrajectorySpec::default()
            },
            gates: GateLayout {
                count: 2,
                ..GateLayout::default()
            },
            ..Self::default()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "ellipse" => Some(Self::ellipse()),
            "lemniscate" => Some(Self::lemniscate()),
            "racetrack3d" => Some(Self::racetrack3d()),
            "podium" => Some(Self::podium()),
            _ => None,
        }
    }

    pub fn extrinsics(&self) -> Extrinsics {
        self.mount.extrinsics()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.trajectory.validate()?;
        self.corruption.validate()?;
        self.noise.validate()?;
        self.camera
            .validate()
            .map_err(|_| SimError::InvalidSpec("camera intrinsics are invalid"))?;
        Ok(())
    }
}

/// Output of one synthetic run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub truth: Vec<GroundTruthSample>,
    pub imu: Vec<ImuSample>,
    pub detections: Vec<GateDetection>,
    pub map: GateMap,
}

impl SimRun {
    pub fn truth_states(&self) -> Vec<NominalState> {
        self.truth.iter().map(GroundTruthSample::state).collect()
    }
}

pub fn simulate(scenario: &Scenario, seed: u64) -> Result<SimRun, SimError> {
    scenario.validate()?;
    let mut truth = generate_trajectory(&scenario.trajectory, scenario.corruption.imu_rate_hz)?;
    let imu = synthesize_imu(&mut truth, &scenario.corruption, &scenario.noise, seed);
    let g = &scenario.gates;
    let map = gates_along_path(&scenario.trajectory, g.count, g.width, g.height, g.phase_offset)?;
    let detections = synthesize_detections(
        &truth,
        &map,
        &scenario.camera,
        &scenario.extrinsics(),
        &scenario.corruption,
        seed,
    );
    Ok(SimRun {
        truth,
        imu,
        detections,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::propagate_nominal;
    use crate::geometry::default_gravity;

    #[test]
    fn static_trajectory_is_constant() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Static,
            ..TrajectorySpec::default()
        };
        let truth = generate_trajectory(&spec, 500.0).unwrap();
        for s in &truth {
            assert_eq!(s.p, truth[0].p);
            assert_eq!(s.v, Vec3::zeros());
            assert_eq!(s.a, Vec3::zeros());
            assert_eq!(s.w, Vec3::zeros());
        }
    }

    #[test]
    fn ellipse_peak_speed() {
        let spec = TrajectorySpec::default();
        let truth = generate_trajectory(&spec, 500.0).unwrap();
        let peak = truth.iter().map(|s| s.v.norm()).fold(0.0, f64::max);
        let expected = 2.0 * std::f64::consts::PI * 5.0 / 4.0;
        assert!((peak - expected).abs() < 1e-6, "{peak}");
    }

    #[test]
    fn position_derivative_matches_velocity() {
        for scenario in [Scenario::ellipse(), Scenario::lemniscate(), Scenario::racetrack3d()] {
            let spec = scenario.trajectory;
            let truth = generate_trajectory(&spec, 500.0).unwrap();
            for w in truth.windows(3) {
                let fd = (w[2].p - w[0].p) / (w[2].t - w[0].t);
                assert!((fd - w[1].v).norm() < 1e-4, "{:?} {} {}", spec.kind, w[1].t, (fd - w[1].v).norm());
            }
            let h = 1e-5;
            for t in [0.3, 2.1, 4.7] {
                let (p0, ..) = spec.kinematics(t - h);
                let (p1, ..) = spec.kinematics(t + h);
                let (_, v, _) = spec.kinematics(t);
                assert!(((p1 - p0) / (2.0 * h) - v).norm() < 1e-6);
                let (_, v0, _) = spec.kinematics(t - h);
                let (_, v1, _) = spec.kinematics(t + h);
                let (_, _, a_mid) = spec.kinematics(t);
                assert!(((v1 - v0) / (2.0 * h) - a_mid).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn hover_imu_reads_gravity() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Static,
            duration: 0.1,
            ..TrajectorySpec::default()
        };
        let mut truth = generate_trajectory(&spec, 500.0).unwrap();
        let imu = synthesize_imu(&mut truth, &CorruptionSpec::clean(), &NoiseParams::default(), 0);
        for s in imu {
            assert!((s.a_m - Vec3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
            assert!(s.w_m.norm() < 1e-12);
        }
    }

    #[test]
    fn clean_imu_reproduces_truth() {
        let scenario = Scenario::racetrack3d();
        let mut truth = generate_trajectory(&scenario.trajectory, 500.0).unwrap();
        let imu = synthesize_imu(&mut truth, &CorruptionSpec::clean(), &scenario.noise, 0);
        let g = default_gravity();
        let mut x = truth[0].state();
        let mut max_err: f64 = 0.0;
        for (s, tr) in imu.iter().zip(&truth[1..]) {
            x = propagate_nominal(&x, &s.a_m, &s.w_m, s.t - x.t, &g);
            x.t = s.t;
            max_err = max_err.max((x.p - tr.p).norm());
        }
        assert!(max_err < 1e-6, "{max_err}");
    }

    #[test]
    fn accelerometer_noise_variance() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Static,
            duration: 200.0,
            ..TrajectorySpec::default()
        };
        let mut truth = generate_trajectory(&spec, 500.0).unwrap();
        let noise = NoiseParams::default();
        let corruption = CorruptionSpec {
            imu_noise_scale: 1.0,
            ..CorruptionSpec::clean()
        };
        let imu = synthesize_imu(&mut truth, &corruption, &noise, 3);
        // Bias random walk is negligible over this span at these densities.
        let xs: Vec<f64> = imu.iter().take(100_000).map(|s| s.a_m.x).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let expected = noise.sigma_a.powi(2) * 500.0;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn deterministic_for_seed() {
        let mut scenario = Scenario::lemniscate();
        scenario.corruption.dropout_prob = 0.2;
        scenario.corruption.outlier_prob = 0.1;
        scenario.corruption.label_swap_prob = 0.1;
        let a = simulate(&scenario, 11).unwrap();
        let b = simulate(&scenario, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate(&scenario, 12).unwrap();
        assert_ne!(a.imu, c.imu);
    }

    #[test]
    fn facing_gate_gives_exact_corners() {
        let scenario = Scenario {
            corruption: CorruptionSpec::clean(),
            ..Scenario::podium()
        };
        let run = simulate(&scenario, 0).unwrap();
        let ext = scenario.extrinsics();
        let first = &run.detections[0];
        assert_eq!(first.present_count(), 4);
        let gate = run.map.get(0).unwrap();
        let state = run.truth[0].state();
        for (label, c) in first.present() {
            let p_c = world_to_camera(&gate.corner(label), &state.p, &state.q, &ext);
            assert_eq!(c.px, scenario.camera.project_to_pixel(&p_c).unwrap());
            assert_eq!(c.score, 1.0);
        }
    }

    #[test]
    fn rear_view_mirrors_labels() {
        let gate = Gate::from_pose(0, Vec3::new(0.0, 0.0, 1.5), 0.0, 0.0, 0.0, 1.5, 1.5).unwrap();
        let cam = CameraModel::default();
        let ext = Extrinsics::default();
        // Behind the gate looking back along −x.
        let state = NominalState::at_pose(
            0.0,
            Vec3::new(5.0, 0.0, 1.5),
            Quat::from_euler_angles(0.0, 0.0, std::f64::consts::PI),
        );
        let px = visible_corners(&gate, &state, &cam, &ext, 15.0).unwrap();
        // Apparent top-left is the physical TR corner.
        let tl = px[CornerLabel::TL.index()].unwrap();
        let tr = px[CornerLabel::TR.index()].unwrap();
        assert!(tl.x < tr.x);
        let phys_tr = cam
            .project_to_pixel(&world_to_camera(&gate.corner(CornerLabel::TR), &state.p, &state.q, &ext))
            .unwrap();
        assert_eq!(tl, phys_tr);
    }

    #[test]
    fn label_dropout_yields_two_corner_detections() {
        let mut scenario = Scenario::podium();
        scenario.corruption = CorruptionSpec {
            label_dropout: [0.0, 0.0, 1.0, 1.0],
            ..CorruptionSpec::clean()
        };
        let run = simulate(&scenario, 0).unwrap();
        assert!(!run.detections.is_empty());
        for d in &run.detections {
            assert_eq!(d.present_count(), 2);
            assert!(d.corners[0].is_some() && d.corners[1].is_some());
        }
    }

    #[test]
    fn detections_are_time_aligned_with_imu() {
        let run = simulate(&Scenario::ellipse(), 1).unwrap();
        let imu_times: Vec<f64> = run.imu.iter().map(|s| s.t).collect();
        for d in &run.detections {
            assert!(imu_times.binary_search_by(|t| t.total_cmp(&d.t)).is_ok());
        }
        let idx = detection_indices(&run.truth, 85.0);
        let rate = idx.len() as f64 / run.truth.last().unwrap().t;
        assert!((rate - 85.0).abs() < 1.0);
    }

    #[test]
    fn roll_is_bounded() {
        for scenario in [Scenario::ellipse(), Scenario::lemniscate(), Scenario::racetrack3d()] {
            let truth = generate_trajectory(&scenario.trajectory, 100.0).unwrap();
            for s in &truth {
                let (roll, _, _) = s.q.euler_angles();
                assert!(roll.abs() <= 60f64.to_radians() + 1e-9);
            }
        }
    }
}
