//! State, sensor and map types shared by the estimator, smoother, simulator
//! and I/O layers.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{SMatrix, SVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{default_gravity, so3_exp, so3_log, Quat, Vec2, Vec3};

/// 15-dimensional error-state vector `[δp, δv, δθ, δb_a, δb_ω]`.
pub type ErrorVector = SVector<f64, 15>;
/// Error-state covariance, same block order as [`ErrorVector`].
pub type Covariance15 = SMatrix<f64, 15, 15>;
pub type Vec6 = Vector6<f64>;

/// Offsets of the error-state blocks.
pub mod block {
    pub const P: usize = 0;
    pub const V: usize = 3;
    pub const THETA: usize = 6;
    pub const BA: usize = 9;
    pub const BW: usize = 12;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("gate {id}: corners are not coplanar (off-plane distance {distance:.3e} m)")]
    NonCoplanarGate { id: u32, distance: f64 },
    #[error("gate {id}: consecutive corners coincide")]
    DegenerateGate { id: u32 },
    #[error("gate {id}: non-finite coordinates")]
    NonFiniteGate { id: u32 },
    #[error("duplicate gate id {0}")]
    DuplicateGateId(u32),
    #[error("gate {id}: width and height must be positive")]
    InvalidGateExtent { id: u32 },
    #[error("invalid noise parameters: {0}")]
    InvalidNoise(&'static str),
}

/// Full vehicle state: position, velocity, body-to-world attitude and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalState {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quat,
    pub b_a: Vec3,
    pub b_w: Vec3,
}

impl Default for NominalState {
    fn default() -> Self {
        Self {
            t: 0.0,
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: Quat::identity(),
            b_a: Vec3::zeros(),
            b_w: Vec3::zeros(),
        }
    }
}

impl NominalState {
    pub fn at_pose(t: f64, p: Vec3, q: Quat) -> Self {
        Self {
            t,
            p,
            q,
            ..Self::default()
        }
    }

    /// `x ⊕ δx`: additive on the Euclidean blocks, right-multiplied on attitude.
    pub fn compose(&self, dx: &ErrorVector) -> Self {
        compose_state(self, dx)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.b_a.iter()).chain(self.b_w.iter()).all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
            && self.t.is_finite()
    }
}

/// Injects an error state into a nominal state.
pub fn compose_state(nominal: &NominalState, dx: &ErrorVector) -> NominalState {
    let d = |offset: usize| dx.fixed_rows::<3>(offset).into_owned();
    let q = nominal.q * so3_exp(&d(block::THETA));
    NominalState {
        t: nominal.t,
        p: nominal.p + d(block::P),
        v: nominal.v + d(block::V),
        q: Quat::new_normalize(q.into_inner()),
        b_a: nominal.b_a + d(block::BA),
        b_w: nominal.b_w + d(block::BW),
    }
}

/// Pose-only difference `[p_a − p_b ; Log(q_b⁻¹ q_a)]`.
pub fn state_boxminus(a: &NominalState, b: &NominalState) -> Vec6 {
    let dp = a.p - b.p;
    let dth = so3_log(&(b.q.inverse() * a.q));
    Vec6::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z)
}

/// Full 15-dimensional difference, the inverse of [`compose_state`].
pub fn state_difference(a: &NominalState, b: &NominalState) -> ErrorVector {
    let mut dx = ErrorVector::zeros();
    dx.fixed_rows_mut::<3>(block::P).copy_from(&(a.p - b.p));
    dx.fixed_rows_mut::<3>(block::V).copy_from(&(a.v - b.v));
    dx.fixed_rows_mut::<3>(block::THETA).copy_from(&so3_log(&(b.q.inverse() * a.q)));
    dx.fixed_rows_mut::<3>(block::BA).copy_from(&(a.b_a - b.b_a));
    dx.fixed_rows_mut::<3>(block::BW).copy_from(&(a.b_w - b.b_w));
    dx
}

/// Linear interpolation on the Euclidean blocks, slerp on attitude.
pub fn interpolate_state(a: &NominalState, b: &NominalState, t: f64) -> NominalState {
    let span = b.t - a.t;
    let s = if span > 0.0 { ((t - a.t) / span).clamp(0.0, 1.0) } else { 0.0 };
    NominalState {
        t,
        p: a.p.lerp(&b.p, s),
        v: a.v.lerp(&b.v, s),
        q: a.q.slerp(&b.q, s),
        b_a: a.b_a.lerp(&b.b_a, s),
        b_w: a.b_w.lerp(&b.b_w, s),
    }
}

/// State of a time-sorted trajectory at `t`. Returns `None` outside the
/// covered span or when the bracketing samples are more than `max_gap` apart.
pub fn sample_trajectory(traj: &[NominalState], t: f64, max_gap: Option<f64>) -> Option<NominalState> {
    let first = traj.first()?;
    let last = traj.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    let i = traj.partition_point(|x| x.t < t);
    if traj[i].t == t {
        return Some(NominalState { t, ..traj[i] });
    }
    let (a, b) = (&traj[i - 1], &traj[i]);
    if max_gap.is_some_and(|g| b.t - a.t > g) {
        return None;
    }
    Some(interpolate_state(a, b, t))
}

/// Raw IMU sample. The reading is held constant over the interval that ends at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub a_m: Vec3,
    pub w_m: Vec3,
}

/// IMU noise densities and the gravity vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Accelerometer white noise (m/s²/√Hz).
    pub sigma_a: f64,
    /// Gyroscope white noise (rad/s/√Hz).
    pub sigma_w: f64,
    /// Accelerometer bias random walk (m/s³/√Hz).
    pub sigma_ba: f64,
    /// Gyroscope bias random walk (rad/s²/√Hz).
    pub sigma_bw: f64,
    pub gravity: Vec3,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_a: 0.02,
            sigma_w: 0.002,
            sigma_ba: 1e-4,
            sigma_bw: 1e-5,
            gravity: default_gravity(),
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sigmas = [self.sigma_a, self.sigma_w, self.sigma_ba, self.sigma_bw];
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(ModelError::InvalidNoise("all noise densities must be positive"));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::InvalidNoise("gravity must be finite"));
        }
        Ok(())
    }
}

/// Inner-corner labels in map order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CornerLabel {
    TL,
    TR,
    BR,
    BL,
}

impl CornerLabel {
    pub const ALL: [CornerLabel; 4] = [CornerLabel::TL, CornerLabel::TR, CornerLabel::BR, CornerLabel::BL];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Left-right mirror image (TL↔TR, BL↔BR).
    pub fn mirrored(self) -> Self {
        match self {
            CornerLabel::TL => CornerLabel::TR,
            CornerLabel::TR => CornerLabel::TL,
            CornerLabel::BR => CornerLabel::BL,
            CornerLabel::BL => CornerLabel::BR,
        }
    }
}

impl fmt::Display for CornerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Coplanarity tolerance for gate corners (m).
pub const GATE_PLANARITY_TOLERANCE: f64 = 1e-6;

/// Racing gate with four inner corners ordered `[TL, TR, BR, BL]` as seen
/// from the front (the side the vehicle approaches from).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub id: u32,
    pub corners_w: [Vec3; 4],
}

impl Gate {
    pub fn new(id: u32, corners_w: [Vec3; 4]) -> Result<Self, ModelError> {
        let gate = Self { id, corners_w };
        gate.validate()?;
        Ok(gate)
    }

    /// Builds a gate from its centre, orientation and inner extent. The gate's
    /// local x axis is the pass-through direction, y points left and z up;
    /// angles are intrinsic yaw-pitch-roll in radians.
    pub fn from_pose(
        id: u32,
        center: Vec3,
        yaw: f64,
        pitch: f64,
        roll: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, ModelError> {
        if !(width > 0.0 && height > 0.0) {
            return Err(ModelError::InvalidGateExtent { id });
        }
        let r = Quat::from_euler_angles(roll, pitch, yaw);
        let (hw, hh) = (0.5 * width, 0.5 * height);
        let local = [
            Vec3::new(0.0, hw, hh),
            Vec3::new(0.0, -hw, hh),
            Vec3::new(0.0, -hw, -hh),
            Vec3::new(0.0, hw, -hh),
        ];
        Self::new(id, local.map(|c| center + r.transform_vector(&c)))
    }

    pub fn corner(&self, label: CornerLabel) -> Vec3 {
        self.corners_w[label.index()]
    }

    pub fn center(&self) -> Vec3 {
        self.corners_w.iter().sum::<Vec3>() / 4.0
    }

    /// Unit normal pointing in the pass-through direction (front to back).
    pub fn normal(&self) -> Vec3 {
        let [tl, tr, br, bl] = self.corners_w;
        // (right-to-left) × (bottom-to-top) points forward for a front view.
        let left = (tl + bl) - (tr + br);
        let up = (tl + tr) - (bl + br);
        left.cross(&up).normalize()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let id = self.id;
        if self.corners_w.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(ModelError::NonFiniteGate { id });
        }
        for i in 0..4 {
            let d = (self.corners_w[(i + 1) % 4] - self.corners_w[i]).norm();
            if d <= GATE_PLANARITY_TOLERANCE {
                return Err(ModelError::DegenerateGate { id });
            }
        }
        let [a, b, c, d] = self.corners_w;
        let n = (b - a).cross(&(d - a));
        let n_norm = n.norm();
        if n_norm <= f64::EPSILON {
            return Err(ModelError::DegenerateGate { id });
        }
        let distance = ((c - a).dot(&n) / n_norm).abs();
        if distance > GATE_PLANARITY_TOLERANCE {
            return Err(ModelError::NonCoplanarGate { id, distance });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateMap {
    gates: Vec<Gate>,
}

impl GateMap {
    pub fn new(gates: Vec<Gate>) -> Result<Self, ModelError> {
        let mut seen = HashSet::new();
        for gate in &gates {
            gate.validate()?;
            if !seen.insert(gate.id) {
                return Err(ModelError::DuplicateGateId(gate.id));
            }
        }
        Ok(Self { gates })
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn get(&self, id: u32) -> Option<&Gate> {
        self.gates.iter().find(|g| g.id == id)
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }
}

/// One detected corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedCorner {
    pub px: Vec2,
    /// Undistorted normalized coordinates; filled lazily from `px`.
    pub norm: Option<Vec2>,
    pub score: f64,
}

/// A gate detection: up to four labelled corners in `[TL, TR, BR, BL]` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDetection {
    pub t: f64,
    pub corners: [Option<DetectedCorner>; 4],
    pub gate_id: Option<u32>,
}

impl GateDetection {
    pub fn new(t: f64, corners: [Option<DetectedCorner>; 4]) -> Self {
        Self {
            t,
            corners,
            gate_id: None,
        }
    }

    pub fn present_count(&self) -> usize {
        self.corners.iter().flatten().count()
    }

    pub fn present(&self) -> impl Iterator<Item = (CornerLabel, &DetectedCorner)> {
        self.corners
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (CornerLabel::from_index(i), c)))
    }

    /// Centroid of the present corners in pixels.
    pub fn centroid_px(&self) -> Option<Vec2> {
        let n = self.present_count();
        (n > 0).then(|| self.present().map(|(_, c)| c.px).sum::<Vec2>() / n as f64)
    }

    /// Copy with every corner's label mirrored left-right.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for label in CornerLabel::ALL {
            out.corners[label.mirrored().index()] = self.corners[label.index()];
        }
        out
    }
}

/// A normalized corner observation paired with its world-frame map corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerMeasurement {
    pub t: f64,
    pub u_norm: Vec2,
    pub p_gw: Vec3,
    pub gate_id: u32,
    pub corner_label: CornerLabel,
    pub score: f64,
}
