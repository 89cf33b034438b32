//! Trajectory and image-space error metrics, and the filter ablation harnesses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eskf::{EskfConfig, RobustMode, CHI2_95_2DOF};
use crate::fgo::IterationLog;
use crate::geometry::{so3_exp, so3_log, world_to_camera, CameraModel, Extrinsics, Vec3};
use crate::model::{sample_trajectory, GateDetection, GateMap, NominalState};
use crate::pipeline::{run_fgo, run_vins, FgoOptions, PipelineError, Rig, VinsOptions};
use crate::sim::{simulate, Scenario, SimError};
use crate::vision::VisionConfig;

/// Largest gap between reference samples bridged by interpolation (s).
pub const MAX_INTERPOLATION_GAP: f64 = 0.05;
/// Shortest overlap between estimate and reference accepted for evaluation (s).
pub const MIN_OVERLAP: f64 = 1.0;
/// Translation RMS above which a run counts as diverged (m).
pub const DIVERGENCE_THRESHOLD: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("estimate and reference overlap for only {overlap} s")]
    NoOverlap { overlap: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub t: f64,
    pub translation: f64,
    pub rotation_deg: f64,
    pub velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub e_t: f64,
    pub e_r: f64,
    pub e_v: f64,
    pub samples: Vec<ErrorSample>,
}

fn rms(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 { 0.0 } else { (sum / n as f64).sqrt() }
}

/// RMS errors of `estimate` against `reference`, interpolated at the estimate
/// timestamps. Rotation error is the geodesic angle of `q_ref⁻¹ q_est`.
/// Estimate samples farther than the interpolation gap from reference data
/// are excluded.
pub fn trajectory_error(estimate: &[NominalState], reference: &[NominalState]) -> Result<TrajectoryError, MetricsError> {
    trajectory_error_with(estimate, reference, MAX_INTERPOLATION_GAP, MIN_OVERLAP)
}

pub fn trajectory_error_with(
    estimate: &[NominalState],
    reference: &[NominalState],
    max_gap: f64,
    min_overlap: f64,
) -> Result<TrajectoryError, MetricsError> {
    let overlap = match (estimate.first(), estimate.last(), reference.first(), reference.last()) {
        (Some(e0), Some(e1), Some(r0), Some(r1)) => e1.t.min(r1.t) - e0.t.max(r0.t),
        _ => f64::NEG_INFINITY,
    };
    if !(overlap >= min_overlap) {
        return Err(MetricsError::NoOverlap {
            overlap: overlap.max(0.0),
        });
    }
    let samples: Vec<ErrorSample> = estimate
        .iter()
        .filter_map(|e| {
            let r = sample_trajectory(reference, e.t, Some(max_gap))?;
            Some(ErrorSample {
                t: e.t,
                translation: (e.p - r.p).norm(),
                rotation_deg: so3_log(&(r.q.inverse() * e.q)).norm().to_degrees(),
                velocity: (e.v - r.v).norm(),
            })
        })
        .collect();
    Ok(TrajectoryError {
        e_t: rms(samples.iter().map(|s| s.translation)),
        e_r: rms(samples.iter().map(|s| s.rotation_deg)),
        e_v: rms(samples.iter().map(|s| s.velocity)),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionStats {
    pub mean_px: f64,
    pub median_px: f64,
    pub p95_px: f64,
    pub count: usize,
}

impl ReprojectionStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self {
                mean_px: 0.0,
                median_px: 0.0,
                p95_px: 0.0,
                count: 0,
            };
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean_px: sorted.iter().sum::<f64>() / sorted.len() as f64,
            median_px: percentile(&sorted, 0.5),
            p95_px: percentile(&sorted, 0.95),
            count: sorted.len(),
        }
    }
}

/// Linear interpolation between order statistics of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Pixel distance between each associated detected corner and its map corner
/// projected through the state at the detection time.
pub fn reprojection_errors(
    states: &[NominalState],
    detections: &[GateDetection],
    map: &GateMap,
    cam: &CameraModel,
    ext: &Extrinsics,
) -> Vec<f64> {
    let mut out = Vec::new();
    for det in detections {
        let Some(gate) = det.gate_id.and_then(|id| map.get(id)) else {
            continue;
        };
        let Some(x) = sample_trajectory(states, det.t, Some(MAX_INTERPOLATION_GAP)) else {
            continue;
        };
        for (label, c) in det.present() {
            let p_c = world_to_camera(&gate.corner(label), &x.p, &x.q, ext);
            if let Ok(px) = cam.project_to_pixel(&p_c) {
                out.push((px - c.px).norm());
            }
        }
    }
    out
}

pub fn reprojection_error(
    states: &[NominalState],
    detections: &[GateDetection],
    map: &GateMap,
    cam: &CameraModel,
    ext: &Extrinsics,
) -> ReprojectionStats {
    ReprojectionStats::from_errors(&reprojection_errors(states, detections, map, cam, ext))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Huber,
    Chi2,
    Naive,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [AblationVariant::Huber, AblationVariant::Chi2, AblationVariant::Naive];

    pub fn robust_mode(self) -> RobustMode {
        match self {
            AblationVariant::Huber => RobustMode::Huber,
            AblationVariant::Chi2 => RobustMode::Chi2 {
                threshold: CHI2_95_2DOF,
            },
            AblationVariant::Naive => RobustMode::Naive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub e_t: f64,
    pub e_r: f64,
    pub diverged: bool,
}

/// Initial covariance for a filter started at an exactly known state:
/// 1 cm, 1 cm/s, 0.5°, 0.01 m/s², 1e-3 rad/s.
pub fn known_start_covariance() -> [f64; 15] {
    let th = 0.5f64.to_radians().powi(2);
    let mut d = [0.0; 15];
    d[..6].fill(1e-4);
    d[6..9].fill(th);
    d[9..12].fill(1e-4);
    d[12..].fill(1e-6);
    d
}

/// Filter configuration used by the simulation harnesses, which start at truth.
pub fn harness_config(scenario: &Scenario) -> EskfConfig {
    EskfConfig {
        noise: scenario.noise,
        initial_cov_diag: known_start_covariance(),
        ..EskfConfig::default()
    }
}

/// Filter run on a simulated scenario starting from the true initial state.
pub fn filter_error(
    scenario: &Scenario,
    seed: u64,
    eskf: EskfConfig,
    vision: &VisionConfig,
) -> Result<(TrajectoryError, usize), MetricsError> {
    let sim = simulate(scenario, seed)?;
    let ext = scenario.extrinsics();
    let rig = Rig {
        map: &sim.map,
        camera: &scenario.camera,
        ext: &ext,
    };
    let run = run_vins(
        &sim.imu,
        &sim.detections,
        rig,
        sim.truth[0].state(),
        eskf,
        vision,
        VinsOptions::default(),
    )?;
    let err = trajectory_error(&run.trajectory, &sim.truth_states())?;
    Ok((err, run.applied_updates()))
}

/// Runs the filter once per robust-weighting variant on the same data.
pub fn robustness_ablation(
    scenario: &Scenario,
    seed: u64,
    variants: &[AblationVariant],
) -> Result<Vec<AblationRow>, MetricsError> {
    variants
        .iter()
        .map(|&variant| {
            let eskf = EskfConfig {
                robust: variant.robust_mode(),
                ..harness_config(scenario)
            };
            let (err, _) = filter_error(scenario, seed, eskf, &VisionConfig::default())?;
            Ok(AblationRow {
                variant,
                e_t: err.e_t,
                e_r: err.e_r,
                diverged: !(err.e_t <= DIVERGENCE_THRESHOLD),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: usize,
    pub e_t: f64,
    pub e_r: f64,
    pub applied_updates: usize,
}

/// Filter error for each minimum-corner setting. Settings up to four are
/// per-gate minima; larger values require that many corners over all
/// associated gates of a frame.
pub fn min_corner_sweep(scenario: &Scenario, seed: u64, values: &[usize]) -> Result<Vec<SweepRow>, MetricsError> {
    values
        .iter()
        .map(|&setting| {
            let vision = VisionConfig::default().with_min_corner_setting(setting);
            let eskf = EskfConfig {
                min_corners_per_gate: vision.min_corners_per_gate,
                ..harness_config(scenario)
            };
            let (err, applied) = filter_error(scenario, seed, eskf, &vision)?;
            Ok(SweepRow {
                setting,
                e_t: err.e_t,
                e_r: err.e_r,
                applied_updates: applied,
            })
        })
        .collect()
}

/// Filter and smoother accuracy on one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub vins: TrajectoryError,
    pub fgo: TrajectoryError,
    /// Filter reprojection at the predicted state of each frame.
    pub vins_reprojection: ReprojectionStats,
    /// Filter reprojection at the updated state of each frame.
    pub vins_posterior_reprojection: ReprojectionStats,
    pub fgo_reprojection: ReprojectionStats,
    pub truth_reprojection: ReprojectionStats,
    /// Angle between the true and refined camera rotation (deg).
    pub ext_error_deg: f64,
    pub fgo_iterations: usize,
    pub fgo_gradient_norm: f64,
    pub fgo_keyframes: usize,
    pub fgo_log: Vec<IterationLog>,
}

/// Simulates `scenario`, runs the filter from the true initial state with
/// camera rotation perturbed by `ext_perturbation` (rotation vector, rad),
/// then smooths.
pub fn compare_estimators(
    scenario: &Scenario,
    seed: u64,
    ext_perturbation: Vec3,
    fgo: &FgoOptions,
) -> Result<Comparison, MetricsError> {
    let sim = simulate(scenario, seed)?;
    let true_ext = scenario.extrinsics();
    let ext = Extrinsics::new(true_ext.r_bc * so3_exp(&ext_perturbation), true_ext.p_bc);
    let rig = Rig {
        map: &sim.map,
        camera: &scenario.camera,
        ext: &ext,
    };
    let vins = run_vins(
        &sim.imu,
        &sim.detections,
        rig,
        sim.truth[0].state(),
        harness_config(scenario),
        &VisionConfig::default(),
        VinsOptions::default(),
    )?;
    let smoothed = run_fgo(&sim.imu, &vins.measurement_frames(), &vins.trajectory, &ext, scenario.noise, fgo)?;
    let truth = sim.truth_states();
    let dets = vins.associated_detections();
    let refined = Extrinsics::new(smoothed.ext_rotation, ext.p_bc);
    let cam = &scenario.camera;
    Ok(Comparison {
        vins: trajectory_error(&vins.trajectory, &truth)?,
        fgo: trajectory_error(&smoothed.trajectory, &truth)?,
        vins_reprojection: reprojection_error(&vins.prior_states(), &dets, &sim.map, cam, &ext),
        vins_posterior_reprojection: reprojection_error(&vins.trajectory, &dets, &sim.map, cam, &ext),
        fgo_reprojection: reprojection_error(&smoothed.trajectory, &dets, &sim.map, cam, &refined),
        truth_reprojection: reprojection_error(&truth, &dets, &sim.map, cam, &true_ext),
        ext_error_deg: so3_log(&(true_ext.r_bc.inverse() * smoothed.ext_rotation)).norm().to_degrees(),
        fgo_iterations: smoothed.result.iterations,
        fgo_gradient_norm: smoothed.result.gradient_norm,
        fgo_keyframes: smoothed.keyframe_count,
        fgo_log: smoothed.result.log,
    })
}
