//! End-to-end runs: the filter over an IMU stream with interleaved gate
//! detections, and the smoother on top of the filter output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eskf::{EskfConfig, EskfError, EskfEstimator, UpdateReport};
use crate::fgo::{build_graph, densify, optimize, FgoError, FgoResult, FgoWeights, GraphOptions};
use crate::geometry::{CameraModel, Extrinsics, Quat};
use crate::model::{sample_trajectory, CornerMeasurement, GateDetection, GateMap, ImuSample, NoiseParams, NominalState};
use crate::vision::{process_frame, VisionConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("IMU stream has no samples after the initial state")]
    NoImu,
    #[error("filter failed at t = {t}: {source}")]
    Eskf { t: f64, source: EskfError },
    #[error(transparent)]
    Fgo(#[from] FgoError),
}

/// Detections sharing a timestamp, as one camera frame.
pub fn group_frames(dets: &[GateDetection]) -> Vec<(f64, Vec<GateDetection>)> {
    let mut out: Vec<(f64, Vec<GateDetection>)> = Vec::new();
    for d in dets {
        match out.last_mut() {
            Some((t, group)) if *t == d.t => group.push(d.clone()),
            _ => out.push((d.t, vec![d.clone()])),
        }
    }
    out
}

/// One processed camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    /// Filter state when the frame was processed, before its update.
    pub prior_state: NominalState,
    /// Associated detections with resolved labels.
    pub detections: Vec<GateDetection>,
    pub measurements: Vec<CornerMeasurement>,
}

/// Worst covariance conditioning seen during a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceHealth {
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
}

impl Default for CovarianceHealth {
    fn default() -> Self {
        Self {
            max_asymmetry: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl CovarianceHealth {
    fn observe(&mut self, est: &EskfEstimator) {
        let p = &est.cov;
        let asym = (p - p.transpose()).abs().max();
        self.max_asymmetry = self.max_asymmetry.max(asym);
        let eig = p.symmetric_eigenvalues().min();
        self.min_eigenvalue = self.min_eigenvalue.min(eig);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VinsOptions {
    /// Check symmetry and eigenvalues of P after every step.
    pub check_covariance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VinsRun {
    /// State after each IMU sample (post-update at frame times), starting with the initial state.
    pub trajectory: Vec<NominalState>,
    pub reports: Vec<UpdateReport>,
    pub frames: Vec<FrameRecord>,
    pub covariance: Option<CovarianceHealth>,
    pub final_estimator: EskfEstimator,
}

impl VinsRun {
    pub fn applied_updates(&self) -> usize {
        self.reports.iter().map(UpdateReport::applied).sum()
    }

    /// Predicted states at frame times, as seen by the vision front end.
    pub fn prior_states(&self) -> Vec<NominalState> {
        self.frames.iter().map(|f| f.prior_state).collect()
    }

    /// Associated detections of all frames.
    pub fn associated_detections(&self) -> Vec<GateDetection> {
        self.frames.iter().flat_map(|f| f.detections.iter().cloned()).collect()
    }

    /// Frames in the form the smoother consumes.
    pub fn measurement_frames(&self) -> Vec<(f64, Vec<CornerMeasurement>)> {
        self.frames.iter().map(|f| (f.t, f.measurements.clone())).collect()
    }
}

/// Static sensor inputs shared by the filter and the smoother.
#[derive(Debug, Clone, Copy)]
pub struct Rig<'a> {
    pub map: &'a GateMap,
    pub camera: &'a CameraModel,
    pub ext: &'a Extrinsics,
}

/// Runs the filter from `init` over `imu`, processing every frame once the
/// filter has reached its timestamp.
pub fn run_vins(
    imu: &[ImuSample],
    detections: &[GateDetection],
    rig: Rig<'_>,
    init: NominalState,
    eskf: EskfConfig,
    vision: &VisionConfig,
    opts: VinsOptions,
) -> Result<VinsRun, PipelineError> {
    let mut est = EskfEstimator::from_state(init, eskf);
    let frames = group_frames(detections);
    let mut next_frame = frames.partition_point(|(t, _)| *t < init.t);
    let mut health = opts.check_covariance.then(CovarianceHealth::default);
    let mut trajectory = vec![init];
    let mut reports = Vec::new();
    let mut records = Vec::new();

    let mut apply_frames = |est: &mut EskfEstimator, next_frame: &mut usize| {
        while let Some((t, dets)) = frames.get(*next_frame) {
            if *t > est.time() {
                break;
            }
            *next_frame += 1;
            let prior_state = est.nominal;
            let out = process_frame(dets, rig.map, &est.nominal, rig.ext, rig.camera, vision);
            if !out.measurements.is_empty() {
                reports.push(est.update(&out.measurements, rig.ext));
            }
            records.push(FrameRecord {
                t: *t,
                prior_state,
                detections: out.detections,
                measurements: out.measurements,
            });
        }
    };

    apply_frames(&mut est, &mut next_frame);
    if let Some(h) = health.as_mut() {
        h.observe(&est);
    }
    let mut any = false;
    for s in imu.iter().filter(|s| s.t > init.t) {
        any = true;
        est.propagate(s).map_err(|source| PipelineError::Eskf { t: s.t, source })?;
        if let Some(h) = health.as_mut() {
            h.observe(&est);
        }
        apply_frames(&mut est, &mut next_frame);
        if let Some(h) = health.as_mut() {
            h.observe(&est);
        }
        trajectory.push(est.nominal);
    }
    if !any {
        return Err(PipelineError::NoImu);
    }
    Ok(VinsRun {
        trajectory,
        reports,
        frames: records,
        covariance: health,
        final_estimator: est,
    })
}

/// Re-runs the vision front end on each frame using `trajectory` sampled at
/// the frame time. Frames without a nearby trajectory sample are skipped.
pub fn associate_frames(
    detections: &[GateDetection],
    trajectory: &[NominalState],
    rig: Rig<'_>,
    vision: &VisionConfig,
) -> Vec<FrameRecord> {
    group_frames(detections)
        .into_iter()
        .filter_map(|(t, dets)| {
            let state = sample_trajectory(trajectory, t, Some(MAX_FRAME_GAP))?;
            let out = process_frame(&dets, rig.map, &state, rig.ext, rig.camera, vision);
            Some(FrameRecord {
                t,
                prior_state: state,
                detections: out.detections,
                measurements: out.measurements,
            })
        })
        .collect()
}

/// Largest distance from a frame to the nearest trajectory sample when
/// re-associating (s).
pub const MAX_FRAME_GAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgoOptions {
    pub weights: FgoWeights,
    pub graph: GraphOptions,
    pub max_iters: usize,
    pub lambda_init: f64,
}

impl Default for FgoOptions {
    fn default() -> Self {
        Self {
            weights: FgoWeights::default(),
            graph: GraphOptions::default(),
            max_iters: 50,
            lambda_init: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgoRun {
    pub result: FgoResult,
    /// Keyframe states with IMU propagation in between, on the IMU grid.
    pub trajectory: Vec<NominalState>,
    pub keyframe_count: usize,
    pub ext_rotation: Quat,
}

/// Smooths a filter run: keyframes from its frames, initialized at and
/// anchored to its trajectory.
pub fn run_fgo(
    imu: &[ImuSample],
    frames: &[(f64, Vec<CornerMeasurement>)],
    vins_trajectory: &[NominalState],
    ext: &Extrinsics,
    noise: NoiseParams,
    opts: &FgoOptions,
) -> Result<FgoRun, PipelineError> {
    let graph = build_graph(imu, frames, vins_trajectory, ext, opts.weights, noise, opts.graph)?;
    let keyframe_count = graph.keyframes.len();
    let result = optimize(&graph, opts.max_iters, opts.lambda_init)?;
    let trajectory = densify(&result.keyframes, imu, &noise.gravity);
    Ok(FgoRun {
        ext_rotation: result.ext_rotation,
        result,
        trajectory,
        keyframe_count,
    })
}
