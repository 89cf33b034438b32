//! Offline smoother: keyframe states linked by preintegrated IMU factors,
//! observed through gate-corner reprojection factors, softly anchored to the
//! filter output and sharing one camera-rotation variable.

pub mod factors;
pub mod preint;
mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eskf::propagate_nominal;
use crate::geometry::{Extrinsics, Quat, Vec3};
use crate::model::{sample_trajectory, CornerMeasurement, ImuSample, NoiseParams, NominalState};

pub use preint::{imu_window, preintegrate, PreintError, PreintegratedImu};
pub use solver::{cost_and_gradient, optimize, FgoResult, IterationLog, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FgoError {
    #[error("need at least two keyframes, got {0}")]
    TooFewKeyframes(usize),
    #[error("keyframe timestamps must be strictly increasing (index {0})")]
    NonMonotonicKeyframes(usize),
    #[error("no IMU samples between keyframes at {t0} and {t1}")]
    MissingImu { t0: f64, t1: f64 },
    #[error("no filter estimate covers keyframe time {0}")]
    NoInitialEstimate(f64),
    #[error("normal equations stayed singular after repeated damping")]
    SingularNormalEquations,
    #[error(transparent)]
    Preintegration(#[from] PreintError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgoWeights {
    /// Corner reprojection standard deviation (normalized units).
    pub sigma_corner: f64,
    pub sigma_prior_p: f64,
    pub sigma_prior_theta: f64,
    pub sigma_ext: f64,
    /// Huber threshold on the whitened corner residual norm.
    pub huber_delta_corner: f64,
    /// Largest allowed gap between keyframes (s).
    pub kf_time_threshold: f64,
    /// Link consecutive keyframe biases through the random-walk densities.
    pub bias_walk: bool,
}

impl Default for FgoWeights {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            sigma_corner: 2.0 / 300.0,
            sigma_prior_p: 0.5,
            sigma_prior_theta: 5.0 * deg,
            sigma_ext: 2.0 * deg,
            huber_delta_corner: 3.0,
            kf_time_threshold: 0.1,
            bias_walk: true,
        }
    }
}

impl FgoWeights {
    pub fn validate(&self) -> Result<(), &'static str> {
        let all = [
            self.sigma_corner,
            self.sigma_prior_p,
            self.sigma_prior_theta,
            self.sigma_ext,
            self.huber_delta_corner,
            self.kf_time_threshold,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err("smoother weights and thresholds must be positive")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub t: f64,
    pub state: NominalState,
    pub measurements: Vec<CornerMeasurement>,
    pub vins_prior: Option<NominalState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub keyframes: Vec<Keyframe>,
    pub preints: Vec<PreintegratedImu>,
    pub ext_rotation: Quat,
    pub ext_nominal: Quat,
    pub p_bc: Vec3,
    pub weights: FgoWeights,
    pub noise: NoiseParams,
    /// When false the camera rotation is held at its nominal value.
    pub refine_extrinsics: bool,
}

impl FactorGraph {
    /// Assembles a graph, preintegrating the IMU between consecutive keyframes
    /// at each keyframe's bias.
    pub fn new(
        keyframes: Vec<Keyframe>,
        imu: &[ImuSample],
        ext: &Extrinsics,
        weights: FgoWeights,
        noise: NoiseParams,
        refine_extrinsics: bool,
    ) -> Result<Self, FgoError> {
        if keyframes.len() < 2 {
            return Err(FgoError::TooFewKeyframes(keyframes.len()));
        }
        let mut preints = Vec::with_capacity(keyframes.len() - 1);
        for (i, pair) in keyframes.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if !(b.t > a.t) {
                return Err(FgoError::NonMonotonicKeyframes(i + 1));
            }
            let window = imu_window(imu, a.t, b.t);
            if window.last().map(|s| s.t) != Some(b.t) {
                return Err(FgoError::MissingImu { t0: a.t, t1: b.t });
            }
            preints.push(preintegrate(a.t, &window, a.state.b_a, a.state.b_w, &noise)?);
        }
        Ok(Self {
            keyframes,
            preints,
            ext_rotation: ext.r_bc,
            ext_nominal: ext.r_bc,
            p_bc: ext.p_bc,
            weights,
            noise,
            refine_extrinsics,
        })
    }

    pub fn states(&self) -> Vec<NominalState> {
        self.keyframes.iter().map(|k| k.state).collect()
    }

    pub fn measurement_count(&self) -> usize {
        self.keyframes.iter().map(|k| k.measurements.len()).sum()
    }
}

/// Keyframe times: every frame with measurements, plus time-triggered
/// keyframes whenever `τ_t` has elapsed since the previous one. Optional
/// bounds add keyframes at the start and end of the covered span.
pub fn select_keyframes(frame_times: &[f64], t_start: Option<f64>, t_end: Option<f64>, tau_t: f64) -> Vec<f64> {
    let mut targets: Vec<f64> = Vec::with_capacity(frame_times.len() + 2);
    targets.extend(t_start);
    targets.extend(
        frame_times
            .iter()
            .copied()
            .filter(|t| t_start.is_none_or(|s| *t >= s) && t_end.is_none_or(|e| *t <= e)),
    );
    targets.extend(t_end);
    let slack = 1e-9 * tau_t.max(1.0);
    let mut out: Vec<f64> = Vec::with_capacity(targets.len());
    for t in targets {
        if let Some(&last) = out.last() {
            if t <= last {
                continue;
            }
            let mut next = last + tau_t;
            while t - next > slack {
                out.push(next);
                next += tau_t;
            }
        }
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub visual_less_keyframes: bool,
    pub refine_extrinsics: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            visual_less_keyframes: true,
            refine_extrinsics: true,
        }
    }
}

/// Builds the smoothing problem from sensor data and the filter trajectory,
/// which provides both the initial keyframe states and the pose priors.
pub fn build_graph(
    imu: &[ImuSample],
    frames: &[(f64, Vec<CornerMeasurement>)],
    vins: &[NominalState],
    ext: &Extrinsics,
    weights: FgoWeights,
    noise: NoiseParams,
    opts: GraphOptions,
) -> Result<FactorGraph, FgoError> {
    let (Some(first), Some(last)) = (vins.first(), vins.last()) else {
        return Err(FgoError::TooFewKeyframes(0));
    };
    let imu_end = imu.last().map_or(f64::NEG_INFINITY, |s| s.t);
    let t_start = first.t;
    let t_end = last.t.min(imu_end);
    let frame_times: Vec<f64> = frames
        .iter()
        .filter(|(_, m)| !m.is_empty())
        .map(|(t, _)| *t)
        .collect();
    let times = if opts.visual_less_keyframes {
        select_keyframes(&frame_times, Some(t_start), Some(t_end), weights.kf_time_threshold)
    } else {
        let mut t: Vec<f64> = std::iter::once(t_start)
            .chain(frame_times.iter().copied().filter(|t| *t > t_start && *t < t_end))
            .collect();
        if t_end > t_start {
            t.push(t_end);
        }
        t
    };
    let mut keyframes: Vec<Keyframe> = Vec::with_capacity(times.len());
    let mut frame_iter = frames.iter().filter(|(_, m)| !m.is_empty()).peekable();
    for t in times {
        let mut kf_t = t;
        let is_frame = frame_times.binary_search_by(|x| x.total_cmp(&t)).is_ok();
        if !is_frame && t != t_start && t != t_end {
            // Time-triggered keyframes sit on the IMU grid when one is available.
            let i = imu.partition_point(|s| s.t <= t);
            if i > 0 && keyframes.last().is_none_or(|k| imu[i - 1].t > k.t) {
                kf_t = imu[i - 1].t;
            }
        }
        let mut measurements = Vec::new();
        while let Some((ft, m)) = frame_iter.peek() {
            if *ft < kf_t {
                frame_iter.next();
            } else {
                if *ft == kf_t {
                    measurements = m.clone();
                }
                break;
            }
        }
        let state = sample_trajectory(vins, kf_t, None).ok_or(FgoError::NoInitialEstimate(kf_t))?;
        keyframes.push(Keyframe {
            t: kf_t,
            state,
            measurements,
            vins_prior: Some(state),
        });
    }
    FactorGraph::new(keyframes, imu, ext, weights, noise, opts.refine_extrinsics)
}

/// Dense trajectory by forward IMU propagation from each keyframe up to the next.
pub fn densify(keyframes: &[NominalState], imu: &[ImuSample], gravity: &Vec3) -> Vec<NominalState> {
    let mut out = Vec::new();
    for pair in keyframes.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        out.push(*a);
        let mut x = *a;
        for s in imu_window(imu, a.t, b.t) {
            if s.t >= b.t {
                break;
            }
            x = propagate_nominal(&x, &s.a_m, &s.w_m, s.t - x.t, gravity);
            x.t = s.t;
            out.push(x);
        }
    }
    out.extend(keyframes.last());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_gap(t: &[f64]) -> f64 {
        t.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    #[test]
    fn continuous_frames_need_no_extra_keyframes() {
        let frames: Vec<f64> = (0..170).map(|k| k as f64 / 85.0).collect();
        let kf = select_keyframes(&frames, None, None, 0.1);
        assert_eq!(kf, frames);
    }

    #[test]
    fn outage_is_filled() {
        let mut frames: Vec<f64> = (0..10).map(|k| k as f64 * 0.01).collect();
        frames.extend((0..10).map(|k| 1.09 + k as f64 * 0.01));
        let kf = select_keyframes(&frames, None, None, 0.1);
        let inside = kf.iter().filter(|t| **t > 0.09 && **t < 1.09).count();
        assert!(inside >= 9, "{inside}");
        assert!(max_gap(&kf) <= 0.1 + 1e-9);
    }

    #[test]
    fn bounds_are_included() {
        let kf = select_keyframes(&[0.5, 0.52], Some(0.0), Some(1.0), 0.1);
        assert_eq!(kf[0], 0.0);
        assert_eq!(*kf.last().unwrap(), 1.0);
        assert!(max_gap(&kf) <= 0.1 + 1e-9);
    }

    #[test]
    fn graph_requires_two_keyframes() {
        let kf = Keyframe {
            t: 0.0,
            state: NominalState::default(),
            measurements: vec![],
            vins_prior: None,
        };
        let err = FactorGraph::new(
            vec![kf],
            &[],
            &Extrinsics::default(),
            FgoWeights::default(),
            NoiseParams::default(),
            true,
        );
        assert_eq!(err, Err(FgoError::TooFewKeyframes(1)));
    }
}
