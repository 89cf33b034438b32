//! Turns raw gate detections into associated, correctly labelled corner
//! measurements using the current state estimate.
//!
//! Per frame the steps are: undistort, reorder corner labels against the
//! projected gravity direction, associate detections with map gates, resolve
//! rear-view left/right flips, then gate on score, corner count and range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{camera_to_world, project, up_axis, world_to_camera, CameraModel, Extrinsics, Vec2, Vec3};
use crate::model::{CornerLabel, CornerMeasurement, Gate, GateDetection, GateMap, NominalState};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum VisionError {
    #[error("probe offsets do not project to a usable image direction")]
    DegenerateProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    /// Depth (m) at which the detection centroid is back-projected for the up probe.
    pub probe_depth_m: f64,
    /// Association gate on centroid distance (px); strict inequality.
    pub assoc_max_dist_px: f64,
    /// Association gate on the area-consistency ratio; strict inequality.
    pub assoc_min_area_ratio: f64,
    /// Gates farther than this from the camera are ignored (m).
    pub max_gate_range_m: f64,
    pub min_corner_score: f64,
    pub min_corners_per_gate: usize,
    /// Minimum number of corners over all gates of a frame; 0 disables the check.
    pub min_total_corners: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            probe_depth_m: 3.0,
            assoc_max_dist_px: 75.0,
            assoc_min_area_ratio: 0.2,
            max_gate_range_m: 15.0,
            min_corner_score: 0.3,
            min_corners_per_gate: 2,
            min_total_corners: 0,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        let positive = [
            self.probe_depth_m,
            self.assoc_max_dist_px,
            self.assoc_min_area_ratio,
            self.max_gate_range_m,
        ];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err("vision thresholds must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_corner_score) {
            return Err("min_corner_score must lie in [0, 1]");
        }
        if !(2..=4).contains(&self.min_corners_per_gate) {
            return Err("min_corners_per_gate must be 2, 3 or 4");
        }
        Ok(())
    }

    /// Applies the minimum-corner rule used by the corner-count study: up to
    /// four the value is a per-gate minimum; above four it is a per-frame total
    /// over fully visible gates.
    pub fn with_min_corner_setting(mut self, setting: usize) -> Self {
        self.min_corners_per_gate = setting.clamp(2, 4);
        self.min_total_corners = if setting > 4 { setting } else { 0 };
        self
    }
}

/// Image-plane quadrant signs `(σ_up, σ_right)` of each label.
pub fn quadrant_signs(label: CornerLabel) -> (f64, f64) {
    match label {
        CornerLabel::TL => (1.0, -1.0),
        CornerLabel::TR => (1.0, 1.0),
        CornerLabel::BR => (-1.0, 1.0),
        CornerLabel::BL => (-1.0, -1.0),
    }
}

/// Projects the world up direction into the image around the detection
/// centroid. Returns `(μ_up, μ_right)` in normalized image coordinates.
pub fn image_up_right(
    state: &NominalState,
    ext: &Extrinsics,
    centroid_norm: &Vec2,
    cfg: &VisionConfig,
) -> Result<(Vec2, Vec2), VisionError> {
    let d = cfg.probe_depth_m;
    let probe_c = Vec3::new(centroid_norm.x * d, centroid_norm.y * d, d);
    let probe_w = camera_to_world(&probe_c, &state.p, &state.q, ext);
    let image_of = |p_w: Vec3| {
        project(&world_to_camera(&p_w, &state.p, &state.q, ext)).map_err(|_| VisionError::DegenerateProjection)
    };
    let delta = image_of(probe_w + up_axis())? - image_of(probe_w - up_axis())?;
    let n = delta.norm();
    if !(n > 1e-12) {
        return Err(VisionError::DegenerateProjection);
    }
    let up = delta / n;
    Ok((up, Vec2::new(-up.y, up.x)))
}

/// Fraction of the summed corner spread a two-corner relabelling must gain
/// before it replaces the detector's labels.
pub const TWO_CORNER_MARGIN: f64 = 0.5;

fn corner_position(c: &crate::model::DetectedCorner) -> Vec2 {
    c.norm.unwrap_or(c.px)
}

/// All injective assignments of `n` items to the four labels, in lexicographic order.
fn label_assignments(n: usize) -> Vec<Vec<CornerLabel>> {
    fn extend(prefix: &mut Vec<CornerLabel>, n: usize, out: &mut Vec<Vec<CornerLabel>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for label in CornerLabel::ALL {
            if !prefix.contains(&label) {
                prefix.push(label);
                extend(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), n, &mut out);
    out
}

/// Reassigns corner labels to maximise the summed quadrant score against the
/// projected up/right directions. Corners are positioned by their normalized
/// coordinates when available, pixels otherwise.
///
/// Every injective assignment is scored; ties (to rounding) keep as many of
/// the incoming labels as possible. With only two corners the score cannot
/// separate an edge from a diagonal reliably, so the incoming labels are kept
/// unless the best assignment beats them by [`TWO_CORNER_MARGIN`].
pub fn reorder_corners(det: &GateDetection, mu_up: &Vec2, mu_right: &Vec2) -> GateDetection {
    let present: Vec<_> = det.present().map(|(l, c)| (l, *c)).collect();
    let n = present.len();
    if n < 2 {
        return det.clone();
    }
    let centroid = present.iter().map(|(_, c)| corner_position(c)).sum::<Vec2>() / n as f64;
    let deltas: Vec<Vec2> = present.iter().map(|(_, c)| corner_position(c) - centroid).collect();
    let spread: f64 = deltas.iter().map(|d| d.norm()).sum();
    let score = |labels: &[CornerLabel]| -> f64 {
        labels
            .iter()
            .zip(&deltas)
            .map(|(l, d)| {
                let (s_up, s_right) = quadrant_signs(*l);
                s_up * d.dot(mu_up) + s_right * d.dot(mu_right)
            })
            .sum()
    };
    let incoming: Vec<CornerLabel> = present.iter().map(|(l, _)| *l).collect();
    let incoming_score = score(&incoming);

    let candidates = label_assignments(n);
    let scores: Vec<f64> = candidates.iter().map(|a| score(a)).collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-9 * spread.max(f64::MIN_POSITIVE);

    if n == 2 && best - incoming_score <= TWO_CORNER_MARGIN * spread {
        return det.clone();
    }
    let kept = |a: &[CornerLabel]| a.iter().zip(&incoming).filter(|(x, y)| x == y).count();
    let chosen = candidates
        .iter()
        .zip(&scores)
        .filter(|(_, s)| **s >= best - tie)
        .max_by(|(a, _), (b, _)| kept(a).cmp(&kept(b)).then(std::cmp::Ordering::Greater))
        .map(|(a, _)| a)
        .expect("at least one assignment");

    let mut out = det.clone();
    out.corners = [None; 4];
    for (label, (_, corner)) in chosen.iter().zip(&present) {
        out.corners[label.index()] = Some(*corner);
    }
    out
}

/// Scale measure of a corner set: squared length for two points, polygon
/// area for three or four. Points must be in label order.
pub fn shape_measure(points: &[Vec2]) -> f64 {
    match points.len() {
        0 | 1 => 0.0,
        2 => (points[1] - points[0]).norm_squared(),
        _ => {
            let mut twice = 0.0;
            for i in 0..points.len() {
                let (a, b) = (points[i], points[(i + 1) % points.len()]);
                twice += a.x * b.y - b.x * a.y;
            }
            0.5 * twice.abs()
        }
    }
}

/// Area-consistency ratio `min(A_d/A_m, A_m/A_d)`; zero if either is degenerate.
pub fn area_ratio(a_det: f64, a_map: f64) -> f64 {
    if !(a_det > 0.0 && a_map > 0.0) {
        return 0.0;
    }
    (a_det / a_map).min(a_map / a_det)
}

/// A map gate projected into the image for association.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGate {
    pub gate_id: u32,
    /// Distorted pixel positions of the four corners, `None` when behind the camera.
    pub corners_px: [Option<Vec2>; 4],
}

/// Spatial and scale agreement of one detection with one projected gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCost {
    pub distance_px: f64,
    pub area_ratio: f64,
}

impl PairCost {
    pub fn cost(&self) -> f64 {
        self.distance_px / self.area_ratio
    }

    pub fn feasible(&self, cfg: &VisionConfig) -> bool {
        self.distance_px < cfg.assoc_max_dist_px && self.area_ratio > cfg.assoc_min_area_ratio
    }
}

/// Compares a detection against the matching subset of projected map corners.
/// The mirrored labelling is also tried so rear views of partial detections
/// still associate; the cheaper of the two is returned.
pub fn pair_cost(det: &GateDetection, gate: &ProjectedGate) -> Option<PairCost> {
    let labels: Vec<CornerLabel> = det.present().map(|(l, _)| l).collect();
    if labels.len() < 2 {
        return None;
    }
    let det_px: Vec<Vec2> = det.present().map(|(_, c)| c.px).collect();
    let det_centroid = det_px.iter().sum::<Vec2>() / det_px.len() as f64;
    let det_area = shape_measure(&det_px);
    [false, true]
        .iter()
        .filter_map(|&mirror| {
            let map_px: Option<Vec<Vec2>> = labels
                .iter()
                .map(|l| gate.corners_px[if mirror { l.mirrored() } else { *l }.index()])
                .collect();
            let map_px = map_px?;
            let centroid = map_px.iter().sum::<Vec2>() / map_px.len() as f64;
            Some(PairCost {
                distance_px: (det_centroid - centroid).norm(),
                area_ratio: area_ratio(det_area, shape_measure(&map_px)),
            })
        })
        .min_by(|a, b| a.cost().total_cmp(&b.cost()))
}

/// Map gates in front of the camera, within range and with their centroid in
/// the field of view.
pub fn candidate_gates(
    map: &GateMap,
    state: &NominalState,
    ext: &Extrinsics,
    cam: &CameraModel,
    cfg: &VisionConfig,
) -> Vec<ProjectedGate> {
    map.gates()
        .iter()
        .filter_map(|gate| {
            let c = world_to_camera(&gate.center(), &state.p, &state.q, ext);
            if !(c.z > 0.0 && c.z <= cfg.max_gate_range_m) {
                return None;
            }
            let centroid_px = cam.project_to_pixel(&c).ok()?;
            if !cam.in_image(&centroid_px) {
                return None;
            }
            let corners_px = gate
                .corners_w
                .map(|p| cam.project_to_pixel(&world_to_camera(&p, &state.p, &state.q, ext)).ok());
            Some(ProjectedGate {
                gate_id: gate.id,
                corners_px,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub detection: usize,
    pub gate_id: u32,
    pub cost: PairCost,
}

/// One-to-one association of detections with map gates.
///
/// A pair is admissible when `d < assoc_max_dist_px` and `ρ > assoc_min_area_ratio`.
/// Among admissible one-to-one matchings the solver maximises the number of
/// matched detections and, among those, minimises the summed `d/ρ`. For a
/// single detection this is the plain `argmin d/ρ`.
pub fn associate(
    dets: &[GateDetection],
    map: &GateMap,
    state: &NominalState,
    ext: &Extrinsics,
    cam: &CameraModel,
    cfg: &VisionConfig,
) -> Vec<Association> {
    let gates = candidate_gates(map, state, ext, cam, cfg);
    let costs: Vec<Vec<Option<PairCost>>> = dets
        .iter()
        .map(|d| {
            gates
                .iter()
                .map(|g| pair_cost(d, g).filter(|c| c.feasible(cfg)))
                .collect()
        })
        .collect();
    let assignment = solve_assignment(&costs.iter().map(|row| row.iter().map(|c| c.map(|c| c.cost())).collect::<Vec<_>>()).collect::<Vec<_>>());
    assignment
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            g.map(|g| Association {
                detection: i,
                gate_id: gates[g].gate_id,
                cost: costs[i][g].expect("assigned pairs are feasible"),
            })
        })
        .collect()
}

/// Maximum-cardinality, minimum-cost assignment of rows to columns where
/// `None` marks a forbidden pair. Returns the column for each row.
pub fn solve_assignment(costs: &[Vec<Option<f64>>]) -> Vec<Option<usize>> {
    let rows = costs.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = costs[0].len();
    // Each row also gets a private "unmatched" column whose price exceeds any
    // full matching, so cardinality dominates the objective.
    let total: f64 = costs.iter().flatten().flatten().sum();
    let unmatched = 1.0 + 2.0 * total;
    let forbidden = 4.0 * (rows as f64 + 1.0) * unmatched;
    let width = cols + rows;
    let matrix: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            (0..width)
                .map(|j| {
                    if j < cols {
                        costs[i][j].unwrap_or(forbidden)
                    } else if j - cols == i {
                        unmatched
                    } else {
                        forbidden
                    }
                })
                .collect()
        })
        .collect();
    hungarian(&matrix)
        .into_iter()
        .enumerate()
        .map(|(i, j)| (j < cols && costs[i][j].is_some()).then_some(j))
        .collect()
}

/// Kuhn-Munkres with potentials for a rows ≤ cols matrix; returns the
/// column assigned to each row.
fn hungarian(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let m = a[0].len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn normalized_or_undistorted(c: &crate::model::DetectedCorner, cam: &CameraModel) -> Option<Vec2> {
    c.norm.or_else(|| cam.undistort_normalize(&c.px).ok())
}

/// Summed normalized reprojection error of the present corners against `gate`.
pub fn labelled_reprojection_error(
    det: &GateDetection,
    gate: &Gate,
    state: &NominalState,
    ext: &Extrinsics,
    cam: &CameraModel,
) -> f64 {
    det.present()
        .map(|(label, c)| {
            let predicted = project(&world_to_camera(&gate.corner(label), &state.p, &state.q, ext));
            match (predicted, normalized_or_undistorted(c, cam)) {
                (Ok(p), Some(u)) => (u - p).norm(),
                _ => f64::INFINITY,
            }
        })
        .sum()
}

/// Chooses between the incoming labels and their left-right mirror by total
/// reprojection error. Exact ties keep the incoming labels.
pub fn resolve_flip(
    det: &GateDetection,
    gate: &Gate,
    state: &NominalState,
    ext: &Extrinsics,
    cam: &CameraModel,
) -> GateDetection {
    let mirrored = det.mirrored();
    let keep = labelled_reprojection_error(det, gate, state, ext, cam);
    let flip = labelled_reprojection_error(&mirrored, gate, state, ext, cam);
    if flip < keep {
        mirrored
    } else {
        det.clone()
    }
}

/// Output of the per-frame vision pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMeasurements {
    /// Associated detections with corrected labels and filtered corners.
    pub detections: Vec<GateDetection>,
    pub measurements: Vec<CornerMeasurement>,
}

/// Undistorts each present corner; corners that fail to undistort are dropped.
pub fn normalize_detection(det: &GateDetection, cam: &CameraModel) -> GateDetection {
    let mut out = det.clone();
    for slot in out.corners.iter_mut() {
        if let Some(c) = slot {
            match normalized_or_undistorted(c, cam) {
                Some(n) => c.norm = Some(n),
                None => *slot = None,
            }
        }
    }
    out
}

/// Full per-frame pipeline: reorder → associate → resolve flips → filter.
pub fn process_frame(
    dets: &[GateDetection],
    map: &GateMap,
    state: &NominalState,
    ext: &Extrinsics,
    cam: &CameraModel,
    cfg: &VisionConfig,
) -> FrameMeasurements {
    let prepared: Vec<GateDetection> = dets
        .iter()
        .map(|d| {
            let d = normalize_detection(d, cam);
            if d.present_count() < 2 {
                return d;
            }
            let centroid =
                d.present().map(|(_, c)| c.norm.expect("normalized")).sum::<Vec2>() / d.present_count() as f64;
            match image_up_right(state, ext, &centroid, cfg) {
                Ok((up, right)) => reorder_corners(&d, &up, &right),
                Err(_) => d,
            }
        })
        .collect();

    let camera_position = state.p + state.q.transform_vector(&ext.p_bc);
    let mut out = FrameMeasurements::default();
    for assoc in associate(&prepared, map, state, ext, cam, cfg) {
        let gate = map.get(assoc.gate_id).expect("associated gate exists");
        let mut det = resolve_flip(&prepared[assoc.detection], gate, state, ext, cam);
        det.gate_id = Some(gate.id);
        for slot in det.corners.iter_mut() {
            if slot.is_some_and(|c| c.score < cfg.min_corner_score) {
                *slot = None;
            }
        }
        if det.present_count() < cfg.min_corners_per_gate {
            continue;
        }
        if (gate.center() - camera_position).norm() > cfg.max_gate_range_m {
            continue;
        }
        out.detections.push(det);
    }
    let total: usize = out.detections.iter().map(|d| d.present_count()).sum();
    if total < cfg.min_total_corners {
        out.detections.clear();
    }
    for det in &out.detections {
        let gate = map.get(det.gate_id.expect("associated")).expect("gate exists");
        for (label, c) in det.present() {
            out.measurements.push(CornerMeasurement {
                t: det.t,
                u_norm: c.norm.expect("normalized"),
                p_gw: gate.corner(label),
                gate_id: gate.id,
                corner_label: label,
                score: c.score,
            });
        }
    }
    out
}

/// Measurements only; see [`process_frame`].
pub fn build_measurements(
    dets: &[GateDetection],
    map: &GateMap,
    state: &NominalState,
    ext: &Extrinsics,
    cam: &CameraModel,
    cfg: &VisionConfig,
) -> Vec<CornerMeasurement> {
    process_frame(dets, map, state, ext, cam, cfg).measurements
}
