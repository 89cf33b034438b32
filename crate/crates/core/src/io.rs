//! File formats: gate maps (JSON), sensor logs (JSON lines), trajectories
//! (CSV) and run configuration (JSON). All writes are atomic.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eskf::EskfConfig;
use crate::geometry::{CameraModel, Quat, Vec2, Vec3};
use crate::model::{DetectedCorner, Gate, GateDetection, GateMap, ImuSample, ModelError, NominalState};
use crate::pipeline::FgoOptions;
use crate::sim::{CameraMount, CorruptionSpec};
use crate::vision::VisionConfig;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: gate {gate_id}: {message}")]
    InvalidGate {
        path: PathBuf,
        gate_id: u32,
        message: String,
    },
    #[error("{path}: {message}")]
    Validation { path: PathBuf, message: String },
    #[error("{path}:{line}: timestamp {t} does not follow {previous}")]
    NonMonotonicTimestamp {
        path: PathBuf,
        line: usize,
        t: f64,
        previous: f64,
    },
}

impl IoError {
    /// True for errors caused by the content of an input rather than by the
    /// file system.
    pub fn is_validation(&self) -> bool {
        !matches!(self, IoError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line_offset: usize, e: serde_json::Error) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line: e.line() + line_offset,
        column: e.column(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes `contents` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, values: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut text = String::new();
    for v in values {
        text.push_str(&serde_json::to_string(&v).expect("serializable value"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, 0, e))
}

// ---------------------------------------------------------------- gate maps

/// A gate entry: either four explicit corners `[TL, TR, BR, BL]`, or a centre
/// with yaw/pitch/roll in degrees and an inner extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateRecord {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corners: Option<[[f64; 3]; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roll_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateMapFile {
    pub gates: Vec<GateRecord>,
}

/// Inner extent used when a pose-form entry omits width or height (m).
pub const DEFAULT_GATE_SIZE: f64 = 1.5;

impl GateRecord {
    pub fn explicit(gate: &Gate) -> Self {
        Self {
            id: gate.id,
            corners: Some(gate.corners_w.map(|c| [c.x, c.y, c.z])),
            center: None,
            yaw_deg: None,
            pitch_deg: None,
            roll_deg: None,
            width: None,
            height: None,
        }
    }

    pub fn to_gate(&self) -> Result<Gate, String> {
        let pose_fields = [self.yaw_deg, self.pitch_deg, self.roll_deg, self.width, self.height];
        match (&self.corners, &self.center) {
            (Some(c), None) => {
                if pose_fields.iter().any(Option::is_some) {
                    return Err("explicit-corner entries take no pose fields".into());
                }
                Gate::new(self.id, c.map(Vec3::from)).map_err(|e| e.to_string())
            }
            (None, Some(center)) => Gate::from_pose(
                self.id,
                Vec3::from(*center),
                self.yaw_deg.unwrap_or(0.0).to_radians(),
                self.pitch_deg.unwrap_or(0.0).to_radians(),
                self.roll_deg.unwrap_or(0.0).to_radians(),
                self.width.unwrap_or(DEFAULT_GATE_SIZE),
                self.height.unwrap_or(DEFAULT_GATE_SIZE),
            )
            .map_err(|e| e.to_string()),
            (Some(_), Some(_)) => Err("give either corners or center, not both".into()),
            (None, None) => Err("missing corners or center".into()),
        }
    }
}

pub fn parse_gate_map(text: &str, path: &Path) -> Result<GateMap, IoError> {
    let file: GateMapFile = serde_json::from_str(text).map_err(|e| parse_err(path, 0, e))?;
    let mut gates = Vec::with_capacity(file.gates.len());
    for rec in &file.gates {
        let gate = rec.to_gate().map_err(|message| IoError::InvalidGate {
            path: path.to_path_buf(),
            gate_id: rec.id,
            message,
        })?;
        gates.push(gate);
    }
    GateMap::new(gates).map_err(|e| {
        let gate_id = match e {
            ModelError::DuplicateGateId(id)
            | ModelError::NonCoplanarGate { id, .. }
            | ModelError::DegenerateGate { id }
            | ModelError::NonFiniteGate { id }
            | ModelError::InvalidGateExtent { id } => id,
            ModelError::InvalidNoise(_) => unreachable!("gate validation"),
        };
        IoError::InvalidGate {
            path: path.to_path_buf(),
            gate_id,
            message: e.to_string(),
        }
    })
}

pub fn load_gate_map(path: &Path) -> Result<GateMap, IoError> {
    parse_gate_map(&read_text(path)?, path)
}

/// Writes the map in explicit-corner form.
pub fn write_gate_map(path: &Path, map: &GateMap) -> Result<(), IoError> {
    let file = GateMapFile {
        gates: map.gates().iter().map(GateRecord::explicit).collect(),
    };
    write_json(path, &file)
}

// -------------------------------------------------------------- sensor logs

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuRecord {
    pub t: f64,
    pub a: [f64; 3],
    pub w: [f64; 3],
}

impl From<&ImuSample> for ImuRecord {
    fn from(s: &ImuSample) -> Self {
        Self {
            t: s.t,
            a: s.a_m.into(),
            w: s.w_m.into(),
        }
    }
}

impl From<ImuRecord> for ImuSample {
    fn from(r: ImuRecord) -> Self {
        Self {
            t: r.t,
            a_m: r.a.into(),
            w_m: r.w.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerRecord {
    pub u: f64,
    pub v: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub t: f64,
    pub corners: [Option<CornerRecord>; 4],
}

impl From<&GateDetection> for DetectionRecord {
    fn from(d: &GateDetection) -> Self {
        Self {
            t: d.t,
            corners: d.corners.map(|c| {
                c.map(|c| CornerRecord {
                    u: c.px.x,
                    v: c.px.y,
                    score: c.score,
                })
            }),
        }
    }
}

impl From<DetectionRecord> for GateDetection {
    fn from(r: DetectionRecord) -> Self {
        GateDetection::new(
            r.t,
            r.corners.map(|c| {
                c.map(|c| DetectedCorner {
                    px: Vec2::new(c.u, c.v),
                    norm: None,
                    score: c.score,
                })
            }),
        )
    }
}

/// Parses JSON lines, skipping blank lines. `strict` requires strictly
/// increasing timestamps, otherwise non-decreasing.
fn parse_jsonl<R: for<'de> Deserialize<'de>>(
    text: &str,
    path: &Path,
    strict: bool,
    time: impl Fn(&R) -> f64,
) -> Result<Vec<R>, IoError> {
    let mut out: Vec<R> = Vec::new();
    let mut previous = f64::NEG_INFINITY;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(line).map_err(|e| parse_err(path, i, e))?;
        let t = time(&rec);
        let ordered = if strict { t > previous } else { t >= previous };
        if !t.is_finite() || !ordered {
            return Err(IoError::NonMonotonicTimestamp {
                path: path.to_path_buf(),
                line: i + 1,
                t,
                previous,
            });
        }
        previous = t;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_imu_log(text: &str, path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let recs: Vec<ImuRecord> = parse_jsonl(text, path, true, |r: &ImuRecord| r.t)?;
    Ok(recs.into_iter().map(ImuSample::from).collect())
}

/// Several detections may share a timestamp (one per gate in a frame).
pub fn parse_detection_log(text: &str, path: &Path) -> Result<Vec<GateDetection>, IoError> {
    let recs: Vec<DetectionRecord> = parse_jsonl(text, path, false, |r: &DetectionRecord| r.t)?;
    Ok(recs.into_iter().map(GateDetection::from).collect())
}

pub fn load_sensor_logs(imu_path: &Path, det_path: &Path) -> Result<(Vec<ImuSample>, Vec<GateDetection>), IoError> {
    let imu = parse_imu_log(&read_text(imu_path)?, imu_path)?;
    let dets = parse_detection_log(&read_text(det_path)?, det_path)?;
    Ok((imu, dets))
}

pub fn write_imu_log(path: &Path, imu: &[ImuSample]) -> Result<(), IoError> {
    write_jsonl(path, imu.iter().map(ImuRecord::from))
}

pub fn write_detection_log(path: &Path, dets: &[GateDetection]) -> Result<(), IoError> {
    write_jsonl(path, dets.iter().map(DetectionRecord::from))
}

// ------------------------------------------------------------- trajectories

pub const TRAJECTORY_HEADER: [&str; 11] = ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"];

/// Formats with 17 significant digits, enough to round-trip any f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectory_csv(states: &[NominalState]) -> String {
    let mut out = TRAJECTORY_HEADER.join(",");
    out.push('\n');
    for s in states {
        let q = s.q.quaternion();
        let row = [s.t, s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z, q.w, q.i, q.j, q.k];
        out.push_str(&row.map(fmt17).join(","));
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, states: &[NominalState]) -> Result<(), IoError> {
    write_atomic(path, trajectory_csv(states).as_bytes())
}

/// Reads a trajectory CSV. Biases are not stored and come back as zero.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<NominalState>, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(TRAJECTORY_HEADER.iter().copied()) {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: format!("expected header {}", TRAJECTORY_HEADER.join(",")),
        });
    }
    let mut out: Vec<NominalState> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut vals = [0.0; 11];
        for (k, field) in rec.iter().enumerate() {
            vals[k] = field.parse().map_err(|_| IoError::Parse {
                path: path.to_path_buf(),
                line,
                column: k + 1,
                message: format!("column {}: not a number: {field:?}", TRAJECTORY_HEADER[k]),
            })?;
        }
        let t = vals[0];
        if let Some(prev) = out.last() {
            if !(t > prev.t) {
                return Err(IoError::NonMonotonicTimestamp {
                    path: path.to_path_buf(),
                    line,
                    t,
                    previous: prev.t,
                });
            }
        }
        let q = nalgebra::Quaternion::new(vals[7], vals[8], vals[9], vals[10]);
        out.push(NominalState {
            t,
            p: Vec3::new(vals[1], vals[2], vals[3]),
            v: Vec3::new(vals[4], vals[5], vals[6]),
            q: Quat::new_unchecked(q),
            b_a: Vec3::zeros(),
            b_w: Vec3::zeros(),
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        column: 0,
        message: e.to_string(),
    }
}

pub fn load_trajectory(path: &Path) -> Result<Vec<NominalState>, IoError> {
    parse_trajectory(&read_text(path)?, path)
}

// ------------------------------------------------------------ run config

/// Initial pose for the filter; `q` is `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialPose {
    pub t: f64,
    pub p: [f64; 3],
    pub q: [f64; 4],
}

impl InitialPose {
    pub fn from_state(s: &NominalState) -> Self {
        let q = s.q.quaternion();
        Self {
            t: s.t,
            p: s.p.into(),
            q: [q.w, q.i, q.j, q.k],
        }
    }

    pub fn state(&self) -> NominalState {
        let [w, x, y, z] = self.q;
        NominalState::at_pose(
            self.t,
            Vec3::from(self.p),
            Quat::from_quaternion(nalgebra::Quaternion::new(w, x, y, z)),
        )
    }
}

/// One document configuring every stage. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gate_map: Option<PathBuf>,
    pub imu: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub initial_pose: Option<InitialPose>,
    pub camera: CameraModel,
    pub mount: CameraMount,
    pub eskf: EskfConfig,
    pub fgo: FgoOptions,
    pub vision: VisionConfig,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gate_map: None,
            imu: None,
            detections: None,
            output_dir: None,
            initial_pose: None,
            camera: CameraModel::default(),
            mount: CameraMount::default(),
            eskf: EskfConfig::default(),
            fgo: FgoOptions::default(),
            vision: VisionConfig::default(),
            corruption: CorruptionSpec::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Checks every nested section.
    pub fn validate(&self) -> Result<(), String> {
        self.camera.validate().map_err(|e| format!("camera: {e}"))?;
        self.eskf.validate().map_err(|e| format!("eskf: {e}"))?;
        self.fgo.weights.validate().map_err(|e| format!("fgo: {e}"))?;
        if self.fgo.max_iters == 0 || !(self.fgo.lambda_init > 0.0) {
            return Err("fgo: max_iters and lambda_init must be positive".into());
        }
        self.vision.validate().map_err(|e| format!("vision: {e}"))?;
        self.corruption.validate().map_err(|e| format!("corruption: {e}"))?;
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.gate_map, &mut self.imu, &mut self.detections, &mut self.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Loads, resolves relative paths and validates. Input paths must exist.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let mut cfg: RunConfig = read_json(path)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        let invalid = |message: String| IoError::Validation {
            path: path.to_path_buf(),
            message,
        };
        cfg.validate().map_err(invalid)?;
        for (name, p) in [("gate_map", &cfg.gate_map), ("imu", &cfg.imu), ("detections", &cfg.detections)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(invalid(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> &'static Path {
        Path::new("test.json")
    }

    #[test]
    fn explicit_gate() {
        let text = r#"{"gates": [{"id": 3, "corners": [[5, 1, 2], [5, -1, 2], [5, -1, 0], [5, 1, 0]]}]}"#;
        let map = parse_gate_map(text, p()).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.get(3).unwrap().corner(crate::model::CornerLabel::BR), Vec3::new(5.0, -1.0, 0.0));
    }

    #[test]
    fn pose_gate_matches_hand_computation() {
        let text = r#"{"gates": [{"id": 0, "center": [2, 3, 1.5], "yaw_deg": 90, "width": 1.5, "height": 1.5}]}"#;
        let gate = *parse_gate_map(text, p()).unwrap().get(0).unwrap();
        // Facing +y: the gate's left is −x.
        let expected = [
            Vec3::new(1.25, 3.0, 2.25),
            Vec3::new(2.75, 3.0, 2.25),
            Vec3::new(2.75, 3.0, 0.75),
            Vec3::new(1.25, 3.0, 0.75),
        ];
        for (c, e) in gate.corners_w.iter().zip(&expected) {
            assert_relative_eq!(c, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn gate_map_errors() {
        let dup = r#"{"gates": [{"id": 1, "center": [0, 0, 1]}, {"id": 1, "center": [4, 0, 1]}]}"#;
        match parse_gate_map(dup, p()) {
            Err(IoError::InvalidGate { gate_id: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bent = r#"{"gates": [{"id": 9, "corners": [[5, 1, 2], [5, -1, 2], [5.3, -1, 0], [5, 1, 0]]}]}"#;
        assert!(matches!(parse_gate_map(bent, p()), Err(IoError::InvalidGate { gate_id: 9, .. })));
        let both = r#"{"gates": [{"id": 2, "center": [0, 0, 1], "corners": [[5, 1, 2], [5, -1, 2], [5, -1, 0], [5, 1, 0]]}]}"#;
        assert!(matches!(parse_gate_map(both, p()), Err(IoError::InvalidGate { gate_id: 2, .. })));
        let bad = "{\"gates\": [\n  {\"id\": \"x\"}\n]}";
        match parse_gate_map(bad, p()) {
            Err(IoError::Parse { line: 2, message, .. }) => assert!(message.contains("invalid type")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_detection_log() {
        assert!(parse_detection_log("", p()).unwrap().is_empty());
        assert!(parse_detection_log("\n\n", p()).unwrap().is_empty());
    }

    #[test]
    fn out_of_order_imu_names_line() {
        let text = "{\"t\":0.0,\"a\":[0,0,9.81],\"w\":[0,0,0]}\n{\"t\":0.002,\"a\":[0,0,9.81],\"w\":[0,0,0]}\n{\"t\":0.001,\"a\":[0,0,9.81],\"w\":[0,0,0]}\n";
        match parse_imu_log(text, p()) {
            Err(e @ IoError::NonMonotonicTimestamp { line: 3, .. }) => assert!(e.to_string().contains(":3:")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detection_record_with_missing_corners() {
        let text = r#"{"t":0.5,"corners":[{"u":10.5,"v":20.25,"score":0.9},null,null,{"u":1,"v":2,"score":1}]}"#;
        let d = parse_detection_log(text, p()).unwrap();
        assert_eq!(d[0].present_count(), 2);
        assert_eq!(d[0].corners[0].unwrap().px, Vec2::new(10.5, 20.25));
        let bad = r#"{"t":0.5,"corners":[null,null,null]}"#;
        assert!(matches!(parse_detection_log(bad, p()), Err(IoError::Parse { line: 1, .. })));
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let states: Vec<NominalState> = (0..20)
            .map(|k| {
                let t = 0.1 + k as f64 / 3.0;
                NominalState {
                    t,
                    p: Vec3::new(t.sin(), 1.0 / (t + 0.7), -t * 1e-17),
                    v: Vec3::new(std::f64::consts::PI, -t, 1e300),
                    q: crate::geometry::so3_exp(&Vec3::new(0.1 * t, -0.2, 0.3)),
                    ..NominalState::default()
                }
            })
            .collect();
        let text = trajectory_csv(&states);
        let back = parse_trajectory(&text, p()).unwrap();
        for (a, b) in states.iter().zip(&back) {
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            assert_eq!(a.p, b.p);
            assert_eq!(a.v, b.v);
            assert_eq!(a.q.coords, b.q.coords);
        }
        assert!(text.starts_with("t,px,py,pz,vx,vy,vz,qw,qx,qy,qz\n"));
    }

    #[test]
    fn bad_trajectory_header() {
        assert!(matches!(parse_trajectory("t,x\n1,2\n", p()), Err(IoError::Parse { line: 1, .. })));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn run_config_defaults_and_missing_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, "{}").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.eskf, EskfConfig::default());
        fs::write(&path, r#"{"gate_map": "missing.json"}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.is_validation() && err.to_string().contains("missing.json"));
        fs::write(&path, r#"{"eskf": {"huber_tau": -1}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(IoError::Validation { .. })));
        fs::write(&path, r#"{"unknown": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(IoError::Parse { .. })));
    }
}
