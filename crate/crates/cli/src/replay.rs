//! CSV bundles of recorded IMU samples, feature tracks and optional ground truth.
//!
//! Image measurements are on the normalized plane. Files:
//! `imu.csv` (t, wx, wy, wz, ax, ay, az), `points.csv` (t, frame_id, feature_id, u, v),
//! `lines.csv` (t, frame_id, line_id, us, vs, ue, ve, vpx, vpy; VP columns may be empty),
//! `truth.csv` (t, px, py, pz, qw, qx, qy, qz), `init.csv` (model, t, pose, velocity, biases)
//! and `frames.csv` (t, frame_id), which lists camera frames that carry no measurements.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use plvio::geometry::Rotation;
use plvio::propagation::ImuSample;
use plvio::simulator::{initial_estimate, SimData};
use plvio::state::{ErrorModel, ImuState};
use plvio::update::{Frame, LineMeasurement};
use plvio::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const FRAME_TIME_TOL: f64 = 1e-12;
/// Tolerance when matching a frame time to a ground-truth row.
pub const TRUTH_TIME_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BundlePaths {
    pub imu: PathBuf,
    pub points: PathBuf,
    pub lines: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub frames: Option<PathBuf>,
}

impl BundlePaths {
    /// Standard file names inside `dir`; optional files are used only if present.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        Self {
            imu: dir.join("imu.csv"),
            points: dir.join("points.csv"),
            lines: opt("lines.csv"),
            truth: opt("truth.csv"),
            init: opt("init.csv"),
            frames: opt("frames.csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitModel {
    Any,
    Standard,
    Invariant,
}

impl InitModel {
    fn matches(self, model: ErrorModel) -> bool {
        matches!(
            (self, model),
            (InitModel::Standard, ErrorModel::StandardAdditive) | (InitModel::Invariant, ErrorModel::RightInvariant)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthPose {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub rot: Rotation<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBundle {
    pub imu: Vec<ImuSample<f64>>,
    pub frames: Vec<Frame<f64>>,
    pub has_lines: bool,
    pub truth: Option<Vec<TruthPose>>,
    pub init: Vec<(InitModel, ImuState<f64>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRow {
    t: f64,
    frame_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    t: f64,
    frame_id: u64,
    feature_id: u64,
    u: f64,
    v: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineRow {
    t: f64,
    frame_id: u64,
    line_id: u64,
    us: f64,
    vs: f64,
    ue: f64,
    ve: f64,
    #[serde(default)]
    vpx: Option<f64>,
    #[serde(default)]
    vpy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct InitRow {
    model: InitModel,
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    bgx: f64,
    bgy: f64,
    bgz: f64,
    bax: f64,
    bay: f64,
    baz: f64,
}

fn parse_err(file: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.display().to_string(), line, msg: msg.into() }
}

/// Rows of `path` with their 1-based line numbers.
fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<(u64, R)>, Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec.deserialize(Some(&headers)).map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push((line, row));
    }
    Ok(out)
}

fn check_finite(path: &Path, line: u64, values: &[f64]) -> Result<(), Error> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(parse_err(path, line, "non-finite value"))
    }
}

fn rotation(path: &Path, line: u64, q: [f64; 4]) -> Result<Rotation<f64>, Error> {
    let q = Quaternion::new(q[0], q[1], q[2], q[3]);
    if !(q.norm() > 1e-9) {
        return Err(parse_err(path, line, "zero quaternion"));
    }
    Ok(UnitQuaternion::from_quaternion(q).to_rotation_matrix())
}

fn quaternion(r: &Rotation<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

struct FrameSet<'a> {
    path: &'a Path,
    frames: BTreeMap<u64, Frame<f64>>,
    last_t: f64,
}

impl FrameSet<'_> {
    fn frame(&mut self, line: u64, t: f64, id: u64) -> Result<&mut Frame<f64>, Error> {
        if t < self.last_t {
            return Err(parse_err(self.path, line, Error::TimeOrder(t).to_string()));
        }
        self.last_t = t;
        let f = self.frames.entry(id).or_insert_with(|| Frame::new(t, id));
        if (f.t - t).abs() > FRAME_TIME_TOL {
            return Err(parse_err(self.path, line, format!("frame {id} has times {} and {t}", f.t)));
        }
        Ok(f)
    }
}

impl ReplayBundle {
    pub fn load(paths: &BundlePaths) -> Result<Self, Error> {
        let mut imu: Vec<ImuSample<f64>> = Vec::new();
        for (line, r) in read_rows::<ImuRow>(&paths.imu)? {
            check_finite(&paths.imu, line, &[r.t, r.wx, r.wy, r.wz, r.ax, r.ay, r.az])?;
            if imu.last().is_some_and(|p| r.t <= p.t) {
                return Err(parse_err(&paths.imu, line, Error::TimeOrder(r.t).to_string()));
            }
            imu.push(ImuSample::new(r.t, Vector3::new(r.wx, r.wy, r.wz), Vector3::new(r.ax, r.ay, r.az)));
        }
        if imu.is_empty() {
            return Err(parse_err(&paths.imu, 1, "no IMU samples"));
        }

        let mut frames = BTreeMap::new();
        if let Some(fp) = &paths.frames {
            let mut set = FrameSet { path: fp, frames, last_t: f64::NEG_INFINITY };
            for (line, r) in read_rows::<FrameRow>(fp)? {
                check_finite(fp, line, &[r.t])?;
                set.frame(line, r.t, r.frame_id)?;
            }
            frames = set.frames;
        }
        let mut set = FrameSet { path: &paths.points, frames, last_t: f64::NEG_INFINITY };
        for (line, r) in read_rows::<PointRow>(&paths.points)? {
            check_finite(&paths.points, line, &[r.t, r.u, r.v])?;
            set.frame(line, r.t, r.frame_id)?.points.push((r.feature_id, Vector2::new(r.u, r.v)));
        }
        frames = set.frames;
        let has_lines = paths.lines.is_some();
        if let Some(lp) = &paths.lines {
            let mut set = FrameSet { path: lp, frames, last_t: f64::NEG_INFINITY };
            for (line, r) in read_rows::<LineRow>(lp)? {
                check_finite(lp, line, &[r.t, r.us, r.vs, r.ue, r.ve])?;
                let vp = match (r.vpx, r.vpy) {
                    (Some(x), Some(y)) => {
                        check_finite(lp, line, &[x, y])?;
                        Some(Vector2::new(x, y))
                    }
                    (None, None) => None,
                    _ => return Err(parse_err(lp, line, "vpx and vpy must both be present or both empty")),
                };
                set.frame(line, r.t, r.frame_id)?.lines.push(LineMeasurement {
                    id: r.line_id,
                    start: Vector2::new(r.us, r.vs),
                    end: Vector2::new(r.ue, r.ve),
                    vp,
                });
            }
            frames = set.frames;
        }
        let frames: Vec<Frame<f64>> = frames.into_values().collect();
        for w in frames.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Config(format!(
                    "frame {} at t = {} does not follow frame {} at t = {}",
                    w[1].frame_id, w[1].t, w[0].frame_id, w[0].t
                )));
            }
        }

        let truth = match &paths.truth {
            None => None,
            Some(tp) => {
                let mut out: Vec<TruthPose> = Vec::new();
                for (line, r) in read_rows::<TruthRow>(tp)? {
                    check_finite(tp, line, &[r.t, r.px, r.py, r.pz, r.qw, r.qx, r.qy, r.qz])?;
                    if out.last().is_some_and(|p| r.t <= p.t) {
                        return Err(parse_err(tp, line, Error::TimeOrder(r.t).to_string()));
                    }
                    let rot = rotation(tp, line, [r.qw, r.qx, r.qy, r.qz])?;
                    out.push(TruthPose { t: r.t, pos: Vector3::new(r.px, r.py, r.pz), rot });
                }
                Some(out)
            }
        };

        let mut init = Vec::new();
        if let Some(ip) = &paths.init {
            for (line, r) in read_rows::<InitRow>(ip)? {
                let rot = rotation(ip, line, [r.qw, r.qx, r.qy, r.qz])?;
                let state = ImuState {
                    rot,
                    vel: Vector3::new(r.vx, r.vy, r.vz),
                    pos: Vector3::new(r.px, r.py, r.pz),
                    bg: Vector3::new(r.bgx, r.bgy, r.bgz),
                    ba: Vector3::new(r.bax, r.bay, r.baz),
                };
                init.push((r.model, state));
            }
        }
        Ok(Self { imu, frames, has_lines, truth, init })
    }

    /// Start state for `model`: a matching `init.csv` row, then an `any` row, then the first
    /// ground-truth pose with finite-difference velocity and zero biases.
    pub fn start_state(&self, model: ErrorModel) -> Result<ImuState<f64>, Error> {
        if let Some((_, s)) = self.init.iter().find(|(m, _)| m.matches(model)) {
            return Ok(*s);
        }
        if let Some((_, s)) = self.init.iter().find(|(m, _)| *m == InitModel::Any) {
            return Ok(*s);
        }
        match self.truth.as_deref() {
            Some([a, b, ..]) => {
                let mut s = ImuState::at_rest(a.rot, a.pos);
                s.vel = (b.pos - a.pos) / (b.t - a.t);
                Ok(s)
            }
            _ => Err(Error::Config("replay needs init.csv or at least two ground-truth rows".into())),
        }
    }

    /// Ground-truth pose recorded at `t`, if any.
    pub fn truth_at(&self, t: f64) -> Option<&TruthPose> {
        let truth = self.truth.as_ref()?;
        let i = truth.partition_point(|p| p.t < t - TRUTH_TIME_TOL);
        truth.get(i).filter(|p| (p.t - t).abs() <= TRUTH_TIME_TOL)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Error> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<(), Error> {
    w.flush().map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn put<S: Serialize, W: Write>(w: &mut csv::Writer<W>, path: &Path, row: S) -> Result<(), Error> {
    w.serialize(row).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes simulated data as a bundle in `dir`, including start states for both error models.
pub fn write_bundle(dir: &Path, data: &SimData) -> Result<BundlePaths, Error> {
    std::fs::create_dir_all(dir)?;
    let paths = BundlePaths {
        imu: dir.join("imu.csv"),
        points: dir.join("points.csv"),
        lines: Some(dir.join("lines.csv")),
        truth: Some(dir.join("truth.csv")),
        init: Some(dir.join("init.csv")),
        frames: Some(dir.join("frames.csv")),
    };

    let fp = paths.frames.as_deref().expect("set above");
    let mut w = writer(fp)?;
    for f in &data.frames {
        put(&mut w, fp, FrameRow { t: f.t, frame_id: f.frame_id })?;
    }
    finish(w, fp)?;

    let mut w = writer(&paths.imu)?;
    for s in &data.imu {
        let (o, a) = (s.omega, s.accel);
        put(&mut w, &paths.imu, ImuRow { t: s.t, wx: o.x, wy: o.y, wz: o.z, ax: a.x, ay: a.y, az: a.z })?;
    }
    finish(w, &paths.imu)?;

    let mut w = writer(&paths.points)?;
    for f in &data.frames {
        for (id, z) in &f.points {
            put(&mut w, &paths.points, PointRow { t: f.t, frame_id: f.frame_id, feature_id: *id, u: z.x, v: z.y })?;
        }
    }
    finish(w, &paths.points)?;

    let lp = paths.lines.as_deref().expect("set above");
    let mut w = writer(lp)?;
    for f in &data.frames {
        for l in &f.lines {
            let row = LineRow {
                t: f.t,
                frame_id: f.frame_id,
                line_id: l.id,
                us: l.start.x,
                vs: l.start.y,
                ue: l.end.x,
                ve: l.end.y,
                vpx: l.vp.map(|v| v.x),
                vpy: l.vp.map(|v| v.y),
            };
            put(&mut w, lp, row)?;
        }
    }
    finish(w, lp)?;

    let tp = paths.truth.as_deref().expect("set above");
    let mut w = writer(tp)?;
    for s in &data.truth {
        let q = quaternion(&s.state.rot);
        let p = s.state.pos;
        put(&mut w, tp, TruthRow { t: s.t, px: p.x, py: p.y, pz: p.z, qw: q[0], qx: q[1], qy: q[2], qz: q[3] })?;
    }
    finish(w, tp)?;

    let ip = paths.init.as_deref().expect("set above");
    let mut w = writer(ip)?;
    let t0 = data.imu.first().map_or(0.0, |s| s.t);
    for (tag, model) in [(InitModel::Standard, ErrorModel::StandardAdditive), (InitModel::Invariant, ErrorModel::RightInvariant)] {
        let s = initial_estimate(data, model)?;
        let q = quaternion(&s.rot);
        let row = InitRow {
            model: tag,
            t: t0,
            px: s.pos.x,
            py: s.pos.y,
            pz: s.pos.z,
            qw: q[0],
            qx: q[1],
            qy: q[2],
            qz: q[3],
            vx: s.vel.x,
            vy: s.vel.y,
            vz: s.vel.z,
            bgx: s.bg.x,
            bgy: s.bg.y,
            bgz: s.bg.z,
            bax: s.ba.x,
            bay: s.ba.y,
            baz: s.ba.z,
        };
        put(&mut w, ip, row)?;
    }
    finish(w, ip)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use plvio::simulator::{generate, SimConfig};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn minimal(dir: &Path) -> BundlePaths {
        BundlePaths {
            imu: write(dir, "imu.csv", "t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.81\n0.01,0,0,0,0,0,9.81\n"),
            points: write(dir, "points.csv", "t,frame_id,feature_id,u,v\n0.01,1,4,0.1,0.2\n0.01,1,5,0.3,0.4\n"),
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_of_simulated_data() {
        let cfg = SimConfig { duration: 3.0, loops: 1, ..SimConfig::default() };
        let data = generate(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_bundle(dir.path(), &data).unwrap();
        assert_eq!(BundlePaths::in_dir(dir.path()), paths);
        let b = ReplayBundle::load(&paths).unwrap();
        assert_eq!(b.imu, data.imu);
        assert_eq!(b.frames, data.frames);
        for model in [ErrorModel::StandardAdditive, ErrorModel::RightInvariant] {
            let s = b.start_state(model).unwrap();
            let e = initial_estimate(&data, model).unwrap();
            assert!((s.pos - e.pos).norm() < 1e-12);
            assert!((s.rot.matrix() - e.rot.matrix()).amax() < 1e-12);
            assert_eq!(s.bg, e.bg);
        }
        let truth = b.truth.as_ref().unwrap();
        assert_eq!(truth.len(), data.truth.len());
        assert!((truth[7].rot.matrix() - data.truth[7].state.rot.matrix()).amax() < 1e-12);
        assert!(b.truth_at(data.truth[7].t).is_some());
    }

    #[test]
    fn malformed_row_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = minimal(dir.path());
        p.points = write(dir.path(), "points.csv", "t,frame_id,feature_id,u,v\n0.01,1,4,0.1,0.2\n0.01,1,x,0.3,0.4\n");
        match ReplayBundle::load(&p).unwrap_err() {
            Error::Parse { file, line, .. } => {
                assert!(file.ends_with("points.csv"));
                assert_eq!(line, 3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unsorted_timestamps_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = minimal(dir.path());
        p.imu = write(dir.path(), "imu.csv", "t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.81\n0.02,0,0,0,0,0,9.81\n0.01,0,0,0,0,0,9.81\n");
        let e = ReplayBundle::load(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        assert!(e.to_string().contains("not strictly increasing"));
    }

    #[test]
    fn optional_vp_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = minimal(dir.path());
        p.lines = Some(write(
            dir.path(),
            "lines.csv",
            "t,frame_id,line_id,us,vs,ue,ve,vpx,vpy\n0.01,1,0,0,0,1,1,,\n0.01,1,1,0,0,1,0,2,0\n",
        ));
        let b = ReplayBundle::load(&p).unwrap();
        assert_eq!(b.frames[0].lines.len(), 2);
        assert!(b.frames[0].lines[0].vp.is_none());
        assert_eq!(b.frames[0].lines[1].vp, Some(Vector2::new(2.0, 0.0)));
        p.lines = Some(write(dir.path(), "lines2.csv", "t,frame_id,line_id,us,vs,ue,ve\n0.01,1,0,0,0,1,1\n"));
        assert!(ReplayBundle::load(&p).unwrap().frames[0].lines[0].vp.is_none());
    }

    #[test]
    fn start_state_needs_init_or_truth() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = minimal(dir.path());
        let b = ReplayBundle::load(&p).unwrap();
        assert!(b.start_state(ErrorModel::RightInvariant).is_err());
        p.truth = Some(write(dir.path(), "truth.csv", "t,px,py,pz,qw,qx,qy,qz\n0,0,0,0,1,0,0,0\n0.5,1,0,0,1,0,0,0\n"));
        let s = ReplayBundle::load(&p).unwrap().start_state(ErrorModel::RightInvariant).unwrap();
        assert!((s.vel - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn inconsistent_frame_times_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = minimal(dir.path());
        p.points = write(dir.path(), "points.csv", "t,frame_id,feature_id,u,v\n0.01,1,4,0.1,0.2\n0.02,1,5,0.3,0.4\n");
        assert!(matches!(ReplayBundle::load(&p).unwrap_err(), Error::Parse { line: 3, .. }));
    }
}
