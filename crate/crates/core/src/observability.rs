//! Observability diagnostics for the point–line–VP system.
//!
//! The diagnostic state is `[θ v p bg ba | ψ φ]`: the 15-dim IMU error followed by the 4-dim
//! orthonormal error of a single line in global retraction mode.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::geometry::{plucker_tangent, plucker_to_orthonormal, skew, so3_exp, PluckerLine, RetractMode};
use crate::measurements::{line_jacobians, vp_jacobians, vp_predict};
use crate::propagation::{discretize, gravity, linearize, ImuSample, NoiseParams};
use crate::simulator::{analytic_trajectory, camera_extrinsics, gauss3, SimConfig};
use crate::state::{clone_jacobian, CameraClone, ErrorModel, ImuState, VioState, IMU_DIM, POS, THETA, VEL};

pub const DIAG_DIM: usize = IMU_DIM + 4;
pub const LINE: usize = IMU_DIM;
pub const VP_NULL_DIM: usize = 11;
pub const RANK_TOL: f64 = 1e-8;

/// One block row `H_k Φ(k, m)` of the observability matrix.
#[derive(Debug, Clone)]
pub struct ObservabilityRecord {
    pub h: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

pub fn build_observability_matrix(records: &[ObservabilityRecord]) -> Result<DMatrix<f64>> {
    let Some(first) = records.first() else {
        return Err(Error::Config("no observability records".into()));
    };
    let cols = first.phi.ncols();
    let mut rows = 0;
    for r in records {
        check_dim(r.phi.nrows(), r.h.ncols())?;
        check_dim(cols, r.phi.ncols())?;
        rows += r.h.nrows();
    }
    let mut o = DMatrix::zeros(rows, cols);
    let mut row = 0;
    for r in records {
        let block = &r.h * &r.phi;
        o.view_mut((row, 0), (block.nrows(), cols)).copy_from(&block);
        row += block.nrows();
    }
    Ok(o)
}

/// `‖O N‖∞ / max(‖O‖∞, 1)` with the row-sum infinity norm.
pub fn nullspace_residual(o: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<f64> {
    check_dim(o.ncols(), n.nrows())?;
    Ok(inf_norm(&(o * n)) / inf_norm(o).max(1.0))
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of columns minus the numerical rank (`σ > RANK_TOL · σ_max`).
pub fn kernel_dimension(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let rank = s.iter().filter(|&&x| x > RANK_TOL * smax && x > 0.0).count();
    m.ncols() - rank
}

/// Orthonormal basis of the numerical kernel of `m`.
pub fn kernel_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols();
    // Pad to at least `cols` rows so the SVD returns a full right basis.
    let mut a = DMatrix::zeros(m.nrows().max(cols), cols);
    a.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let null: Vec<usize> = (0..cols)
        .filter(|&i| !(svd.singular_values[i] > RANK_TOL * smax && svd.singular_values[i] > 0.0))
        .collect();
    let mut n = DMatrix::zeros(cols, null.len());
    for (j, &i) in null.iter().enumerate() {
        n.set_column(j, &vt.row(i).transpose());
    }
    n
}

/// Unit-scale Plücker coordinates and their tangent `(∂n, ∂d)` in global mode.
fn line_tangent(line: &PluckerLine<f64>) -> Result<(PluckerLine<f64>, SMatrix<f64, 6, 4>)> {
    let o = plucker_to_orthonormal(line)?;
    let unit = crate::geometry::orthonormal_to_plucker(&o);
    let (dn, dd) = plucker_tangent(&o);
    let mut t = SMatrix::<f64, 6, 4>::zeros();
    t.fixed_view_mut::<3, 4>(0, 0).copy_from(&dn);
    t.fixed_view_mut::<3, 4>(3, 0).copy_from(&dd);
    Ok((unit, t))
}

/// Line error induced by a Plücker perturbation `(δn, δd)`, by least squares on the tangent.
fn line_error_for(t: &SMatrix<f64, 6, 4>, dn: &Vector3<f64>, dd: &Vector3<f64>) -> Result<nalgebra::Vector4<f64>> {
    let mut rhs = nalgebra::Vector6::zeros();
    rhs.fixed_rows_mut::<3>(0).copy_from(dn);
    rhs.fixed_rows_mut::<3>(3).copy_from(dd);
    let chol = (t.transpose() * t)
        .cholesky()
        .ok_or(Error::DegenerateLine("singular line tangent"))?;
    Ok(chol.solve(&(t.transpose() * rhs)))
}

/// The 19×11 basis whose columns the VP rows cannot see.
///
/// Rows are `θ v p bg ba ψ φ`. Columns: three joint rotations of body and line, three
/// velocity directions, three position directions, rotation of the line about its own
/// direction, and the line's distance coordinate.
pub fn build_null_basis_vp(line: &PluckerLine<f64>) -> Result<DMatrix<f64>> {
    let (unit, _) = line_tangent(line)?;
    let mut n = DMatrix::zeros(DIAG_DIM, VP_NULL_DIM);
    for i in 0..3 {
        n[(THETA + i, i)] = 1.0;
        n[(LINE + i, i)] = 1.0;
        n[(VEL + i, 3 + i)] = 1.0;
        n[(POS + i, 6 + i)] = 1.0;
        n[(LINE + i, 9)] = unit.d[i];
    }
    n[(LINE + 3, 10)] = unit.d.norm();
    Ok(n)
}

/// Global translation and yaw of body and line together, one column each (19×4).
///
/// Under the invariant error the IMU part is state independent; under the additive error the
/// yaw column carries `−⌊v̂⌋g` and `−⌊p̂⌋g` terms evaluated at `imu`.
pub fn unobservable_basis(imu: &ImuState<f64>, line: &PluckerLine<f64>, model: ErrorModel) -> Result<DMatrix<f64>> {
    let (unit, t) = line_tangent(line)?;
    let g = Vector3::z();
    let mut n = DMatrix::zeros(DIAG_DIM, 4);
    for i in 0..3 {
        let e = Vector3::ith(i, 1.0);
        n[(POS + i, i)] = 1.0;
        let dl = line_error_for(&t, &e.cross(&unit.d), &Vector3::zeros())?;
        n.view_mut((LINE, i), (4, 1)).copy_from(&dl);
    }
    n.view_mut((THETA, 3), (3, 1)).copy_from(&g);
    if model == ErrorModel::StandardAdditive {
        n.view_mut((VEL, 3), (3, 1)).copy_from(&(-skew(&imu.vel) * g));
        n.view_mut((POS, 3), (3, 1)).copy_from(&(-skew(&imu.pos) * g));
    }
    let dl = line_error_for(&t, &g.cross(&unit.n), &g.cross(&unit.d))?;
    n.view_mut((LINE, 3), (4, 1)).copy_from(&dl);
    Ok(n)
}

/// Smallest singular value of `O_v N_l`; the line is fully observable with VP when it is
/// above `RANK_TOL`.
pub fn vp_full_observability_check(o_v: &DMatrix<f64>, n_l: &DMatrix<f64>) -> Result<f64> {
    check_dim(o_v.ncols(), n_l.nrows())?;
    if n_l.ncols() == 0 {
        return Ok(f64::INFINITY);
    }
    let s = singular_values(&(o_v * n_l));
    Ok(if s.len() < n_l.ncols() { 0.0 } else { *s.last().unwrap() })
}

/// Line-parameter kernel of the line rows, embedded as `[0_{15×k}; N_o]`.
pub fn line_parameter_kernel(o_l: &DMatrix<f64>) -> DMatrix<f64> {
    let hl = o_l.columns(LINE, 4).into_owned();
    let n_o = kernel_basis(&hl);
    let mut n = DMatrix::zeros(DIAG_DIM, n_o.ncols());
    n.view_mut((LINE, 0), (4, n_o.ncols())).copy_from(&n_o);
    n
}

/// Line and VP block rows along a window of camera frames.
#[derive(Debug, Clone)]
pub struct WindowRecords {
    pub line: Vec<ObservabilityRecord>,
    pub vp: Vec<ObservabilityRecord>,
    /// Linearization point at the first frame.
    pub first: ImuState<f64>,
    pub line_estimate: PluckerLine<f64>,
}

/// Per-frame linearization error applied to the truth.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub seed: u64,
}

/// Builds `H_k Φ(k, 0)` for one line observed over `frames` camera frames starting at `t0`.
///
/// With `perturb = None` every Jacobian is evaluated at the truth. Otherwise each frame
/// interval is linearized about an independently perturbed copy of the truth, as a filter
/// would when its estimate changes between updates.
pub fn window_records(
    cfg: &SimConfig,
    segment: (Vector3<f64>, Vector3<f64>),
    t0: f64,
    frames: usize,
    model: ErrorModel,
    perturb: Option<Perturbation>,
) -> Result<WindowRecords> {
    if frames == 0 {
        return Err(Error::Config("window needs at least one frame".into()));
    }
    let line = PluckerLine::from_points(&segment.0, &segment.1)?;
    let (line, _) = line_tangent(&line)?;
    let ext = camera_extrinsics();
    let noise = NoiseParams::<f64>::default();
    let g = gravity::<f64>();
    let imu_dt = 1.0 / cfg.imu_rate;
    let steps = (cfg.imu_rate / cfg.cam_rate).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(perturb.map_or(0, |p| p.seed));
    let mut lin_at = |t: f64| -> ImuState<f64> {
        let truth = analytic_trajectory(cfg, t).0;
        match perturb {
            None => truth,
            Some(p) => {
                let mut s = truth;
                s.rot = so3_exp(&gauss3(&mut rng, p.rot)) * s.rot;
                s.pos += gauss3(&mut rng, p.pos);
                s.vel += gauss3(&mut rng, p.vel);
                s
            }
        }
    };

    let mut phi = DMatrix::<f64>::identity(DIAG_DIM, DIAG_DIM);
    let mut out = WindowRecords {
        line: Vec::with_capacity(frames),
        vp: Vec::with_capacity(frames),
        first: lin_at(t0),
        line_estimate: line,
    };
    let mut est = out.first;
    for k in 0..frames {
        let t = t0 + k as f64 * steps as f64 * imu_dt;
        let truth = analytic_trajectory(cfg, t).0;
        if k > 0 {
            est = lin_at(t);
        }
        let (hl, hv) = frame_rows(&truth, &est, &ext, &line, &segment, model)?;
        out.line.push(ObservabilityRecord { h: hl, phi: phi.clone() });
        if let Some(hv) = hv {
            out.vp.push(ObservabilityRecord { h: hv, phi: phi.clone() });
        }
        let mut step_phi = SMatrix::<f64, 15, 15>::identity();
        for j in 0..steps {
            let ts = t + j as f64 * imu_dt;
            let (_, omega, accel) = analytic_trajectory(cfg, ts);
            let sample = ImuSample { t: ts, omega, accel };
            let (f, gm) = linearize(&est, &sample, model, &g);
            step_phi = discretize(&f, &gm, &noise, imu_dt).phi * step_phi;
        }
        let mut big = DMatrix::<f64>::identity(DIAG_DIM, DIAG_DIM);
        big.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&step_phi);
        phi = big * phi;
    }
    Ok(out)
}

type FrameRows = (DMatrix<f64>, Option<DMatrix<f64>>);

fn frame_rows(
    truth: &ImuState<f64>,
    est: &ImuState<f64>,
    ext: &crate::geometry::Pose<f64>,
    line: &PluckerLine<f64>,
    segment: &(Vector3<f64>, Vector3<f64>),
    model: ErrorModel,
) -> Result<FrameRows> {
    let cam_truth = truth.pose().compose(ext);
    let project = |x: &Vector3<f64>| -> Result<Vector3<f64>> {
        let c = cam_truth.inverse_transform_point(x);
        if c.z <= 1e-6 {
            return Err(Error::BehindCamera(c.z));
        }
        Ok(Vector3::new(c.x / c.z, c.y / c.z, 1.0))
    };
    let ps = project(&segment.0)?;
    let pe = project(&segment.1)?;
    let cam = est.pose().compose(ext);
    let clone = CameraClone { rot: cam.rot, pos: cam.trans, frame_id: 0 };
    let vio = VioState::new(*est, *ext, 1);
    let jc = clone_jacobian(&vio, model);
    let embed = |hx: &SMatrix<f64, 2, 6>, hl: &SMatrix<f64, 2, 4>| {
        let mut h = DMatrix::zeros(2, DIAG_DIM);
        h.view_mut((0, 0), (2, IMU_DIM)).copy_from(&(hx * jc));
        h.view_mut((0, LINE), (2, 4)).copy_from(hl);
        h
    };
    let jl = line_jacobians(&clone, line, &ps, &pe, model, RetractMode::Global)?;
    let h_line = embed(&jl.hx, &jl.hl);
    let d_c = cam_truth.rot.inverse() * line.d;
    let h_vp = match vp_predict(&d_c) {
        Ok(pv) => {
            let jv = vp_jacobians(&clone, line, &Vector2::new(pv.x, pv.y), RetractMode::Global)?;
            Some(embed(&jv.hx, &jv.hl))
        }
        Err(_) => None,
    };
    Ok((h_line, h_vp))
}

/// A segment `ahead` metres in front of the camera at `t0`, tilted out of the image plane.
pub fn default_segment(cfg: &SimConfig, t0: f64, ahead: f64) -> (Vector3<f64>, Vector3<f64>) {
    let cam = analytic_trajectory(cfg, t0).0.pose().compose(&camera_extrinsics());
    let r: Matrix3<f64> = *cam.rot.matrix();
    let fwd = r.column(2).into_owned();
    let right = r.column(0).into_owned();
    let down = r.column(1).into_owned();
    let centre = cam.trans + fwd * ahead - down * 0.5;
    let dir = (fwd * 0.6 + right * 0.7 + down * 0.4).normalize();
    (centre - dir, centre + dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Expect {
    Below(f64),
    Above(f64),
    AtLeast(f64),
}

impl Expect {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Expect::Below(b) => v < b,
            Expect::Above(b) => v > b,
            Expect::AtLeast(b) => v >= b,
        }
    }

    fn describe(&self) -> String {
        match self {
            Expect::Below(b) => format!("<{b:e}"),
            Expect::Above(b) => format!(">{b:e}"),
            Expect::AtLeast(b) => format!(">={b}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub value: f64,
    pub expect: Expect,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ObservabilityReport {
    pub frames: usize,
    pub rows: Vec<ReportRow>,
}

impl ObservabilityReport {
    fn push(&mut self, label: impl Into<String>, value: f64, expect: Expect) {
        let pass = expect.holds(value);
        self.rows.push(ReportRow { label: label.into(), value, expect, pass });
    }

    pub fn get(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "direction,residual,expected,pass")?;
        for r in &self.rows {
            writeln!(f, "{},{:.6e},{},{}", r.label, r.value, r.expect.describe(), r.pass)?;
        }
        f.flush()?;
        Ok(())
    }
}

pub const DEFAULT_PERTURBATION: Perturbation = Perturbation { rot: 0.02, pos: 0.1, vel: 0.1, seed: 7 };

const NV_LABELS: [&str; VP_NULL_DIM] = [
    "nv_rot_x", "nv_rot_y", "nv_rot_z", "nv_vel_x", "nv_vel_y", "nv_vel_z", "nv_pos_x", "nv_pos_y", "nv_pos_z",
    "nv_line_dir", "nv_line_dist",
];
const GLOBAL_LABELS: [&str; 4] = ["trans_x", "trans_y", "trans_z", "yaw"];

fn column_residuals(o: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..n.ncols()).map(|j| nullspace_residual(o, &n.columns(j, 1).into_owned())).collect()
}

/// Runs every diagnostic on one line over `frames` camera frames starting at `t0`.
///
/// `O_v·N_v` and the global directions are checked per column. The line-parameter kernel is
/// taken from the first frame's line rows; `O_v·N_l` is evaluated over the whole window.
pub fn analyze(cfg: &SimConfig, t0: f64, frames: usize) -> Result<ObservabilityReport> {
    let segment = default_segment(cfg, t0, 8.0);
    let ri = window_records(cfg, segment, t0, frames, ErrorModel::RightInvariant, None)?;
    if ri.vp.len() < 2 {
        return Err(Error::Config("line has fewer than two usable vanishing points".into()));
    }
    let o_v = build_observability_matrix(&ri.vp)?;
    let o_l = build_observability_matrix(&ri.line)?;
    let n_v = build_null_basis_vp(&ri.line_estimate)?;
    let n_l = line_parameter_kernel(&build_observability_matrix(&ri.line[..1])?);

    let mut report = ObservabilityReport { frames, rows: Vec::new() };
    for (label, r) in NV_LABELS.iter().zip(column_residuals(&o_v, &n_v)?) {
        report.push(format!("riekf_truth_{label}"), r, Expect::Below(1e-8));
    }
    report.push("vp_kernel_dim", kernel_dimension(&o_v) as f64, Expect::AtLeast(VP_NULL_DIM as f64));
    report.push("line_param_kernel_dim", n_l.ncols() as f64, Expect::AtLeast(2.0));
    report.push("vp_full_observability_sigma_min", vp_full_observability_check(&o_v, &n_l)?, Expect::Above(1e-6));
    report.push("plv_kernel_dim", kernel_dimension(&stack(&o_l, &o_v)) as f64, Expect::AtLeast(VP_NULL_DIM as f64));

    let cases = [
        ("riekf_truth", ErrorModel::RightInvariant, None),
        ("riekf_noisy", ErrorModel::RightInvariant, Some(DEFAULT_PERTURBATION)),
        ("msckf_truth", ErrorModel::StandardAdditive, None),
        ("msckf_noisy", ErrorModel::StandardAdditive, Some(DEFAULT_PERTURBATION)),
    ];
    for (prefix, model, perturb) in cases {
        let w = window_records(cfg, segment, t0, frames, model, perturb)?;
        let o = stack(&build_observability_matrix(&w.line)?, &build_observability_matrix(&w.vp)?);
        let n = unobservable_basis(&w.first, &w.line_estimate, model)?;
        for (label, r) in GLOBAL_LABELS.iter().zip(column_residuals(&o, &n)?) {
            report.push(format!("{prefix}_{label}"), r, Expect::Below(1e-8));
        }
    }
    Ok(report)
}

pub fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols().max(b.ncols()));
    m.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    m.view_mut((a.nrows(), 0), (b.nrows(), b.ncols())).copy_from(b);
    m
}
