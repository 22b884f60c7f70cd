//! Landmark initialization and line refinement.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{orthonormal_retract, orthonormal_to_plucker, plucker_to_orthonormal, PluckerLine, RetractMode};
use crate::measurements::{
    line_jacobians, project_point, projection_jacobian, vp_jacobians, LineTrack, PointTrack,
};
use crate::scalar::{lit, Real};
use crate::state::{CameraClone, ErrorModel};

pub const MAX_CONDITION: f64 = 1e8;
pub const MIN_PLANE_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnSettings {
    pub max_iters: usize,
    pub step_tol: f64,
    pub lambda0: f64,
    pub lambda_max: f64,
    /// Per-observation Huber threshold on the residual norm.
    pub huber: Option<f64>,
}

impl Default for GnSettings {
    fn default() -> Self {
        Self {
            max_iters: 10,
            step_tol: 1e-8,
            lambda0: 1e-3,
            lambda_max: 1e6,
            huber: None,
        }
    }
}

fn find_clone<T: Real>(clones: &[CameraClone<T>], frame_id: u64, track: u64) -> Result<&CameraClone<T>> {
    clones
        .binary_search_by_key(&frame_id, |c| c.frame_id)
        .map(|i| &clones[i])
        .map_err(|_| Error::StaleTrack(track))
}

fn condition_number<T: Real>(m: &Matrix3<T>) -> T {
    let sv = m.singular_values();
    let smin = sv.min();
    if smin <= T::zero() {
        return T::max_value().unwrap_or_else(|| lit(f64::MAX));
    }
    sv.max() / smin
}

/// Linear least-squares intersection of bearings, then three Gauss-Newton
/// iterations on reprojection error.
pub fn triangulate_point<T: Real>(track: &PointTrack<T>, clones: &[CameraClone<T>]) -> Result<Vector3<T>> {
    if track.observations.len() < 2 {
        return Err(Error::TriangulationFailed("fewer than two observations"));
    }
    let mut views = Vec::with_capacity(track.observations.len());
    for o in &track.observations {
        views.push((find_clone(clones, o.frame_id, track.id)?, o.z));
    }

    let mut a = Matrix3::<T>::zeros();
    let mut b = Vector3::<T>::zeros();
    for (c, z) in &views {
        let bearing = (c.rot * Vector3::new(z.x, z.y, T::one())).normalize();
        let proj = Matrix3::identity() - bearing * bearing.transpose();
        a += proj;
        b += proj * c.pos;
    }
    if !(condition_number(&a) < lit(MAX_CONDITION)) {
        return Err(Error::TriangulationFailed("ill-conditioned intersection"));
    }
    let mut p = a.lu().solve(&b).ok_or(Error::TriangulationFailed("singular intersection"))?;

    for _ in 0..3 {
        let mut jtj = Matrix3::<T>::zeros();
        let mut jtr = Vector3::<T>::zeros();
        for (c, z) in &views {
            let rt = c.rot.matrix().transpose();
            let pc = rt * (p - c.pos);
            let zhat = project_point(&pc)?;
            let j = projection_jacobian(&pc) * rt;
            let r: Vector2<T> = z - zhat;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if !(condition_number(&jtj) < lit(MAX_CONDITION * MAX_CONDITION)) {
            return Err(Error::TriangulationFailed("ill-conditioned refinement"));
        }
        match jtj.cholesky() {
            Some(ch) => p += ch.solve(&jtr),
            None => return Err(Error::TriangulationFailed("singular refinement")),
        }
    }
    for (c, _) in &views {
        project_point(&(c.rot.inverse() * (p - c.pos)))?;
    }
    Ok(p)
}

/// World-frame plane `(n, w)` with `nᵀX + w = 0` back-projected from one
/// segment observation.
fn back_project<T: Real>(c: &CameraClone<T>, ps: &Vector3<T>, pe: &Vector3<T>) -> Option<Vector4<T>> {
    let lc = ps.cross(pe);
    let ln = lc.norm();
    if !(ln > T::EPS) {
        return None;
    }
    let n = c.rot * (lc / ln);
    Some(Vector4::new(n.x, n.y, n.z, -n.dot(&c.pos)))
}

/// Dual Plücker intersection of the two most transverse back-projected planes.
pub fn triangulate_line<T: Real>(track: &LineTrack<T>, clones: &[CameraClone<T>]) -> Result<PluckerLine<T>> {
    triangulate_line_min_angle(track, clones, MIN_PLANE_ANGLE_DEG)
}

/// As [`triangulate_line`] with a caller-chosen minimum angle between the
/// chosen planes.
pub fn triangulate_line_min_angle<T: Real>(track: &LineTrack<T>, clones: &[CameraClone<T>], min_angle_deg: f64) -> Result<PluckerLine<T>> {
    if track.observations.len() < 2 {
        return Err(Error::TriangulationFailed("fewer than two observations"));
    }
    let mut planes = Vec::with_capacity(track.observations.len());
    for o in &track.observations {
        let c = find_clone(clones, o.frame_id, track.id)?;
        if let Some(pi) = back_project(c, &o.ps, &o.pe) {
            planes.push(pi);
        }
    }
    let mut best: Option<(T, usize, usize)> = None;
    for i in 0..planes.len() {
        for j in (i + 1)..planes.len() {
            let dot = planes[i].xyz().dot(&planes[j].xyz()).abs();
            if best.is_none_or(|(b, _, _)| dot < b) {
                best = Some((dot, i, j));
            }
        }
    }
    let (dot, i, j) = best.ok_or(Error::TriangulationFailed("no usable planes"))?;
    let min_angle: T = lit(min_angle_deg.to_radians());
    if dot.min(T::one()).acos() < min_angle {
        return Err(Error::TriangulationFailed("back-projected planes nearly parallel"));
    }
    let (p1, p2) = (planes[i], planes[j]);
    let dual: Matrix4<T> = p1 * p2.transpose() - p2 * p1.transpose();
    // L* = [[⌊d⌋, n], [−nᵀ, 0]]
    let d = Vector3::new(dual[(2, 1)], dual[(0, 2)], dual[(1, 0)]);
    let n = Vector3::new(dual[(0, 3)], dual[(1, 3)], dual[(2, 3)]);
    let line = PluckerLine { n, d };
    line.validate()?;
    Ok(line.normalized())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineRefinement<T: Real> {
    pub line: PluckerLine<T>,
    pub cost: T,
    /// Cost after each accepted step, starting with the initial cost.
    pub costs: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Damping exceeded its ceiling; `line` is the input line.
    pub diverged: bool,
}

/// Stacked prediction errors `h(o) − z` and their Jacobians.
fn line_system<T: Real>(
    line: &PluckerLine<T>,
    track: &LineTrack<T>,
    clones: &[CameraClone<T>],
    use_vp: bool,
    huber: Option<f64>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let mut rows: Vec<(Vector2<T>, nalgebra::SMatrix<T, 2, 4>)> = Vec::new();
    for o in &track.observations {
        let c = find_clone(clones, o.frame_id, track.id)?;
        let j = line_jacobians(c, line, &o.ps, &o.pe, ErrorModel::RightInvariant, RetractMode::Global)?;
        rows.push((-j.r, j.hl));
    }
    if use_vp {
        for o in &track.vp_observations {
            let c = find_clone(clones, o.frame_id, track.id)?;
            match vp_jacobians(c, line, &o.pv, RetractMode::Global) {
                Ok(j) => rows.push((-j.r, j.hl)),
                Err(Error::VpAtInfinity) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let m = rows.len();
    let mut e = DVector::zeros(2 * m);
    let mut jac = DMatrix::zeros(2 * m, 4);
    for (k, (ek, jk)) in rows.iter().enumerate() {
        let w = match huber {
            Some(th) => {
                let th: T = lit(th);
                let nrm = ek.norm();
                if nrm > th { (th / nrm).sqrt() } else { T::one() }
            }
            None => T::one(),
        };
        e.rows_mut(2 * k, 2).copy_from(&(ek * w));
        jac.view_mut((2 * k, 0), (2, 4)).copy_from(&(jk * w));
    }
    Ok((e, jac))
}

fn line_cost<T: Real>(
    line: &PluckerLine<T>,
    track: &LineTrack<T>,
    clones: &[CameraClone<T>],
    use_vp: bool,
    huber: Option<f64>,
) -> Result<T> {
    Ok(line_system(line, track, clones, use_vp, huber)?.0.norm_squared())
}

fn refine<T: Real>(
    line: &PluckerLine<T>,
    track: &LineTrack<T>,
    clones: &[CameraClone<T>],
    settings: &GnSettings,
    use_vp: bool,
) -> Result<LineRefinement<T>> {
    if settings.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let mut o = plucker_to_orthonormal(line)?;
    let mut current = orthonormal_to_plucker(&o);
    let mut cost = line_cost(&current, track, clones, use_vp, settings.huber)?;
    let mut costs = vec![cost];
    let mut lambda: T = lit(settings.lambda0);
    let ten: T = lit(10.0);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < settings.max_iters {
        iterations += 1;
        let (e, j) = line_system(&current, track, clones, use_vp, settings.huber)?;
        let jtj = j.transpose() * &j;
        let jte = j.transpose() * e;
        let mut damped = jtj.clone();
        for k in 0..4 {
            damped[(k, k)] += lambda * (T::one() + jtj[(k, k)]);
        }
        let step = match damped.cholesky() {
            Some(ch) => -ch.solve(&jte),
            None => {
                lambda *= ten;
                if lambda > lit(settings.lambda_max) {
                    return Ok(diverged(line, costs, iterations));
                }
                continue;
            }
        };
        let delta = Vector4::new(step[0], step[1], step[2], step[3]);
        let cand_o = orthonormal_retract(&o, &delta, RetractMode::Global);
        let cand = orthonormal_to_plucker(&cand_o);
        let cand_cost = line_cost(&cand, track, clones, use_vp, settings.huber).ok();
        match cand_cost {
            Some(c) if c <= cost => {
                o = cand_o;
                current = cand;
                cost = c;
                costs.push(c);
                lambda /= ten;
                if delta.norm() < lit(settings.step_tol) {
                    converged = true;
                    break;
                }
            }
            _ => {
                lambda *= ten;
                if lambda > lit(settings.lambda_max) {
                    return Ok(diverged(line, costs, iterations));
                }
            }
        }
    }
    Ok(LineRefinement { line: current, cost, costs, iterations, converged, diverged: false })
}

fn diverged<T: Real>(line: &PluckerLine<T>, costs: Vec<T>, iterations: usize) -> LineRefinement<T> {
    log::warn!("line refinement diverged after {iterations} iterations");
    LineRefinement {
        line: *line,
        cost: costs[0],
        costs,
        iterations,
        converged: false,
        diverged: true,
    }
}

/// Minimizes the summed squared endpoint distances.
pub fn refine_line<T: Real>(
    line: &PluckerLine<T>,
    track: &LineTrack<T>,
    clones: &[CameraClone<T>],
    settings: &GnSettings,
) -> Result<LineRefinement<T>> {
    refine(line, track, clones, settings, false)
}

/// As [`refine_line`] with vanishing-point rows appended.
pub fn refine_structural_line<T: Real>(
    line: &PluckerLine<T>,
    track: &LineTrack<T>,
    clones: &[CameraClone<T>],
    settings: &GnSettings,
) -> Result<LineRefinement<T>> {
    refine(line, track, clones, settings, true)
}
