//! Point, line and vanishing-point measurement models.
//!
//! Residuals follow `r = z − h(x̂)` and every Jacobian is `∂h/∂ξ`, so that
//! `r ≈ H ξ + n`. Lines are measured as zero endpoint distance, giving
//! `r = −z_L`.

use nalgebra::{DMatrix, DVector, Matrix2x3, SMatrix, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{
    orthonormal_to_plucker, plucker_tangent, plucker_to_orthonormal, skew, transform_line, PluckerLine,
    RetractMode,
};
use crate::scalar::{lit, to_f64, Real};
use crate::state::{CameraClone, ErrorModel, VioState};

pub const MIN_DEPTH: f64 = 0.01;
/// Relative singular-value threshold used for rank decisions.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointObservation<T: Real> {
    pub frame_id: u64,
    pub z: Vector2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointTrack<T: Real> {
    pub id: u64,
    pub observations: Vec<PointObservation<T>>,
    pub position: Option<Vector3<T>>,
}

impl<T: Real> PointTrack<T> {
    pub fn new(id: u64) -> Self {
        Self { id, observations: Vec::new(), position: None }
    }
}

/// Endpoints `(u, v, 1)` of a detected segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineObservation<T: Real> {
    pub frame_id: u64,
    pub ps: Vector3<T>,
    pub pe: Vector3<T>,
}

impl<T: Real> LineObservation<T> {
    pub fn new(frame_id: u64, s: Vector2<T>, e: Vector2<T>) -> Self {
        Self {
            frame_id,
            ps: Vector3::new(s.x, s.y, T::one()),
            pe: Vector3::new(e.x, e.y, T::one()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpObservation<T: Real> {
    pub frame_id: u64,
    pub pv: Vector2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineTrack<T: Real> {
    pub id: u64,
    pub observations: Vec<LineObservation<T>>,
    pub vp_observations: Vec<VpObservation<T>>,
    pub line: Option<PluckerLine<T>>,
}

impl<T: Real> LineTrack<T> {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            observations: Vec::new(),
            vp_observations: Vec::new(),
            line: None,
        }
    }

    pub fn structural(&self) -> bool {
        !self.vp_observations.is_empty()
    }
}

/// How the landmark error is parameterized in the point model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkError {
    /// `p_f = p̂_f + ξ_f`.
    Additive,
    /// `p_f = exp(ξ_θ,anchor) p̂_f + ξ_f`, anchored on the first observing clone.
    Anchored,
}

/// Linearized measurement system `r = H ξ + n`, `n ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem<T: Real> {
    pub h: DMatrix<T>,
    pub r: DVector<T>,
    pub noise: DMatrix<T>,
}

impl<T: Real> StackedSystem<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            h: DMatrix::zeros(0, dim),
            r: DVector::zeros(0),
            noise: DMatrix::zeros(0, 0),
        }
    }

    pub fn rows(&self) -> usize {
        self.r.len()
    }

    /// Equivalent system with unit noise, `L⁻¹ r = L⁻¹ H ξ + L⁻¹ n` for `R = L Lᵀ`.
    pub fn whitened(&self) -> Result<Self> {
        let m = self.rows();
        if m == 0 {
            return Ok(self.clone());
        }
        let (mut h, mut r) = (self.h.clone(), self.r.clone());
        match is_scaled_identity(&self.noise) {
            Some(s) if s > T::zero() => {
                let w = T::one() / s.sqrt();
                h *= w;
                r *= w;
            }
            Some(_) => return Err(Error::SingularInnovation),
            None => {
                let l = self.noise.clone().cholesky().ok_or(Error::SingularInnovation)?.l();
                if !l.solve_lower_triangular_mut(&mut h) || !l.solve_lower_triangular_mut(&mut r) {
                    return Err(Error::SingularInnovation);
                }
            }
        }
        Ok(Self { h, r, noise: DMatrix::identity(m, m) })
    }

    /// Appends another system with independent noise.
    pub fn append(&mut self, other: &StackedSystem<T>) {
        let (m, k) = (self.rows(), other.rows());
        let dim = self.h.ncols();
        let mut h = DMatrix::zeros(m + k, dim);
        h.view_mut((0, 0), (m, dim)).copy_from(&self.h);
        h.view_mut((m, 0), (k, dim)).copy_from(&other.h);
        let mut r = DVector::zeros(m + k);
        r.rows_mut(0, m).copy_from(&self.r);
        r.rows_mut(m, k).copy_from(&other.r);
        let mut noise = DMatrix::zeros(m + k, m + k);
        noise.view_mut((0, 0), (m, m)).copy_from(&self.noise);
        noise.view_mut((m, m), (k, k)).copy_from(&other.noise);
        *self = Self { h, r, noise };
    }
}

/// Per-feature Jacobians before the landmark is projected out.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureJacobians<T: Real> {
    pub hx: DMatrix<T>,
    pub hf: DMatrix<T>,
    pub r: DVector<T>,
    /// Trailing rows that come from vanishing points.
    pub vp_rows: usize,
}

impl<T: Real> FeatureJacobians<T> {
    pub fn rows(&self) -> usize {
        self.r.len()
    }

    /// Diagonal noise, `var` for geometric rows and `vp_var` for VP rows.
    pub fn noise(&self, var: T, vp_var: T) -> DMatrix<T> {
        let m = self.rows();
        let first = m - self.vp_rows;
        DMatrix::from_diagonal(&DVector::from_fn(m, |i, _| if i < first { var } else { vp_var }))
    }
}

pub fn project_point<T: Real>(p_c: &Vector3<T>) -> Result<Vector2<T>> {
    if !(p_c.z > lit(MIN_DEPTH)) {
        return Err(Error::BehindCamera(to_f64(p_c.z)));
    }
    Ok(Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z))
}

/// `∂π/∂p_C` for the normalized pinhole projection.
pub fn projection_jacobian<T: Real>(p_c: &Vector3<T>) -> Matrix2x3<T> {
    let iz = T::one() / p_c.z;
    let iz2 = iz * iz;
    Matrix2x3::new(iz, T::zero(), -p_c.x * iz2, T::zero(), iz, -p_c.y * iz2)
}

fn clone_of<'a, T: Real>(state: &'a VioState<T>, frame_id: u64, track: u64) -> Result<(usize, &'a CameraClone<T>)> {
    let i = state.clone_index(frame_id).ok_or(Error::StaleTrack(track))?;
    Ok((i, &state.clones[i]))
}

/// Stacked point Jacobians over every observation of the track.
pub fn point_jacobians<T: Real>(
    state: &VioState<T>,
    track: &PointTrack<T>,
    model: ErrorModel,
    landmark: LandmarkError,
) -> Result<FeatureJacobians<T>> {
    let pf = track.position.ok_or(Error::TriangulationFailed("track has no position"))?;
    let m = track.observations.len();
    let dim = state.dim();
    let mut hx = DMatrix::zeros(2 * m, dim);
    let mut hf = DMatrix::zeros(2 * m, 3);
    let mut r = DVector::zeros(2 * m);
    let anchor = match track.observations.first() {
        Some(o) => clone_of(state, o.frame_id, track.id)?.0,
        None => return Err(Error::DegenerateFeature { rank: 0, needed: 3 }),
    };
    let spf = skew(&pf);

    for (k, obs) in track.observations.iter().enumerate() {
        let (i, c) = clone_of(state, obs.frame_id, track.id)?;
        let rt = c.rot.matrix().transpose();
        let p_c = rt * (pf - c.pos);
        let zhat = project_point(&p_c)?;
        let jp = projection_jacobian(&p_c);
        let jr = jp * rt;
        let dth = match model {
            ErrorModel::StandardAdditive => jr * skew(&(pf - c.pos)),
            ErrorModel::RightInvariant => jr * spf,
        };
        let off = VioState::<T>::clone_offset(i);
        let row = 2 * k;
        hx.view_mut((row, off), (2, 3)).copy_from(&dth);
        hx.view_mut((row, off + 3), (2, 3)).copy_from(&(-jr));
        if landmark == LandmarkError::Anchored {
            let aoff = VioState::<T>::clone_offset(anchor);
            let extra = -(jr * spf);
            let mut blk = hx.view_mut((row, aoff), (2, 3));
            blk += extra;
        }
        hf.view_mut((row, 0), (2, 3)).copy_from(&jr);
        r.rows_mut(row, 2).copy_from(&(obs.z - zhat));
    }
    Ok(FeatureJacobians { hx, hf, r, vp_rows: 0 })
}

/// Householder reflectors of a tall matrix, `Q = H_1 ⋯ H_k`.
struct Householder<T: Real> {
    vs: Vec<DVector<T>>,
}

impl<T: Real> Householder<T> {
    fn new(a: &DMatrix<T>) -> Self {
        let (m, k) = a.shape();
        let mut work = a.clone();
        let mut vs = Vec::with_capacity(k);
        let two: T = lit(2.0);
        for j in 0..k.min(m) {
            let x = work.view((j, j), (m - j, 1)).into_owned();
            let xn = x.norm();
            let mut v = DVector::zeros(m);
            if xn > T::zero() {
                let alpha = if x[0] >= T::zero() { -xn } else { xn };
                v.rows_mut(j, m - j).copy_from(&x.column(0));
                v[j] -= alpha;
                let vn = v.norm();
                if vn > T::zero() {
                    v *= two.sqrt() / vn;
                }
            }
            Self::reflect(&v, &mut work);
            vs.push(v);
        }
        Self { vs }
    }

    fn reflect(v: &DVector<T>, x: &mut DMatrix<T>) {
        if v.iter().all(|e| *e == T::zero()) {
            return;
        }
        let w = v.transpose() * &*x;
        x.ger(-T::one(), v, &w.transpose(), T::one());
    }

    /// `x ← Qᵀ x`.
    fn apply_qt(&self, x: &mut DMatrix<T>) {
        for v in &self.vs {
            Self::reflect(v, x);
        }
    }
}

fn numerical_rank<T: Real>(a: &DMatrix<T>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    if !(smax > T::zero()) {
        return 0;
    }
    let tol = smax * lit(RANK_TOL);
    sv.iter().filter(|s| **s > tol).count()
}

/// Orthonormal basis `A` of the left null space of `hf` (`Aᵀ hf = 0`).
pub fn left_null_space<T: Real>(hf: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (m, k) = hf.shape();
    let rank = numerical_rank(hf);
    if rank < k {
        return Err(Error::DegenerateFeature { rank, needed: k });
    }
    if m <= k {
        return Err(Error::DegenerateFeature { rank: m, needed: k + 1 });
    }
    let hh = Householder::new(hf);
    let mut qt = DMatrix::identity(m, m);
    hh.apply_qt(&mut qt);
    Ok(qt.rows(k, m - k).transpose())
}

fn is_scaled_identity<T: Real>(r: &DMatrix<T>) -> Option<T> {
    let s = r[(0, 0)];
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            let want = if i == j { s } else { T::zero() };
            if r[(i, j)] != want {
                return None;
            }
        }
    }
    Some(s)
}

/// Projects `r = H_x ξ + H_f ξ_f + n` onto the left null space of `H_f`.
pub fn nullspace_project<T: Real>(
    hx: &DMatrix<T>,
    hf: &DMatrix<T>,
    r: &DVector<T>,
    noise: &DMatrix<T>,
) -> Result<StackedSystem<T>> {
    let (m, k) = hf.shape();
    if hx.nrows() != m || r.len() != m || noise.nrows() != m || noise.ncols() != m {
        return Err(Error::Dimension { expected: m, got: hx.nrows().max(r.len()).max(noise.nrows()) });
    }
    if m <= k {
        return Err(Error::DegenerateFeature { rank: m, needed: k + 1 });
    }
    let rank = numerical_rank(hf);
    if rank < k {
        return Err(Error::DegenerateFeature { rank, needed: k });
    }
    let hh = Householder::new(hf);
    let mut h = hx.clone();
    hh.apply_qt(&mut h);
    let mut rr = DMatrix::from_column_slice(m, 1, r.as_slice());
    hh.apply_qt(&mut rr);
    let out_noise = match is_scaled_identity(noise) {
        Some(s) => DMatrix::identity(m - k, m - k) * s,
        None => {
            let mut q = noise.clone();
            hh.apply_qt(&mut q);
            let mut q = q.transpose();
            hh.apply_qt(&mut q);
            let q = q.view((k, k), (m - k, m - k)).into_owned();
            (&q + q.transpose()) * lit::<T>(0.5)
        }
    };
    Ok(StackedSystem {
        h: h.rows(k, m - k).into_owned(),
        r: DVector::from_fn(m - k, |i, _| rr[(k + i, 0)]),
        noise: out_noise,
    })
}

/// Signed endpoint distances to the image line `l`.
pub fn line_residual<T: Real>(l: &Vector3<T>, ps: &Vector3<T>, pe: &Vector3<T>) -> Result<Vector2<T>> {
    let s2 = l.x * l.x + l.y * l.y;
    if !(s2 > lit(1e-16)) {
        return Err(Error::DegenerateImageLine);
    }
    let s = s2.sqrt();
    Ok(Vector2::new(ps.dot(l) / s, pe.dot(l) / s))
}

/// `∂z_L/∂l`.
pub fn line_residual_jacobian<T: Real>(l: &Vector3<T>, ps: &Vector3<T>, pe: &Vector3<T>) -> Result<Matrix2x3<T>> {
    let z = line_residual(l, ps, pe)?;
    let s2 = l.x * l.x + l.y * l.y;
    let s = s2.sqrt();
    let row = |p: &Vector3<T>, zi: T| {
        [p.x / s - l.x * zi / s2, p.y / s - l.y * zi / s2, p.z / s]
    };
    let a = row(ps, z.x);
    let b = row(pe, z.y);
    Ok(Matrix2x3::new(a[0], a[1], a[2], b[0], b[1], b[2]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationJacobians<T: Real> {
    /// With respect to the clone `(ξ_θ, ξ_p)`.
    pub hx: SMatrix<T, 2, 6>,
    /// With respect to the line's 4-DoF orthonormal error.
    pub hl: SMatrix<T, 2, 4>,
    pub r: Vector2<T>,
}

struct LineLinearization<T: Real> {
    n: Vector3<T>,
    d: Vector3<T>,
    dn: SMatrix<T, 3, 4>,
    dd: SMatrix<T, 3, 4>,
    local: SMatrix<T, 4, 4>,
}

fn linearize_line<T: Real>(line: &PluckerLine<T>) -> Result<LineLinearization<T>> {
    let o = plucker_to_orthonormal(line)?;
    let unit = orthonormal_to_plucker(&o);
    let (dn, dd) = plucker_tangent(&o);
    let mut local = SMatrix::<T, 4, 4>::identity();
    local.fixed_view_mut::<3, 3>(0, 0).copy_from(o.u.matrix());
    Ok(LineLinearization { n: unit.n, d: unit.d, dn, dd, local })
}

fn to_mode<T: Real>(h: SMatrix<T, 2, 4>, lin: &LineLinearization<T>, mode: RetractMode) -> SMatrix<T, 2, 4> {
    match mode {
        RetractMode::Global => h,
        RetractMode::Local => h * lin.local,
    }
}

pub fn line_jacobians<T: Real>(
    clone: &CameraClone<T>,
    line: &PluckerLine<T>,
    ps: &Vector3<T>,
    pe: &Vector3<T>,
    model: ErrorModel,
    mode: RetractMode,
) -> Result<ObservationJacobians<T>> {
    let lin = linearize_line(line)?;
    let unit = PluckerLine { n: lin.n, d: lin.d };
    let lc = transform_line(&clone.pose(), &unit);
    if lc.n.norm() <= lit::<T>(1e-12) {
        return Err(Error::DegenerateProjection);
    }
    let l = lc.n;
    let z = line_residual(&l, ps, pe)?;
    let jl = line_residual_jacobian(&l, ps, pe)?;
    let rt = clone.rot.matrix().transpose();
    let jr = jl * rt;
    let sd = skew(&lin.d);
    let dth = match model {
        ErrorModel::StandardAdditive => skew(&(lin.n - clone.pos.cross(&lin.d))),
        ErrorModel::RightInvariant => skew(&lin.n) - skew(&clone.pos) * sd,
    };
    let mut hx = SMatrix::<T, 2, 6>::zeros();
    hx.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jr * dth));
    hx.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jr * sd));
    let hl = jr * (lin.dn - skew(&clone.pos) * lin.dd);
    Ok(ObservationJacobians { hx, hl: to_mode(hl, &lin, mode), r: -z })
}

pub const VP_INFINITY_TOL: f64 = 1e-6;

/// `p_v − (d_1, d_2)/d_3`.
pub fn vp_residual<T: Real>(pv: &Vector2<T>, d_c: &Vector3<T>) -> Result<Vector2<T>> {
    Ok(pv - vp_predict(d_c)?)
}

pub fn vp_predict<T: Real>(d_c: &Vector3<T>) -> Result<Vector2<T>> {
    if !(d_c.z.abs() > lit::<T>(VP_INFINITY_TOL) * d_c.norm()) {
        return Err(Error::VpAtInfinity);
    }
    Ok(Vector2::new(d_c.x / d_c.z, d_c.y / d_c.z))
}

pub fn vp_jacobians<T: Real>(
    clone: &CameraClone<T>,
    line: &PluckerLine<T>,
    pv: &Vector2<T>,
    mode: RetractMode,
) -> Result<ObservationJacobians<T>> {
    let lin = linearize_line(line)?;
    let rt = clone.rot.matrix().transpose();
    let d_c = rt * lin.d;
    let r = vp_residual(pv, &d_c)?;
    let j = projection_jacobian(&d_c) * rt;
    let mut hx = SMatrix::<T, 2, 6>::zeros();
    hx.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j * skew(&lin.d)));
    let hv = j * lin.dd;
    Ok(ObservationJacobians { hx, hl: to_mode(hv, &lin, mode), r })
}

/// Stacked line rows followed by usable VP rows.
pub fn line_feature_jacobians<T: Real>(
    state: &VioState<T>,
    track: &LineTrack<T>,
    model: ErrorModel,
    mode: RetractMode,
    use_vp: bool,
) -> Result<FeatureJacobians<T>> {
    let line = track.line.ok_or(Error::TriangulationFailed("track has no line"))?;
    let mut blocks = Vec::with_capacity(track.observations.len() + track.vp_observations.len());
    for obs in &track.observations {
        let (i, c) = clone_of(state, obs.frame_id, track.id)?;
        blocks.push((i, line_jacobians(c, &line, &obs.ps, &obs.pe, model, mode)?));
    }
    let line_rows = blocks.len();
    if use_vp {
        for obs in &track.vp_observations {
            let (i, c) = clone_of(state, obs.frame_id, track.id)?;
            match vp_jacobians(c, &line, &obs.pv, mode) {
                Ok(j) => blocks.push((i, j)),
                Err(Error::VpAtInfinity) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let m = 2 * blocks.len();
    let mut hx = DMatrix::zeros(m, state.dim());
    let mut hf = DMatrix::zeros(m, 4);
    let mut r = DVector::zeros(m);
    for (k, (i, j)) in blocks.iter().enumerate() {
        let off = VioState::<T>::clone_offset(*i);
        hx.view_mut((2 * k, off), (2, 6)).copy_from(&j.hx);
        hf.view_mut((2 * k, 0), (2, 4)).copy_from(&j.hl);
        r.rows_mut(2 * k, 2).copy_from(&j.r);
    }
    Ok(FeatureJacobians { hx, hf, r, vp_rows: 2 * (blocks.len() - line_rows) })
}

/// Removes the line error from stacked line and VP rows. `hx` rows must be
/// ordered as `[line rows; VP rows]`.
pub fn project_out_line<T: Real>(
    hx: &DMatrix<T>,
    hl: &DMatrix<T>,
    hv: &DMatrix<T>,
    r: &DVector<T>,
    noise: &DMatrix<T>,
) -> Result<StackedSystem<T>> {
    let (a, b) = (hl.nrows(), hv.nrows());
    let mut stacked = DMatrix::zeros(a + b, 4);
    stacked.view_mut((0, 0), (a, 4)).copy_from(hl);
    if b > 0 {
        stacked.view_mut((a, 0), (b, 4)).copy_from(hv);
    }
    nullspace_project(hx, &stacked, r, noise)
}

/// Unit-scale Plücker coordinates after a 4-DoF correction.
pub fn retract_line<T: Real>(line: &PluckerLine<T>, delta: &Vector4<T>, mode: RetractMode) -> Result<PluckerLine<T>> {
    let o = plucker_to_orthonormal(line)?;
    Ok(orthonormal_to_plucker(&crate::geometry::orthonormal_retract(&o, delta, mode)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Pose};
    use crate::state::{apply_correction, ImuState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    /// Clones spread on a short arc, all looking roughly toward +x.
    fn window(rng: &mut impl Rng, n: usize) -> VioState<f64> {
        let imu = ImuState::at_rest(so3_exp(&rv(rng, 0.1)), rv(rng, 0.5));
        let mut s = VioState::new(imu, Pose::identity(), 30);
        let look = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        for i in 0..n {
            let rot = so3_exp(&rv(rng, 0.1)) * crate::geometry::Rotation::from_matrix_unchecked(look);
            let pos = Vector3::new(0.0, 0.3 * i as f64, 0.0) + rv(rng, 0.1);
            s.clones.push(CameraClone { rot, pos, frame_id: 10 + i as u64 });
        }
        s
    }

    fn observe_point(s: &VioState<f64>, pf: &Vector3<f64>, id: u64) -> PointTrack<f64> {
        let mut t = PointTrack::new(id);
        for c in &s.clones {
            let z = project_point(&(c.rot.inverse() * (pf - c.pos))).unwrap();
            t.observations.push(PointObservation { frame_id: c.frame_id, z });
        }
        t.position = Some(*pf);
        t
    }

    fn random_world_point(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(rng.random_range(4.0..8.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
    }

    fn random_world_line(rng: &mut impl Rng) -> PluckerLine<f64> {
        let a = random_world_point(rng);
        let b = random_world_point(rng);
        PluckerLine::from_points(&a, &b).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn project_point_examples() {
        assert_eq!(project_point(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(project_point(&Vector3::new(1.0, 2.0, 2.0)).unwrap(), Vector2::new(0.5, 1.0));
        assert!(matches!(project_point(&Vector3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera(_))));
    }

    /// Prediction of every observation after perturbing the state and landmark.
    fn point_predictions(
        s: &VioState<f64>,
        t: &PointTrack<f64>,
        xi: &DVector<f64>,
        dpf: &Vector3<f64>,
        model: ErrorModel,
        landmark: LandmarkError,
    ) -> DVector<f64> {
        let x = apply_correction(s, xi, model).unwrap();
        let pf = t.position.unwrap();
        let pf = match landmark {
            LandmarkError::Additive => pf + dpf,
            LandmarkError::Anchored => {
                let off = VioState::<f64>::clone_offset(s.clone_index(t.observations[0].frame_id).unwrap());
                let th = Vector3::new(xi[off], xi[off + 1], xi[off + 2]);
                so3_exp(&th) * pf + dpf
            }
        };
        let mut out = DVector::zeros(2 * t.observations.len());
        for (k, o) in t.observations.iter().enumerate() {
            let c = &x.clones[x.clone_index(o.frame_id).unwrap()];
            let z = project_point(&(c.rot.inverse() * (pf - c.pos))).unwrap();
            out.rows_mut(2 * k, 2).copy_from(&z);
        }
        out
    }

    #[test]
    fn point_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for model in [ErrorModel::StandardAdditive, ErrorModel::RightInvariant] {
            for landmark in [LandmarkError::Additive, LandmarkError::Anchored] {
                for _ in 0..25 {
                    let s = window(&mut rng, 4);
                    let t = observe_point(&s, &random_world_point(&mut rng), 1);
                    let j = point_jacobians(&s, &t, model, landmark).unwrap();
                    assert!(j.r.amax() < 1e-12);
                    let dim = s.dim();
                    let mut fx = DMatrix::zeros(j.rows(), dim);
                    for c in 0..dim {
                        let mut xi = DVector::zeros(dim);
                        xi[c] = h;
                        let p = point_predictions(&s, &t, &xi, &Vector3::zeros(), model, landmark);
                        xi[c] = -h;
                        let q = point_predictions(&s, &t, &xi, &Vector3::zeros(), model, landmark);
                        fx.set_column(c, &((p - q) / (2.0 * h)));
                    }
                    let mut ff = DMatrix::zeros(j.rows(), 3);
                    for c in 0..3 {
                        let mut d = Vector3::zeros();
                        d[c] = h;
                        let zero = DVector::zeros(dim);
                        let p = point_predictions(&s, &t, &zero, &d, model, landmark);
                        let q = point_predictions(&s, &t, &zero, &(-d), model, landmark);
                        ff.set_column(c, &((p - q) / (2.0 * h)));
                    }
                    assert!(rel(&j.hx, &fx) < 1e-4, "{model:?} {landmark:?} {}", rel(&j.hx, &fx));
                    assert!(rel(&j.hf, &ff) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn landmark_jacobian_is_model_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = window(&mut rng, 5);
        let t = observe_point(&s, &random_world_point(&mut rng), 1);
        let a = point_jacobians(&s, &t, ErrorModel::RightInvariant, LandmarkError::Additive).unwrap();
        let b = point_jacobians(&s, &t, ErrorModel::RightInvariant, LandmarkError::Anchored).unwrap();
        let c = point_jacobians(&s, &t, ErrorModel::StandardAdditive, LandmarkError::Additive).unwrap();
        assert_eq!(a.hf, b.hf);
        assert_eq!(a.hf, c.hf);
    }

    #[test]
    fn stale_and_untriangulated_tracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = window(&mut rng, 3);
        let mut t = observe_point(&s, &random_world_point(&mut rng), 7);
        t.observations[1].frame_id = 999;
        assert_eq!(
            point_jacobians(&s, &t, ErrorModel::RightInvariant, LandmarkError::Additive),
            Err(Error::StaleTrack(7))
        );
        t.position = None;
        assert!(point_jacobians(&s, &t, ErrorModel::RightInvariant, LandmarkError::Additive).is_err());
    }

    #[test]
    fn null_space_annihilates_and_counts_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for m in 2..=20 {
            let hf = DMatrix::from_fn(2 * m, 3, |_, _| rng.random_range(-1.0..1.0));
            let hx = DMatrix::from_fn(2 * m, 27, |_, _| rng.random_range(-1.0..1.0));
            let r = DVector::from_fn(2 * m, |_, _| rng.random_range(-1.0..1.0));
            let noise = DMatrix::identity(2 * m, 2 * m) * 1e-4;
            let out = nullspace_project(&hx, &hf, &r, &noise).unwrap();
            assert_eq!(out.rows(), 2 * m - 3);
            let a = left_null_space(&hf).unwrap();
            assert!((a.transpose() * &hf).amax() < 1e-10);
            assert!((a.transpose() * &a - DMatrix::identity(2 * m - 3, 2 * m - 3)).amax() < 1e-12);
            assert!((&a.transpose() * &hx - &out.h).amax() < 1e-10);
            assert!((&a.transpose() * &r - &out.r).amax() < 1e-10);
            assert!((&out.noise - DMatrix::identity(2 * m - 3, 2 * m - 3) * 1e-4).amax() < 1e-18);
        }
    }

    #[test]
    fn general_noise_is_projected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hf = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let hx = DMatrix::from_fn(10, 21, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let noise = DMatrix::from_diagonal(&DVector::from_fn(10, |i, _| if i < 6 { 1.0 } else { 4.0 }));
        let out = nullspace_project(&hx, &hf, &r, &noise).unwrap();
        let a = left_null_space(&hf).unwrap();
        assert!((a.transpose() * &noise * &a - &out.noise).amax() < 1e-12);
    }

    #[test]
    fn whitening_preserves_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = DMatrix::from_fn(6, 9, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let noise = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let sys = StackedSystem { h, r, noise };
        let w = sys.whitened().unwrap();
        assert_eq!(w.noise, DMatrix::identity(6, 6));
        let inv = sys.noise.clone().try_inverse().unwrap();
        assert!((w.h.transpose() * &w.h - sys.h.transpose() * &inv * &sys.h).amax() < 1e-9);
        assert!((w.h.transpose() * &w.r - sys.h.transpose() * &inv * &sys.r).amax() < 1e-9);
        let scaled = StackedSystem { noise: DMatrix::identity(6, 6) * 4.0, ..sys.clone() };
        assert_eq!(scaled.whitened().unwrap().r, &sys.r * 0.5);
        assert_eq!(StackedSystem::<f64>::empty(9).whitened().unwrap().rows(), 0);
    }

    #[test]
    fn rank_deficient_feature_rejected() {
        let mut hf = DMatrix::<f64>::zeros(8, 3);
        for i in 0..8 {
            hf[(i, 0)] = i as f64 + 1.0;
            hf[(i, 1)] = 2.0 * (i as f64 + 1.0);
            hf[(i, 2)] = 1.0;
        }
        let hx = DMatrix::zeros(8, 15);
        let out = nullspace_project(&hx, &hf, &DVector::zeros(8), &DMatrix::identity(8, 8));
        assert_eq!(out, Err(Error::DegenerateFeature { rank: 2, needed: 3 }));
    }

    fn projector_product(hx: &DMatrix<f64>, hf: &DMatrix<f64>) -> DMatrix<f64> {
        let a = left_null_space(hf).unwrap();
        &a * (a.transpose() * hx)
    }

    #[test]
    fn landmark_parameterizations_agree_after_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 2..=20 {
            let s = window(&mut rng, n);
            let t = observe_point(&s, &random_world_point(&mut rng), 1);
            for model in [ErrorModel::RightInvariant, ErrorModel::StandardAdditive] {
                let add = point_jacobians(&s, &t, model, LandmarkError::Additive).unwrap();
                let inv = point_jacobians(&s, &t, model, LandmarkError::Anchored).unwrap();
                let a = left_null_space(&add.hf).unwrap();
                let diff = (a.transpose() * &add.hx - a.transpose() * &inv.hx).amax();
                assert!(diff < 1e-8, "n={n} diff={diff}");
            }
        }
    }

    #[test]
    fn line_residual_examples() {
        let z = line_residual(&Vector3::new(0.0, 1.0, -1.0), &Vector3::new(0.0, 2.0, 1.0), &Vector3::new(5.0, 1.0, 1.0)).unwrap();
        assert_eq!(z, Vector2::new(1.0, 0.0));
        let z: Vector2<f64> = line_residual(&Vector3::new(3.0, 4.0, 0.0), &Vector3::new(1.0, 1.0, 1.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((z.x - 1.4).abs() < 1e-15);
        assert_eq!(
            line_residual(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 1.0, 1.0), &Vector3::new(1.0, 1.0, 1.0)),
            Err(Error::DegenerateImageLine)
        );
    }

    fn endpoints(c: &CameraClone<f64>, line: &PluckerLine<f64>) -> (Vector3<f64>, Vector3<f64>) {
        // Two points on the line, projected into the camera.
        let p0 = line.closest_point();
        let u = line.unit_direction();
        let pr = |x: Vector3<f64>| {
            let pc = c.rot.inverse() * (x - c.pos);
            Vector3::new(pc.x / pc.z, pc.y / pc.z, 1.0)
        };
        (pr(p0 - u * 0.5), pr(p0 + u * 0.5))
    }

    fn line_clone_fd(
        c: &CameraClone<f64>,
        line: &PluckerLine<f64>,
        f: &dyn Fn(&CameraClone<f64>, &PluckerLine<f64>) -> Vector2<f64>,
        model: ErrorModel,
        mode: RetractMode,
    ) -> (SMatrix<f64, 2, 6>, SMatrix<f64, 2, 4>) {
        let h = 1e-6;
        let s = {
            let mut s = VioState::new(ImuState::at_rest(so3_exp(&Vector3::zeros()), Vector3::zeros()), Pose::identity(), 2);
            s.clones.push(*c);
            s
        };
        let mut hx = SMatrix::<f64, 2, 6>::zeros();
        for k in 0..6 {
            let mut xi = DVector::zeros(21);
            xi[15 + k] = h;
            let a = apply_correction(&s, &xi, model).unwrap().clones[0];
            xi[15 + k] = -h;
            let b = apply_correction(&s, &xi, model).unwrap().clones[0];
            hx.set_column(k, &((f(&a, line) - f(&b, line)) / (2.0 * h)));
        }
        let mut hl = SMatrix::<f64, 2, 4>::zeros();
        for k in 0..4 {
            let mut d = Vector4::zeros();
            d[k] = h;
            let a = retract_line(line, &d, mode).unwrap();
            let b = retract_line(line, &(-d), mode).unwrap();
            hl.set_column(k, &((f(c, &a) - f(c, &b)) / (2.0 * h)));
        }
        (hx, hl)
    }

    fn srel<const C: usize>(a: &SMatrix<f64, 2, C>, b: &SMatrix<f64, 2, C>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn line_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for model in [ErrorModel::StandardAdditive, ErrorModel::RightInvariant] {
            for mode in [RetractMode::Global, RetractMode::Local] {
                for _ in 0..100 {
                    let s = window(&mut rng, 1);
                    let c = s.clones[0];
                    let line = random_world_line(&mut rng);
                    let (ps, pe) = endpoints(&c, &line);
                    let j = line_jacobians(&c, &line, &ps, &pe, model, mode).unwrap();
                    assert!(j.r.amax() < 1e-10);
                    let pred = |c: &CameraClone<f64>, l: &PluckerLine<f64>| {
                        let lc = transform_line(&c.pose(), l);
                        -line_residual(&lc.n, &ps, &pe).unwrap()
                    };
                    // The residual is −z_L, so ∂h/∂ξ = −∂r/∂ξ.
                    let (fx, fl) = line_clone_fd(&c, &line, &pred, model, mode);
                    assert!(srel(&j.hx, &(-fx)) < 1e-4, "{model:?} {mode:?} hx {}", srel(&j.hx, &(-fx)));
                    assert!(srel(&j.hl, &(-fl)) < 1e-4, "{model:?} {mode:?} hl {}", srel(&j.hl, &(-fl)));
                }
            }
        }
    }

    #[test]
    fn invariant_line_jacobian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = window(&mut rng, 1);
        let c = s.clones[0];
        let line = random_world_line(&mut rng).normalized();
        let (ps, pe) = endpoints(&c, &line);
        let j = line_jacobians(&c, &line, &ps, &pe, ErrorModel::RightInvariant, RetractMode::Global).unwrap();
        let lc = transform_line(&c.pose(), &line);
        let jl = line_residual_jacobian(&lc.n, &ps, &pe).unwrap();
        let rt = c.rot.matrix().transpose();
        let (n, d, p) = (line.n, line.d, c.pos);
        let th = jl * rt * (skew(&n) - skew(&p) * skew(&d));
        let tr = jl * rt * skew(&d);
        let hphi = n * (d.norm() / n.norm()) + skew(&p) * d * (n.norm() / d.norm());
        let mut inner = SMatrix::<f64, 3, 4>::zeros();
        inner.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(&n) - skew(&p) * skew(&d)));
        inner.set_column(3, &hphi);
        let hl = -(jl * rt * inner);
        assert!((j.hx.fixed_view::<2, 3>(0, 0) - th).amax() < 1e-12);
        assert!((j.hx.fixed_view::<2, 3>(0, 3) - tr).amax() < 1e-12);
        assert!((j.hl - hl).amax() < 1e-12);
    }

    #[test]
    fn vp_residual_examples() {
        let r = vp_residual(&Vector2::new(0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(r, Vector2::zeros());
        let r = vp_residual(&Vector2::new(1.0, 2.0), &Vector3::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!(r, Vector2::zeros());
        assert_eq!(vp_residual(&Vector2::new(0.0, 0.0), &Vector3::new(1.0, 1.0, 0.0)), Err(Error::VpAtInfinity));
    }

    #[test]
    fn vp_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for model in [ErrorModel::StandardAdditive, ErrorModel::RightInvariant] {
            for mode in [RetractMode::Global, RetractMode::Local] {
                let mut done = 0;
                while done < 100 {
                    let s = window(&mut rng, 1);
                    let c = s.clones[0];
                    let line = random_world_line(&mut rng);
                    let d_c = c.rot.inverse() * line.d;
                    if d_c.z.abs() < 0.2 * d_c.norm() {
                        continue;
                    }
                    let pv = vp_predict(&d_c).unwrap();
                    let j = vp_jacobians(&c, &line, &pv, mode).unwrap();
                    assert!(j.r.amax() < 1e-10);
                    assert_eq!(j.hx.fixed_view::<2, 3>(0, 3).amax(), 0.0);
                    let pred = |c: &CameraClone<f64>, l: &PluckerLine<f64>| vp_predict(&(c.rot.inverse() * l.d)).unwrap();
                    let (fx, fl) = line_clone_fd(&c, &line, &pred, model, mode);
                    assert!(srel(&j.hx, &fx) < 1e-4);
                    assert!(srel(&j.hl, &fl) < 1e-4);
                    done += 1;
                }
            }
        }
    }

    fn observe_line(s: &VioState<f64>, line: &PluckerLine<f64>, vp: bool) -> LineTrack<f64> {
        let mut t = LineTrack::new(3);
        for c in &s.clones {
            let (ps, pe) = endpoints(c, line);
            t.observations.push(LineObservation { frame_id: c.frame_id, ps, pe });
            if vp {
                let pv = vp_predict(&(c.rot.inverse() * line.d)).unwrap();
                t.vp_observations.push(VpObservation { frame_id: c.frame_id, pv });
            }
        }
        t.line = Some(*line);
        t
    }

    fn oblique_line(rng: &mut impl Rng) -> PluckerLine<f64> {
        // Direction with a forward component so the VP is finite.
        let a = random_world_point(rng);
        let b = a + Vector3::new(2.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        PluckerLine::from_points(&a, &b).unwrap()
    }

    #[test]
    fn line_error_conventions_agree_after_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for n in 3..=20 {
            let s = window(&mut rng, n);
            let line = oblique_line(&mut rng);
            for vp in [false, true] {
                let t = observe_line(&s, &line, vp);
                let g = line_feature_jacobians(&s, &t, ErrorModel::RightInvariant, RetractMode::Global, vp).unwrap();
                let l = line_feature_jacobians(&s, &t, ErrorModel::RightInvariant, RetractMode::Local, vp).unwrap();
                let diff = (projector_product(&g.hx, &g.hf) - projector_product(&l.hx, &l.hf)).amax();
                assert!(diff < 1e-8, "n={n} diff={diff}");
                assert!(g.r.amax() < 1e-10);
            }
        }
    }

    #[test]
    fn structural_lines_have_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = window(&mut rng, 3);
            let t = observe_line(&s, &oblique_line(&mut rng), true);
            let j = line_feature_jacobians(&s, &t, ErrorModel::RightInvariant, RetractMode::Global, true).unwrap();
            assert_eq!(numerical_rank(&j.hf), 4);
            let m = j.rows();
            let split = m - j.vp_rows;
            let out = project_out_line(
                &j.hx,
                &j.hf.rows(0, split).into_owned(),
                &j.hf.rows(split, j.vp_rows).into_owned(),
                &j.r,
                &j.noise(1e-4, 4e-4),
            )
            .unwrap();
            assert_eq!(out.rows(), m - 4);
            let a = left_null_space(&j.hf).unwrap();
            assert!((a.transpose() * &j.hf).amax() < 1e-10);
        }
    }

    #[test]
    fn single_view_line_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = window(&mut rng, 1);
        let t = observe_line(&s, &oblique_line(&mut rng), false);
        let j = line_feature_jacobians(&s, &t, ErrorModel::RightInvariant, RetractMode::Global, false).unwrap();
        let empty = DMatrix::zeros(0, 4);
        let out = project_out_line(&j.hx, &j.hf, &empty, &j.r, &j.noise(1.0, 1.0));
        assert!(matches!(out, Err(Error::DegenerateFeature { .. })));
    }

    #[test]
    fn stacked_system_append() {
        let mut a = StackedSystem::<f64>::empty(15);
        let b = StackedSystem {
            h: DMatrix::from_element(2, 15, 1.0),
            r: DVector::from_element(2, 2.0),
            noise: DMatrix::identity(2, 2) * 3.0,
        };
        a.append(&b);
        a.append(&b);
        assert_eq!(a.rows(), 4);
        assert_eq!(a.noise[(3, 3)], 3.0);
        assert_eq!(a.noise[(0, 3)], 0.0);
    }
}
