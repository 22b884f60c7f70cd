//! SO(3) utilities, rigid poses and 3D line representations.
//!
//! Lines use the moment convention: for a point `x` on the line and direction
//! `d`, the Plücker moment is `n = x × d`. The orthonormal form `(U, φ)` stores
//! `U = [n/|n|, d/|d|, (n×d)/|n×d|]` and `φ = atan2(|d|, |n|)`.

use nalgebra::{Matrix2, Matrix3, Rotation3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Rotation matrix in SO(3).
pub type Rotation<T> = Rotation3<T>;

/// Below this angle the closed forms switch to their Taylor expansions.
#[inline]
pub fn small_angle<T: Real>() -> T {
    let floor = T::EPS.sqrt() * lit(0.5);
    if floor > lit(1e-8) {
        floor
    } else {
        lit(1e-8)
    }
}

#[inline]
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
#[inline]
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half: T = lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Rodrigues exponential.
pub fn so3_exp<T: Real>(phi: &Vector3<T>) -> Rotation<T> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let m = if theta < small_angle() {
        Matrix3::identity() + k + k2 * lit::<T>(0.5)
    } else {
        let half = theta * lit(0.5);
        let s = half.sin();
        let a = theta.sin() / theta;
        // (1 - cos θ) / θ² without cancellation
        let b = s * s * lit(2.0) / (theta * theta);
        Matrix3::identity() + k * a + k2 * b
    };
    Rotation3::from_matrix_unchecked(m)
}

/// Principal logarithm, `|result| ∈ [0, π]`.
///
/// At exactly π the axis sign is fixed so that its first nonzero component is
/// positive.
pub fn so3_log<T: Real>(r: &Rotation<T>) -> Vector3<T> {
    let m = r.matrix();
    let w = vee(m);
    let s = w.norm();
    let c = (m.trace() - T::one()) * lit(0.5);
    let theta = s.atan2(c);

    if theta < small_angle() {
        // θ/sin θ ≈ 1 + θ²/6
        return w * (T::one() + theta * theta / lit(6.0));
    }
    if c > lit(-0.9) {
        return w * (theta / s);
    }

    // Near π: recover the axis from the symmetric part, R + Rᵀ = 2cI + 2(1-c)aaᵀ.
    let sym = (m + m.transpose()) * lit::<T>(0.5);
    let aat = (sym - Matrix3::identity() * c) / (T::one() - c);
    let mut best = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<T> = aat.column(best).into_owned();
    axis /= axis.norm();

    let along = axis.dot(&w);
    if along.abs() > lit(1e-12) {
        if along < T::zero() {
            axis = -axis;
        }
    } else {
        let first = axis
            .iter()
            .copied()
            .find(|a| a.abs() > lit(1e-12))
            .unwrap_or(T::one());
        if first < T::zero() {
            axis = -axis;
        }
    }
    axis * theta
}

/// Left Jacobian of SO(3): `exp(φ + δ) ≈ exp(J_l(φ) δ) exp(φ)`.
pub fn left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    if theta < small_angle() {
        return Matrix3::identity() + k * lit::<T>(0.5) + k2 * lit::<T>(1.0 / 6.0);
    }
    let half = theta * lit(0.5);
    let s = half.sin();
    let t2 = theta * theta;
    let a = s * s * lit(2.0) / t2;
    let b = (theta - theta.sin()) / (t2 * theta);
    Matrix3::identity() + k * a + k2 * b
}

pub fn left_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let half: T = lit(0.5);
    if theta < small_angle() {
        return Matrix3::identity() - k * half + k2 * lit::<T>(1.0 / 12.0);
    }
    let t2 = theta * theta;
    let b = T::one() / t2 - (T::one() + theta.cos()) / (lit::<T>(2.0) * theta * theta.sin());
    Matrix3::identity() - k * half + k2 * b
}

/// Rigid transform, used for camera poses (camera → world) and extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rot: Rotation<T>,
    pub trans: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rot: Rotation<T>, trans: Vector3<T>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose::new(self.rot * other.rot, self.trans + self.rot * other.trans)
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rot.inverse();
        Pose::new(rt, -(rt * self.trans))
    }

    pub fn transform_point(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rot * x + self.trans
    }

    pub fn inverse_transform_point(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rot.inverse() * (x - self.trans)
    }
}

/// Plücker line `(n, d)` with `nᵀd = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerLine<T: Real> {
    pub n: Vector3<T>,
    pub d: Vector3<T>,
}

impl<T: Real> PluckerLine<T> {
    pub fn new(n: Vector3<T>, d: Vector3<T>) -> Result<Self> {
        let line = Self { n, d };
        line.validate()?;
        Ok(line)
    }

    /// Line through two distinct points.
    pub fn from_points(a: &Vector3<T>, b: &Vector3<T>) -> Result<Self> {
        let d = b - a;
        Self::new(a.cross(&d), d)
    }

    pub fn validate(&self) -> Result<()> {
        let dn = self.d.norm();
        if dn <= T::zero() {
            return Err(Error::DegenerateLine("zero direction"));
        }
        let tol = lit::<T>(1e-9) * (self.n.norm() + dn);
        if self.n.dot(&self.d).abs() > tol {
            return Err(Error::DegenerateLine("moment not orthogonal to direction"));
        }
        Ok(())
    }

    /// Rescaled so that `|n|² + |d|² = 1`.
    pub fn normalized(&self) -> Self {
        let s = (self.n.norm_squared() + self.d.norm_squared()).sqrt();
        Self {
            n: self.n / s,
            d: self.d / s,
        }
    }

    /// Point on the line closest to the origin.
    pub fn closest_point(&self) -> Vector3<T> {
        self.d.cross(&self.n) / self.d.norm_squared()
    }

    /// Incidence residual of a point, `|x × d - n| / |d|`.
    pub fn point_distance(&self, x: &Vector3<T>) -> T {
        (x.cross(&self.d) - self.n).norm() / self.d.norm()
    }

    pub fn unit_direction(&self) -> Vector3<T> {
        self.d / self.d.norm()
    }
}

/// Minimal line parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthonormalLine<T: Real> {
    pub u: Rotation<T>,
    pub phi: T,
}

impl<T: Real> OrthonormalLine<T> {
    pub fn w(&self) -> Matrix2<T> {
        let (s, c) = self.phi.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// `(log U, φ)`.
    pub fn minimal(&self) -> (Vector3<T>, T) {
        (so3_log(&self.u), self.phi)
    }
}

/// Line error convention for the orthonormal representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetractMode {
    /// `U ← exp(δψ) U`, `W ← exp(δφ) W`.
    Global,
    /// `U ← U exp(δψ)`, `W ← W exp(δφ)`.
    Local,
}

pub fn plucker_to_orthonormal<T: Real>(line: &PluckerLine<T>) -> Result<OrthonormalLine<T>> {
    let nn = line.n.norm();
    let dn = line.d.norm();
    let c = line.n.cross(&line.d);
    let cn = c.norm();
    let tiny = T::EPS * lit(100.0);
    if nn <= tiny || dn <= tiny || cn <= tiny * (nn * dn).max(T::EPS) {
        return Err(Error::DegenerateLine("cannot build orthonormal frame"));
    }
    let u1 = line.n / nn;
    let u2 = line.d / dn;
    // Re-orthogonalize u2 against u1 so U is exactly in SO(3).
    let u2 = (u2 - u1 * u1.dot(&u2)).normalize();
    let u3 = u1.cross(&u2);
    let u = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[u1, u2, u3]));
    Ok(OrthonormalLine {
        u,
        phi: dn.atan2(nn),
    })
}

/// Inverse map with unit overall scale, `|n|² + |d|² = 1`.
pub fn orthonormal_to_plucker<T: Real>(o: &OrthonormalLine<T>) -> PluckerLine<T> {
    let (s, c) = o.phi.sin_cos();
    let m = o.u.matrix();
    PluckerLine {
        n: m.column(0) * c,
        d: m.column(1) * s,
    }
}

pub fn orthonormal_retract<T: Real>(
    o: &OrthonormalLine<T>,
    delta: &nalgebra::Vector4<T>,
    mode: RetractMode,
) -> OrthonormalLine<T> {
    let dpsi = Vector3::new(delta[0], delta[1], delta[2]);
    let du = so3_exp(&dpsi);
    let u = match mode {
        RetractMode::Global => du * o.u,
        RetractMode::Local => o.u * du,
    };
    OrthonormalLine {
        u,
        phi: o.phi + delta[3],
    }
}

/// Derivatives of the unit-scale Plücker coordinates with respect to a
/// global orthonormal perturbation `(δψ, δφ)`; returns `(∂n/∂o, ∂d/∂o)`.
pub fn plucker_tangent<T: Real>(o: &OrthonormalLine<T>) -> (SMatrix<T, 3, 4>, SMatrix<T, 3, 4>) {
    let line = orthonormal_to_plucker(o);
    let (s, c) = o.phi.sin_cos();
    let m = o.u.matrix();
    let u1: Vector3<T> = m.column(0).into_owned();
    let u2: Vector3<T> = m.column(1).into_owned();
    let mut dn = SMatrix::<T, 3, 4>::zeros();
    let mut dd = SMatrix::<T, 3, 4>::zeros();
    dn.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&line.n)));
    dd.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&line.d)));
    dn.set_column(3, &(u1 * (-s)));
    dd.set_column(3, &(u2 * c));
    (dn, dd)
}

/// Expresses a world line in the frame of `pose` (camera → world).
pub fn transform_line<T: Real>(pose: &Pose<T>, line_world: &PluckerLine<T>) -> PluckerLine<T> {
    let rt = pose.rot.inverse();
    PluckerLine {
        n: rt * (line_world.n - pose.trans.cross(&line_world.d)),
        d: rt * line_world.d,
    }
}

/// Image line on the normalized plane; `l = n_C` (unnormalized).
pub fn project_line<T: Real>(line_camera: &PluckerLine<T>) -> Result<Vector3<T>> {
    let scale = line_camera.n.norm() + line_camera.d.norm();
    if line_camera.n.norm() <= lit::<T>(1e-12) * scale.max(T::one()) {
        return Err(Error::DegenerateProjection);
    }
    Ok(line_camera.n)
}
