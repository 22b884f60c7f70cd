//! Sliding-window state, error parameterizations and covariance bookkeeping.
//!
//! Error vector layout: `[θ v p b_g b_a | (θ p) per clone]`, dimension 15 + 6n.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{left_jacobian, left_jacobian_inv, skew, so3_exp, so3_log, Pose, Rotation};
use crate::scalar::{lit, Real};

pub const IMU_DIM: usize = 15;
pub const CLONE_DIM: usize = 6;
pub const THETA: usize = 0;
pub const VEL: usize = 3;
pub const POS: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

/// Default number of clones kept in the window.
pub const DEFAULT_WINDOW: usize = 20;

pub type CovarianceMatrix<T> = DMatrix<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ErrorModel {
    /// `R = exp(ξ_θ) R̂`, every other block additive.
    StandardAdditive,
    /// `R = exp(ξ_θ) R̂`, `v = exp(ξ_θ) v̂ + J_l(ξ_θ) ξ_v`, same for positions.
    RightInvariant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuState<T: Real> {
    pub rot: Rotation<T>,
    pub vel: Vector3<T>,
    pub pos: Vector3<T>,
    pub bg: Vector3<T>,
    pub ba: Vector3<T>,
}

impl<T: Real> ImuState<T> {
    pub fn at_rest(rot: Rotation<T>, pos: Vector3<T>) -> Self {
        Self {
            rot,
            vel: Vector3::zeros(),
            pos,
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.rot, self.pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraClone<T: Real> {
    pub rot: Rotation<T>,
    pub pos: Vector3<T>,
    pub frame_id: u64,
}

impl<T: Real> CameraClone<T> {
    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.rot, self.pos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VioState<T: Real> {
    pub imu: ImuState<T>,
    pub clones: Vec<CameraClone<T>>,
    /// Camera pose expressed in the IMU frame.
    pub extrinsics: Pose<T>,
    pub window_size: usize,
}

impl<T: Real> VioState<T> {
    pub fn new(imu: ImuState<T>, extrinsics: Pose<T>, window_size: usize) -> Self {
        Self {
            imu,
            clones: Vec::with_capacity(window_size),
            extrinsics,
            window_size,
        }
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + CLONE_DIM * self.clones.len()
    }

    pub fn clone_index(&self, frame_id: u64) -> Option<usize> {
        self.clones.binary_search_by_key(&frame_id, |c| c.frame_id).ok()
    }

    /// Column offset of clone `i` in the error vector.
    pub fn clone_offset(i: usize) -> usize {
        IMU_DIM + CLONE_DIM * i
    }

    /// Camera pose implied by the current IMU pose.
    pub fn camera_pose(&self) -> Pose<T> {
        self.imu.pose().compose(&self.extrinsics)
    }
}

/// Forces exact symmetry, `P ← (P + Pᵀ)/2`.
pub fn symmetrize<T: Real>(cov: &mut CovarianceMatrix<T>) {
    let n = cov.nrows();
    let half: T = lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (cov[(i, j)] + cov[(j, i)]) * half;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
}

/// 6 × 15 Jacobian of the new clone error with respect to the IMU error.
pub fn clone_jacobian<T: Real>(state: &VioState<T>, model: ErrorModel) -> nalgebra::SMatrix<T, 6, 15> {
    let mut j = nalgebra::SMatrix::<T, 6, 15>::zeros();
    j.fixed_view_mut::<3, 3>(0, THETA).fill_with_identity();
    j.fixed_view_mut::<3, 3>(3, POS).fill_with_identity();
    if model == ErrorModel::StandardAdditive {
        let lever = state.imu.rot * state.extrinsics.trans;
        j.fixed_view_mut::<3, 3>(3, THETA).copy_from(&(-skew(&lever)));
    }
    j
}

/// Appends the current camera pose to the window and augments the covariance.
pub fn clone_camera<T: Real>(
    state: &mut VioState<T>,
    cov: &mut CovarianceMatrix<T>,
    model: ErrorModel,
    frame_id: u64,
) -> Result<()> {
    check_dim(state.dim(), cov.nrows())?;
    if state.clones.len() >= state.window_size {
        return Err(Error::WindowOverflow(state.clones.len()));
    }
    if let Some(last) = state.clones.last() {
        if frame_id <= last.frame_id {
            return Err(Error::TimeOrder(frame_id as f64));
        }
    }

    let jac = clone_jacobian(state, model);
    let n = cov.nrows();
    // J only touches the IMU block, so J P = J P[0..15, :].
    let jp: DMatrix<T> = {
        let imu_rows = cov.rows(0, IMU_DIM);
        let mut out = DMatrix::zeros(CLONE_DIM, n);
        for r in 0..CLONE_DIM {
            for k in 0..IMU_DIM {
                let a = jac[(r, k)];
                if a != T::zero() {
                    for c in 0..n {
                        out[(r, c)] += a * imu_rows[(k, c)];
                    }
                }
            }
        }
        out
    };
    let mut jpj = DMatrix::zeros(CLONE_DIM, CLONE_DIM);
    for r in 0..CLONE_DIM {
        for c in 0..CLONE_DIM {
            let mut acc = T::zero();
            for k in 0..IMU_DIM {
                acc += jp[(r, k)] * jac[(c, k)];
            }
            jpj[(r, c)] = acc;
        }
    }

    let mut grown = DMatrix::zeros(n + CLONE_DIM, n + CLONE_DIM);
    grown.view_mut((0, 0), (n, n)).copy_from(cov);
    grown.view_mut((n, 0), (CLONE_DIM, n)).copy_from(&jp);
    grown.view_mut((0, n), (n, CLONE_DIM)).copy_from(&jp.transpose());
    grown.view_mut((n, n), (CLONE_DIM, CLONE_DIM)).copy_from(&jpj);
    symmetrize(&mut grown);
    *cov = grown;

    let cam = state.camera_pose();
    state.clones.push(CameraClone {
        rot: cam.rot,
        pos: cam.trans,
        frame_id,
    });
    Ok(())
}

/// Drops the oldest clone and its rows and columns.
pub fn marginalize_oldest<T: Real>(state: &mut VioState<T>, cov: &mut CovarianceMatrix<T>) -> Result<()> {
    check_dim(state.dim(), cov.nrows())?;
    if state.clones.is_empty() {
        return Err(Error::EmptyWindow);
    }
    state.clones.remove(0);
    let taken = std::mem::replace(cov, DMatrix::zeros(0, 0));
    *cov = taken
        .remove_rows(IMU_DIM, CLONE_DIM)
        .remove_columns(IMU_DIM, CLONE_DIM);
    Ok(())
}

fn seg3<T: Real>(v: &DVector<T>, at: usize) -> Vector3<T> {
    Vector3::new(v[at], v[at + 1], v[at + 2])
}

fn put3<T: Real>(v: &mut DVector<T>, at: usize, x: &Vector3<T>) {
    v[at] = x.x;
    v[at + 1] = x.y;
    v[at + 2] = x.z;
}

/// Retracts `(rot, x)` by `(ξ_θ, ξ_x)` in the given model.
fn retract_vec<T: Real>(model: ErrorModel, dr: &Rotation<T>, jl: &Matrix3<T>, x: &Vector3<T>, xi: &Vector3<T>) -> Vector3<T> {
    match model {
        ErrorModel::StandardAdditive => x + xi,
        ErrorModel::RightInvariant => dr * x + jl * xi,
    }
}

fn unretract_vec<T: Real>(
    model: ErrorModel,
    dr: &Rotation<T>,
    jl_inv: &Matrix3<T>,
    x_true: &Vector3<T>,
    x_est: &Vector3<T>,
) -> Vector3<T> {
    match model {
        ErrorModel::StandardAdditive => x_true - x_est,
        ErrorModel::RightInvariant => jl_inv * (x_true - dr * x_est),
    }
}

/// Applies an error-state correction on the manifold.
pub fn apply_correction<T: Real>(state: &VioState<T>, delta: &DVector<T>, model: ErrorModel) -> Result<VioState<T>> {
    let mut out = state.clone();
    apply_correction_in_place(&mut out, delta, model)?;
    Ok(out)
}

pub fn apply_correction_in_place<T: Real>(state: &mut VioState<T>, delta: &DVector<T>, model: ErrorModel) -> Result<()> {
    check_dim(state.dim(), delta.len())?;

    let th = seg3(delta, THETA);
    let dr = so3_exp(&th);
    let jl = left_jacobian(&th);
    let imu = &mut state.imu;
    imu.rot = Rotation::from_matrix_unchecked(dr.matrix() * imu.rot.matrix());
    imu.vel = retract_vec(model, &dr, &jl, &imu.vel, &seg3(delta, VEL));
    imu.pos = retract_vec(model, &dr, &jl, &imu.pos, &seg3(delta, POS));
    imu.bg += seg3(delta, BG);
    imu.ba += seg3(delta, BA);

    for (i, c) in state.clones.iter_mut().enumerate() {
        let off = VioState::<T>::clone_offset(i);
        let th = seg3(delta, off);
        let dr = so3_exp(&th);
        let jl = left_jacobian(&th);
        c.rot = Rotation::from_matrix_unchecked(dr.matrix() * c.rot.matrix());
        c.pos = retract_vec(model, &dr, &jl, &c.pos, &seg3(delta, off + 3));
    }
    Ok(())
}

/// Error `ξ` such that `apply_correction(x_est, ξ) = x_true`.
pub fn error_between<T: Real>(x_true: &VioState<T>, x_est: &VioState<T>, model: ErrorModel) -> Result<DVector<T>> {
    check_dim(x_est.clones.len(), x_true.clones.len())?;
    let mut xi = DVector::zeros(x_est.dim());

    let (th, jl_inv, dr) = rotation_error(&x_true.imu.rot, &x_est.imu.rot);
    put3(&mut xi, THETA, &th);
    put3(&mut xi, VEL, &unretract_vec(model, &dr, &jl_inv, &x_true.imu.vel, &x_est.imu.vel));
    put3(&mut xi, POS, &unretract_vec(model, &dr, &jl_inv, &x_true.imu.pos, &x_est.imu.pos));
    put3(&mut xi, BG, &(x_true.imu.bg - x_est.imu.bg));
    put3(&mut xi, BA, &(x_true.imu.ba - x_est.imu.ba));

    for (i, (ct, ce)) in x_true.clones.iter().zip(&x_est.clones).enumerate() {
        let off = VioState::<T>::clone_offset(i);
        let (th, jl_inv, dr) = rotation_error(&ct.rot, &ce.rot);
        put3(&mut xi, off, &th);
        put3(&mut xi, off + 3, &unretract_vec(model, &dr, &jl_inv, &ct.pos, &ce.pos));
    }
    Ok(xi)
}

fn rotation_error<T: Real>(r_true: &Rotation<T>, r_est: &Rotation<T>) -> (Vector3<T>, Matrix3<T>, Rotation<T>) {
    let dr = Rotation::from_matrix_unchecked(r_true.matrix() * r_est.matrix().transpose());
    let th = so3_log(&dr);
    (th, left_jacobian_inv(&th), so3_exp(&th))
}

/// Pose part `(ξ_θ, ξ_p)` of the IMU error.
pub fn imu_pose_error<T: Real>(
    truth: &ImuState<T>,
    est: &ImuState<T>,
    model: ErrorModel,
) -> nalgebra::Vector6<T> {
    let (th, jl_inv, dr) = rotation_error(&truth.rot, &est.rot);
    let dp = unretract_vec(model, &dr, &jl_inv, &truth.pos, &est.pos);
    nalgebra::Vector6::new(th.x, th.y, th.z, dp.x, dp.y, dp.z)
}
