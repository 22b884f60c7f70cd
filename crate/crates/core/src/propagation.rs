//! IMU mean and covariance propagation.

use nalgebra::{DMatrix, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{skew, so3_exp, Rotation};
use crate::scalar::{lit, Real};
use crate::state::{CovarianceMatrix, ErrorModel, ImuState, BA, BG, CLONE_DIM, IMU_DIM, POS, THETA, VEL};

pub type Mat15<T> = SMatrix<T, 15, 15>;
pub type Mat15x12<T> = SMatrix<T, 15, 12>;

pub const GRAVITY: f64 = 9.81;

pub fn gravity<T: Real>() -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), lit(-GRAVITY))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample<T: Real> {
    pub t: f64,
    pub omega: Vector3<T>,
    pub accel: Vector3<T>,
}

impl<T: Real> ImuSample<T> {
    pub fn new(t: f64, omega: Vector3<T>, accel: Vector3<T>) -> Self {
        Self { t, omega, accel }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseParams<T> {
    pub sigma_g: T,
    pub sigma_wg: T,
    pub sigma_a: T,
    pub sigma_wa: T,
}

impl<T: Real> Default for NoiseParams<T> {
    fn default() -> Self {
        Self {
            sigma_g: lit(0.008),
            sigma_wg: lit(0.0004),
            sigma_a: lit(0.01),
            sigma_wa: lit(0.003),
        }
    }
}

impl<T: Real> NoiseParams<T> {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_g, self.sigma_wg, self.sigma_a, self.sigma_wa];
        if all.iter().any(|s| !(*s >= T::zero())) {
            return Err(Error::Config("noise densities must be non-negative".into()));
        }
        Ok(())
    }
}

/// IMU-block transition and process noise over one interval. Clone blocks are
/// implicitly identity and zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBundle<T: Real> {
    pub phi: Mat15<T>,
    pub qd: Mat15<T>,
}

impl<T: Real> TransitionBundle<T> {
    pub fn identity() -> Self {
        Self {
            phi: Mat15::identity(),
            qd: Mat15::zeros(),
        }
    }

    /// Transition over `self` followed by `next`.
    pub fn then(&self, next: &Self) -> Self {
        Self {
            phi: next.phi * self.phi,
            qd: next.phi * self.qd * next.phi.transpose() + next.qd,
        }
    }

    pub fn dense_phi(&self, clones: usize) -> DMatrix<T> {
        let n = IMU_DIM + CLONE_DIM * clones;
        let mut m = DMatrix::identity(n, n);
        m.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&self.phi);
        m
    }

    pub fn dense_qd(&self, clones: usize) -> DMatrix<T> {
        let n = IMU_DIM + CLONE_DIM * clones;
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&self.qd);
        m
    }
}

/// Integrates the kinematics over `dt` with inputs varying linearly from
/// `(w0, a0)` to `(w1, a1)`. A negative `dt` runs the flow backwards.
#[allow(clippy::too_many_arguments)]
pub fn integrate<T: Real>(
    imu: &ImuState<T>,
    w0: &Vector3<T>,
    a0: &Vector3<T>,
    w1: &Vector3<T>,
    a1: &Vector3<T>,
    dt: T,
    g: &Vector3<T>,
) -> ImuState<T> {
    let half: T = lit(0.5);
    let quarter: T = lit(0.25);
    let w0 = w0 - imu.bg;
    let w1 = w1 - imu.bg;
    let a0 = a0 - imu.ba;
    let a1 = a1 - imu.ba;
    let am = (a0 + a1) * half;

    // Attitude at the RK4 stage times, using the mean rate over each sub-interval.
    let r0 = imu.rot;
    let w_half = w0 * lit::<T>(0.75) + w1 * quarter;
    let w_full = (w0 + w1) * half;
    let rh = r0 * so3_exp(&(w_half * (dt * half)));
    let r1 = r0 * so3_exp(&(w_full * dt));

    let acc0 = r0 * a0 + g;
    let acch = rh * am + g;
    let acc1 = r1 * a1 + g;

    let v0 = imu.vel;
    let k1v = acc0;
    let k1p = v0;
    let k2v = acch;
    let k2p = v0 + k1v * (dt * half);
    let k3v = acch;
    let k3p = v0 + k2v * (dt * half);
    let k4v = acc1;
    let k4p = v0 + k3v * dt;
    let sixth = dt / lit(6.0);
    let two: T = lit(2.0);

    ImuState {
        rot: r1.renormalize_if_needed(),
        vel: v0 + (k1v + (k2v + k3v) * two + k4v) * sixth,
        pos: imu.pos + (k1p + (k2p + k3p) * two + k4p) * sixth,
        bg: imu.bg,
        ba: imu.ba,
    }
}

trait Renormalize {
    fn renormalize_if_needed(self) -> Self;
}

impl<T: Real> Renormalize for Rotation<T> {
    fn renormalize_if_needed(self) -> Self {
        let m = self.matrix();
        let err = (m.transpose() * m - nalgebra::Matrix3::identity()).amax();
        if err > lit::<T>(1e3) * T::default_epsilon() {
            let mut r = self;
            r.renormalize();
            r
        } else {
            self
        }
    }
}

/// Constant-input flow, used by derivative oracles.
pub fn integrate_constant<T: Real>(
    imu: &ImuState<T>,
    omega: &Vector3<T>,
    accel: &Vector3<T>,
    dt: T,
    g: &Vector3<T>,
) -> ImuState<T> {
    integrate(imu, omega, accel, omega, accel, dt, g)
}

pub fn propagate_mean<T: Real>(
    imu: &ImuState<T>,
    s0: &ImuSample<T>,
    s1: &ImuSample<T>,
    gravity: &Vector3<T>,
) -> Result<ImuState<T>> {
    if !(s1.t > s0.t) {
        return Err(Error::TimeOrder(s1.t));
    }
    let dt: T = lit(s1.t - s0.t);
    Ok(integrate(imu, &s0.omega, &s0.accel, &s1.omega, &s1.accel, dt, gravity))
}

fn put<T: Real, const R: usize, const C: usize>(
    m: &mut SMatrix<T, R, C>,
    r: usize,
    c: usize,
    b: &nalgebra::Matrix3<T>,
) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// Continuous-time error dynamics `ξ̇ = F ξ + G n` with `n = [n_g n_wg n_a n_wa]`.
pub fn linearize<T: Real>(
    imu: &ImuState<T>,
    s: &ImuSample<T>,
    model: ErrorModel,
    gravity: &Vector3<T>,
) -> (Mat15<T>, Mat15x12<T>) {
    let r = *imu.rot.matrix();
    let eye = nalgebra::Matrix3::<T>::identity();
    let mut f = Mat15::zeros();
    let mut g = Mat15x12::zeros();

    put(&mut f, THETA, BG, &(-r));
    put(&mut g, THETA, 0, &(-r));
    put(&mut f, VEL, BA, &(-r));
    put(&mut g, VEL, 6, &(-r));
    put(&mut f, POS, VEL, &eye);
    put(&mut g, BG, 3, &eye);
    put(&mut g, BA, 9, &eye);

    match model {
        ErrorModel::StandardAdditive => {
            let acc = r * (s.accel - imu.ba);
            put(&mut f, VEL, THETA, &(-skew(&acc)));
        }
        ErrorModel::RightInvariant => {
            let sv = skew(&imu.vel) * r;
            let sp = skew(&imu.pos) * r;
            put(&mut f, VEL, THETA, &skew(gravity));
            put(&mut f, VEL, BG, &(-sv));
            put(&mut g, VEL, 0, &(-sv));
            put(&mut f, POS, BG, &(-sp));
            put(&mut g, POS, 0, &(-sp));
        }
    }
    (f, g)
}

fn continuous_noise<T: Real>(noise: &NoiseParams<T>) -> SMatrix<T, 12, 12> {
    let mut q = SMatrix::<T, 12, 12>::zeros();
    let sig = [noise.sigma_g, noise.sigma_wg, noise.sigma_a, noise.sigma_wa];
    for (k, s) in sig.iter().enumerate() {
        for i in 0..3 {
            q[(3 * k + i, 3 * k + i)] = *s * *s;
        }
    }
    q
}

/// `Φ = I + Fdt + (Fdt)²/2 + (Fdt)³/6 + (Fdt)⁴/24` and trapezoidal `Q_d`.
pub fn discretize<T: Real>(f: &Mat15<T>, g: &Mat15x12<T>, noise: &NoiseParams<T>, dt: T) -> TransitionBundle<T> {
    let a = f * dt;
    let a2 = a * a;
    let a3 = a2 * a;
    let a4 = a3 * a;
    let phi = Mat15::identity() + a + a2 * lit::<T>(0.5) + a3 / lit::<T>(6.0) + a4 / lit::<T>(24.0);

    let gqg = g * continuous_noise(noise) * g.transpose();
    let mut qd = (phi * gqg * phi.transpose() + gqg) * (dt * lit(0.5));
    let sym = (qd + qd.transpose()) * lit::<T>(0.5);
    qd = sym;
    TransitionBundle { phi, qd }
}

/// `P ← ΦPΦᵀ + Q_d` using the block structure of `Φ`.
pub fn propagate_covariance<T: Real>(cov: &mut CovarianceMatrix<T>, bundle: &TransitionBundle<T>) -> Result<()> {
    let n = cov.nrows();
    if n < IMU_DIM || (n - IMU_DIM) % CLONE_DIM != 0 || cov.ncols() != n {
        return Err(Error::Dimension { expected: IMU_DIM, got: n });
    }
    let pii: Mat15<T> = cov.fixed_view::<15, 15>(0, 0).into_owned();
    let mut new_ii = bundle.phi * pii * bundle.phi.transpose() + bundle.qd;
    new_ii = (new_ii + new_ii.transpose()) * lit::<T>(0.5);
    cov.fixed_view_mut::<15, 15>(0, 0).copy_from(&new_ii);

    let m = n - IMU_DIM;
    if m > 0 {
        let pic = bundle.phi * cov.view((0, IMU_DIM), (IMU_DIM, m));
        cov.view_mut((0, IMU_DIM), (IMU_DIM, m)).copy_from(&pic);
        cov.view_mut((IMU_DIM, 0), (m, IMU_DIM)).copy_from(&pic.transpose());
    }
    Ok(())
}

/// One propagation step of mean and transition from `s0` to `s1`.
pub fn step<T: Real>(
    imu: &ImuState<T>,
    s0: &ImuSample<T>,
    s1: &ImuSample<T>,
    model: ErrorModel,
    noise: &NoiseParams<T>,
    gravity: &Vector3<T>,
) -> Result<(ImuState<T>, TransitionBundle<T>)> {
    let next = propagate_mean(imu, s0, s1, gravity)?;
    let (f, g) = linearize(imu, s0, model, gravity);
    let bundle = discretize(&f, &g, noise, lit(s1.t - s0.t));
    Ok((next, bundle))
}

/// Dense `ΦPΦᵀ + Q_d`, kept as a reference for the block form.
pub fn propagate_covariance_dense<T: Real>(cov: &CovarianceMatrix<T>, bundle: &TransitionBundle<T>) -> Result<CovarianceMatrix<T>> {
    let n = cov.nrows();
    if n < IMU_DIM || (n - IMU_DIM) % CLONE_DIM != 0 {
        return Err(Error::Dimension { expected: IMU_DIM, got: n });
    }
    let clones = (n - IMU_DIM) / CLONE_DIM;
    let phi = bundle.dense_phi(clones);
    Ok(&phi * cov * phi.transpose() + bundle.dense_qd(clones))
}
