//! Synthetic circle-trajectory world with point, line and vanishing-point
//! measurements.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig, FilterStats, Variant, TIME_TOL};
use crate::geometry::{so3_exp, PluckerLine, Pose, Rotation};
use crate::measurements::{project_point, vp_predict};
use crate::propagation::{ImuSample, NoiseParams, GRAVITY};
use crate::scalar::{lit, to_f64, Real};
use crate::state::{apply_correction, ErrorModel, ImuState, VioState, IMU_DIM};
use crate::triangulation::GnSettings;
use crate::update::{Frame, LineMeasurement, UpdateConfig};

/// Minimum projected segment length on the normalized plane.
const MIN_SEGMENT: f64 = 20.0 / 460.0;
const NEAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSigma {
    pub rot: f64,
    pub vel: f64,
    pub pos: f64,
    pub bg: f64,
    pub ba: f64,
}

impl Default for InitialSigma {
    fn default() -> Self {
        Self { rot: 0.01, vel: 0.02, pos: 0.02, bg: 1e-3, ba: 1e-2 }
    }
}

impl InitialSigma {
    pub fn covariance(&self) -> DMatrix<f64> {
        let s = [self.rot, self.vel, self.pos, self.bg, self.ba];
        DMatrix::from_diagonal(&DVector::from_fn(IMU_DIM, |i, _| s[i / 3].powi(2)))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub radius: f64,
    pub loops: u32,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub n_points: usize,
    pub n_lines: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub wall_side: f64,
    /// Landmarks span heights in `[-h, h]`.
    pub half_height: f64,
    pub range: f64,
    /// Half extents of the image on the normalized plane.
    pub image_half_width: f64,
    pub image_half_height: f64,
    pub pixel_sigma: f64,
    pub vp_pixel_sigma: f64,
    pub focal_length: f64,
    /// VP observations with larger normalized coordinates are dropped.
    pub vp_max_norm: f64,
    pub noise: NoiseParams<f64>,
    pub initial_sigma: InitialSigma,
    pub window: usize,
    pub min_track: usize,
    pub runs: usize,
    pub seed: u64,
    /// Disables IMU noise, bias walk, pixel noise and the initial error.
    pub noiseless: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            radius: 6.0,
            loops: 10,
            duration: 120.0,
            imu_rate: 100.0,
            cam_rate: 10.0,
            n_points: 200,
            n_lines: 140,
            inner_radius: 5.0,
            outer_radius: 7.0,
            wall_side: 14.0,
            half_height: 2.0,
            range: 20.0,
            image_half_width: 1.0,
            image_half_height: 0.75,
            pixel_sigma: 1.0,
            vp_pixel_sigma: 1.0,
            focal_length: 460.0,
            vp_max_norm: 2.0,
            noise: NoiseParams::default(),
            initial_sigma: InitialSigma::default(),
            window: 20,
            min_track: 5,
            runs: 30,
            seed: 1,
            noiseless: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("radius", self.radius),
            ("duration", self.duration),
            ("imu_rate", self.imu_rate),
            ("cam_rate", self.cam_rate),
            ("inner_radius", self.inner_radius),
            ("outer_radius", self.outer_radius),
            ("wall_side", self.wall_side),
            ("half_height", self.half_height),
            ("range", self.range),
            ("image_half_width", self.image_half_width),
            ("image_half_height", self.image_half_height),
            ("pixel_sigma", self.pixel_sigma),
            ("vp_pixel_sigma", self.vp_pixel_sigma),
            ("focal_length", self.focal_length),
            ("vp_max_norm", self.vp_max_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.loops == 0 || self.runs == 0 || self.window < 2 {
            return Err(Error::Config("loops, runs must be positive and window at least 2".into()));
        }
        let ratio = self.imu_rate / self.cam_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config("imu_rate must be an integer multiple of cam_rate".into()));
        }
        self.noise.validate()?;
        Ok(())
    }

    pub fn angular_rate(&self) -> f64 {
        2.0 * PI * self.loops as f64 / self.duration
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            pixel_sigma: self.pixel_sigma,
            vp_pixel_sigma: self.vp_pixel_sigma,
            focal_length: self.focal_length,
            min_track_len: self.min_track,
            ..UpdateConfig::default()
        }
    }

    pub fn estimator_config(&self, variant: Variant, update: &UpdateConfig, gn: &GnSettings) -> EstimatorConfig {
        EstimatorConfig {
            noise: self.noise,
            update: UpdateConfig { min_track_len: self.min_track, ..*update },
            gn: *gn,
            window_size: self.window,
            ..EstimatorConfig::for_variant(variant)
        }
    }
}

/// Camera looking along body x, image x to the right and y down.
pub fn camera_extrinsics() -> Pose<f64> {
    Pose::new(
        Rotation::from_matrix_unchecked(Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)),
        Vector3::zeros(),
    )
}

/// True pose, velocity and the exact body-frame inputs at time `t`.
pub fn analytic_trajectory(cfg: &SimConfig, t: f64) -> (ImuState<f64>, Vector3<f64>, Vector3<f64>) {
    let w = cfg.angular_rate();
    let r = cfg.radius;
    let (s, c) = (w * t).sin_cos();
    let yaw = w * t + PI / 2.0;
    let state = ImuState {
        rot: so3_exp(&Vector3::new(0.0, 0.0, yaw)),
        vel: Vector3::new(-r * w * s, r * w * c, 0.0),
        pos: Vector3::new(r * c, r * s, 0.0),
        bg: Vector3::zeros(),
        ba: Vector3::zeros(),
    };
    // Centripetal acceleration points to body +y; gravity reaction is +z.
    (state, Vector3::new(0.0, 0.0, w), Vector3::new(0.0, r * w * w, GRAVITY))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLine {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub line: PluckerLine<f64>,
    /// Index of the axis the line is parallel to.
    pub family: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct World {
    pub points: Vec<Vector3<f64>>,
    pub lines: Vec<SimLine>,
}

pub fn generate_landmarks(cfg: &SimConfig, rng: &mut impl Rng) -> Result<World> {
    let h = cfg.half_height;
    let points = (0..cfg.n_points)
        .map(|i| {
            let r = if i % 2 == 0 { cfg.inner_radius } else { cfg.outer_radius };
            let a = rng.random_range(0.0..2.0 * PI);
            Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(-h..h))
        })
        .collect();

    let half = cfg.wall_side / 2.0;
    let mut lines = Vec::with_capacity(cfg.n_lines);
    for i in 0..cfg.n_lines {
        // Walls in turn: x = +half, y = +half, x = -half, y = -half.
        let wall = i % 4;
        let along_axis = if wall % 2 == 0 { 1 } else { 0 };
        let sign = if wall < 2 { 1.0 } else { -1.0 };
        let mut base = Vector3::zeros();
        base[1 - along_axis] = sign * half;
        let (start, end, family) = if (i / 4) % 2 == 0 {
            let mut p = base;
            p[along_axis] = rng.random_range(-0.9 * half..0.9 * half);
            let (mut a, mut b) = (p, p);
            a.z = -h;
            b.z = h;
            (a, b, 2)
        } else {
            let len = rng.random_range(2.0..4.0);
            let c = rng.random_range(-half + len / 2.0..half - len / 2.0);
            let mut a = base;
            a.z = rng.random_range(-h..h);
            let mut b = a;
            a[along_axis] = c - len / 2.0;
            b[along_axis] = c + len / 2.0;
            (a, b, along_axis)
        };
        lines.push(SimLine { start, end, line: PluckerLine::from_points(&start, &end)?, family });
    }
    Ok(World { points, lines })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub state: ImuState<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub world: World,
    pub truth: Vec<TruthSample>,
    pub imu: Vec<ImuSample<f64>>,
    pub frames: Vec<Frame<f64>>,
    /// Initial error draw in the error-state ordering.
    pub initial_error: DVector<f64>,
}

impl SimData {
    /// Truth at the IMU sample closest to `t`.
    pub fn truth_at(&self, t: f64) -> &ImuState<f64> {
        let i = self.truth.partition_point(|s| s.t < t - TIME_TOL).min(self.truth.len() - 1);
        &self.truth[i].state
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss2(rng: &mut impl Rng, s: f64) -> Vector2<f64> {
    Vector2::new(normal(rng), normal(rng)) * s
}

pub(crate) fn gauss3(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| s * normal(rng))
}

/// IMU stream with bias random walk and white noise, plus the biased truth.
pub fn simulate_imu(cfg: &SimConfig, rng: &mut impl Rng) -> (Vec<ImuSample<f64>>, Vec<TruthSample>) {
    let n = (cfg.duration * cfg.imu_rate).round() as usize;
    let dt = 1.0 / cfg.imu_rate;
    let nz = if cfg.noiseless { NoiseParams { sigma_g: 0.0, sigma_wg: 0.0, sigma_a: 0.0, sigma_wa: 0.0 } } else { cfg.noise };
    let (mut bg, mut ba) = (Vector3::zeros(), Vector3::zeros());
    let mut imu = Vec::with_capacity(n + 1);
    let mut truth = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / cfg.imu_rate;
        let (mut state, w, a) = analytic_trajectory(cfg, t);
        state.bg = bg;
        state.ba = ba;
        let omega = w + bg + gauss3(rng, nz.sigma_g / dt.sqrt());
        let accel = a + ba + gauss3(rng, nz.sigma_a / dt.sqrt());
        imu.push(ImuSample::new(t, omega, accel));
        truth.push(TruthSample { t, state });
        bg += gauss3(rng, nz.sigma_wg * dt.sqrt());
        ba += gauss3(rng, nz.sigma_wa * dt.sqrt());
    }
    (imu, truth)
}

fn in_image(cfg: &SimConfig, p: &Vector3<f64>) -> bool {
    p.z > NEAR && (p.x / p.z).abs() <= cfg.image_half_width && (p.y / p.z).abs() <= cfg.image_half_height
}

/// Clips the segment `a → b` (camera frame) to the view frustum.
fn clip_segment(cfg: &SimConfig, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let (hw, hh) = (cfg.image_half_width, cfg.image_half_height);
    let planes: [fn(&Vector3<f64>, f64, f64) -> f64; 5] = [
        |p: &Vector3<f64>, _: f64, _: f64| p.z - NEAR,
        |p: &Vector3<f64>, w: f64, _: f64| w * p.z - p.x,
        |p: &Vector3<f64>, w: f64, _: f64| w * p.z + p.x,
        |p: &Vector3<f64>, _: f64, h: f64| h * p.z - p.y,
        |p: &Vector3<f64>, _: f64, h: f64| h * p.z + p.y,
    ];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for f in planes {
        let (fa, fb) = (f(a, hw, hh), f(b, hw, hh));
        if fa < 0.0 && fb < 0.0 {
            return None;
        }
        if fa < 0.0 {
            t0 = t0.max(fa / (fa - fb));
        } else if fb < 0.0 {
            t1 = t1.min(fa / (fa - fb));
        }
    }
    (t0 < t1).then(|| (a + (b - a) * t0, a + (b - a) * t1))
}

/// Point, segment and VP observations of one camera frame.
pub fn simulate_camera_frame(
    cfg: &SimConfig,
    truth: &ImuState<f64>,
    world: &World,
    t: f64,
    frame_id: u64,
    rng: &mut impl Rng,
) -> Frame<f64> {
    let sigma = if cfg.noiseless { 0.0 } else { cfg.pixel_sigma / cfg.focal_length };
    let vp_sigma = if cfg.noiseless { 0.0 } else { cfg.vp_pixel_sigma / cfg.focal_length };
    let cam = truth.pose().compose(&camera_extrinsics());
    let mut frame = Frame::new(t, frame_id);

    for (id, p) in world.points.iter().enumerate() {
        let pc = cam.inverse_transform_point(p);
        if pc.norm() > cfg.range || !in_image(cfg, &pc) {
            continue;
        }
        if let Ok(z) = project_point(&pc) {
            let noise = gauss2(rng, sigma);
            frame.points.push((id as u64, z + noise));
        }
    }

    for (id, l) in world.lines.iter().enumerate() {
        let (a, b) = (cam.inverse_transform_point(&l.start), cam.inverse_transform_point(&l.end));
        let Some((ca, cb)) = clip_segment(cfg, &a, &b) else { continue };
        if ((ca + cb) * 0.5).norm() > cfg.range {
            continue;
        }
        let (Ok(s), Ok(e)) = (project_point(&ca), project_point(&cb)) else { continue };
        if (s - e).norm() < MIN_SEGMENT {
            continue;
        }
        let (s, e) = (s + gauss2(rng, sigma), e + gauss2(rng, sigma));
        let d_c = cam.rot.inverse() * (l.end - l.start);
        let vp_noise = gauss2(rng, vp_sigma);
        let vp = vp_predict(&d_c).ok().filter(|v| v.norm() <= cfg.vp_max_norm).map(|v| v + vp_noise);
        frame.lines.push(LineMeasurement { id: id as u64, start: s, end: e, vp });
    }
    frame
}

/// Generates one world, trajectory and measurement set from `seed`.
pub fn generate(cfg: &SimConfig, seed: u64) -> Result<SimData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = generate_landmarks(cfg, &mut rng)?;
    let (imu, truth) = simulate_imu(cfg, &mut rng);
    let stride = (cfg.imu_rate / cfg.cam_rate).round() as usize;
    let frames = truth
        .iter()
        .enumerate()
        .filter(|(k, _)| k % stride == 0)
        .map(|(k, s)| simulate_camera_frame(cfg, &s.state, &world, s.t, (k / stride) as u64, &mut rng))
        .collect();
    let std = cfg.initial_sigma.covariance().map_diagonal(|v| v.sqrt());
    let initial_error = if cfg.noiseless {
        DVector::zeros(IMU_DIM)
    } else {
        DVector::from_fn(IMU_DIM, |i, _| std[i] * normal(&mut rng))
    };
    Ok(SimData { world, truth, imu, frames, initial_error })
}

/// Filter output at one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub t: f64,
    pub truth: ImuState<f64>,
    pub estimate: ImuState<f64>,
    pub imu_cov: SMatrix<f64, 15, 15>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub variant: Variant,
    pub model: ErrorModel,
    pub seed: u64,
    pub samples: Vec<EvalSample>,
    pub stats: FilterStats,
    /// Reason the run stopped early.
    pub aborted: Option<String>,
}

/// Position error beyond which a run is declared diverged.
pub const DIVERGENCE_M: f64 = 50.0;

fn cast_state<T: Real>(s: &ImuState<f64>) -> ImuState<T> {
    ImuState {
        rot: Rotation::from_matrix_unchecked(s.rot.matrix().map(lit)),
        vel: s.vel.map(lit),
        pos: s.pos.map(lit),
        bg: s.bg.map(lit),
        ba: s.ba.map(lit),
    }
}

fn uncast_state<T: Real>(s: &ImuState<T>) -> ImuState<f64> {
    ImuState {
        rot: Rotation::from_matrix_unchecked(s.rot.matrix().map(to_f64)),
        vel: s.vel.map(to_f64),
        pos: s.pos.map(to_f64),
        bg: s.bg.map(to_f64),
        ba: s.ba.map(to_f64),
    }
}

fn cast_frame<T: Real>(f: &Frame<f64>) -> Frame<T> {
    Frame {
        t: f.t,
        frame_id: f.frame_id,
        points: f.points.iter().map(|(id, z)| (*id, z.map(lit))).collect(),
        lines: f
            .lines
            .iter()
            .map(|l| LineMeasurement { id: l.id, start: l.start.map(lit), end: l.end.map(lit), vp: l.vp.map(|v| v.map(lit)) })
            .collect(),
    }
}

/// Estimate at one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub t: f64,
    pub estimate: ImuState<f64>,
    pub imu_cov: SMatrix<f64, 15, 15>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub estimates: Vec<FrameEstimate>,
    pub stats: FilterStats,
    pub aborted: Option<String>,
}

/// Runs the estimator over an IMU stream and its camera frames.
///
/// `check` sees every frame estimate; an error from it, or from the filter, stops the run
/// and is reported in `aborted`.
pub fn run_stream<T: Real>(
    imu: &[ImuSample<f64>],
    frames: &[Frame<f64>],
    start: &ImuState<f64>,
    p0: &DMatrix<f64>,
    extrinsics: &Pose<f64>,
    config: EstimatorConfig,
    mut check: impl FnMut(&FrameEstimate) -> Result<()>,
) -> Result<StreamOutput> {
    let t0 = imu.first().ok_or(Error::Config("empty IMU stream".into()))?.t;
    let extr = Pose::new(Rotation::from_matrix_unchecked(extrinsics.rot.matrix().map(lit)), extrinsics.trans.map(lit));
    let mut est = Estimator::<T>::new(config, cast_state(start), p0.map(lit), extr, t0)?;
    let mut out = StreamOutput { estimates: Vec::with_capacity(frames.len()), stats: FilterStats::default(), aborted: None };
    let mut fi = 0;
    for s in imu {
        let step = est.process_imu(ImuSample::new(s.t, s.omega.map(lit), s.accel.map(lit))).and_then(|_| {
            while fi < frames.len() && frames[fi].t <= s.t + TIME_TOL {
                let f = &frames[fi];
                fi += 1;
                est.process_frame(&cast_frame(f))?;
                let p = est.covariance();
                let fe = FrameEstimate {
                    t: f.t,
                    estimate: uncast_state(&est.state().imu),
                    imu_cov: SMatrix::from_fn(|r, c| to_f64(p[(r, c)])),
                };
                check(&fe)?;
                out.estimates.push(fe);
            }
            Ok(())
        });
        if let Err(e) = step {
            out.aborted = Some(e.to_string());
            break;
        }
    }
    out.stats = est.stats();
    Ok(out)
}

/// Initial estimate: the truth at the first sample moved by the drawn initial error.
pub fn initial_estimate(data: &SimData, model: ErrorModel) -> Result<ImuState<f64>> {
    let first = data.truth.first().ok_or(Error::Config("empty truth stream".into()))?;
    let truth0 = VioState::new(first.state, camera_extrinsics(), 1);
    Ok(apply_correction(&truth0, &data.initial_error, model)?.imu)
}

/// Runs one filter over pre-generated data.
pub fn run_filter<T: Real>(data: &SimData, config: EstimatorConfig, variant: Variant, init: &InitialSigma, seed: u64) -> Result<RunOutput> {
    let model = config.model;
    let start = initial_estimate(data, model)?;
    let stream = run_stream::<T>(&data.imu, &data.frames, &start, &init.covariance(), &camera_extrinsics(), config, |fe| {
        let err = (fe.estimate.pos - data.truth_at(fe.t).pos).norm();
        if err <= DIVERGENCE_M {
            Ok(())
        } else {
            Err(Error::Diverged(format!("position error {err:.1} m at t = {:.2} s", fe.t)))
        }
    })?;
    if let Some(e) = &stream.aborted {
        log::warn!("{variant} run {seed} aborted: {e}");
    }
    let samples = stream
        .estimates
        .into_iter()
        .map(|fe| EvalSample { t: fe.t, truth: *data.truth_at(fe.t), estimate: fe.estimate, imu_cov: fe.imu_cov })
        .collect();
    Ok(RunOutput { variant, model, seed, samples, stats: stream.stats, aborted: stream.aborted })
}

/// Generates data from `seed` and runs one variant on it.
pub fn run_simulation(cfg: &SimConfig, variant: Variant, seed: u64) -> Result<RunOutput> {
    let data = generate(cfg, seed)?;
    let config = cfg.estimator_config(variant, &cfg.update_config(), &GnSettings::default());
    run_filter::<f64>(&data, config, variant, &cfg.initial_sigma, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurements::{line_residual, vp_residual};
    use crate::propagation::{gravity, propagate_mean};

    fn short(duration: f64) -> SimConfig {
        SimConfig { duration, loops: 1, ..SimConfig::default() }
    }

    #[test]
    fn trajectory_stays_on_circle() {
        let cfg = SimConfig::default();
        for k in 0..=1200 {
            let (s, _, _) = analytic_trajectory(&cfg, k as f64 * 0.1);
            assert!((s.pos.norm() - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_is_periodic() {
        let cfg = SimConfig::default();
        let (a, _, _) = analytic_trajectory(&cfg, 0.0);
        let (b, _, _) = analytic_trajectory(&cfg, cfg.duration / 10.0);
        assert!((a.pos - b.pos).norm() < 1e-12);
        assert!((a.rot.matrix() - b.rot.matrix()).amax() < 1e-12);
    }

    #[test]
    fn analytic_inputs_match_finite_differences() {
        let cfg = SimConfig::default();
        let h = 1e-4;
        for t in [0.3, 17.0, 88.8] {
            let (s, w, a) = analytic_trajectory(&cfg, t);
            let (sp, _, _) = analytic_trajectory(&cfg, t + h);
            let (sm, _, _) = analytic_trajectory(&cfg, t - h);
            let acc = (sp.vel - sm.vel) / (2.0 * h);
            let fd_a = s.rot.inverse() * (acc - gravity::<f64>());
            assert!((fd_a - a).norm() < 1e-6);
            assert!(((sp.pos - sm.pos) / (2.0 * h) - s.vel).norm() < 1e-6);
            let dr = crate::geometry::so3_log(&(s.rot.inverse() * sp.rot)) / h;
            assert!((dr - w).norm() < 1e-6);
        }
    }

    #[test]
    fn noiseless_propagation_tracks_truth() {
        let cfg = SimConfig { noiseless: true, ..SimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (imu, truth) = simulate_imu(&cfg, &mut rng);
        let mut s = truth[0].state;
        for w in imu.windows(2) {
            s = propagate_mean(&s, &w[0], &w[1], &gravity()).unwrap();
        }
        assert!((s.pos - truth.last().unwrap().state.pos).norm() < 1e-4);
        let (_, w0, a0) = analytic_trajectory(&cfg, 0.0);
        assert_eq!(imu[0].omega, w0);
        assert_eq!(imu[0].accel, a0);
    }

    #[test]
    fn white_noise_variance_matches_density() {
        let cfg = SimConfig { duration: 1000.0, noise: NoiseParams { sigma_wg: 0.0, sigma_wa: 0.0, ..NoiseParams::default() }, ..SimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (imu, _) = simulate_imu(&cfg, &mut rng);
        let n = imu.len() as f64;
        let (mut vg, mut va) = (0.0, 0.0);
        for s in &imu {
            let (_, w, a) = analytic_trajectory(&cfg, s.t);
            vg += (s.omega - w).x.powi(2);
            va += (s.accel - a).y.powi(2);
        }
        let dt: f64 = 0.01;
        let eg = 0.008f64.powi(2) / dt;
        let ea = 0.01f64.powi(2) / dt;
        assert!(n >= 1e5);
        assert!((vg / n / eg - 1.0).abs() < 0.05);
        assert!((va / n / ea - 1.0).abs() < 0.05);
    }

    #[test]
    fn bias_walk_variance_grows_linearly() {
        let cfg = SimConfig { duration: 60.0, ..SimConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 400;
        let (mut half, mut full) = (0.0, 0.0);
        for _ in 0..trials {
            let (_, truth) = simulate_imu(&cfg, &mut rng);
            half += truth[3000].state.ba.norm_squared() / 3.0;
            full += truth[6000].state.ba.norm_squared() / 3.0;
        }
        let s2 = 0.003f64.powi(2);
        assert!((half / trials as f64 / (s2 * 30.0) - 1.0).abs() < 0.1);
        assert!((full / trials as f64 / (s2 * 60.0) - 1.0).abs() < 0.1);
    }

    #[test]
    fn landmark_layout() {
        let cfg = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = generate_landmarks(&cfg, &mut rng).unwrap();
        assert_eq!((w.points.len(), w.lines.len()), (200, 140));
        let inner = w.points.iter().filter(|p| (p.xy().norm() - 5.0).abs() < 1e-12).count();
        let outer = w.points.iter().filter(|p| (p.xy().norm() - 7.0).abs() < 1e-12).count();
        assert_eq!((inner, outer), (100, 100));
        for l in &w.lines {
            let d = (l.end - l.start).normalize();
            assert!((d[l.family].abs() - 1.0).abs() < 1e-12);
            for p in [l.start, l.end] {
                assert!((p.x.abs().max(p.y.abs()) - 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distant_landmarks_are_not_observed() {
        let cfg = SimConfig { noiseless: true, ..SimConfig::default() };
        let (truth, _, _) = analytic_trajectory(&cfg, 0.0);
        let cam = truth.pose().compose(&camera_extrinsics());
        let ahead = |d: f64| cam.transform_point(&Vector3::new(0.0, 0.0, d));
        let world = World { points: vec![ahead(25.0), ahead(15.0)], lines: Vec::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = simulate_camera_frame(&cfg, &truth, &world, 0.0, 0, &mut rng);
        assert_eq!(f.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn noiseless_measurements_have_zero_residuals() {
        let cfg = SimConfig { noiseless: true, ..short(12.0) };
        let data = generate(&cfg, 5).unwrap();
        let mut families = 0;
        for f in data.frames.iter().step_by(7) {
            let truth = data.truth_at(f.t);
            let cam = truth.pose().compose(&camera_extrinsics());
            for (id, z) in &f.points {
                let pc = cam.inverse_transform_point(&data.world.points[*id as usize]);
                assert!((project_point(&pc).unwrap() - z).norm() < 1e-12);
            }
            let mut vp_by_family: [Option<Vector2<f64>>; 3] = [None; 3];
            for m in &f.lines {
                let l = &data.world.lines[m.id as usize];
                let lc = crate::geometry::transform_line(&cam, &l.line);
                let r = line_residual(&lc.n, &m.start.push(1.0), &m.end.push(1.0)).unwrap();
                assert!(r.norm() < 1e-10);
                if let Some(v) = m.vp {
                    assert!(vp_residual(&v, &lc.d).unwrap().norm() < 1e-9);
                    match vp_by_family[l.family] {
                        Some(prev) => assert!((prev - v).norm() < 1e-9),
                        None => {
                            vp_by_family[l.family] = Some(v);
                            families += 1;
                        }
                    }
                }
            }
        }
        assert!(families > 0);
        assert!(data.frames.iter().all(|f| f.lines.iter().all(|l| l.vp.is_none() || data.world.lines[l.id as usize].family != 2)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = short(5.0);
        assert_eq!(generate(&cfg, 9).unwrap(), generate(&cfg, 9).unwrap());
        assert_ne!(generate(&cfg, 9).unwrap().frames, generate(&cfg, 10).unwrap().frames);
    }

    #[test]
    fn noiseless_runs_stay_on_truth() {
        let cfg = SimConfig { noiseless: true, ..short(12.0) };
        for v in Variant::ALL {
            let out = run_simulation(&cfg, v, 3).unwrap();
            assert!(out.aborted.is_none());
            let mse: f64 = out.samples.iter().map(|s| (s.estimate.pos - s.truth.pos).norm_squared()).sum::<f64>() / out.samples.len() as f64;
            assert!(mse.sqrt() < 1e-3, "{v}: {}", mse.sqrt());
            assert!(out.stats.points_used > 0);
            assert_eq!(out.stats.lines_used > 0, v.uses_lines());
            assert_eq!(out.stats.vp_used > 0, v.uses_lines());
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = short(6.0);
        let a = run_simulation(&cfg, Variant::PlvIekf, 11).unwrap();
        let b = run_simulation(&cfg, Variant::PlvIekf, 11).unwrap();
        assert_eq!(a, b);
    }
}
