//! Sliding-window filter driving propagation, cloning and feature updates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Pose, RetractMode};
use crate::measurements::{line_feature_jacobians, nullspace_project, point_jacobians, LandmarkError, LineTrack, PointTrack, StackedSystem};
use crate::propagation::{gravity, propagate_covariance, step, ImuSample, NoiseParams, TransitionBundle};
use crate::scalar::{lit, Real};
use crate::state::{clone_camera, marginalize_oldest, CovarianceMatrix, ErrorModel, ImuState, VioState, DEFAULT_WINDOW, IMU_DIM};
use crate::triangulation::{refine_line, refine_structural_line, triangulate_line_min_angle, triangulate_point, GnSettings};
use crate::update::{chi2_gate, kalman_update, qr_compress, Chi2Table, FeatureTracker, Frame, UpdateConfig};

/// Frames closer than this are treated as coincident with the filter clock.
pub const TIME_TOL: f64 = 1e-9;

/// The four filters compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    #[serde(rename = "msckf")]
    Msckf,
    #[serde(rename = "iekf")]
    Iekf,
    #[serde(rename = "plv-msckf")]
    PlvMsckf,
    #[serde(rename = "plv-iekf")]
    PlvIekf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Msckf, Variant::Iekf, Variant::PlvMsckf, Variant::PlvIekf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Msckf => "msckf",
            Variant::Iekf => "iekf",
            Variant::PlvMsckf => "plv-msckf",
            Variant::PlvIekf => "plv-iekf",
        }
    }

    pub fn model(self) -> ErrorModel {
        match self {
            Variant::Msckf | Variant::PlvMsckf => ErrorModel::StandardAdditive,
            Variant::Iekf | Variant::PlvIekf => ErrorModel::RightInvariant,
        }
    }

    pub fn uses_lines(self) -> bool {
        matches!(self, Variant::PlvMsckf | Variant::PlvIekf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected msckf, iekf, plv-msckf or plv-iekf)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub model: ErrorModel,
    pub use_lines: bool,
    pub use_vp: bool,
    pub noise: NoiseParams<f64>,
    pub update: UpdateConfig,
    pub gn: GnSettings,
    pub window_size: usize,
    pub line_mode: RetractMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::for_variant(Variant::PlvIekf)
    }
}

impl EstimatorConfig {
    pub fn for_variant(v: Variant) -> Self {
        Self {
            model: v.model(),
            use_lines: v.uses_lines(),
            use_vp: v.uses_lines(),
            noise: NoiseParams::default(),
            update: UpdateConfig::default(),
            gn: GnSettings::default(),
            window_size: DEFAULT_WINDOW,
            line_mode: RetractMode::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.update.validate()?;
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        if self.update.min_track_len > self.window_size {
            return Err(Error::Config("min_track_len cannot exceed window_size".into()));
        }
        Ok(())
    }
}

/// Counters describing what the filter consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub frames: u64,
    pub updates: u64,
    pub points_used: u64,
    pub lines_used: u64,
    pub vp_used: u64,
    pub chi2_rejected: u64,
    pub triangulation_failed: u64,
    pub jacobian_failed: u64,
    pub singular_updates: u64,
}

pub struct Estimator<T: Real> {
    config: EstimatorConfig,
    state: VioState<T>,
    cov: CovarianceMatrix<T>,
    pending: TransitionBundle<T>,
    last: Option<ImuSample<T>>,
    time: f64,
    tracker: FeatureTracker<T>,
    chi2: Chi2Table,
    stats: FilterStats,
    noise: NoiseParams<T>,
    gravity: Vector3<T>,
}

impl<T: Real> Estimator<T> {
    pub fn new(config: EstimatorConfig, imu: ImuState<T>, imu_cov: DMatrix<T>, extrinsics: Pose<T>, t0: f64) -> Result<Self> {
        config.validate()?;
        if imu_cov.shape() != (IMU_DIM, IMU_DIM) {
            return Err(Error::Dimension { expected: IMU_DIM, got: imu_cov.nrows() });
        }
        let n = config.noise;
        Ok(Self {
            chi2: Chi2Table::new(config.update.chi2_confidence),
            noise: NoiseParams { sigma_g: lit(n.sigma_g), sigma_wg: lit(n.sigma_wg), sigma_a: lit(n.sigma_a), sigma_wa: lit(n.sigma_wa) },
            state: VioState::new(imu, extrinsics, config.window_size),
            cov: imu_cov,
            pending: TransitionBundle::identity(),
            last: None,
            time: t0,
            tracker: FeatureTracker::new(),
            stats: FilterStats::default(),
            gravity: gravity(),
            config,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn state(&self) -> &VioState<T> {
        &self.state
    }

    /// Full covariance. The IMU block lags the mean until the next frame or
    /// [`Estimator::flush`].
    pub fn covariance(&self) -> &CovarianceMatrix<T> {
        &self.cov
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn stats(&self) -> FilterStats {
        self.stats
    }

    pub fn tracker(&self) -> &FeatureTracker<T> {
        &self.tracker
    }

    pub fn set_gravity(&mut self, g: Vector3<T>) {
        self.gravity = g;
    }

    /// Applies accumulated IMU transitions to the covariance.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending != TransitionBundle::identity() {
            let bundle = std::mem::replace(&mut self.pending, TransitionBundle::identity());
            propagate_covariance(&mut self.cov, &bundle)?;
        }
        Ok(())
    }

    pub fn process_imu(&mut self, sample: ImuSample<T>) -> Result<()> {
        if sample.t < self.time - TIME_TOL {
            return Err(Error::TimeOrder(sample.t));
        }
        match self.last {
            None => {
                if sample.t > self.time + TIME_TOL {
                    let hold = ImuSample { t: self.time, ..sample };
                    self.integrate(&hold, &sample)?;
                }
            }
            Some(prev) => {
                if sample.t > self.time + TIME_TOL {
                    let from = ImuSample { t: self.time, ..prev };
                    self.integrate(&from, &sample)?;
                }
            }
        }
        self.last = Some(sample);
        Ok(())
    }

    fn integrate(&mut self, s0: &ImuSample<T>, s1: &ImuSample<T>) -> Result<()> {
        let (imu, bundle) = step(&self.state.imu, s0, s1, self.config.model, &self.noise, &self.gravity)?;
        self.state.imu = imu;
        self.pending = self.pending.then(&bundle);
        self.time = s1.t;
        Ok(())
    }

    /// Propagates to the frame time, updates with features that matured and
    /// adds the new clone.
    pub fn process_frame(&mut self, frame: &Frame<T>) -> Result<()> {
        if frame.t < self.time - TIME_TOL {
            return Err(Error::TimeOrder(frame.t));
        }
        if frame.t > self.time + TIME_TOL {
            // Hold the last input until the frame time.
            let last = self.last.unwrap_or(ImuSample::new(self.time, Vector3::zeros(), -self.gravity));
            let from = ImuSample { t: self.time, ..last };
            let to = ImuSample { t: frame.t, ..last };
            self.integrate(&from, &to)?;
        }
        self.flush()?;
        self.stats.frames += 1;

        if self.state.clones.len() >= self.state.window_size {
            let oldest = self.state.clones[0].frame_id;
            let (points, lines) = self.tracker.take_marginalized(oldest, self.config.update.min_track_len);
            self.update_with(points, lines)?;
            marginalize_oldest(&mut self.state, &mut self.cov)?;
        }
        clone_camera(&mut self.state, &mut self.cov, self.config.model, frame.frame_id)?;

        if self.config.use_lines {
            self.tracker.add_frame(frame);
        } else {
            let points_only = Frame { lines: Vec::new(), ..frame.clone() };
            self.tracker.add_frame(&points_only);
        }
        let (points, lines) = self.tracker.take_lost(frame.frame_id, self.config.update.min_track_len);
        self.update_with(points, lines)
    }

    /// Builds, gates and applies one joint update from the given tracks.
    pub fn update_with(&mut self, mut points: Vec<PointTrack<T>>, mut lines: Vec<LineTrack<T>>) -> Result<()> {
        if let Some(cap) = self.config.update.max_features {
            points.sort_by_key(|t| std::cmp::Reverse(t.observations.len()));
            lines.sort_by_key(|t| std::cmp::Reverse(t.observations.len()));
            points.truncate(cap);
            lines.truncate(cap.saturating_sub(points.len()));
        }
        let var: T = lit(self.config.update.normalized_variance());
        let vp_var: T = lit(self.config.update.vp_variance());
        let model = self.config.model;
        let mut parts = Vec::new();

        for mut track in points {
            match triangulate_point(&track, &self.state.clones) {
                Ok(p) => track.position = Some(p),
                Err(_) => {
                    self.stats.triangulation_failed += 1;
                    continue;
                }
            }
            let sys = point_jacobians(&self.state, &track, model, LandmarkError::Additive).and_then(|j| {
                let noise = DMatrix::from_diagonal_element(j.rows(), j.rows(), var);
                nullspace_project(&j.hx, &j.hf, &j.r, &noise)
            });
            match sys {
                Ok(sys) if sys.rows() > 0 => {
                    if chi2_gate(&sys, &self.cov, &mut self.chi2) {
                        self.stats.points_used += 1;
                        parts.push(sys.whitened()?);
                    } else {
                        self.stats.chi2_rejected += 1;
                    }
                }
                Ok(_) => {}
                Err(_) => self.stats.jacobian_failed += 1,
            }
        }

        if self.config.use_lines {
            for mut track in lines {
                let initial = match triangulate_line_min_angle(&track, &self.state.clones, self.config.update.min_line_angle_deg) {
                    Ok(l) => l,
                    Err(_) => {
                        self.stats.triangulation_failed += 1;
                        continue;
                    }
                };
                let refined = if self.config.use_vp && track.structural() {
                    refine_structural_line(&initial, &track, &self.state.clones, &self.config.gn)
                } else {
                    refine_line(&initial, &track, &self.state.clones, &self.config.gn)
                };
                track.line = Some(match refined {
                    Ok(r) if !r.diverged => r.line,
                    _ => initial,
                });
                let built = line_feature_jacobians(&self.state, &track, model, self.config.line_mode, self.config.use_vp).and_then(|j| {
                    let noise = j.noise(var, vp_var);
                    nullspace_project(&j.hx, &j.hf, &j.r, &noise).map(|s| (s, j.vp_rows / 2))
                });
                match built {
                    Ok((sys, vps)) if sys.rows() > 0 => {
                        if chi2_gate(&sys, &self.cov, &mut self.chi2) {
                            self.stats.lines_used += 1;
                            self.stats.vp_used += vps as u64;
                            parts.push(sys.whitened()?);
                        } else {
                            self.stats.chi2_rejected += 1;
                        }
                    }
                    Ok(_) => {}
                    Err(_) => self.stats.jacobian_failed += 1,
                }
            }
        }

        if parts.is_empty() {
            return Ok(());
        }
        let system = concat(&parts, self.state.dim());
        let compressed = qr_compress(&system)?;
        match kalman_update(&mut self.state, &mut self.cov, &compressed, model) {
            Ok(()) => {
                self.stats.updates += 1;
                Ok(())
            }
            Err(Error::SingularInnovation) => {
                log::warn!("singular innovation covariance at t = {:.3}; update skipped", self.time);
                self.stats.singular_updates += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Block-diagonal stacking of independent systems.
pub fn concat<T: Real>(parts: &[StackedSystem<T>], dim: usize) -> StackedSystem<T> {
    let m: usize = parts.iter().map(|p| p.rows()).sum();
    let mut h = DMatrix::zeros(m, dim);
    let mut r = DVector::zeros(m);
    let mut noise = DMatrix::zeros(m, m);
    let mut at = 0;
    for p in parts {
        let k = p.rows();
        h.view_mut((at, 0), (k, dim)).copy_from(&p.h);
        r.rows_mut(at, k).copy_from(&p.r);
        noise.view_mut((at, at), (k, k)).copy_from(&p.noise);
        at += k;
    }
    StackedSystem { h, r, noise }
}
