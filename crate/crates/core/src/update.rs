//! Feature bookkeeping, gating, compression and the EKF correction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::measurements::{LineObservation, LineTrack, PointObservation, PointTrack, StackedSystem, VpObservation};
use crate::scalar::{to_f64, Real};
use crate::state::{apply_correction_in_place, symmetrize, CovarianceMatrix, ErrorModel, VioState};

/// Minimum number of observations before a feature is used.
pub const DEFAULT_MIN_TRACK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateConfig {
    pub chi2_confidence: f64,
    /// Cap on features per update; `None` uses every mature feature.
    pub max_features: Option<usize>,
    pub pixel_sigma: f64,
    pub vp_pixel_sigma: f64,
    pub focal_length: f64,
    pub min_track_len: usize,
    /// Lines whose most transverse back-projected planes meet at a smaller
    /// angle are not used.
    pub min_line_angle_deg: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            chi2_confidence: 0.95,
            max_features: None,
            pixel_sigma: 1.0,
            vp_pixel_sigma: 1.0,
            focal_length: 460.0,
            min_track_len: DEFAULT_MIN_TRACK,
            min_line_angle_deg: 5.0,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chi2_confidence > 0.0 && self.chi2_confidence < 1.0) {
            return Err(Error::Config("chi2_confidence must lie in (0, 1)".into()));
        }
        if !(self.pixel_sigma > 0.0 && self.vp_pixel_sigma > 0.0 && self.focal_length > 0.0) {
            return Err(Error::Config("pixel sigmas and focal length must be positive".into()));
        }
        if !(0.0..90.0).contains(&self.min_line_angle_deg) {
            return Err(Error::Config("min_line_angle_deg must lie in [0, 90)".into()));
        }
        if self.min_track_len < 2 {
            return Err(Error::Config("min_track_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Measurement variance on the normalized image plane.
    pub fn normalized_variance(&self) -> f64 {
        (self.pixel_sigma / self.focal_length).powi(2)
    }

    pub fn vp_variance(&self) -> f64 {
        (self.vp_pixel_sigma / self.focal_length).powi(2)
    }
}

/// One segment detection, optionally with its vanishing point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMeasurement<T: Real> {
    pub id: u64,
    pub start: Vector2<T>,
    pub end: Vector2<T>,
    pub vp: Option<Vector2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T: Real> {
    pub t: f64,
    pub frame_id: u64,
    pub points: Vec<(u64, Vector2<T>)>,
    pub lines: Vec<LineMeasurement<T>>,
}

impl<T: Real> Frame<T> {
    pub fn new(t: f64, frame_id: u64) -> Self {
        Self { t, frame_id, points: Vec::new(), lines: Vec::new() }
    }
}

/// Open feature tracks keyed by landmark id.
#[derive(Debug, Clone, Default)]
pub struct FeatureTracker<T: Real> {
    pub points: BTreeMap<u64, PointTrack<T>>,
    pub lines: BTreeMap<u64, LineTrack<T>>,
}

impl<T: Real> FeatureTracker<T> {
    pub fn new() -> Self {
        Self { points: BTreeMap::new(), lines: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.lines.is_empty()
    }

    pub fn add_frame(&mut self, frame: &Frame<T>) {
        for (id, z) in &frame.points {
            self.points
                .entry(*id)
                .or_insert_with(|| PointTrack::new(*id))
                .observations
                .push(PointObservation { frame_id: frame.frame_id, z: *z });
        }
        for m in &frame.lines {
            let t = self.lines.entry(m.id).or_insert_with(|| LineTrack::new(m.id));
            t.observations.push(LineObservation::new(frame.frame_id, m.start, m.end));
            if let Some(pv) = m.vp {
                t.vp_observations.push(VpObservation { frame_id: frame.frame_id, pv });
            }
        }
    }

    /// Removes every track not observed in `frame_id` and returns those with
    /// at least `min_len` observations.
    pub fn take_lost(&mut self, frame_id: u64, min_len: usize) -> (Vec<PointTrack<T>>, Vec<LineTrack<T>>) {
        let lost_p: Vec<u64> = self
            .points
            .iter()
            .filter(|(_, t)| t.observations.last().is_none_or(|o| o.frame_id != frame_id))
            .map(|(id, _)| *id)
            .collect();
        let lost_l: Vec<u64> = self
            .lines
            .iter()
            .filter(|(_, t)| t.observations.last().is_none_or(|o| o.frame_id != frame_id))
            .map(|(id, _)| *id)
            .collect();
        let points = lost_p
            .iter()
            .filter_map(|id| self.points.remove(id))
            .filter(|t| t.observations.len() >= min_len)
            .collect();
        let lines = lost_l
            .iter()
            .filter_map(|id| self.lines.remove(id))
            .filter(|t| t.observations.len() >= min_len)
            .collect();
        (points, lines)
    }

    /// Prepares for dropping clone `frame_id`: mature tracks that saw it are
    /// removed and returned, shorter ones forget that observation.
    pub fn take_marginalized(&mut self, frame_id: u64, min_len: usize) -> (Vec<PointTrack<T>>, Vec<LineTrack<T>>) {
        let mut points = Vec::new();
        let ids: Vec<u64> = self.points.keys().copied().collect();
        for id in ids {
            let t = self.points.get_mut(&id).expect("key exists");
            if !t.observations.iter().any(|o| o.frame_id == frame_id) {
                continue;
            }
            if t.observations.len() >= min_len {
                points.push(self.points.remove(&id).expect("key exists"));
            } else {
                t.observations.retain(|o| o.frame_id != frame_id);
                if t.observations.is_empty() {
                    self.points.remove(&id);
                }
            }
        }
        let mut lines = Vec::new();
        let ids: Vec<u64> = self.lines.keys().copied().collect();
        for id in ids {
            let t = self.lines.get_mut(&id).expect("key exists");
            if !t.observations.iter().any(|o| o.frame_id == frame_id) {
                continue;
            }
            if t.observations.len() >= min_len {
                lines.push(self.lines.remove(&id).expect("key exists"));
            } else {
                t.observations.retain(|o| o.frame_id != frame_id);
                t.vp_observations.retain(|o| o.frame_id != frame_id);
                if t.observations.is_empty() {
                    self.lines.remove(&id);
                }
            }
        }
        (points, lines)
    }
}

/// Tracks that ended at `current_frame` plus, if a clone is about to be
/// marginalized, the mature tracks that observed it.
pub fn collect_mature_features<T: Real>(
    tracker: &mut FeatureTracker<T>,
    current_frame: u64,
    marginalized: Option<u64>,
    min_len: usize,
) -> (Vec<PointTrack<T>>, Vec<LineTrack<T>>) {
    let (mut points, mut lines) = match marginalized {
        Some(f) => tracker.take_marginalized(f, min_len),
        None => (Vec::new(), Vec::new()),
    };
    let (p, l) = tracker.take_lost(current_frame, min_len);
    points.extend(p);
    lines.extend(l);
    (points, lines)
}

/// Lazily filled χ² quantiles by degrees of freedom.
#[derive(Debug, Clone)]
pub struct Chi2Table {
    confidence: f64,
    cache: Vec<f64>,
}

impl Chi2Table {
    pub fn new(confidence: f64) -> Self {
        Self { confidence, cache: Vec::new() }
    }

    pub fn threshold(&mut self, dof: usize) -> f64 {
        if dof == 0 {
            return 0.0;
        }
        while self.cache.len() < dof {
            let k = self.cache.len() + 1;
            let q = ChiSquared::new(k as f64).map(|d| d.inverse_cdf(self.confidence)).unwrap_or(f64::INFINITY);
            self.cache.push(q);
        }
        self.cache[dof - 1]
    }
}

/// Columns of `h` that contain a nonzero entry.
pub fn support<T: Real>(h: &DMatrix<T>) -> Vec<usize> {
    (0..h.ncols()).filter(|&c| h.column(c).iter().any(|v| *v != T::zero())).collect()
}

fn select_columns<T: Real>(h: &DMatrix<T>, cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(h.nrows(), cols.len(), |r, c| h[(r, cols[c])])
}

fn select_block<T: Real>(p: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| p[(rows[r], cols[c])])
}

/// `HPHᵀ + R`, touching only the columns where `H` is nonzero.
pub fn innovation_covariance<T: Real>(system: &StackedSystem<T>, cov: &CovarianceMatrix<T>) -> DMatrix<T> {
    let cols = support(&system.h);
    let hs = select_columns(&system.h, &cols);
    let ps = select_block(cov, &cols, &cols);
    let mut s = &hs * ps * hs.transpose() + &system.noise;
    symmetrize(&mut s);
    s
}

/// Mahalanobis test of the residual against its predicted covariance.
pub fn mahalanobis<T: Real>(system: &StackedSystem<T>, cov: &CovarianceMatrix<T>) -> Option<f64> {
    if system.rows() == 0 {
        return Some(0.0);
    }
    let s = innovation_covariance(system, cov);
    let ch = s.cholesky()?;
    let y = ch.solve(&system.r);
    Some(to_f64(system.r.dot(&y)))
}

pub fn chi2_gate<T: Real>(system: &StackedSystem<T>, cov: &CovarianceMatrix<T>, table: &mut Chi2Table) -> bool {
    match mahalanobis(system, cov) {
        Some(d) => d < table.threshold(system.rows()),
        None => false,
    }
}

fn is_diagonal<T: Real>(m: &DMatrix<T>) -> bool {
    m.column_iter().enumerate().all(|(j, c)| c.iter().enumerate().all(|(i, v)| i == j || *v == T::zero()))
}

/// Whitens and triangularizes the system, keeping at most one row per
/// nonzero column.
pub fn qr_compress<T: Real>(system: &StackedSystem<T>) -> Result<StackedSystem<T>> {
    let m = system.rows();
    let cols = support(&system.h);
    let k = cols.len();
    if m <= k || m == 0 {
        return Ok(system.clone());
    }

    let mut aug = DMatrix::zeros(m, k + 1);
    aug.view_mut((0, 0), (m, k)).copy_from(&select_columns(&system.h, &cols));
    aug.set_column(k, &system.r);
    let diag = system.noise.diagonal();
    if is_diagonal(&system.noise) {
        for (i, s) in diag.iter().enumerate() {
            if !(*s > T::zero()) {
                return Err(Error::SingularInnovation);
            }
            let mut row = aug.row_mut(i);
            row /= s.sqrt();
        }
    } else {
        let ch = system.noise.clone().cholesky().ok_or(Error::SingularInnovation)?;
        let l = ch.l();
        if !l.solve_lower_triangular_mut(&mut aug) {
            return Err(Error::SingularInnovation);
        }
    }

    let r_aug = aug.qr().r();
    let mut h = DMatrix::zeros(k, system.h.ncols());
    for (j, &c) in cols.iter().enumerate() {
        for i in 0..k {
            h[(i, c)] = r_aug[(i, j)];
        }
    }
    let r = DVector::from_fn(k, |i, _| r_aug[(i, k)]);
    Ok(StackedSystem { h, r, noise: DMatrix::identity(k, k) })
}

/// EKF correction with Joseph-form covariance. Leaves state and covariance
/// untouched if the innovation covariance is not positive definite.
pub fn kalman_update<T: Real>(
    state: &mut VioState<T>,
    cov: &mut CovarianceMatrix<T>,
    system: &StackedSystem<T>,
    model: ErrorModel,
) -> Result<()> {
    let n = cov.nrows();
    if system.h.ncols() != n || state.dim() != n {
        return Err(Error::Dimension { expected: n, got: system.h.ncols() });
    }
    if system.rows() == 0 {
        return Ok(());
    }
    let cols = support(&system.h);
    let hs = select_columns(&system.h, &cols);
    // P Hᵀ only needs the columns of P matching the support of H.
    let p_cols = DMatrix::from_fn(n, cols.len(), |r, c| cov[(r, cols[c])]);
    let pht = &p_cols * hs.transpose();
    let mut s = &hs * select_rows(&pht, &cols) + &system.noise;
    symmetrize(&mut s);
    let s_full = s.clone();
    let ch = s.cholesky().ok_or(Error::SingularInnovation)?;
    let linv = lower_triangular_inverse(&ch.l());
    let k = &pht * (linv.transpose() * &linv);

    let delta = &k * &system.r;
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite correction".into()));
    }
    apply_correction_in_place(state, &delta, model)?;

    // (I − KH) P (I − KH)ᵀ + K R Kᵀ with B = PHᵀ: P − K Bᵀ + (K S − B) Kᵀ.
    let mut next = cov.clone();
    next.gemm(-T::one(), &k, &pht.transpose(), T::one());
    let mut m = pht;
    m.gemm(T::one(), &k, &s_full, -T::one());
    next.gemm(T::one(), &m, &k.transpose(), T::one());
    symmetrize(&mut next);
    *cov = next;
    Ok(())
}

/// Inverse of a nonsingular lower-triangular matrix, column by column.
fn lower_triangular_inverse<T: Real>(l: &DMatrix<T>) -> DMatrix<T> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut col = DVector::zeros(n - j);
        col[0] = T::one();
        l.view((j, j), (n - j, n - j)).solve_lower_triangular_unchecked_mut(&mut col);
        inv.view_mut((j, j), (n - j, 1)).copy_from(&col);
    }
    inv
}

fn select_rows<T: Real>(m: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Smallest eigenvalue, used by consistency checks.
pub fn min_eigenvalue<T: Real>(cov: &CovarianceMatrix<T>) -> T {
    cov.clone().symmetric_eigenvalues().min()
}

/// `χ²` quantile helper for callers without a table.
pub fn chi2_quantile(dof: usize, confidence: f64) -> f64 {
    Chi2Table::new(confidence).threshold(dof)
}
