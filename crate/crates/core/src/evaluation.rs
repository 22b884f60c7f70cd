//! RMSE and NEES over Monte Carlo runs.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimator::Variant;
use crate::geometry::so3_log;
use crate::simulator::{generate, run_filter, EvalSample, RunOutput, SimConfig};
use crate::state::{error_between, imu_pose_error, ErrorModel, ImuState, VioState, POS, THETA};
use crate::triangulation::GnSettings;
use crate::update::UpdateConfig;

/// Which part of the IMU state enters the NEES.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeesMode {
    #[default]
    Pose,
    FullImu,
}

impl NeesMode {
    pub fn dof(self) -> usize {
        match self {
            NeesMode::Pose => 6,
            NeesMode::FullImu => 15,
        }
    }
}

const POSE_INDEX: [usize; 6] = [THETA, THETA + 1, THETA + 2, POS, POS + 1, POS + 2];

/// 6-DoF pose NEES in the filter's own error chart, divided by 6.
pub fn pose_nees(truth: &ImuState<f64>, estimate: &ImuState<f64>, cov: &SMatrix<f64, 15, 15>, model: ErrorModel) -> Option<f64> {
    let e: Vector6<f64> = imu_pose_error(truth, estimate, model);
    let p = Matrix6::from_fn(|r, c| cov[(POSE_INDEX[r], POSE_INDEX[c])]);
    let ch = p.cholesky()?;
    Some(e.dot(&ch.solve(&e)) / 6.0)
}

/// 15-DoF IMU NEES divided by 15.
pub fn imu_nees(truth: &ImuState<f64>, estimate: &ImuState<f64>, cov: &SMatrix<f64, 15, 15>, model: ErrorModel) -> Option<f64> {
    let extr = crate::simulator::camera_extrinsics();
    let xt = VioState::new(*truth, extr, 1);
    let xe = VioState::new(*estimate, extr, 1);
    let e: DVector<f64> = error_between(&xt, &xe, model).ok()?;
    let ch = DMatrix::from_fn(15, 15, |r, c| cov[(r, c)]).cholesky()?;
    Some(e.dot(&ch.solve(&e)) / 15.0)
}

pub fn sample_nees(s: &EvalSample, model: ErrorModel, mode: NeesMode) -> Option<f64> {
    match mode {
        NeesMode::Pose => pose_nees(&s.truth, &s.estimate, &s.imu_cov, model),
        NeesMode::FullImu => imu_nees(&s.truth, &s.estimate, &s.imu_cov, model),
    }
}

pub fn rotation_error(truth: &ImuState<f64>, estimate: &ImuState<f64>) -> f64 {
    so3_log(&(truth.rot * estimate.rot.inverse())).norm()
}

/// Per-run error and NEES traces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub t: Vec<f64>,
    pub pos_err: Vec<f64>,
    pub rot_err: Vec<f64>,
    /// `None` where the covariance block was singular.
    pub nees: Vec<Option<f64>>,
    pub anees: f64,
    pub excluded: usize,
}

impl RunMetrics {
    pub fn from_run(run: &RunOutput, mode: NeesMode) -> Self {
        let mut m = RunMetrics { t: Vec::new(), pos_err: Vec::new(), rot_err: Vec::new(), nees: Vec::new(), anees: 0.0, excluded: 0 };
        for s in &run.samples {
            m.t.push(s.t);
            m.pos_err.push((s.estimate.pos - s.truth.pos).norm());
            m.rot_err.push(rotation_error(&s.truth, &s.estimate));
            m.nees.push(sample_nees(s, run.model, mode));
        }
        let valid: Vec<f64> = m.nees.iter().flatten().copied().collect();
        m.excluded = m.nees.len() - valid.len();
        m.anees = if valid.is_empty() { f64::NAN } else { valid.iter().sum::<f64>() / valid.len() as f64 };
        m
    }
}

/// Per-timestep RMSE over runs: `(t, position m, orientation rad)`.
pub fn rmse_series(runs: &[RunMetrics]) -> Result<Vec<(f64, f64, f64)>> {
    let first = runs.first().ok_or(Error::Config("rmse_series needs at least one run".into()))?;
    let n = runs.iter().map(|r| r.t.len()).min().unwrap_or(0);
    let k = runs.len() as f64;
    Ok((0..n)
        .map(|i| {
            let p = runs.iter().map(|r| r.pos_err[i].powi(2)).sum::<f64>() / k;
            let q = runs.iter().map(|r| r.rot_err[i].powi(2)).sum::<f64>() / k;
            (first.t[i], p.sqrt(), q.sqrt())
        })
        .collect())
}

/// Per-timestep NEES averaged over the runs with a valid sample.
pub fn nees_series(runs: &[RunMetrics]) -> Vec<(f64, f64)> {
    let n = runs.iter().map(|r| r.t.len()).min().unwrap_or(0);
    (0..n)
        .filter_map(|i| {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.nees[i]).collect();
            (!v.is_empty()).then(|| (runs[0].t[i], v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}

/// Aggregate metrics of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub completed: usize,
    /// Seeds of runs that were aborted.
    pub aborted: Vec<u64>,
    pub anees: f64,
    pub nees: Vec<(f64, f64)>,
    pub rmse: Vec<(f64, f64, f64)>,
    pub final_rmse: f64,
    pub mean_rmse: f64,
    pub excluded_nees: usize,
}

impl VariantSummary {
    pub fn from_runs(variant: Variant, runs: &[RunOutput], mode: NeesMode) -> Self {
        let (ok, bad): (Vec<&RunOutput>, Vec<&RunOutput>) = runs.iter().partition(|r| r.aborted.is_none());
        let metrics: Vec<RunMetrics> = ok.iter().map(|r| RunMetrics::from_run(r, mode)).collect();
        let nees = nees_series(&metrics);
        let rmse = rmse_series(&metrics).unwrap_or_default();
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 { f64::NAN } else { s / n as f64 }
        };
        VariantSummary {
            variant,
            completed: ok.len(),
            aborted: bad.iter().map(|r| r.seed).collect(),
            anees: mean(&mut nees.iter().map(|x| x.1)),
            final_rmse: rmse.last().map_or(f64::NAN, |x| x.1),
            mean_rmse: mean(&mut rmse.iter().map(|x| x.1)),
            excluded_nees: metrics.iter().map(|m| m.excluded).sum(),
            nees,
            rmse,
        }
    }
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSetup {
    pub sim: SimConfig,
    pub update: UpdateConfig,
    pub gn: GnSettings,
    pub nees: NeesMode,
}

impl MonteCarloSetup {
    pub fn new(sim: SimConfig) -> Self {
        Self { update: sim.update_config(), sim, gn: GnSettings::default(), nees: NeesMode::Pose }
    }
}

/// Runs every variant on the worlds generated from `base_seed..base_seed+n`.
/// Each seed's measurements are shared by all variants.
pub fn monte_carlo_runs(setup: &MonteCarloSetup, variants: &[Variant], n_runs: usize, base_seed: u64) -> Result<Vec<Vec<RunOutput>>> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let per_seed: Vec<Result<Vec<RunOutput>>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            let data = generate(&setup.sim, seed)?;
            variants
                .iter()
                .map(|&v| {
                    let cfg = setup.sim.estimator_config(v, &setup.update, &setup.gn);
                    run_filter::<f64>(&data, cfg, v, &setup.sim.initial_sigma, seed)
                })
                .collect()
        })
        .collect();
    let mut by_variant = vec![Vec::with_capacity(n_runs); variants.len()];
    for runs in per_seed {
        for (k, r) in runs?.into_iter().enumerate() {
            by_variant[k].push(r);
        }
    }
    Ok(by_variant)
}

pub fn monte_carlo(setup: &MonteCarloSetup, variants: &[Variant], n_runs: usize, base_seed: u64) -> Result<Vec<VariantSummary>> {
    let runs = monte_carlo_runs(setup, variants, n_runs, base_seed)?;
    Ok(variants.iter().zip(&runs).map(|(&v, r)| VariantSummary::from_runs(v, r, setup.nees)).collect())
}

/// Two-sided band for the ANEES of `runs` samples of a `dof`-dimensional
/// error, dof-normalized.
pub fn anees_band(dof: usize, runs: usize, confidence: f64) -> (f64, f64) {
    let k = (dof * runs) as f64;
    let chi = ChiSquared::new(k).expect("positive degrees of freedom");
    let a = (1.0 - confidence) / 2.0;
    (chi.inverse_cdf(a) / k, chi.inverse_cdf(1.0 - a) / k)
}

/// Constant-velocity Kalman filter on a 2D point, run `runs` times. Returns
/// the per-step ANEES (dof 4) and the band for one step's average over the
/// independent runs.
pub fn linear_gaussian_fixture(runs: usize, steps: usize, seed: u64) -> (Vec<f64>, (f64, f64)) {
    let dt = 0.1;
    let mut f = SMatrix::<f64, 4, 4>::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let q = SMatrix::<f64, 4, 4>::from_diagonal(&nalgebra::Vector4::new(1e-4, 1e-4, 1e-3, 1e-3));
    let h = SMatrix::<f64, 2, 4>::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r = SMatrix::<f64, 2, 2>::identity() * 0.01;
    let p0 = SMatrix::<f64, 4, 4>::identity() * 0.1;
    let lq = q.cholesky().expect("spd").l();
    let lr = r.cholesky().expect("spd").l();
    let l0 = p0.cholesky().expect("spd").l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; steps];
    for _ in 0..runs {
        let mut gauss4 = || nalgebra::Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let mut x = l0 * gauss4();
        let mut xe = nalgebra::Vector4::zeros();
        let mut p = p0;
        for s in sum.iter_mut() {
            x = f * x + lq * gauss4();
            xe = f * xe;
            p = f * p * f.transpose() + q;
            let v: nalgebra::Vector2<f64> = nalgebra::Vector2::new(gauss4()[0], gauss4()[1]);
            let z = h * x + lr * v;
            let sm = h * p * h.transpose() + r;
            let k = p * h.transpose() * sm.try_inverse().expect("spd");
            xe += k * (z - h * xe);
            let a = SMatrix::<f64, 4, 4>::identity() - k * h;
            p = a * p * a.transpose() + k * r * k.transpose();
            let e = x - xe;
            *s += e.dot(&(p.try_inverse().expect("spd") * e)) / 4.0;
        }
    }
    let per_step = sum.into_iter().map(|s| s / runs as f64).collect();
    (per_step, anees_band(4, runs, 0.99))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::state::apply_correction;
    use nalgebra::Vector3;
    use rand::Rng;

    fn spd15(rng: &mut impl Rng) -> SMatrix<f64, 15, 15> {
        let a = SMatrix::<f64, 15, 15>::from_fn(|_, _| rng.random_range(-0.1..0.1));
        a * a.transpose() + SMatrix::identity() * 1e-3
    }

    fn truth() -> ImuState<f64> {
        ImuState { rot: so3_exp(&Vector3::new(0.2, -0.1, 1.0)), vel: Vector3::new(1.0, 2.0, 0.0), pos: Vector3::new(3.0, -1.0, 0.5), bg: Vector3::zeros(), ba: Vector3::zeros() }
    }

    #[test]
    fn zero_error_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = spd15(&mut rng);
        assert_eq!(pose_nees(&truth(), &truth(), &p, ErrorModel::RightInvariant), Some(0.0));
    }

    #[test]
    fn sampled_errors_average_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = spd15(&mut rng);
        let l = DMatrix::from_fn(15, 15, |r, c| p[(r, c)]).cholesky().unwrap().l();
        let x = truth();
        for model in [ErrorModel::StandardAdditive, ErrorModel::RightInvariant] {
            for mode in [NeesMode::Pose, NeesMode::FullImu] {
                let n = 10_000;
                let mut sum = 0.0;
                for _ in 0..n {
                    let xi = &l * DVector::from_fn(15, |_, _| StandardNormal.sample(&mut rng));
                    let est = VioState::new(x, crate::simulator::camera_extrinsics(), 1);
                    // Truth is the estimate corrected by ξ.
                    let t = apply_correction(&est, &xi, model).unwrap().imu;
                    let s = EvalSample { t: 0.0, truth: t, estimate: x, imu_cov: p };
                    sum += sample_nees(&s, model, mode).unwrap();
                }
                let mean = sum / n as f64;
                assert!((mean - 1.0).abs() < 0.05, "{model:?} {mode:?}: {mean}");
            }
        }
    }

    #[test]
    fn scaling_covariance_scales_nees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = spd15(&mut rng);
        let mut est = truth();
        est.pos += Vector3::new(0.01, 0.02, -0.01);
        let a = pose_nees(&truth(), &est, &p, ErrorModel::StandardAdditive).unwrap();
        let b = pose_nees(&truth(), &est, &(p * 4.0), ErrorModel::StandardAdditive).unwrap();
        assert!((a / b - 4.0).abs() < 1e-9);
    }

    #[test]
    fn singular_blocks_are_excluded() {
        let p = SMatrix::<f64, 15, 15>::zeros();
        assert_eq!(pose_nees(&truth(), &truth(), &p, ErrorModel::RightInvariant), None);
        let run = RunOutput {
            variant: Variant::Iekf,
            model: ErrorModel::RightInvariant,
            seed: 0,
            samples: vec![EvalSample { t: 0.0, truth: truth(), estimate: truth(), imu_cov: p }],
            stats: Default::default(),
            aborted: None,
        };
        let m = RunMetrics::from_run(&run, NeesMode::Pose);
        assert_eq!(m.excluded, 1);
    }

    fn metrics(errs: &[f64]) -> RunMetrics {
        RunMetrics {
            t: (0..errs.len()).map(|i| i as f64).collect(),
            pos_err: errs.to_vec(),
            rot_err: vec![0.0; errs.len()],
            nees: vec![Some(1.0); errs.len()],
            anees: 1.0,
            excluded: 0,
        }
    }

    #[test]
    fn rmse_examples() {
        let zero = rmse_series(&[metrics(&[0.0, 0.0])]).unwrap();
        assert!(zero.iter().all(|x| x.1 == 0.0 && x.2 == 0.0));
        let one = rmse_series(&[metrics(&[1.0; 3]), metrics(&[1.0; 3])]).unwrap();
        assert!(one.iter().all(|x| x.1 == 1.0));
        // Opposite errors of equal size.
        let mut a = truth();
        let mut b = truth();
        a.pos.x += 0.3;
        b.pos.x -= 0.3;
        let mk = |e: ImuState<f64>| RunOutput {
            variant: Variant::Msckf,
            model: ErrorModel::StandardAdditive,
            seed: 0,
            samples: vec![EvalSample { t: 0.0, truth: truth(), estimate: e, imu_cov: SMatrix::identity() }],
            stats: Default::default(),
            aborted: None,
        };
        let ms = [RunMetrics::from_run(&mk(a), NeesMode::Pose), RunMetrics::from_run(&mk(b), NeesMode::Pose)];
        assert!((rmse_series(&ms).unwrap()[0].1 - 0.3).abs() < 1e-12);
        assert!(rmse_series(&[]).is_err());
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let a = metrics(&[1.0, 2.0]);
        let b = metrics(&[3.0, 0.5]);
        assert_eq!(rmse_series(&[a.clone(), b.clone()]).unwrap(), rmse_series(&[b, a]).unwrap());
    }

    #[test]
    fn toy_filter_is_consistent() {
        let (series, (lo, hi)) = linear_gaussian_fixture(200, 50, 7);
        let anees = series.iter().sum::<f64>() / series.len() as f64;
        assert!(lo < anees && anees < hi, "{lo} {anees} {hi}");
    }

    #[test]
    fn band_contains_one() {
        let (lo, hi) = anees_band(6, 30, 0.99);
        assert!(lo < 1.0 && 1.0 < hi);
    }

    #[test]
    fn monte_carlo_single_run_matches_direct_run() {
        let sim = SimConfig { duration: 4.0, loops: 1, ..SimConfig::default() };
        let setup = MonteCarloSetup::new(sim.clone());
        let runs = monte_carlo_runs(&setup, &[Variant::Iekf], 1, 5).unwrap();
        let direct = crate::simulator::run_simulation(&sim, Variant::Iekf, 5).unwrap();
        assert_eq!(runs[0][0], direct);
        let a = monte_carlo(&setup, &Variant::ALL, 2, 5).unwrap();
        let b = monte_carlo(&setup, &Variant::ALL, 2, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.completed == 2));
    }
}
