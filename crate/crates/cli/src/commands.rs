use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use plvio::estimator::Variant;
use plvio::evaluation::{monte_carlo, VariantSummary};
use plvio::geometry::{so3_log, Rotation};
use plvio::observability::analyze;
use plvio::simulator::{camera_extrinsics, generate, run_filter, run_stream, RunOutput};

use crate::config::ExperimentConfig;
use crate::output::{write_nees, write_plot_script, write_rmse, write_summary, write_traj, TrajRow};
use crate::replay::{write_bundle, BundlePaths, ReplayBundle};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "plvio", version, about = "Point-line-VP visual-inertial odometry experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON experiment configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Comma-separated list, e.g. `msckf,plv-iekf`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured variant once on one simulated dataset.
    Simulate {
        /// Also write the generated measurements as a replay bundle under `<out>/bundle`.
        #[arg(long)]
        dump: bool,
    },
    /// Paired Monte Carlo comparison of the configured variants.
    Montecarlo,
    /// Run one variant on a recorded CSV bundle.
    Replay {
        /// Directory holding imu.csv, points.csv and the optional files.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        imu: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        lines: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long, default_value = "plv-iekf")]
        variant: Variant,
    },
    /// Observability diagnostics along the simulated trajectory.
    Obscheck,
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(r) = common.runs {
        cfg.runs = Some(r);
    }
    if let Some(v) = &common.variants {
        cfg.variants = v.clone();
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli.common)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match cli.command {
        Command::Simulate { dump } => cmd_simulate(&cfg, dump),
        Command::Montecarlo => cmd_montecarlo(&cfg),
        Command::Replay { bundle, imu, points, lines, truth, init, frames, variant } => {
            let mut paths = match &bundle {
                Some(dir) => BundlePaths::in_dir(dir),
                None => BundlePaths::default(),
            };
            if let Some(p) = imu {
                paths.imu = p;
            }
            if let Some(p) = points {
                paths.points = p;
            }
            paths.lines = lines.or(paths.lines);
            paths.truth = truth.or(paths.truth);
            paths.init = init.or(paths.init);
            paths.frames = frames.or(paths.frames);
            if paths.imu.as_os_str().is_empty() || paths.points.as_os_str().is_empty() {
                return Err(CliError::Usage("replay needs --bundle or both --imu and --points".into()));
            }
            cmd_replay(&cfg, &paths, variant)
        }
        Command::Obscheck => cmd_obscheck(&cfg),
    }
}

fn traj_rows(run: &RunOutput) -> Vec<TrajRow> {
    run.samples
        .iter()
        .map(|s| TrajRow { t: s.t, pos: s.estimate.pos, rot: s.estimate.rot, truth: Some((s.truth.pos, s.truth.rot)) })
        .collect()
}

fn write_variant(out: &Path, summary: &VariantSummary) -> CliResult<()> {
    write_nees(&out.join(format!("nees_{}.csv", summary.variant)), &summary.nees)?;
    write_rmse(&out.join(format!("rmse_{}.csv", summary.variant)), &summary.rmse)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, dump: bool) -> CliResult<()> {
    let seed = cfg.seed();
    let data = generate(&cfg.sim, seed)?;
    let out = &cfg.out_dir;
    if dump {
        write_bundle(&out.join("bundle"), &data)?;
    }
    let update = cfg.update_config();
    let mut summaries = Vec::new();
    for &v in &cfg.variants {
        let run = run_filter::<f64>(&data, cfg.sim.estimator_config(v, &update, &cfg.gn), v, &cfg.sim.initial_sigma, seed)?;
        write_traj(&out.join(format!("traj_{v}.csv")), &traj_rows(&run))?;
        let summary = VariantSummary::from_runs(v, std::slice::from_ref(&run), cfg.nees);
        write_variant(out, &summary)?;
        println!(
            "{v}: frames {} anees {:.3} final position error {:.3} m{}",
            run.samples.len(),
            summary.anees,
            summary.final_rmse,
            run.aborted.as_deref().map(|e| format!(" (aborted: {e})")).unwrap_or_default()
        );
        summaries.push(summary);
    }
    write_summary(&out.join("summary.csv"), &summaries)?;
    write_plot_script(&out.join("plot.gp"), &names(&cfg.variants))
}

fn names(variants: &[Variant]) -> Vec<String> {
    variants.iter().map(|v| v.to_string()).collect()
}

pub fn cmd_montecarlo(cfg: &ExperimentConfig) -> CliResult<()> {
    let summaries = monte_carlo(&cfg.setup(), &cfg.variants, cfg.runs(), cfg.seed())?;
    for s in &summaries {
        write_variant(&cfg.out_dir, s)?;
        println!(
            "{}: anees {:.3} final rmse {:.3} m mean rmse {:.3} m ({} of {} runs completed)",
            s.variant,
            s.anees,
            s.final_rmse,
            s.mean_rmse,
            s.completed,
            s.completed + s.aborted.len()
        );
    }
    write_summary(&cfg.out_dir.join("summary.csv"), &summaries)?;
    write_plot_script(&cfg.out_dir.join("plot.gp"), &names(&cfg.variants))
}

pub fn cmd_replay(cfg: &ExperimentConfig, paths: &BundlePaths, variant: Variant) -> CliResult<()> {
    let bundle = ReplayBundle::load(paths)?;
    let mut config = cfg.sim.estimator_config(variant, &cfg.update_config(), &cfg.gn);
    if variant.uses_lines() && !bundle.has_lines {
        log::warn!("bundle has no line tracks; {variant} runs on points only");
        config.use_lines = false;
    }
    let start = bundle.start_state(config.model)?;
    let stream = run_stream::<f64>(
        &bundle.imu,
        &bundle.frames,
        &start,
        &cfg.sim.initial_sigma.covariance(),
        &camera_extrinsics(),
        config,
        |_| Ok(()),
    )?;
    let rows: Vec<TrajRow> = stream
        .estimates
        .iter()
        .map(|e| TrajRow {
            t: e.t,
            pos: e.estimate.pos,
            rot: e.estimate.rot,
            truth: bundle.truth_at(e.t).map(|p| (p.pos, p.rot)),
        })
        .collect();
    write_traj(&cfg.out_dir.join(format!("traj_{variant}.csv")), &rows)?;

    let errors: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.truth.as_ref().map(|(p, rot)| ((r.pos - p).norm_squared(), rotation_error_sq(rot, &r.rot))))
        .collect();
    if !errors.is_empty() {
        let n = errors.len() as f64;
        let pos = (errors.iter().map(|e| e.0).sum::<f64>() / n).sqrt();
        let rot = (errors.iter().map(|e| e.1).sum::<f64>() / n).sqrt();
        std::fs::write(
            cfg.out_dir.join("replay_summary.csv"),
            format!("variant,frames,pos_rmse,rot_rmse\n{variant},{},{pos},{rot}\n", errors.len()),
        )?;
        println!("{variant}: {} frames, position RMSE {pos:.4} m, rotation RMSE {rot:.5} rad", errors.len());
    }
    if let Some(e) = stream.aborted {
        return Err(CliError::Runtime(format!("{variant} stopped early: {e}")));
    }
    Ok(())
}

fn rotation_error_sq(truth: &Rotation<f64>, est: &Rotation<f64>) -> f64 {
    so3_log(&(truth * est.inverse())).norm_squared()
}

pub fn cmd_obscheck(cfg: &ExperimentConfig) -> CliResult<()> {
    let report = analyze(&cfg.sim, cfg.obscheck.t0, cfg.obscheck.frames)?;
    let path = cfg.out_dir.join("obscheck.csv");
    report.write_csv(&path)?;
    for r in &report.rows {
        println!("{:<34} {:>12.4e}  {}", r.label, r.value, if r.pass { "pass" } else { "FAIL" });
    }
    Ok(())
}
