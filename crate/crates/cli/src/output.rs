//! CSV and gnuplot writers. Floats use Rust's shortest round-trip formatting so files are
//! byte-for-byte reproducible.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use plvio::evaluation::VariantSummary;
use plvio::geometry::Rotation;

use crate::CliResult;

pub struct TrajRow {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub rot: Rotation<f64>,
    pub truth: Option<(Vector3<f64>, Rotation<f64>)>,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn quat(r: &Rotation<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(r).into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    [q.w, q.i, q.j, q.k]
}

pub fn write_traj(path: &Path, rows: &[TrajRow]) -> CliResult<()> {
    let mut f = create(path)?;
    let with_truth = rows.iter().any(|r| r.truth.is_some());
    write!(f, "t,px,py,pz,qw,qx,qy,qz")?;
    if with_truth {
        write!(f, ",tpx,tpy,tpz,tqw,tqx,tqy,tqz")?;
    }
    writeln!(f)?;
    for r in rows {
        let q = quat(&r.rot);
        write!(f, "{},{},{},{},{},{},{},{}", r.t, r.pos.x, r.pos.y, r.pos.z, q[0], q[1], q[2], q[3])?;
        if with_truth {
            match &r.truth {
                Some((p, rot)) => {
                    let q = quat(rot);
                    write!(f, ",{},{},{},{},{},{},{}", p.x, p.y, p.z, q[0], q[1], q[2], q[3])?;
                }
                None => write!(f, ",,,,,,,")?,
            }
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_nees(path: &Path, series: &[(f64, f64)]) -> CliResult<()> {
    let mut f = create(path)?;
    writeln!(f, "t,nees")?;
    for (t, v) in series {
        writeln!(f, "{t},{v}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_rmse(path: &Path, series: &[(f64, f64, f64)]) -> CliResult<()> {
    let mut f = create(path)?;
    writeln!(f, "t,pos_rmse,rot_rmse")?;
    for (t, p, r) in series {
        writeln!(f, "{t},{p},{r}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, summaries: &[VariantSummary]) -> CliResult<()> {
    let mut f = create(path)?;
    writeln!(f, "variant,anees,final_rmse,mean_rmse,completed,aborted")?;
    for s in summaries {
        writeln!(f, "{},{},{},{},{},{}", s.variant, s.anees, s.final_rmse, s.mean_rmse, s.completed, s.aborted.len())?;
    }
    f.flush()?;
    Ok(())
}

/// Gnuplot script drawing NEES and RMSE for every variant.
pub fn write_plot_script(path: &Path, variants: &[String]) -> CliResult<()> {
    let mut f = create(path)?;
    let list = variants.join(" ");
    writeln!(f, "set datafile separator ','")?;
    writeln!(f, "set terminal pngcairo size 900,900")?;
    writeln!(f, "set output 'plots.png'")?;
    writeln!(f, "variants = \"{list}\"")?;
    writeln!(f, "set multiplot layout 2,1")?;
    writeln!(f, "set xlabel 't [s]'")?;
    writeln!(f, "set ylabel 'NEES'")?;
    writeln!(f, "plot for [v in variants] 'nees_'.v.'.csv' using 1:2 skip 1 with lines title v")?;
    writeln!(f, "set ylabel 'position RMSE [m]'")?;
    writeln!(f, "plot for [v in variants] 'rmse_'.v.'.csv' using 1:2 skip 1 with lines title v")?;
    writeln!(f, "unset multiplot")?;
    f.flush()?;
    Ok(())
}
