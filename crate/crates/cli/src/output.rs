use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use covsteer::moments::MomentTable;
use covsteer::montecarlo::{covariance_ellipse, SimulationBatch};
use covsteer::scp::FeasibilityReport;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::Failure;

pub fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Failure::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

/// State mean and covariance per step, long format.
pub fn moments_csv<W: Write>(w: &mut W, tables: &[MomentTable]) -> std::io::Result<()> {
    writeln!(w, "# covsteer moments v1")?;
    writeln!(w, "time,quantity,i,j,value")?;
    for t in tables {
        for (i, v) in t.state_mean().iter().enumerate() {
            writeln!(w, "{},mean,{i},,{v:e}", t.time)?;
        }
        let c = t.state_cov();
        for j in 0..c.ncols() {
            for i in 0..=j {
                writeln!(w, "{},cov,{i},{j},{:e}", t.time, c[(i, j)])?;
            }
        }
    }
    Ok(())
}

/// Ellipse points of the chosen state pair, from the samples and from the
/// moment engine.
pub fn ellipses_csv<W: Write>(
    w: &mut W,
    batch: &SimulationBatch,
    tables: &[MomentTable],
    states: [usize; 2],
    sigma: f64,
    points: usize,
) -> std::io::Result<()> {
    let [a, b] = states;
    writeln!(w, "# covsteer ellipses v1 states={a},{b} sigma={sigma}")?;
    writeln!(w, "time,source,point,x,y")?;
    let pick = |mean: &[f64], cov: &DMatrix<f64>| {
        let sub = DMatrix::from_fn(2, 2, |i, j| cov[(states[i], states[j])]);
        covariance_ellipse([mean[a], mean[b]], &sub, sigma, points)
    };
    for (s, t) in batch.stats.iter().zip(tables) {
        for (source, pts) in [
            ("empirical", pick(s.mean.as_slice(), &s.cov)),
            ("predicted", pick(t.state_mean().as_slice(), t.state_cov())),
        ] {
            for (k, p) in pts.iter().enumerate() {
                writeln!(w, "{},{source},{k},{:e},{:e}", s.time, p[0], p[1])?;
            }
        }
    }
    Ok(())
}

pub fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.5}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn print_report(rep: &FeasibilityReport) {
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    println!("  terminal mean gap {:.3e} [{}]", rep.terminal_mean_gap, mark(rep.terminal_mean_ok));
    println!(
        "  terminal covariance excess {:.3e} ({:?}) [{}]",
        rep.terminal_cov_excess,
        rep.terminal_mode,
        mark(rep.terminal_cov_ok)
    );
    if !rep.margins.is_empty() {
        println!("  smallest chance-constraint margin {:.3e}", rep.min_margin);
    }
    println!("  feasible: {}", rep.passed);
}

/// Largest entrywise gap between two table sequences over shared keys.
pub fn max_table_gap(a: &[MomentTable], b: &[MomentTable]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (k, v) in &x.mean {
            worst = worst.max(y.mean.get(k).map_or(f64::INFINITY, |w| (v - w).amax()));
        }
        for (k, m) in &x.xx {
            worst = worst.max(y.xx.get(k).map_or(f64::INFINITY, |w| (m - w).amax()));
        }
        for (k, v) in &x.xp {
            worst = worst.max(y.xp.get(k).map_or(f64::INFINITY, |w| (v - w).amax()));
        }
    }
    worst
}
