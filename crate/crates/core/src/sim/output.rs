//! CSV output. Floats use 17 significant digits so files round-trip exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::config::Variant;
use super::run::{McSummary, RunResult};
use crate::error::Result;

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory<W: Write>(res: &RunResult, mut out: W) -> Result<()> {
    write!(out, "k,true_px,true_py")?;
    for i in 1..=res.metrics.n_nodes {
        write!(out, ",node{i}_px,node{i}_py")?;
    }
    writeln!(out)?;
    for row in &res.trajectory {
        write!(out, "{},{},{}", row.k, f(row.truth[0]), f(row.truth[1]))?;
        for m in &row.fused {
            write!(out, ",{},{}", f(m[0]), f(m[1]))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per node and step. Vector innovations are written component-wise
/// as `;`-separated values; the scalar sensors here always produce one.
pub fn write_innovations<W: Write>(res: &RunResult, mut out: W) -> Result<()> {
    writeln!(out, "k,node,innovation,S,gain_norm")?;
    let steps = res.metrics.innovations.first().map_or(0, Vec::len);
    for j in 0..steps {
        for series in &res.metrics.innovations {
            let r = &series[j];
            let join = |v: &[f64]| v.iter().map(|&x| f(x)).collect::<Vec<_>>().join(";");
            writeln!(
                out,
                "{},{},{},{},{}",
                r.time,
                r.node + 1,
                join(r.innovation.as_slice()),
                join(r.innovation_cov.as_slice()),
                f(r.gain_norm)
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_stability<W: Write>(res: &RunResult, mut out: W) -> Result<()> {
    writeln!(out, "k,node,alpha,beta,gamma,conditions_met")?;
    for r in &res.metrics.contraction {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.time,
            r.node + 1,
            f(r.alpha_k),
            f(r.beta_k),
            f(r.gamma_k),
            r.conditions_met
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub rmse_px: f64,
    pub rmse_py: f64,
    pub msg_count: u64,
}

pub fn summary_rows(summary: &McSummary) -> Vec<SummaryRow> {
    summary
        .variants
        .iter()
        .map(|v| SummaryRow {
            variant: v.variant,
            rmse_px: v.mean_rmse_px,
            rmse_py: v.mean_rmse_py,
            msg_count: v.msg_count,
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "variant,rmse_px,rmse_py,msg_count")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.variant, f(r.rmse_px), f(r.rmse_py), r.msg_count)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `trajectory.csv`, `innovations.csv`, `stability.csv` and a one-row
/// `summary.csv` for a single run into `dir`.
pub fn write_run_csvs(res: &RunResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    write_trajectory(res, open("trajectory.csv")?)?;
    write_innovations(res, open("innovations.csv")?)?;
    write_stability(res, open("stability.csv")?)?;
    let row = SummaryRow {
        variant: res.metrics.variant,
        rmse_px: res.metrics.rmse_px,
        rmse_py: res.metrics.rmse_py,
        msg_count: res.metrics.msg_count,
    };
    write_summary(&[row], open("summary.csv")?)
}
