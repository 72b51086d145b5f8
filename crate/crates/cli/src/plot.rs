//! Plot data files: binary PGM heatmaps and CSV tables.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use helioprop::grid::VelocityCube;
use helioprop::metrics::MetricsReport;

use crate::commands::{load_input, require};
use crate::PlotArgs;

fn range_of<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// 8-bit P5 image, one row per latitude (north first), one column per longitude.
pub fn pgm(cube: &VelocityCube, r: usize, lo: f64, hi: f64) -> Vec<u8> {
    let s = cube.slice(r);
    let (h, w) = s.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(s.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// `bin_lo,bin_hi,count`; values outside `[lo, hi]` land in the end bins.
pub fn histogram_csv(cube: &VelocityCube, r: usize, bins: usize, lo: f64, hi: f64) -> String {
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in cube.slice(r).iter() {
        let k = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        counts[(k.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (k, c) in counts.iter().enumerate() {
        let a = lo + width * k as f64;
        let b = if k + 1 == bins { hi } else { lo + width * (k + 1) as f64 };
        writeln!(s, "{a},{b},{c}").unwrap();
    }
    s
}

/// One row per scored radius: `radius_index,radius,mse,edge_mse,emd,uiqi`.
pub fn error_vs_radius_csv(report: &MetricsReport) -> String {
    let mut s = String::from("radius_index,radius,mse,edge_mse,emd,uiqi\n");
    for (k, (r, m)) in report.radii.iter().zip(&report.per_slice).enumerate() {
        let edge = m.edge_mse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{r},{},{edge},{},{}", k + 1, m.mse, m.emd, m.uiqi).unwrap();
    }
    s
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn plot(a: &PlotArgs) -> anyhow::Result<()> {
    if a.bins == 0 {
        bail!("--bins must be positive");
    }
    let cube = a.cube.as_deref().map(load_input).transpose()?;
    let report = match &a.report {
        Some(p) => {
            require(p)?;
            Some(MetricsReport::load_json(p)?)
        }
        None => None,
    };
    if let Some(cube) = &cube {
        if let Some(&bad) = a.radii.iter().find(|&&r| r >= cube.nr()) {
            bail!("radius index {bad} out of range: cube has radii 0..={}", cube.nr() - 1);
        }
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut written = 0;
    if let Some(cube) = &cube {
        for &r in &a.radii {
            let (lo, hi) = range_of(cube.slice(r).iter());
            let (lo, hi) = (a.vmin.unwrap_or(lo), a.vmax.unwrap_or(hi));
            if hi < lo {
                bail!("empty value range [{lo}, {hi}]");
            }
            write(&a.out_dir.join(format!("heatmap_r{r:03}.pgm")), pgm(cube, r, lo, hi))?;
            write(&a.out_dir.join(format!("hist_r{r:03}.csv")), histogram_csv(cube, r, a.bins, lo, hi))?;
            written += 2;
        }
    }
    if let Some(report) = &report {
        write(&a.out_dir.join("error_vs_radius.csv"), error_vs_radius_csv(report))?;
        written += 1;
    }
    println!("wrote {written} files to {}", a.out_dir.display());
    Ok(())
}
