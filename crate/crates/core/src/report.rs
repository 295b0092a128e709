//! Heatmap images for confusion matrices and trade-off sweeps.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::harness::SweepRecord;
use crate::NUM_CLASSES;

/// Piecewise-linear dark-blue → teal → yellow ramp over `t` in [0, 1].
pub fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 3] = [(0.0, [68.0, 1.0, 84.0]), (0.5, [33.0, 145.0, 140.0]), (1.0, [253.0, 231.0, 37.0])];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let (lo, hi) = if t <= 0.5 { (STOPS[0], STOPS[1]) } else { (STOPS[1], STOPS[2]) };
    let u = (t - lo.0) / (hi.0 - lo.0);
    let c = |k: usize| (lo.1[k] + u * (hi.1[k] - lo.1[k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders `values[row][col]` as square cells of `cell` pixels, scaled to `[vmin, vmax]`.
pub fn heatmap(values: &[Vec<f64>], cell: u32, vmin: f64, vmax: f64) -> Result<RgbImage> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || values.iter().any(|r| r.len() != cols) || cell == 0 {
        return Err(Error::InvalidArgument("heatmap needs a non-empty rectangular grid".into()));
    }
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    let mut img = RgbImage::new(cols as u32 * cell, rows as u32 * cell);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = colormap((values[(y / cell) as usize][(x / cell) as usize] - vmin) / span);
    }
    Ok(img)
}

/// Row-normalised confusion matrix (true class by row) as a PNG.
pub fn write_confusion_png(confusion: &[[usize; NUM_CLASSES]; NUM_CLASSES], path: &Path) -> Result<()> {
    let grid: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
        })
        .collect();
    heatmap(&grid, 32, 0.0, 1.0)?.save(path)?;
    Ok(())
}

/// Accuracy surface with `lambda_m` along rows and `lambda_d` along columns,
/// averaged over repeated cells (e.g. several seeds).
pub fn sweep_grid(records: &[SweepRecord]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let mut lm: Vec<f64> = records.iter().map(|r| r.lambda_m).collect();
    let mut ld: Vec<f64> = records.iter().map(|r| r.lambda_d).collect();
    for v in [&mut lm, &mut ld] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut sum = vec![vec![0.0; ld.len()]; lm.len()];
    let mut cnt = vec![vec![0usize; ld.len()]; lm.len()];
    for r in records {
        let i = lm.iter().position(|&v| v == r.lambda_m).expect("collected");
        let j = ld.iter().position(|&v| v == r.lambda_d).expect("collected");
        sum[i][j] += r.accuracy;
        cnt[i][j] += 1;
    }
    let grid = sum
        .iter()
        .zip(&cnt)
        .map(|(s, c)| s.iter().zip(c).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect())
        .collect();
    (lm, ld, grid)
}

pub fn write_sweep_png(records: &[SweepRecord], path: &Path) -> Result<()> {
    let (_, _, grid) = sweep_grid(records);
    let finite = grid.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    heatmap(&grid, 48, lo, hi)?.save(path)?;
    Ok(())
}
