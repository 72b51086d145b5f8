//! Evaluation metrics over radial slices: MSE, Sobel edge-restricted MSE,
//! Earth Mover's Distance and the Universal Image Quality Index.
//!
//! Slice 0 is the shared input and never scored; cube values are means over
//! slices `1..nr`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VelocityCube;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeMaskConfig {
    /// Pixels with gradient magnitude above this fraction of the slice
    /// maximum are edges.
    pub threshold_fraction: f64,
}

impl Default for EdgeMaskConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.2,
        }
    }
}

impl EdgeMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "edge threshold fraction {} not in (0, 1)",
                self.threshold_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum UiqiMode {
    /// One index over the whole slice.
    #[default]
    Global,
    /// Mean over all `size × size` windows (no wrap).
    Window { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsConfig {
    pub edge: EdgeMaskConfig,
    #[serde(default)]
    pub uiqi: UiqiMode,
}

fn check_pair(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("slices are {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_cubes(pred: &VelocityCube, truth: &VelocityCube) -> Result<()> {
    if !pred.same_grids(truth) {
        return Err(Error::Shape(format!(
            "cubes differ: {:?} vs {:?}",
            pred.data().dim(),
            truth.data().dim()
        )));
    }
    Ok(())
}

pub fn slice_mse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&pred, &truth)?;
    let n = pred.len() as f64;
    Ok(Zip::from(&pred).and(&truth).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSeries {
    pub per_slice: Vec<f64>,
    pub mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mse(pred: &VelocityCube, truth: &VelocityCube) -> Result<SliceSeries> {
    check_cubes(pred, truth)?;
    let per_slice = (1..truth.nr())
        .map(|i| slice_mse(pred.slice(i), truth.slice(i)))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean(&per_slice);
    Ok(SliceSeries { per_slice, mean })
}

/// Sobel gradient magnitude; longitude (columns) wraps, latitude (rows)
/// replicates its edge rows.
pub fn sobel_magnitude(slice: ArrayView2<'_, f64>) -> Array2<f64> {
    let (nlat, nlon) = slice.dim();
    Array2::from_shape_fn((nlat, nlon), |(i, j)| {
        let up = i.saturating_sub(1);
        let down = (i + 1).min(nlat - 1);
        let left = (j + nlon - 1) % nlon;
        let right = (j + 1) % nlon;
        let v = |r: usize, c: usize| slice[[r, c]];
        let gx = (v(up, right) + 2.0 * v(i, right) + v(down, right))
            - (v(up, left) + 2.0 * v(i, left) + v(down, left));
        let gy = (v(down, left) + 2.0 * v(down, j) + v(down, right))
            - (v(up, left) + 2.0 * v(up, j) + v(up, right));
        (gx * gx + gy * gy).sqrt()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    pub mask: Array2<bool>,
    /// The slice has no gradient at all, so there can be no edges.
    pub degenerate: bool,
}

impl EdgeMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Edge pixels of a ground-truth slice: `|∇| > threshold · max |∇|`.
pub fn sobel_edge_mask(truth: ArrayView2<'_, f64>, cfg: &EdgeMaskConfig) -> Result<EdgeMask> {
    cfg.validate()?;
    let (nlat, nlon) = truth.dim();
    if nlat < 3 || nlon < 3 {
        return Err(Error::Shape(format!("Sobel needs at least 3x3, got {nlat}x{nlon}")));
    }
    let g = sobel_magnitude(truth);
    let gmax = g.iter().copied().fold(0.0, f64::max);
    if gmax == 0.0 {
        return Ok(EdgeMask {
            mask: Array2::from_elem((nlat, nlon), false),
            degenerate: true,
        });
    }
    let cut = cfg.threshold_fraction * gmax;
    Ok(EdgeMask {
        mask: g.mapv(|v| v > cut),
        degenerate: false,
    })
}

/// MSE over mask pixels; `None` when the mask is empty.
pub fn masked_mse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>, mask: &EdgeMask) -> Result<Option<f64>> {
    check_pair(&pred, &truth)?;
    let n = mask.count();
    if n == 0 {
        return Ok(None);
    }
    let sum = Zip::from(&pred)
        .and(&truth)
        .and(&mask.mask)
        .fold(0.0, |acc, &p, &t, &m| if m { acc + (p - t) * (p - t) } else { acc });
    Ok(Some(sum / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSeries {
    pub per_slice: Vec<Option<f64>>,
    /// Mean over slices with a non-empty mask.
    pub mean: f64,
    pub empty_slices: usize,
}

pub fn edge_mse(pred: &VelocityCube, truth: &VelocityCube, cfg: &EdgeMaskConfig) -> Result<EdgeSeries> {
    check_cubes(pred, truth)?;
    let per_slice = (1..truth.nr())
        .map(|i| {
            let mask = sobel_edge_mask(truth.slice(i), cfg)?;
            masked_mse(pred.slice(i), truth.slice(i), &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_edges(per_slice)
}

fn summarize_edges(per_slice: Vec<Option<f64>>) -> Result<EdgeSeries> {
    let defined: Vec<f64> = per_slice.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::MetricUndefined("every slice has an empty edge mask".into()));
    }
    Ok(EdgeSeries {
        empty_slices: per_slice.len() - defined.len(),
        mean: mean(&defined),
        per_slice,
    })
}

/// 1-D Wasserstein-1 distance between the value multisets of two slices.
pub fn emd(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&pred, &truth)?;
    let mut a: Vec<f64> = pred.iter().copied().collect();
    let mut b: Vec<f64> = truth.iter().copied().collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Universal Image Quality Index over a set of paired samples.
///
/// Degenerate cases: both constant and equal is 1; both constant but
/// different, or exactly one constant, is 0.
fn uiqi_samples(x: &[f64], y: &[f64]) -> f64 {
    if x == y {
        // exact, where the formula would round to 1 − ulp
        return 1.0;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    let (vx, vy, cxy) = (sxx / (n - 1.0), syy / (n - 1.0), sxy / (n - 1.0));
    match (vx == 0.0, vy == 0.0) {
        (true, true) => return if mx == my { 1.0 } else { 0.0 },
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lum = mx * mx + my * my;
    if lum == 0.0 {
        // zero means on both sides: only the structure/contrast term survives
        return 2.0 * cxy / (vx + vy);
    }
    4.0 * cxy * mx * my / ((vx + vy) * lum)
}

pub fn uiqi(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&pred, &truth)?;
    if pred.len() < 2 {
        return Err(Error::Shape("UIQI needs at least two pixels".into()));
    }
    let x: Vec<f64> = pred.iter().copied().collect();
    let y: Vec<f64> = truth.iter().copied().collect();
    Ok(uiqi_samples(&x, &y))
}

/// Mean UIQI over every `size × size` window.
pub fn uiqi_windowed(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>, size: usize) -> Result<f64> {
    check_pair(&pred, &truth)?;
    let (nlat, nlon) = pred.dim();
    if size < 2 || size > nlat || size > nlon {
        return Err(Error::InvalidArgument(format!("UIQI window {size} does not fit {nlat}x{nlon}")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut x = Vec::with_capacity(size * size);
    let mut y = Vec::with_capacity(size * size);
    for i in 0..=nlat - size {
        for j in 0..=nlon - size {
            x.clear();
            y.clear();
            for r in i..i + size {
                for c in j..j + size {
                    x.push(pred[[r, c]]);
                    y.push(truth[[r, c]]);
                }
            }
            total += uiqi_samples(&x, &y);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub mse: f64,
    pub edge_mse: Option<f64>,
    pub emd: f64,
    pub uiqi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeMetrics {
    pub mse: f64,
    /// `None` when every slice had an empty edge mask.
    pub edge_mse: Option<f64>,
    pub emd: f64,
    pub uiqi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportMeta {
    pub label: String,
    #[serde(default)]
    pub pred: Option<String>,
    #[serde(default)]
    pub truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub config: MetricsConfig,
    /// Radii of the scored slices, R_sun.
    pub radii: Vec<f64>,
    pub per_slice: Vec<SliceMetrics>,
    pub cube_mean: CubeMetrics,
    pub edge_empty_slices: usize,
}

pub fn slice_metrics(
    pred: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, f64>,
    cfg: &MetricsConfig,
) -> Result<SliceMetrics> {
    let mask = sobel_edge_mask(truth, &cfg.edge)?;
    Ok(SliceMetrics {
        mse: slice_mse(pred, truth)?,
        edge_mse: masked_mse(pred, truth, &mask)?,
        emd: emd(pred, truth)?,
        uiqi: match cfg.uiqi {
            UiqiMode::Global => uiqi(pred, truth)?,
            UiqiMode::Window { size } => uiqi_windowed(pred, truth, size)?,
        },
    })
}

/// Every metric on slices `1..nr`, plus their slice means.
pub fn evaluate_cube(pred: &VelocityCube, truth: &VelocityCube, cfg: &MetricsConfig) -> Result<MetricsReport> {
    check_cubes(pred, truth)?;
    cfg.edge.validate()?;
    let per_slice = (1..truth.nr())
        .into_par_iter()
        .map(|i| slice_metrics(pred.slice(i), truth.slice(i), cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = per_slice.len() as f64;
    let edges: Vec<f64> = per_slice.iter().filter_map(|s| s.edge_mse).collect();
    let cube_mean = CubeMetrics {
        mse: per_slice.iter().map(|s| s.mse).sum::<f64>() / n,
        edge_mse: (!edges.is_empty()).then(|| mean(&edges)),
        emd: per_slice.iter().map(|s| s.emd).sum::<f64>() / n,
        uiqi: per_slice.iter().map(|s| s.uiqi).sum::<f64>() / n,
    };
    Ok(MetricsReport {
        meta: ReportMeta::default(),
        config: *cfg,
        radii: truth.rgrid().values()[1..].to_vec(),
        edge_empty_slices: per_slice.len() - edges.len(),
        per_slice,
        cube_mean,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub const CSV_HEADER: &'static str = "label,mse,edge_mse,emd,uiqi,edge_empty_slices";

    pub fn csv_row(&self) -> String {
        let m = &self.cube_mean;
        let edge = m.edge_mse.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{:e},{},{:e},{:e},{}",
            self.meta.label, m.mse, edge, m.emd, m.uiqi, self.edge_empty_slices
        )
    }

    /// One-row CSV summary with header.
    pub fn save_csv_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}\n{}", Self::CSV_HEADER, self.csv_row()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn step_image() -> Array2<f64> {
        Array2::from_shape_fn((5, 8), |(_, j)| if j < 4 { 300.0 } else { 700.0 })
    }

    #[test]
    fn sobel_step_fixture() {
        let m = sobel_edge_mask(step_image().view(), &EdgeMaskConfig::default()).unwrap();
        assert!(!m.degenerate);
        for i in 0..5 {
            let row: Vec<bool> = m.mask.row(i).to_vec();
            assert_eq!(row, vec![true, false, false, true, true, false, false, true]);
        }
        // 4 * 400 at each marked column
        let g = sobel_magnitude(step_image().view());
        assert_eq!(g[[2, 3]], 1600.0);
        assert_eq!(g[[0, 0]], 1600.0);
        assert_eq!(g[[4, 5]], 0.0);
    }

    #[test]
    fn constant_slice_has_empty_mask() {
        let c = Array2::from_elem((4, 6), 410.0);
        let m = sobel_edge_mask(c.view(), &EdgeMaskConfig::default()).unwrap();
        assert!(m.degenerate && m.is_empty());
        assert!(sobel_edge_mask(Array2::<f64>::zeros((2, 6)).view(), &EdgeMaskConfig::default()).is_err());
    }

    #[test]
    fn mask_rotates_with_the_slice() {
        let img = Array2::from_shape_fn((6, 10), |(i, j)| ((i * 7 + j * j * 3) % 11) as f64);
        let cfg = EdgeMaskConfig::default();
        let base = sobel_edge_mask(img.view(), &cfg).unwrap().mask;
        for k in 1..10 {
            let rolled = Array2::from_shape_fn((6, 10), |(i, j)| img[[i, (j + k) % 10]]);
            let m = sobel_edge_mask(rolled.view(), &cfg).unwrap().mask;
            for i in 0..6 {
                for j in 0..10 {
                    assert_eq!(m[[i, j]], base[[i, (j + k) % 10]]);
                }
            }
        }
    }

    #[test]
    fn edge_error_on_and_off_mask() {
        let truth = step_image();
        let mask = sobel_edge_mask(truth.view(), &EdgeMaskConfig::default()).unwrap();
        // perturb columns 1 and 5, which are off the mask
        let mut off = truth.clone();
        off.column_mut(1).mapv_inplace(|v| v + 10.0);
        off.column_mut(5).mapv_inplace(|v| v - 10.0);
        assert_eq!(masked_mse(off.view(), truth.view(), &mask).unwrap(), Some(0.0));
        assert!(slice_mse(off.view(), truth.view()).unwrap() > 0.0);

        let on = Zip::from(&truth).and(&mask.mask).map_collect(|&t, &m| if m { t + 3.0 } else { t });
        assert_eq!(masked_mse(on.view(), truth.view(), &mask).unwrap(), Some(9.0));
    }

    #[test]
    fn mse_of_constant_offset() {
        let t = step_image();
        assert_eq!(slice_mse((&t + 2.5).view(), t.view()).unwrap(), 6.25);
        assert_eq!(slice_mse(t.view(), t.view()).unwrap(), 0.0);
    }

    #[test]
    fn emd_basics() {
        let t = step_image();
        assert_eq!(emd(t.view(), t.view()).unwrap(), 0.0);
        assert!((emd((&t + 12.0).view(), t.view()).unwrap() - 12.0).abs() < 1e-12);
        // permuted values have identical distributions
        let rolled = Array2::from_shape_fn((5, 8), |(i, j)| t[[i, (j + 3) % 8]]);
        assert_eq!(emd(rolled.view(), t.view()).unwrap(), 0.0);
    }

    #[test]
    fn uiqi_fixtures() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert!((uiqi(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-15);
        // correlation 1, luminance 0.8, contrast 0.8
        let q = uiqi((&x * 2.0).view(), x.view()).unwrap();
        assert!((q - 0.64).abs() < 1e-14, "{q}");

        let c = Array2::from_elem((2, 2), 5.0);
        assert_eq!(uiqi(c.view(), c.view()).unwrap(), 1.0);
        assert_eq!(uiqi((&c + 1.0).view(), c.view()).unwrap(), 0.0);
        assert_eq!(uiqi(c.view(), x.view()).unwrap(), 0.0);
        assert!(uiqi(array![[1.0]].view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn windowed_uiqi_of_identical_slices() {
        let x = Array2::from_shape_fn((9, 10), |(i, j)| (i * 10 + j) as f64 + 1.0);
        assert!((uiqi_windowed(x.view(), x.view(), 8).unwrap() - 1.0).abs() < 1e-12);
        assert!(uiqi_windowed(x.view(), x.view(), 11).is_err());
    }

    #[test]
    fn all_empty_edges_are_undefined() {
        assert!(matches!(summarize_edges(vec![None, None]), Err(Error::MetricUndefined(_))));
        let s = summarize_edges(vec![None, Some(2.0), Some(4.0)]).unwrap();
        assert_eq!((s.mean, s.empty_slices), (3.0, 1));
    }
}
