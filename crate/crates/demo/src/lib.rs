//! Browser demo. Everything is plain Rust; the `wasm_bindgen` attributes
//! only export it to JavaScript, so the logic is tested natively.
//!
//! Images are returned as RGBA bytes, row-major, north at the top.

use std::sync::Arc;

use helioprop::dataio::{generate_boundary, SynthConfig};
use helioprop::grid::{LatLonGrid, VelocityCube};
use helioprop::hux::hux_forward;
use helioprop::metrics::{sobel_edge_mask, EdgeMaskConfig};
use helioprop::sht::Sht;
use wasm_bindgen::prelude::*;

/// Colour scale limits, km/s. Covers the boosted fast wind.
pub const V_LO: f64 = 300.0;
pub const V_HI: f64 = 900.0;

fn to_js(e: helioprop::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Dark blue through teal to pale yellow.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[20.0, 24.0, 82.0], [31.0, 120.0, 140.0], [120.0, 200.0, 90.0], [250.0, 235.0, 140.0]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

fn rgba<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values
        .flat_map(|&v| {
            let [r, g, b] = colormap((v - V_LO) / (V_HI - V_LO));
            [r, g, b, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    cfg: SynthConfig,
    grid: Arc<LatLonGrid>,
    cube: VelocityCube,
}

#[wasm_bindgen]
impl Demo {
    /// Synthetic boundary for `seed`, marched out by HUX-f.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, nlat: usize, nlon: usize) -> Result<Demo, JsError> {
        Demo::build(seed, nlat, nlon).map_err(to_js)
    }

    pub fn nlat(&self) -> usize {
        self.cube.grid().shape().0
    }

    pub fn nlon(&self) -> usize {
        self.cube.grid().shape().1
    }

    pub fn nr(&self) -> usize {
        self.cube.nr()
    }

    /// Radius of node `r`, solar radii.
    pub fn radius(&self, r: usize) -> f64 {
        self.cube.rgrid().values()[r.min(self.nr() - 1)]
    }

    /// Heatmap of radial slice `r`.
    pub fn slice_rgba(&self, r: usize) -> Vec<u8> {
        rgba(self.cube.slice(r.min(self.nr() - 1)).iter())
    }

    /// `[min, mean, max]` of slice `r`, km/s.
    pub fn slice_stats(&self, r: usize) -> Vec<f64> {
        let s = self.cube.slice(r.min(self.nr() - 1));
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        vec![lo, s.mean().unwrap_or(0.0), hi]
    }

    /// Boundary slice projected onto degrees `<= lmax`.
    pub fn truncated_rgba(&self, lmax: usize) -> Result<Vec<u8>, JsError> {
        let t = self.truncated(lmax).map_err(to_js)?;
        Ok(rgba(t.iter()))
    }

    /// RMS of boundary minus its truncation, km/s.
    pub fn truncation_rms(&self, lmax: usize) -> Result<f64, JsError> {
        let t = self.truncated(lmax).map_err(to_js)?;
        let b = self.cube.slice(0);
        let sq: f64 = t.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok((sq / t.len() as f64).sqrt())
    }

    /// Largest degree the grid represents.
    pub fn max_degree(&self) -> usize {
        self.nlat() - 1
    }

    /// Slice `r` in gray with Sobel edges (above `threshold` of the slice
    /// maximum) in red.
    pub fn edges_rgba(&self, r: usize, threshold: f64) -> Result<Vec<u8>, JsError> {
        let s = self.cube.slice(r.min(self.nr() - 1));
        let mask = self.edge_mask(r, threshold).map_err(to_js)?;
        Ok(s.iter()
            .zip(mask.iter())
            .flat_map(|(&v, &edge)| {
                if edge {
                    [230, 40, 40, 255]
                } else {
                    let g = (((v - V_LO) / (V_HI - V_LO)).clamp(0.0, 1.0) * 200.0) as u8 + 30;
                    [g, g, g, 255]
                }
            })
            .collect())
    }

    /// Number of edge pixels in slice `r`.
    pub fn edge_count(&self, r: usize, threshold: f64) -> Result<usize, JsError> {
        Ok(self.edge_mask(r, threshold).map_err(to_js)?.iter().filter(|&&e| e).count())
    }
}

impl Demo {
    pub fn build(seed: u64, nlat: usize, nlon: usize) -> helioprop::Result<Demo> {
        let cfg = SynthConfig {
            n_cubes: 1,
            seed,
            nlat,
            nlon,
            stream_lmax: 8.min(nlat - 1),
            ..SynthConfig::default()
        };
        let grid = cfg.lat_lon_grid()?;
        let boundary = generate_boundary(&cfg, &grid, &mut cfg.rng_for(0))?;
        let cube = hux_forward(&boundary, &cfg.radial_grid()?, &cfg.hux)?;
        Ok(Demo { cfg, grid, cube })
    }

    pub fn cube(&self) -> &VelocityCube {
        &self.cube
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn truncated(&self, lmax: usize) -> helioprop::Result<Vec<f64>> {
        let (nlat, nlon) = self.grid.shape();
        let lmax = lmax.min(nlat - 1);
        let sht = Sht::new(self.grid.clone(), lmax, lmax.min(nlon / 2))?;
        Ok(sht.truncate(self.cube.slice(0))?.into_raw_vec_and_offset().0)
    }

    pub fn edge_mask(&self, r: usize, threshold: f64) -> helioprop::Result<Vec<bool>> {
        let cfg = EdgeMaskConfig {
            threshold_fraction: threshold,
        };
        let m = sobel_edge_mask(self.cube.slice(r.min(self.nr() - 1)), &cfg)?;
        Ok(m.mask.iter().copied().collect())
    }
}
