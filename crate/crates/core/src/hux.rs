//! HUX-f: forward upwind marching of radial velocity from the inner boundary.
//!
//! Each latitude ring is advanced independently with
//!
//! ```text
//! v[i+1][j] = v[i][j] + (Δr_i Ω / v[i][j]) · (v[i][j+1] − v[i][j]) / Δφ
//! ```
//!
//! with periodic longitude. Under the CFL bound `Δr Ω / (v_min Δφ) ≤ 1` the
//! update is a convex combination of two neighbours, so it is monotone.

use std::f64::consts::PI;

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CubeMeta, RadialGrid, VelocityCube, VelocityMap, R_SUN_KM};

/// Sidereal rotation period used for the default rotation rate, days.
pub const SIDEREAL_PERIOD_DAYS: f64 = 25.38;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuxConfig {
    /// Solar rotation rate, rad/s.
    pub omega_rot: f64,
    /// Acceleration amplitude.
    pub alpha: f64,
    /// Acceleration length scale, R_sun.
    pub r_h: f64,
    pub apply_acceleration: bool,
}

impl Default for HuxConfig {
    fn default() -> Self {
        Self {
            omega_rot: 2.0 * PI / (SIDEREAL_PERIOD_DAYS * 86_400.0),
            alpha: 0.15,
            r_h: 50.0,
            apply_acceleration: true,
        }
    }
}

impl HuxConfig {
    pub fn validate(&self) -> Result<()> {
        // omega_rot = 0 is allowed: it switches advection off
        if !(self.omega_rot >= 0.0 && self.omega_rot.is_finite()) {
            return Err(Error::InvalidArgument(format!("omega_rot = {}", self.omega_rot)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha = {}", self.alpha)));
        }
        if !(self.r_h > 0.0 && self.r_h.is_finite()) {
            return Err(Error::InvalidArgument(format!("r_h = {}", self.r_h)));
        }
        Ok(())
    }

    /// Multiplicative boundary boost `1 + α (1 − e^{−r0/r_h})`.
    pub fn boost_factor(&self, r0: f64) -> f64 {
        if !self.apply_acceleration || self.alpha == 0.0 {
            1.0
        } else {
            1.0 + self.alpha * (1.0 - (-r0 / self.r_h).exp())
        }
    }
}

fn check_positive(map: &VelocityMap) -> Result<()> {
    match map.values().iter().find(|&&v| !(v > 0.0)) {
        Some(v) => Err(Error::Domain(format!("velocity must be > 0 km/s, found {v}"))),
        None => Ok(()),
    }
}

/// Empirical acceleration applied once to the boundary slice.
pub fn accelerate_boundary(map: &VelocityMap, cfg: &HuxConfig, r0: f64) -> Result<VelocityMap> {
    cfg.validate()?;
    check_positive(map)?;
    let factor = cfg.boost_factor(r0);
    if factor == 1.0 {
        return Ok(map.clone());
    }
    let values = map.values().mapv(|v| v * factor);
    VelocityMap::new(map.grid().clone(), values)
}

/// Courant number of one radial step at the slowest velocity.
pub fn courant_number(dr_rsun: f64, omega_rot: f64, v_min: f64, dphi: f64) -> f64 {
    dr_rsun * R_SUN_KM * omega_rot / (v_min * dphi)
}

/// March the (optionally accelerated) boundary out to every node of `rgrid`.
pub fn hux_forward(boundary: &VelocityMap, rgrid: &RadialGrid, cfg: &HuxConfig) -> Result<VelocityCube> {
    let start = accelerate_boundary(boundary, cfg, rgrid.values()[0])?;
    let grid = start.grid().clone();
    let (nlat, nlon) = grid.shape();
    let dphi = grid.dphi();
    let nr = rgrid.nr();

    let mut data = Array3::<f64>::zeros((nr, nlat, nlon));
    data.index_axis_mut(Axis(0), 0).assign(&start.values());

    for i in 0..nr - 1 {
        let dr = rgrid.step(i);
        let (done, mut rest) = data.view_mut().split_at(Axis(0), i + 1);
        let prev = done.index_axis(Axis(0), i);
        let v_min = prev.iter().copied().fold(f64::INFINITY, f64::min);
        let courant = courant_number(dr, cfg.omega_rot, v_min, dphi);
        if !(courant <= 1.0) {
            return Err(Error::Stability {
                slice: i,
                v_min,
                courant,
            });
        }
        let coef = dr * R_SUN_KM * cfg.omega_rot / dphi;
        let mut next = rest.index_axis_mut(Axis(0), 0);
        next.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(prev.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut out, ring)| {
                for j in 0..nlon {
                    let v = ring[j];
                    let right = ring[(j + 1) % nlon];
                    out[j] = v + coef / v * (right - v);
                }
            });
        if let Some(bad) = next.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Numeric(format!(
                "HUX-f produced {bad} at radial step {}",
                i + 1
            )));
        }
    }

    VelocityCube::new(rgrid.clone(), grid, data, CubeMeta::default())
}
