//! Spherical and radial grids plus the velocity containers built on them.
//!
//! Latitude is stored as colatitude `θ ∈ (0, π)` at the Gauss–Legendre nodes,
//! row 0 nearest the north pole. Longitude nodes are `2πj/nlon`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal solar radius in km.
pub const R_SUN_KM: f64 = 695_700.0;
/// One astronomical unit in solar radii.
pub const AU_RSUN: f64 = 215.032;

pub const STANDARD_NLAT: usize = 111;
pub const STANDARD_NLON: usize = 128;
pub const STANDARD_NR: usize = 140;
pub const STANDARD_R0: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LatLonGrid {
    nlat: usize,
    nlon: usize,
    /// `cos θ` at each node; descending.
    nodes: Vec<f64>,
    colatitudes: Vec<f64>,
    weights: Vec<f64>,
    longitudes: Vec<f64>,
}

impl LatLonGrid {
    /// Gauss–Legendre colatitudes by equiangular longitudes.
    pub fn gauss_legendre(nlat: usize, nlon: usize) -> Result<Self> {
        if nlat < 2 || nlon < 2 || nlon % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs nlat >= 2 and even nlon >= 2, got {nlat}x{nlon}"
            )));
        }
        let (nodes, weights) = gauss_legendre_rule(nlat);
        let colatitudes = nodes.iter().map(|x| x.acos()).collect();
        let longitudes = (0..nlon)
            .map(|j| 2.0 * PI * j as f64 / nlon as f64)
            .collect();
        Ok(Self {
            nlat,
            nlon,
            nodes,
            colatitudes,
            weights,
            longitudes,
        })
    }

    pub fn standard() -> Self {
        Self::gauss_legendre(STANDARD_NLAT, STANDARD_NLON).expect("standard grid is valid")
    }

    pub fn nlat(&self) -> usize {
        self.nlat
    }

    pub fn nlon(&self) -> usize {
        self.nlon
    }

    pub fn npix(&self) -> usize {
        self.nlat * self.nlon
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nlat, self.nlon)
    }

    /// `cos θ_i`, the Gauss–Legendre abscissae in descending order.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn colatitudes(&self) -> &[f64] {
        &self.colatitudes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn longitudes(&self) -> &[f64] {
        &self.longitudes
    }

    pub fn dphi(&self) -> f64 {
        2.0 * PI / self.nlon as f64
    }
}

/// Nodes (descending) and weights of the `n`-point Gauss–Legendre rule on
/// `[-1, 1]`. Newton iteration on the three-term recurrence, seeded with the
/// Chebyshev-like guess `cos(π(i + 3/4)/(n + 1/2))`.
pub fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 {
                break;
            }
        }
        // one more evaluation at the converged node for the weight
        let (_, d) = legendre_and_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        if n % 2 == 1 && i == half - 1 {
            x = 0.0;
            dp = legendre_and_derivative(n, 0.0).1;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` for the unnormalized Legendre polynomial.
pub fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    r: Vec<f64>,
}

impl RadialGrid {
    /// Uniform grid from `r_min` to `r_max` (solar radii), both inclusive.
    pub fn uniform(nr: usize, r_min: f64, r_max: f64) -> Result<Self> {
        if nr < 2 {
            return Err(Error::InvalidArgument(format!("nr must be >= 2, got {nr}")));
        }
        if !(r_min >= 1.0 && r_min < r_max && r_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "radial bounds must satisfy 1 <= r_min < r_max, got {r_min}..{r_max}"
            )));
        }
        let step = (r_max - r_min) / (nr - 1) as f64;
        let mut r: Vec<f64> = (0..nr).map(|i| r_min + step * i as f64).collect();
        r[nr - 1] = r_max;
        Ok(Self { r })
    }

    /// 140 nodes from 30 R_sun to 1 AU.
    pub fn standard() -> Self {
        Self::uniform(STANDARD_NR, STANDARD_R0, AU_RSUN).expect("standard radial grid is valid")
    }

    pub fn from_values(r: Vec<f64>) -> Result<Self> {
        if r.len() < 2 {
            return Err(Error::InvalidArgument("radial grid needs >= 2 nodes".into()));
        }
        if !(r[0] >= 1.0) || !r[r.len() - 1].is_finite() || r.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "radial nodes must start at >= 1 R_sun and strictly increase".into(),
            ));
        }
        Ok(Self { r })
    }

    pub fn nr(&self) -> usize {
        self.r.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.r
    }

    /// Spacing between node `i` and `i + 1` in solar radii.
    pub fn step(&self, i: usize) -> f64 {
        self.r[i + 1] - self.r[i]
    }
}

/// One radial-velocity slice, km/s, shape `(nlat, nlon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityMap {
    grid: Arc<LatLonGrid>,
    values: Array2<f64>,
}

impl VelocityMap {
    pub fn new(grid: Arc<LatLonGrid>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "map is {:?}, grid is {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("velocity map contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<LatLonGrid>, value: f64) -> Self {
        let values = Array2::from_elem(grid.shape(), value);
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<LatLonGrid> {
        &self.grid
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Optional physical sanity check: every value in `(lo, hi)`.
    pub fn check_range(&self, lo: f64, hi: f64) -> Result<()> {
        match self.values.iter().find(|&&v| !(v > lo && v < hi)) {
            Some(v) => Err(Error::Domain(format!("velocity {v} outside ({lo}, {hi}) km/s"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CubeSource {
    #[default]
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CubeMeta {
    #[serde(default)]
    pub carrington_rotation: Option<i64>,
    #[serde(default)]
    pub instrument: Option<String>,
    #[serde(default)]
    pub source: CubeSource,
}

/// Full radial stack of velocity maps, stored as one `(nr, nlat, nlon)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityCube {
    rgrid: RadialGrid,
    grid: Arc<LatLonGrid>,
    data: Array3<f64>,
    pub meta: CubeMeta,
}

impl VelocityCube {
    pub fn new(
        rgrid: RadialGrid,
        grid: Arc<LatLonGrid>,
        data: Array3<f64>,
        meta: CubeMeta,
    ) -> Result<Self> {
        let want = (rgrid.nr(), grid.nlat(), grid.nlon());
        if data.dim() != want {
            return Err(Error::Shape(format!("cube is {:?}, grids need {want:?}", data.dim())));
        }
        Ok(Self {
            rgrid,
            grid,
            data,
            meta,
        })
    }

    pub fn from_maps(rgrid: RadialGrid, maps: &[VelocityMap], meta: CubeMeta) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("cube needs at least one slice".into()))?;
        let grid = first.grid().clone();
        if maps.iter().any(|m| **m.grid() != *grid) {
            return Err(Error::Shape("slices live on different grids".into()));
        }
        let views: Vec<_> = maps.iter().map(|m| m.values()).collect();
        let data = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(rgrid, grid, data, meta)
    }

    pub fn nr(&self) -> usize {
        self.rgrid.nr()
    }

    pub fn rgrid(&self) -> &RadialGrid {
        &self.rgrid
    }

    pub fn grid(&self) -> &Arc<LatLonGrid> {
        &self.grid
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn slice(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn slice_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        self.data.index_axis_mut(Axis(0), i)
    }

    pub fn map(&self, i: usize) -> VelocityMap {
        VelocityMap {
            grid: self.grid.clone(),
            values: self.slice(i).to_owned(),
        }
    }

    pub fn boundary(&self) -> VelocityMap {
        self.map(0)
    }

    /// True when both cubes share radial and angular grids.
    pub fn same_grids(&self, other: &VelocityCube) -> bool {
        self.rgrid == other.rgrid && *self.grid == *other.grid
    }
}
