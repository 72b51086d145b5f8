//! Cube files, dataset manifests and the synthetic HUX-f dataset generator.
//!
//! Cube file layout, all little-endian:
//!
//! ```text
//! "HWC1"                    4 bytes
//! version                   u32
//! nr, nlat, nlon            u32 each
//! radial grid               f64[nr], R_sun
//! data                      f64[nr * nlat * nlon], (r, lat, lon) order, km/s
//! ```
//!
//! Metadata lives in a JSON sidecar next to the cube (`<stem>.json`).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CubeMeta, CubeSource, LatLonGrid, RadialGrid, VelocityCube, VelocityMap, AU_RSUN, STANDARD_R0};
use crate::hux::{hux_forward, HuxConfig};
use crate::sht::{SpectralCoeffs, Sht};

pub const CUBE_MAGIC: &[u8; 4] = b"HWC1";
pub const CUBE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn cube_to_bytes(cube: &VelocityCube) -> Vec<u8> {
    let (nr, nlat, nlon) = cube.data().dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (nr + nr * nlat * nlon));
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for d in [nr, nlat, nlon] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for r in cube.rgrid().values() {
        out.extend_from_slice(&r.to_le_bytes());
    }
    // iter() walks logical (r, lat, lon) order whatever the memory layout
    for v in cube.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Parse a cube file; metadata defaults since it lives in the sidecar.
pub fn cube_from_bytes(bytes: &[u8]) -> Result<VelocityCube> {
    if bytes.len() < 4 || &bytes[..4] != CUBE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HWC1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated cube header"));
    }
    let version = read_u32(bytes, 4);
    if version != CUBE_VERSION {
        return Err(Error::format(4, format!("unsupported cube version {version}")));
    }
    let (nr, nlat, nlon) = (read_u32(bytes, 8), read_u32(bytes, 12), read_u32(bytes, 16));
    if nr < 2 || nlat == 0 || nlon == 0 {
        return Err(Error::format(8, format!("invalid dims nr={nr} nlat={nlat} nlon={nlon}")));
    }
    let (nr, nlat, nlon) = (nr as u64, nlat as u64, nlon as u64);
    let data_at = HEADER_LEN as u64 + 8 * nr;
    let expected = data_at + 8 * nr * nlat * nlon;
    if bytes.len() as u64 != expected {
        let at = if (bytes.len() as u64) < data_at { HEADER_LEN as u64 } else { data_at };
        return Err(Error::format(
            at,
            format!(
                "file is {} bytes, header dims ({nr}, {nlat}, {nlon}) need {expected}",
                bytes.len()
            ),
        ));
    }
    let data_at = data_at as usize;
    let rgrid = RadialGrid::from_values(read_f64s(&bytes[HEADER_LEN..data_at]))
        .map_err(|e| Error::format(HEADER_LEN as u64, e.to_string()))?;
    let grid = LatLonGrid::gauss_legendre(nlat as usize, nlon as usize)
        .map_err(|e| Error::format(12, e.to_string()))?;
    let data = Array3::from_shape_vec(
        (nr as usize, nlat as usize, nlon as usize),
        read_f64s(&bytes[data_at..]),
    )
    .expect("length checked above");
    VelocityCube::new(rgrid, Arc::new(grid), data, CubeMeta::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub velocity: String,
    pub radius: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            velocity: "km/s".into(),
            radius: "R_sun".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeSidecar {
    pub meta: CubeMeta,
    pub units: Units,
    /// Latitude nodes are Gauss–Legendre, north to south.
    pub latitude_grid: String,
}

pub fn sidecar_path(cube_path: &Path) -> PathBuf {
    cube_path.with_extension("json")
}

/// Write the cube file and its JSON sidecar.
pub fn save_cube(cube: &VelocityCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cube_to_bytes(cube)).map_err(|e| Error::io(path, e))?;
    let sidecar = CubeSidecar {
        meta: cube.meta.clone(),
        units: Units::default(),
        latitude_grid: "gauss-legendre".into(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

/// Read a cube; a missing sidecar leaves the metadata at its defaults.
pub fn load_cube(path: impl AsRef<Path>) -> Result<VelocityCube> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cube = cube_from_bytes(&bytes)?;
    let side = sidecar_path(path);
    match std::fs::read_to_string(&side) {
        Ok(text) => {
            let sidecar: CubeSidecar = serde_json::from_str(&text)?;
            cube.meta = sidecar.meta;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(side, e)),
    }
    Ok(cube)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cubes: usize,
    pub seed: u64,
    /// km/s
    pub v_slow: f64,
    /// km/s
    pub v_fast: f64,
    pub stream_lmax: usize,
    pub interface_sharpness: f64,
    pub hux: HuxConfig,
    pub nlat: usize,
    pub nlon: usize,
    pub nr: usize,
    /// R_sun
    pub r_min: f64,
    /// R_sun
    pub r_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cubes: 8,
            seed: 0,
            v_slow: 350.0,
            v_fast: 750.0,
            stream_lmax: 12,
            interface_sharpness: 25.0,
            hux: HuxConfig::default(),
            nlat: crate::grid::STANDARD_NLAT,
            nlon: crate::grid::STANDARD_NLON,
            nr: crate::grid::STANDARD_NR,
            r_min: STANDARD_R0,
            r_max: AU_RSUN,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_slow > 0.0 && self.v_slow < self.v_fast && self.v_fast.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < v_slow < v_fast, got {} and {}",
                self.v_slow, self.v_fast
            )));
        }
        if !(self.interface_sharpness > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "interface sharpness {} must be positive",
                self.interface_sharpness
            )));
        }
        if self.stream_lmax + 1 > self.nlat {
            return Err(Error::BandLimit {
                lmax: self.stream_lmax,
                mmax: self.stream_mmax(),
                nlat: self.nlat,
                nlon: self.nlon,
            });
        }
        self.hux.validate()?;
        self.radial_grid()?;
        Ok(())
    }

    /// Orders stay below the longitude Nyquist mode.
    fn stream_mmax(&self) -> usize {
        self.stream_lmax.min(self.nlon.saturating_sub(1) / 2)
    }

    pub fn lat_lon_grid(&self) -> Result<Arc<LatLonGrid>> {
        Ok(Arc::new(LatLonGrid::gauss_legendre(self.nlat, self.nlon)?))
    }

    pub fn radial_grid(&self) -> Result<RadialGrid> {
        RadialGrid::uniform(self.nr, self.r_min, self.r_max)
    }

    /// Random stream generator for cube `index`.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64))
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Random two-speed boundary map.
///
/// A band-limited Gaussian field (unit RMS) is squashed by a logistic of
/// steepness `interface_sharpness`, so values cluster near `v_slow` and
/// `v_fast` with thin interfaces between streams.
pub fn generate_boundary(cfg: &SynthConfig, grid: &Arc<LatLonGrid>, rng: &mut impl rand::Rng) -> Result<VelocityMap> {
    cfg.validate()?;
    if grid.shape() != (cfg.nlat, cfg.nlon) {
        return Err(Error::Shape(format!(
            "grid is {:?}, config asks for ({}, {})",
            grid.shape(),
            cfg.nlat,
            cfg.nlon
        )));
    }
    let lmax = cfg.stream_lmax;
    let mmax = cfg.stream_mmax();
    let sht = Sht::new(grid.clone(), lmax, mmax)?;
    let mut coeffs = SpectralCoeffs::zeros(lmax, mmax, 1);
    for m in 0..=mmax {
        for l in m..=lmax {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = if m == 0 { 0.0 } else { StandardNormal.sample(rng) };
            coeffs.set(0, l, m, Complex64::new(re, im));
        }
    }
    let field = sht.synthesis(&coeffs)?.pop().expect("one channel");
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    let dv = cfg.v_fast - cfg.v_slow;
    let k = cfg.interface_sharpness;
    let values = field.mapv(|f| cfg.v_slow + dv * logistic(k * f * scale));
    VelocityMap::new(grid.clone(), values)
}

/// `n_cubes` ground-truth cubes, each HUX-f marched from its own boundary.
/// Cube `i` draws from a stream seeded with `seed + i`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<VelocityCube>> {
    cfg.validate()?;
    let grid = cfg.lat_lon_grid()?;
    let rgrid = cfg.radial_grid()?;
    (0..cfg.n_cubes)
        .into_par_iter()
        .map(|i| {
            let boundary = generate_boundary(cfg, &grid, &mut cfg.rng_for(i))?;
            let mut cube = hux_forward(&boundary, &rgrid, &cfg.hux)?;
            cube.meta = CubeMeta {
                carrington_rotation: None,
                instrument: None,
                source: CubeSource::Synthetic,
            };
            Ok(cube)
        })
        .collect()
}

/// Inclusive Carrington-rotation range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrRange {
    pub first: i64,
    pub last: i64,
}

impl CrRange {
    pub fn contains(&self, cr: i64) -> bool {
        (self.first..=self.last).contains(&cr)
    }

    fn overlaps(&self, other: &CrRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

/// Training/CV rotations of the archive split.
pub const TRAIN_CR: CrRange = CrRange { first: 1625, last: 2169 };
/// Held-out test rotations of the archive split.
pub const TEST_CR: CrRange = CrRange { first: 2170, last: 2293 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "protocol")]
pub enum SplitProtocol {
    /// First `round(fraction · n)` items train, the rest test.
    ChronologicalFraction { fraction: f64 },
    /// Membership by Carrington rotation; items in neither range are dropped.
    CrRanges { train: CrRange, test: CrRange },
}

impl SplitProtocol {
    pub fn archive() -> Self {
        SplitProtocol::CrRanges {
            train: TRAIN_CR,
            test: TEST_CR,
        }
    }
}

/// Index form of [`split_dataset`]: which items go to train and which to test.
pub fn split_indices(metas: &[CubeMeta], protocol: &SplitProtocol) -> Result<(Vec<usize>, Vec<usize>)> {
    if metas.is_empty() {
        return Err(Error::Split("nothing to split".into()));
    }
    let (train, test): (Vec<usize>, Vec<usize>) = match *protocol {
        SplitProtocol::ChronologicalFraction { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
            }
            let n_train = (fraction * metas.len() as f64).round() as usize;
            ((0..n_train).collect(), (n_train..metas.len()).collect())
        }
        SplitProtocol::CrRanges { train, test } => {
            if train.first > train.last || test.first > test.last {
                return Err(Error::Split("empty Carrington range".into()));
            }
            if train.overlaps(&test) {
                return Err(Error::Split(format!(
                    "train CR {}..={} overlaps test CR {}..={}",
                    train.first, train.last, test.first, test.last
                )));
            }
            let mut tr = Vec::new();
            let mut te = Vec::new();
            for (i, m) in metas.iter().enumerate() {
                let cr = m
                    .carrington_rotation
                    .ok_or_else(|| Error::Split(format!("item {i} has no Carrington rotation")))?;
                if train.contains(cr) {
                    tr.push(i);
                } else if test.contains(cr) {
                    te.push(i);
                }
            }
            (tr, te)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "split leaves {} train and {} test items",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

pub fn split_dataset(
    cubes: Vec<VelocityCube>,
    protocol: &SplitProtocol,
) -> Result<(Vec<VelocityCube>, Vec<VelocityCube>)> {
    let metas: Vec<CubeMeta> = cubes.iter().map(|c| c.meta.clone()).collect();
    let (train_idx, test_idx) = split_indices(&metas, protocol)?;
    let mut slots: Vec<Option<VelocityCube>> = cubes.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<VelocityCube> {
        idx.iter().map(|&i| slots[i].take().expect("indices are unique")).collect()
    };
    let train = take(&train_idx);
    let test = take(&test_idx);
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Test,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: SplitLabel,
    #[serde(default)]
    pub carrington_rotation: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cubes: Vec<ManifestEntry>,
    pub split: SplitProtocol,
    #[serde(default)]
    pub generator: Option<SynthConfig>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        match manifest_path.parent() {
            Some(dir) if entry.path.is_relative() => dir.join(&entry.path),
            _ => entry.path.clone(),
        }
    }

    /// Load every cube carrying `label`, in manifest order.
    pub fn load_split(&self, manifest_path: &Path, label: SplitLabel) -> Result<Vec<VelocityCube>> {
        self.cubes
            .iter()
            .filter(|e| e.split == label)
            .map(|e| load_cube(self.resolve(manifest_path, e)))
            .collect()
    }
}

/// Write `cubes` as `cube_NNNN.hwc` under `dir` with a `manifest.json`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    cubes: &[VelocityCube],
    protocol: &SplitProtocol,
    generator: Option<SynthConfig>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metas: Vec<CubeMeta> = cubes.iter().map(|c| c.meta.clone()).collect();
    let mut labels = vec![SplitLabel::Unused; cubes.len()];
    if !cubes.is_empty() {
        let (train, test) = split_indices(&metas, protocol)?;
        train.iter().for_each(|&i| labels[i] = SplitLabel::Train);
        test.iter().for_each(|&i| labels[i] = SplitLabel::Test);
    }
    let mut entries = Vec::with_capacity(cubes.len());
    for (i, cube) in cubes.iter().enumerate() {
        let name = PathBuf::from(format!("cube_{i:04}.hwc"));
        save_cube(cube, dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            split: labels[i],
            carrington_rotation: cube.meta.carrington_rotation,
        });
    }
    let manifest = Manifest {
        cubes: entries,
        split: *protocol,
        generator,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
