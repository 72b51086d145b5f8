//! Spherical harmonic transform on the Gauss–Legendre × equiangular grid.
//!
//! Convention: orthonormal harmonics without the Condon–Shortley phase,
//!
//! ```text
//! Y_l^m(θ, φ) = P̄_l^m(cos θ) · e^{imφ} / √(2π),    ∫_{-1}^{1} P̄_l^m(x)² dx = 1,
//! ```
//!
//! so `∫ |Y_l^m|² dΩ = 1` and `Y_0^0 = 1/√(4π)`. Only `m ≥ 0` is stored; a real
//! field is `f = Σ_l c_l0 Y_l^0 + 2 Re Σ_{m>0} c_lm Y_l^m`.
//!
//! When `2·mmax == nlon` the order-`mmax` mode sits on the Nyquist frequency:
//! the grid cannot see its imaginary part, so analysis returns it as zero and
//! halves the aliased real part so that analysis inverts synthesis exactly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;

/// Number of `(l, m)` pairs with `0 ≤ m ≤ mmax`, `m ≤ l ≤ lmax`.
pub fn num_coeffs(lmax: usize, mmax: usize) -> usize {
    (0..=mmax).map(|m| lmax + 1 - m).sum()
}

/// Offset of order `m` in the packed `(m, l)` layout.
#[inline]
fn m_offset(lmax: usize, m: usize) -> usize {
    m * (lmax + 1) - m * m.saturating_sub(1) / 2
}

/// Complex spherical-harmonic coefficients for one or more channels.
///
/// Storage is channel-major; inside a channel the layout is packed by order:
/// `m = 0` for `l = 0..=lmax`, then `m = 1` for `l = 1..=lmax`, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoeffs {
    lmax: usize,
    mmax: usize,
    nchannels: usize,
    data: Vec<Complex64>,
}

impl SpectralCoeffs {
    pub fn zeros(lmax: usize, mmax: usize, nchannels: usize) -> Self {
        assert!(mmax <= lmax, "mmax must not exceed lmax");
        Self {
            lmax,
            mmax,
            nchannels,
            data: vec![Complex64::new(0.0, 0.0); num_coeffs(lmax, mmax) * nchannels],
        }
    }

    pub fn from_vec(lmax: usize, mmax: usize, nchannels: usize, data: Vec<Complex64>) -> Result<Self> {
        if mmax > lmax || data.len() != num_coeffs(lmax, mmax) * nchannels {
            return Err(Error::Shape(format!(
                "{} coefficients do not fit lmax={lmax}, mmax={mmax}, {nchannels} channels",
                data.len()
            )));
        }
        Ok(Self {
            lmax,
            mmax,
            nchannels,
            data,
        })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn mmax(&self) -> usize {
        self.mmax
    }

    pub fn nchannels(&self) -> usize {
        self.nchannels
    }

    /// Coefficients per channel.
    pub fn len_per_channel(&self) -> usize {
        num_coeffs(self.lmax, self.mmax)
    }

    /// Packed index of `(l, m)` within a channel.
    pub fn index(&self, l: usize, m: usize) -> usize {
        debug_assert!(m <= self.mmax && m <= l && l <= self.lmax);
        m_offset(self.lmax, m) + (l - m)
    }

    pub fn get(&self, channel: usize, l: usize, m: usize) -> Complex64 {
        self.data[channel * self.len_per_channel() + self.index(l, m)]
    }

    pub fn set(&mut self, channel: usize, l: usize, m: usize, value: Complex64) {
        let i = channel * self.len_per_channel() + self.index(l, m);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.len_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.len_per_channel();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    /// Iterate `(l, m)` pairs in storage order.
    pub fn modes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..=self.mmax).flat_map(move |m| (m..=self.lmax).map(move |l| (l, m)))
    }

    /// `Σ |c_lm|²` with `m > 0` counted twice: the squared L² norm of the
    /// real field on the unit sphere.
    pub fn power(&self, channel: usize) -> f64 {
        self.modes()
            .zip(self.channel(channel))
            .map(|((_, m), c)| if m == 0 { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
            .sum()
    }
}

/// Orthonormal associated Legendre values `P̄_l^m(cos θ_i)`.
#[derive(Debug, Clone)]
pub struct LegendreTable {
    lmax: usize,
    mmax: usize,
    nlat: usize,
    /// `[packed (m, l)][i]`
    values: Vec<f64>,
}

impl LegendreTable {
    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn mmax(&self) -> usize {
        self.mmax
    }

    /// Values over latitude for one `(l, m)`.
    pub fn row(&self, l: usize, m: usize) -> &[f64] {
        let k = m_offset(self.lmax, m) + (l - m);
        &self.values[k * self.nlat..(k + 1) * self.nlat]
    }

    fn packed_row(&self, k: usize) -> &[f64] {
        &self.values[k * self.nlat..(k + 1) * self.nlat]
    }

    /// Shared table for a grid, computed once per `(nlat, lmax, mmax)`.
    pub fn cached(grid: &LatLonGrid, lmax: usize, mmax: usize) -> Arc<LegendreTable> {
        type Cache = RwLock<HashMap<(usize, usize, usize), Arc<LegendreTable>>>;
        static CACHE: OnceLock<Cache> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (grid.nlat(), lmax, mmax);
        if let Some(t) = cache.read().expect("legendre cache poisoned").get(&key) {
            return t.clone();
        }
        let table = Arc::new(legendre_table(lmax, mmax, grid.colatitudes()));
        cache
            .write()
            .expect("legendre cache poisoned")
            .entry(key)
            .or_insert(table)
            .clone()
    }
}

/// Tabulate `P̄_l^m(cos θ)` for `0 ≤ m ≤ mmax`, `m ≤ l ≤ lmax` with the
/// standard sectoral-then-vertical recurrence.
pub fn legendre_table(lmax: usize, mmax: usize, colatitudes: &[f64]) -> LegendreTable {
    assert!(mmax <= lmax, "legendre_table needs lmax >= mmax");
    let nlat = colatitudes.len();
    let mut values = vec![0.0; num_coeffs(lmax, mmax) * nlat];
    for (i, &theta) in colatitudes.iter().enumerate() {
        let x = theta.cos();
        let s = theta.sin();
        let mut pmm = std::f64::consts::FRAC_1_SQRT_2;
        for m in 0..=mmax {
            if m > 0 {
                let mf = m as f64;
                pmm *= ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
            }
            let base = m_offset(lmax, m);
            values[base * nlat + i] = pmm;
            if m == lmax {
                continue;
            }
            let mut p_prev = pmm;
            let mut p = (2.0 * m as f64 + 3.0).sqrt() * x * pmm;
            values[(base + 1) * nlat + i] = p;
            let m2 = (m * m) as f64;
            for l in m + 2..=lmax {
                let lf = l as f64;
                let a = ((4.0 * lf * lf - 1.0) / (lf * lf - m2)).sqrt();
                let lp = lf - 1.0;
                let b = ((lp * lp - m2) / (4.0 * lp * lp - 1.0)).sqrt();
                let next = a * (x * p - b * p_prev);
                p_prev = p;
                p = next;
                values[(base + l - m) * nlat + i] = p;
            }
        }
    }
    LegendreTable {
        lmax,
        mmax,
        nlat,
        values,
    }
}

/// Forward and inverse transform bound to one grid and band limit.
#[derive(Clone)]
pub struct Sht {
    grid: Arc<LatLonGrid>,
    lmax: usize,
    mmax: usize,
    table: Arc<LegendreTable>,
    fft_forward: Arc<dyn Fft<f64>>,
    fft_inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Sht {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sht")
            .field("nlat", &self.grid.nlat())
            .field("nlon", &self.grid.nlon())
            .field("lmax", &self.lmax)
            .field("mmax", &self.mmax)
            .finish()
    }
}

impl Sht {
    pub fn new(grid: Arc<LatLonGrid>, lmax: usize, mmax: usize) -> Result<Self> {
        if mmax > lmax || grid.nlat() < lmax + 1 || grid.nlon() < 2 * mmax {
            return Err(Error::BandLimit {
                lmax,
                mmax,
                nlat: grid.nlat(),
                nlon: grid.nlon(),
            });
        }
        let table = LegendreTable::cached(&grid, lmax, mmax);
        let mut planner = FftPlanner::new();
        let fft_forward = planner.plan_fft_forward(grid.nlon());
        let fft_inverse = planner.plan_fft_inverse(grid.nlon());
        Ok(Self {
            grid,
            lmax,
            mmax,
            table,
            fft_forward,
            fft_inverse,
        })
    }

    pub fn grid(&self) -> &Arc<LatLonGrid> {
        &self.grid
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn mmax(&self) -> usize {
        self.mmax
    }

    pub fn num_coeffs(&self) -> usize {
        num_coeffs(self.lmax, self.mmax)
    }

    pub fn table(&self) -> &LegendreTable {
        &self.table
    }

    fn is_nyquist(&self, m: usize) -> bool {
        2 * m == self.grid.nlon()
    }

    /// Raw DFT of every latitude row, orders `0..=mmax`; `[i][m]` layout.
    fn rows_forward(&self, field: &[f64]) -> Vec<Complex64> {
        let (nlat, nlon) = self.grid.shape();
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_forward.process(&mut buf);
        let nm = self.mmax + 1;
        let mut out = Vec::with_capacity(nlat * nm);
        for i in 0..nlat {
            out.extend_from_slice(&buf[i * nlon..i * nlon + nm]);
        }
        out
    }

    /// `f_ij = Re Σ_{m=0}^{mmax} X_m(i) e^{imφ_j}` from `[i][m]` rows.
    fn rows_inverse_real(&self, rows: &[Complex64], out: &mut [f64]) {
        let (nlat, nlon) = self.grid.shape();
        let nm = self.mmax + 1;
        let mut buf = vec![Complex64::new(0.0, 0.0); nlat * nlon];
        for i in 0..nlat {
            buf[i * nlon..i * nlon + nm].copy_from_slice(&rows[i * nm..(i + 1) * nm]);
        }
        self.fft_inverse.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }

    /// `out_lm = Σ_i P̄_lm(x_i) rows[i][m]`.
    fn legendre_project(&self, rows: &[Complex64], out: &mut [Complex64]) {
        let nlat = self.grid.nlat();
        let nm = self.mmax + 1;
        let mut col = vec![Complex64::new(0.0, 0.0); nlat];
        for m in 0..=self.mmax {
            for (i, c) in col.iter_mut().enumerate() {
                *c = rows[i * nm + m];
            }
            let base = m_offset(self.lmax, m);
            for l in m..=self.lmax {
                let p = self.table.packed_row(base + l - m);
                let mut acc = Complex64::new(0.0, 0.0);
                for (pi, ci) in p.iter().zip(&col) {
                    acc += ci * *pi;
                }
                out[base + l - m] = acc;
            }
        }
    }

    /// `rows[i][m] = Σ_l c_lm P̄_lm(x_i)`.
    fn legendre_expand(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let nlat = self.grid.nlat();
        let nm = self.mmax + 1;
        let mut rows = vec![Complex64::new(0.0, 0.0); nlat * nm];
        let mut col = vec![Complex64::new(0.0, 0.0); nlat];
        for m in 0..=self.mmax {
            col.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let base = m_offset(self.lmax, m);
            for l in m..=self.lmax {
                let c = coeffs[base + l - m];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let p = self.table.packed_row(base + l - m);
                for (acc, pi) in col.iter_mut().zip(p) {
                    *acc += c * *pi;
                }
            }
            for (i, c) in col.iter().enumerate() {
                rows[i * nm + m] = *c;
            }
        }
        rows
    }

    /// Analysis of one real channel (row-major `nlat × nlon`) into `out`.
    pub fn analysis_into(&self, field: &[f64], out: &mut [Complex64]) {
        let nlat = self.grid.nlat();
        let nm = self.mmax + 1;
        let k = (2.0 * PI).sqrt() / self.grid.nlon() as f64;
        let mut rows = self.rows_forward(field);
        let w = self.grid.weights();
        for i in 0..nlat {
            for m in 0..nm {
                let r = &mut rows[i * nm + m];
                if self.is_nyquist(m) {
                    *r = Complex64::new(0.5 * r.re, 0.0);
                }
                *r *= k * w[i];
            }
        }
        self.legendre_project(&rows, out);
    }

    /// Synthesis of one channel of packed coefficients onto the grid.
    pub fn synthesis_into(&self, coeffs: &[Complex64], out: &mut [f64]) {
        let nlat = self.grid.nlat();
        let nm = self.mmax + 1;
        let inv = 1.0 / (2.0 * PI).sqrt();
        let mut rows = self.legendre_expand(coeffs);
        for i in 0..nlat {
            for m in 0..nm {
                rows[i * nm + m] *= if m == 0 { inv } else { 2.0 * inv };
            }
        }
        self.rows_inverse_real(&rows, out);
    }

    /// Adjoint of [`Sht::analysis_into`] with respect to the real field.
    ///
    /// `grad` holds `∂L/∂Re c + i ∂L/∂Im c`; the result is `∂L/∂f`.
    pub fn analysis_adjoint_into(&self, grad: &[Complex64], out: &mut [f64]) {
        let nlat = self.grid.nlat();
        let nm = self.mmax + 1;
        let k = (2.0 * PI).sqrt() / self.grid.nlon() as f64;
        let mut rows = self.legendre_expand(grad);
        let w = self.grid.weights();
        for i in 0..nlat {
            for m in 0..nm {
                let r = &mut rows[i * nm + m];
                if self.is_nyquist(m) {
                    *r = Complex64::new(0.5 * r.re, 0.0);
                }
                *r *= k * w[i];
            }
        }
        self.rows_inverse_real(&rows, out);
    }

    /// Adjoint of [`Sht::synthesis_into`]: `∂L/∂f` to `∂L/∂Re c + i ∂L/∂Im c`.
    pub fn synthesis_adjoint_into(&self, grad: &[f64], out: &mut [Complex64]) {
        let nlat = self.grid.nlat();
        let nm = self.mmax + 1;
        let inv = 1.0 / (2.0 * PI).sqrt();
        let mut rows = self.rows_forward(grad);
        for i in 0..nlat {
            for m in 0..nm {
                rows[i * nm + m] *= if m == 0 { inv } else { 2.0 * inv };
            }
        }
        self.legendre_project(&rows, out);
        // m = 0 coefficients only enter through their real part
        for c in &mut out[..=self.lmax] {
            c.im = 0.0;
        }
    }

    pub fn analysis(&self, field: ArrayView2<'_, f64>) -> Result<SpectralCoeffs> {
        self.check_field(field.dim())?;
        let mut c = SpectralCoeffs::zeros(self.lmax, self.mmax, 1);
        match field.as_slice() {
            Some(s) => self.analysis_into(s, c.channel_mut(0)),
            None => {
                let owned = field.to_owned();
                self.analysis_into(owned.as_slice().expect("standard layout"), c.channel_mut(0))
            }
        }
        Ok(c)
    }

    /// Synthesis of every channel; returns one `nlat × nlon` array per channel.
    pub fn synthesis(&self, coeffs: &SpectralCoeffs) -> Result<Vec<Array2<f64>>> {
        if coeffs.lmax() != self.lmax || coeffs.mmax() != self.mmax {
            return Err(Error::BandLimit {
                lmax: coeffs.lmax(),
                mmax: coeffs.mmax(),
                nlat: self.grid.nlat(),
                nlon: self.grid.nlon(),
            });
        }
        let shape = self.grid.shape();
        Ok((0..coeffs.nchannels())
            .map(|ch| {
                let mut out = Array2::zeros(shape);
                self.synthesis_into(
                    coeffs.channel(ch),
                    out.as_slice_mut().expect("standard layout"),
                );
                out
            })
            .collect())
    }

    /// Projection onto the band limit: `synthesis(analysis(field))`.
    pub fn truncate(&self, field: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let c = self.analysis(field)?;
        Ok(self.synthesis(&c)?.remove(0))
    }

    fn check_field(&self, dim: (usize, usize)) -> Result<()> {
        if dim != self.grid.shape() {
            return Err(Error::Shape(format!(
                "field is {dim:?}, transform grid is {:?}",
                self.grid.shape()
            )));
        }
        Ok(())
    }
}
