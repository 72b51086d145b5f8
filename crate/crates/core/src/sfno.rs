//! Spherical Fourier neural operator with a hand-written reverse pass.
//!
//! ```text
//! u₀      = encoder(x)                                  pointwise MLP
//! u_{k+1} = mlp_k(SHT⁻¹(W_k · SHT(u_k))) + s_k ⊙ u_k    one block
//! y       = decoder(u_n)                                pointwise MLP
//! ```
//!
//! `W_k` holds one dense `c_in × c_out` complex matrix per `(l, m)` mode, so
//! modes never mix. That keeps the spectral path equivariant under
//! longitudinal rotation.
//!
//! All activations are stored channel-major as `(channels, nlat·nlon)`.

pub mod checkpoint;

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::Hasher;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::sht::{num_coeffs, Sht};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            // tanh approximation
            Activation::Gelu => {
                let u = (2.0 / PI).sqrt() * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let k = (2.0 / PI).sqrt();
                let t = (k * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn default_depth() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub n_layers: usize,
    pub hidden_channels: usize,
    pub lmax: usize,
    pub mmax: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub in_channels: usize,
    /// Radii emitted per forward call (the predictive horizon).
    pub out_channels: usize,
    pub mlp_hidden_factor: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Dense layers in the encoder MLP.
    #[serde(default = "default_depth")]
    pub encoder_depth: usize,
    /// Dense layers in the decoder MLP.
    #[serde(default = "default_depth")]
    pub decoder_depth: usize,
    pub seed: u64,
}

impl OperatorConfig {
    /// 8 blocks × 256 channels on the 111 × 128 grid with 110/64 modes.
    pub fn standard(out_channels: usize) -> Self {
        Self {
            n_layers: 8,
            hidden_channels: 256,
            lmax: 110,
            mmax: 64,
            nlat: 111,
            nlon: 128,
            in_channels: 1,
            out_channels,
            mlp_hidden_factor: 2.0,
            activation: Activation::Gelu,
            encoder_depth: 2,
            decoder_depth: 2,
            seed: 0,
        }
    }

    /// Small model for `nlat × nlon` grids, band limit at the grid maximum.
    pub fn small(nlat: usize, nlon: usize, n_layers: usize, hidden: usize, out_channels: usize) -> Self {
        let mmax = (nlon / 2).min(nlat - 1);
        Self {
            n_layers,
            hidden_channels: hidden,
            lmax: nlat - 1,
            mmax,
            nlat,
            nlon,
            in_channels: 1,
            out_channels,
            mlp_hidden_factor: 2.0,
            activation: Activation::Gelu,
            encoder_depth: 2,
            decoder_depth: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("operator config: {m}")));
        if self.hidden_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if !(self.mlp_hidden_factor > 0.0 && self.mlp_hidden_factor.is_finite()) {
            return bad("mlp_hidden_factor must be positive");
        }
        if self.mmax > self.lmax || self.nlat < self.lmax + 1 || self.nlon < 2 * self.mmax {
            return Err(Error::BandLimit {
                lmax: self.lmax,
                mmax: self.mmax,
                nlat: self.nlat,
                nlon: self.nlon,
            });
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        ((self.hidden_channels as f64 * self.mlp_hidden_factor).round() as usize).max(1)
    }

    fn mlp_widths(&self, input: usize, output: usize, depth: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(self.mlp_width(), depth - 1));
        w.push(output);
        w
    }

    fn encoder_widths(&self) -> Vec<usize> {
        self.mlp_widths(self.in_channels, self.hidden_channels, self.encoder_depth)
    }

    fn decoder_widths(&self) -> Vec<usize> {
        self.mlp_widths(self.hidden_channels, self.out_channels, self.decoder_depth)
    }

    fn block_widths(&self) -> Vec<usize> {
        self.mlp_widths(self.hidden_channels, self.hidden_channels, 2)
    }

    /// Number of real trainable scalars, without allocating them.
    pub fn param_count(&self) -> usize {
        let mlp = |w: &[usize]| -> usize { w.windows(2).map(|p| p[0] * p[1] + p[1]).sum() };
        let c = self.hidden_channels;
        let spectral = num_coeffs(self.lmax, self.mmax) * c * c * 2;
        let block = spectral + mlp(&self.block_widths()) + c;
        mlp(&self.encoder_widths()) + self.n_layers * block + mlp(&self.decoder_widths())
    }
}

/// Pointwise affine map `y = W x + b` applied at every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = self.weight.dot(&x);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    fn forward(&self, x: Array2<f64>, act: Activation, tape: Option<&mut MlpTape>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut x = x;
        let mut rec = MlpTape::default();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(x.view());
            let prev = std::mem::replace(&mut x, if i == last { z.clone() } else { z.mapv(|v| act.apply(v)) });
            if tape.is_some() {
                rec.inputs.push(prev);
                if i != last {
                    rec.pre.push(z);
                }
            }
        }
        if let Some(t) = tape {
            *t = rec;
        }
        x
    }

    fn backward(&self, tape: &MlpTape, grad_out: Array2<f64>, act: Activation, grads: &mut Mlp) -> Array2<f64> {
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &tape.inputs[i];
            let gl = &mut grads.layers[i];
            gl.weight += &g.dot(&x.t());
            gl.bias += &g.sum_axis(Axis(1));
            let mut gx = layer.weight.t().dot(&g);
            if i > 0 {
                let pre = &tape.pre[i - 1];
                gx.zip_mut_with(pre, |gv, &z| *gv *= act.derivative(z));
            }
            g = gx;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `(mode, c_in, c_out)`, modes in packed `(m, l)` order.
    pub spectral: Array3<Complex64>,
    pub mlp: Mlp,
    pub skip_scale: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    pub encoder: Mlp,
    pub blocks: Vec<Block>,
    pub decoder: Mlp,
}

impl OperatorParams {
    /// All-zero tensors shaped for `cfg`; also the gradient accumulator shape.
    pub fn zeros(cfg: &OperatorConfig) -> Self {
        let c = cfg.hidden_channels;
        let k = num_coeffs(cfg.lmax, cfg.mmax);
        Self {
            encoder: Mlp::zeros(&cfg.encoder_widths()),
            blocks: (0..cfg.n_layers)
                .map(|_| Block {
                    spectral: Array3::zeros((k, c, c)),
                    mlp: Mlp::zeros(&cfg.block_widths()),
                    skip_scale: Array1::zeros(c),
                })
                .collect(),
            decoder: Mlp::zeros(&cfg.decoder_widths()),
        }
    }

    /// Deterministic initialization from `cfg.seed`.
    ///
    /// Dense weights are `U(±1/√fan_in)`, biases zero, spectral weights
    /// complex Gaussian with standard deviation `1/hidden_channels`, skip
    /// scales one.
    pub fn init(cfg: &OperatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let init_mlp = |mlp: &mut Mlp, rng: &mut ChaCha8Rng| {
            for layer in &mut mlp.layers {
                let bound = 1.0 / (layer.weight.ncols() as f64).sqrt();
                layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
            }
        };
        init_mlp(&mut p.encoder, &mut rng);
        let sigma = 1.0 / cfg.hidden_channels as f64;
        let normal = Normal::new(0.0, sigma / 2f64.sqrt()).expect("positive std");
        for block in &mut p.blocks {
            block
                .spectral
                .mapv_inplace(|_| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
            init_mlp(&mut block.mlp, &mut rng);
            block.skip_scale.fill(1.0);
        }
        init_mlp(&mut p.decoder, &mut rng);
        Ok(p)
    }

    /// Named tensors in declaration order as `(name, scalar count)`.
    /// Complex tensors count two scalars per entry (re, im interleaved).
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let mlp = |out: &mut Vec<(String, usize)>, prefix: &str, m: &Mlp| {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), l.weight.len()));
                out.push((format!("{prefix}.{i}.bias"), l.bias.len()));
            }
        };
        mlp(&mut out, "encoder", &self.encoder);
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.spectral"), block.spectral.len() * 2));
            mlp(&mut out, &format!("blocks.{b}.mlp"), &block.mlp);
            out.push((format!("blocks.{b}.skip_scale"), block.skip_scale.len()));
        }
        mlp(&mut out, "decoder", &self.decoder);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    /// Every scalar in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_scalars());
        let mlp = |v: &mut Vec<f64>, m: &Mlp| {
            for l in &m.layers {
                v.extend(l.weight.iter());
                v.extend(l.bias.iter());
            }
        };
        mlp(&mut v, &self.encoder);
        for block in &self.blocks {
            for c in block.spectral.iter() {
                v.push(c.re);
                v.push(c.im);
            }
            mlp(&mut v, &block.mlp);
            v.extend(block.skip_scale.iter());
        }
        mlp(&mut v, &self.decoder);
        v
    }

    /// Inverse of [`OperatorParams::to_flat`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        let mlp = |m: &mut Mlp, it: &mut dyn Iterator<Item = f64>| {
            for l in &mut m.layers {
                l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
                l.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
            }
        };
        mlp(&mut self.encoder, &mut it);
        for block in &mut self.blocks {
            for c in block.spectral.iter_mut() {
                let re = it.next().unwrap();
                let im = it.next().unwrap();
                *c = Complex64::new(re, im);
            }
            mlp(&mut block.mlp, &mut it);
            block.skip_scale.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        mlp(&mut self.decoder, &mut it);
        Ok(())
    }

    /// Hash of every scalar's bit pattern; identifies a parameter state.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.to_flat() {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }

    pub fn add_assign(&mut self, other: &OperatorParams) {
        let add_mlp = |a: &mut Mlp, b: &Mlp| {
            for (x, y) in a.layers.iter_mut().zip(&b.layers) {
                x.weight += &y.weight;
                x.bias += &y.bias;
            }
        };
        add_mlp(&mut self.encoder, &other.encoder);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.spectral += &b.spectral;
            add_mlp(&mut a.mlp, &b.mlp);
            a.skip_scale += &b.skip_scale;
        }
        add_mlp(&mut self.decoder, &other.decoder);
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default)]
struct MlpTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    u: Array2<f64>,
    /// analysis of `u`, `(channel, mode)` flattened
    coeffs: Vec<Complex64>,
    mlp: MlpTape,
}

#[derive(Debug, Clone)]
struct ItemTape {
    encoder: MlpTape,
    blocks: Vec<BlockTape>,
    decoder: MlpTape,
}

/// Activations recorded by [`Sfno::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    fingerprint: u64,
    items: Vec<ItemTape>,
    output: Array4<f64>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.items.len()
    }

    /// The output produced when the tape was recorded.
    pub fn output(&self) -> &Array4<f64> {
        &self.output
    }
}

/// Gradients from one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: OperatorParams,
    /// `(batch, in_channels, nlat, nlon)`
    pub input: Array4<f64>,
}

/// The operator's fixed structure: configuration plus the transform it uses.
#[derive(Debug, Clone)]
pub struct Sfno {
    cfg: OperatorConfig,
    sht: Sht,
}

impl Sfno {
    pub fn new(cfg: OperatorConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = Arc::new(LatLonGrid::gauss_legendre(cfg.nlat, cfg.nlon)?);
        let sht = Sht::new(grid, cfg.lmax, cfg.mmax)?;
        Ok(Self { cfg, sht })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Arc<LatLonGrid> {
        self.sht.grid()
    }

    pub fn sht(&self) -> &Sht {
        &self.sht
    }

    pub fn init_params(&self) -> Result<OperatorParams> {
        OperatorParams::init(&self.cfg)
    }

    fn check_params(&self, p: &OperatorParams) -> Result<()> {
        let want = OperatorParams::zeros(&self.cfg).layout();
        if p.layout() != want {
            return Err(Error::Shape("parameters do not match the operator config".into()));
        }
        Ok(())
    }

    /// The spectral path of one block, `SHT⁻¹(W · SHT(u))`, on a
    /// `(channels, nlat·nlon)` activation. Returns `(output, SHT(u))`.
    pub fn spectral_conv(&self, block: &Block, u: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<Complex64>) {
        let c = self.cfg.hidden_channels;
        let k = self.sht.num_coeffs();
        let npix = self.sht.grid().npix();
        let u = u.as_standard_layout();
        let mut a = vec![Complex64::new(0.0, 0.0); c * k];
        for ch in 0..c {
            let row = u.row(ch);
            self.sht
                .analysis_into(row.as_slice().expect("contiguous row"), &mut a[ch * k..(ch + 1) * k]);
        }
        let mut b = vec![Complex64::new(0.0, 0.0); c * k];
        for mode in 0..k {
            let w = block.spectral.index_axis(Axis(0), mode);
            for ci in 0..c {
                let x = a[ci * k + mode];
                if x.re == 0.0 && x.im == 0.0 {
                    continue;
                }
                for co in 0..c {
                    b[co * k + mode] += w[[ci, co]] * x;
                }
            }
        }
        let mut out = Array2::zeros((c, npix));
        for co in 0..c {
            let mut row = out.row_mut(co);
            self.sht
                .synthesis_into(&b[co * k..(co + 1) * k], row.as_slice_mut().expect("contiguous row"));
        }
        (out, a)
    }

    fn forward_item(
        &self,
        params: &OperatorParams,
        x: Array2<f64>,
        record: bool,
    ) -> Result<(Array2<f64>, Option<ItemTape>)> {
        let act = self.cfg.activation;
        let mut enc_tape = MlpTape::default();
        let mut u = params
            .encoder
            .forward(x, act, record.then_some(&mut enc_tape));
        let mut block_tapes = Vec::new();
        for (bi, block) in params.blocks.iter().enumerate() {
            let (s, coeffs) = self.spectral_conv(block, u.view());
            let mut mlp_tape = MlpTape::default();
            let mut next = block.mlp.forward(s, act, record.then_some(&mut mlp_tape));
            next += &(&u * &block.skip_scale.view().insert_axis(Axis(1)));
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation after block {bi}")));
            }
            let prev = std::mem::replace(&mut u, next);
            if record {
                block_tapes.push(BlockTape {
                    u: prev,
                    coeffs,
                    mlp: mlp_tape,
                });
            }
        }
        let mut dec_tape = MlpTape::default();
        let y = params
            .decoder
            .forward(u, act, record.then_some(&mut dec_tape));
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in decoder output".into()));
        }
        let tape = record.then(|| ItemTape {
            encoder: enc_tape,
            blocks: block_tapes,
            decoder: dec_tape,
        });
        Ok((y, tape))
    }

    /// Evaluate a batch `(batch, in_channels, nlat, nlon)`.
    pub fn forward(
        &self,
        params: &OperatorParams,
        input: ArrayView4<'_, f64>,
        record: bool,
    ) -> Result<(Array4<f64>, Option<ForwardTape>)> {
        self.check_params(params)?;
        let (b, c, nlat, nlon) = input.dim();
        if c != self.cfg.in_channels || (nlat, nlon) != self.grid().shape() {
            return Err(Error::Shape(format!(
                "input is {:?}, operator expects (_, {}, {}, {})",
                input.dim(),
                self.cfg.in_channels,
                self.cfg.nlat,
                self.cfg.nlon
            )));
        }
        let npix = nlat * nlon;
        let results: Vec<Result<(Array2<f64>, Option<ItemTape>)>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = input
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((c, npix))
                    .expect("owned array is contiguous");
                self.forward_item(params, x, record)
            })
            .collect();
        let h = self.cfg.out_channels;
        let mut output = Array4::zeros((b, h, nlat, nlon));
        let mut items = Vec::with_capacity(if record { b } else { 0 });
        for (i, r) in results.into_iter().enumerate() {
            let (y, tape) = r?;
            output
                .index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((h, nlat, nlon)).expect("contiguous"));
            if let Some(t) = tape {
                items.push(t);
            }
        }
        let tape = record.then(|| ForwardTape {
            fingerprint: params.fingerprint(),
            items,
            output: output.clone(),
        });
        Ok((output, tape))
    }

    fn backward_item(
        &self,
        params: &OperatorParams,
        tape: &ItemTape,
        grad_out: Array2<f64>,
    ) -> (OperatorParams, Array2<f64>) {
        let act = self.cfg.activation;
        let c = self.cfg.hidden_channels;
        let k = self.sht.num_coeffs();
        let npix = self.grid().npix();
        let mut grads = OperatorParams::zeros(&self.cfg);

        let mut g = params
            .decoder
            .backward(&tape.decoder, grad_out, act, &mut grads.decoder);

        for (bi, block) in params.blocks.iter().enumerate().rev() {
            let bt = &tape.blocks[bi];
            let gb = &mut grads.blocks[bi];
            // skip path
            gb.skip_scale += &(&g * &bt.u).sum_axis(Axis(1));
            let mut g_u = &g * &block.skip_scale.view().insert_axis(Axis(1));
            // MLP path
            let g_s = block.mlp.backward(&bt.mlp, g, act, &mut gb.mlp);
            let mut g_b = vec![Complex64::new(0.0, 0.0); c * k];
            for co in 0..c {
                let row = g_s.row(co);
                self.sht.synthesis_adjoint_into(
                    row.as_slice().expect("contiguous row"),
                    &mut g_b[co * k..(co + 1) * k],
                );
            }
            let mut g_a = vec![Complex64::new(0.0, 0.0); c * k];
            for mode in 0..k {
                let w = block.spectral.index_axis(Axis(0), mode);
                let mut gw = gb.spectral.index_axis_mut(Axis(0), mode);
                for ci in 0..c {
                    let a_conj = bt.coeffs[ci * k + mode].conj();
                    let mut acc = Complex64::new(0.0, 0.0);
                    for co in 0..c {
                        let gbo = g_b[co * k + mode];
                        gw[[ci, co]] += gbo * a_conj;
                        acc += gbo * w[[ci, co]].conj();
                    }
                    g_a[ci * k + mode] = acc;
                }
            }
            let mut tmp = vec![0.0; npix];
            for ci in 0..c {
                self.sht
                    .analysis_adjoint_into(&g_a[ci * k..(ci + 1) * k], &mut tmp);
                let mut row = g_u.row_mut(ci);
                for (r, t) in row.iter_mut().zip(&tmp) {
                    *r += t;
                }
            }
            g = g_u;
        }

        let g_in = params
            .encoder
            .backward(&tape.encoder, g, act, &mut grads.encoder);
        (grads, g_in)
    }

    /// Reverse pass for a recorded batch.
    ///
    /// Per-item gradients are summed in batch order, so the result does not
    /// depend on how items were scheduled across threads.
    pub fn backward(
        &self,
        params: &OperatorParams,
        tape: &ForwardTape,
        grad_output: ArrayView4<'_, f64>,
    ) -> Result<Gradients> {
        if tape.fingerprint != params.fingerprint() {
            return Err(Error::StaleTape);
        }
        if grad_output.dim() != tape.output.dim() {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, output was {:?}",
                grad_output.dim(),
                tape.output.dim()
            )));
        }
        let (b, h, nlat, nlon) = grad_output.dim();
        let npix = nlat * nlon;
        let mut total = OperatorParams::zeros(&self.cfg);
        let mut input = Array4::zeros((b, self.cfg.in_channels, nlat, nlon));
        let chunk = rayon::current_num_threads().max(1);
        for start in (0..b).step_by(chunk) {
            let end = (start + chunk).min(b);
            let parts: Vec<(OperatorParams, Array2<f64>)> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let g = grad_output
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_shape_with_order((h, npix))
                        .expect("owned array is contiguous");
                    self.backward_item(params, &tape.items[i], g)
                })
                .collect();
            for (offset, (gp, gx)) in parts.into_iter().enumerate() {
                total.add_assign(&gp);
                input.index_axis_mut(Axis(0), start + offset).assign(
                    &gx.into_shape_with_order((self.cfg.in_channels, nlat, nlon))
                        .expect("contiguous"),
                );
            }
        }
        Ok(Gradients {
            params: total,
            input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny_cfg() -> OperatorConfig {
        OperatorConfig {
            n_layers: 2,
            hidden_channels: 3,
            lmax: 4,
            mmax: 3,
            nlat: 5,
            nlon: 6,
            in_channels: 1,
            out_channels: 2,
            mlp_hidden_factor: 2.0,
            activation: Activation::Gelu,
            encoder_depth: 2,
            decoder_depth: 2,
            seed: 4,
        }
    }

    fn input(cfg: &OperatorConfig, b: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 1, cfg.nlat, cfg.nlon), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = tiny_cfg();
        let a = OperatorParams::init(&cfg).unwrap();
        let b = OperatorParams::init(&cfg).unwrap();
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let c = OperatorParams::init(&OperatorConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a, c);
        assert!(a.blocks.iter().all(|b| b.skip_scale.iter().all(|&s| s == 1.0)));
        assert!(a.encoder.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn param_count_matches_allocation() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.param_count(), OperatorParams::zeros(&cfg).num_scalars());
    }

    #[test]
    fn standard_param_count_by_hand() {
        let cfg = OperatorConfig::standard(5);
        // 5135 modes per block, 256² complex weights each
        let spectral = 5135 * 256 * 256 * 2;
        let block_mlp = 256 * 512 + 512 + 512 * 256 + 256;
        let per_block = spectral + block_mlp + 256;
        let encoder = 512 + 512 + 512 * 256 + 256;
        let decoder = 256 * 512 + 512 + 512 * 5 + 5;
        assert_eq!(cfg.param_count(), encoder + 8 * per_block + decoder);
        assert_eq!(spectral, 673_054_720);
    }

    #[test]
    fn flat_round_trip() {
        let cfg = tiny_cfg();
        let p = OperatorParams::init(&cfg).unwrap();
        let mut q = OperatorParams::zeros(&cfg);
        q.load_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.load_flat(&[1.0]).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = tiny_cfg();
        let model = Sfno::new(cfg.clone()).unwrap();
        let p = OperatorParams::zeros(&cfg);
        let (y, _) = model.forward(&p, input(&cfg, 2, 1).view(), false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_skip_path_is_identity() {
        let cfg = OperatorConfig {
            hidden_channels: 1,
            out_channels: 1,
            encoder_depth: 1,
            decoder_depth: 1,
            ..tiny_cfg()
        };
        let model = Sfno::new(cfg.clone()).unwrap();
        let mut p = OperatorParams::zeros(&cfg);
        p.encoder.layers[0].weight.fill(1.0);
        p.decoder.layers[0].weight.fill(1.0);
        for b in &mut p.blocks {
            b.skip_scale.fill(1.0);
        }
        let x = input(&cfg, 3, 2);
        let (y, _) = model.forward(&p, x.view(), false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn batch_equals_single_items() {
        let cfg = tiny_cfg();
        let model = Sfno::new(cfg.clone()).unwrap();
        let p = model.init_params().unwrap();
        let x = input(&cfg, 3, 8);
        let (y, _) = model.forward(&p, x.view(), false).unwrap();
        for i in 0..3 {
            let xi = x.slice(ndarray::s![i..i + 1, .., .., ..]);
            let (yi, _) = model.forward(&p, xi, false).unwrap();
            assert_eq!(yi.index_axis(Axis(0), 0), y.index_axis(Axis(0), i));
        }
    }

    #[test]
    fn tape_records_forward_output() {
        let cfg = tiny_cfg();
        let model = Sfno::new(cfg.clone()).unwrap();
        let p = model.init_params().unwrap();
        let x = input(&cfg, 2, 3);
        let (y, tape) = model.forward(&p, x.view(), true).unwrap();
        let tape = tape.unwrap();
        assert_eq!(tape.batch_size(), 2);
        let (y2, _) = model.forward(&p, x.view(), false).unwrap();
        assert_eq!(tape.output(), &y);
        assert_eq!(y, y2);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let cfg = tiny_cfg();
        let model = Sfno::new(cfg.clone()).unwrap();
        let mut p = model.init_params().unwrap();
        let x = input(&cfg, 1, 3);
        let (y, tape) = model.forward(&p, x.view(), true).unwrap();
        p.decoder.layers[0].bias[0] += 1.0;
        let g = Array4::ones(y.dim());
        assert!(matches!(model.backward(&p, &tape.unwrap(), g.view()), Err(Error::StaleTape)));
    }

    #[test]
    fn zero_output_grad_gives_zero_grads_and_linearity() {
        let cfg = tiny_cfg();
        let model = Sfno::new(cfg.clone()).unwrap();
        let p = model.init_params().unwrap();
        let x = input(&cfg, 2, 5);
        let (y, tape) = model.forward(&p, x.view(), true).unwrap();
        let tape = tape.unwrap();
        let zero = model.backward(&p, &tape, Array4::zeros(y.dim()).view()).unwrap();
        assert!(zero.params.to_flat().iter().all(|&v| v == 0.0));
        assert!(zero.input.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let g1 = model.backward(&p, &tape, g.view()).unwrap();
        let g2 = model.backward(&p, &tape, (&g * 2.0).view()).unwrap();
        for (a, b) in g1.params.to_flat().iter().zip(g2.params.to_flat()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny_cfg();
        let model = Sfno::new(cfg.clone()).unwrap();
        let p = model.init_params().unwrap();
        let bad = Array4::<f64>::zeros((1, 1, 4, 6));
        assert!(matches!(model.forward(&p, bad.view(), false), Err(Error::Shape(_))));
        let other = OperatorParams::zeros(&OperatorConfig { hidden_channels: 4, ..cfg.clone() });
        assert!(model.forward(&other, input(&cfg, 1, 0).view(), false).is_err());
    }
}
