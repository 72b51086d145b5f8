//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Nothing here calls into the code under test
//! except to obtain inputs.
#![allow(dead_code)]

use helioprop::sfno::{OperatorConfig, OperatorParams, Sfno};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Min-cost perfect matching (Hungarian / Kuhn–Munkres, O(n³)).
///
/// For equal-size uniform histograms the transport polytope's vertices are
/// permutation matrices, so this is the exact LP optimum.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based potentials, classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

/// EMD between two equal-size samples as an assignment problem.
pub fn emd_lp(a: &[f64], b: &[f64]) -> f64 {
    let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect();
    min_cost_assignment(&cost) / a.len() as f64
}

/// Layer-wise L2 loss by straight loops.
pub fn loss_oracle(pred: &Array4<f64>, truth: &Array4<f64>, mask: &Array2<bool>) -> f64 {
    let (b, c, h, w) = pred.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            if !mask[[bi, ci]] {
                continue;
            }
            let mut sq = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let d = pred[[bi, ci, i, j]] - truth[[bi, ci, i, j]];
                    sq += d * d;
                }
            }
            total += sq.sqrt();
            count += 1;
        }
    }
    total / count as f64
}

/// Legendre P_k(x) by Bonnet's recurrence.
pub fn legendre_p(k: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if k == 0 {
        return p0;
    }
    for n in 1..k {
        let p2 = ((2 * n + 1) as f64 * x * p1 - n as f64 * p0) / (n + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Linear upwind advection `u ← (1−c) u_j + c u_{j+1}` applied `steps`
/// times, written as its closed-form binomial kernel.
pub fn binomial_advect(u0: &[f64], c: f64, steps: usize) -> Vec<f64> {
    let n = u0.len();
    let mut coef = vec![0.0; steps + 1];
    // C(N,k) c^k (1−c)^(N−k) via logs for stability
    let ln_fact = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    for (k, w) in coef.iter_mut().enumerate() {
        let ln = ln_fact(steps) - ln_fact(k) - ln_fact(steps - k)
            + k as f64 * c.ln()
            + (steps - k) as f64 * (1.0 - c).ln();
        *w = ln.exp();
    }
    (0..n)
        .map(|j| coef.iter().enumerate().map(|(k, w)| w * u0[(j + k) % n]).sum())
        .collect()
}

pub fn naive_mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let (h, w) = a.dim();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            s += (a[[i, j]] - b[[i, j]]).powi(2);
        }
    }
    s / (h * w) as f64
}

/// Sobel magnitude by explicit 3×3 kernel loops with periodic longitude and
/// replicated latitude edges.
pub fn naive_sobel(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for di in 0..3 {
            for dj in 0..3 {
                let r = (i as isize + di as isize - 1).clamp(0, h as isize - 1) as usize;
                let c = (j + w + dj - 1) % w;
                gx += kx[di][dj] * x[[r, c]];
                gy += ky[di][dj] * x[[r, c]];
            }
        }
        (gx * gx + gy * gy).sqrt()
    })
}

pub fn naive_uiqi(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let xs: Vec<f64> = x.iter().copied().collect();
    let ys: Vec<f64> = y.iter().copied().collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let vx = xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let vy = ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0);
    let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    4.0 * cxy * mx * my / ((vx + vy) * (mx * mx + my * my))
}

pub fn random_field(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((b, c, h, w), |_| rng.random_range(-1.0..1.0))
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + 1e-8)
    }
}

/// `L = Σ g ⊙ f(x)` for a fixed random `g`, so its gradient is `backward(g)`.
fn probe_loss(model: &Sfno, params: &OperatorParams, x: ArrayView4<'_, f64>, g: &Array4<f64>) -> f64 {
    let (y, _) = model.forward(params, x, false).expect("forward");
    (&y * g).sum()
}

/// Central-difference audit of `per_tensor` scalars from every parameter
/// tensor, plus a few input entries under the name `input`.
pub fn gradient_audit(cfg: &OperatorConfig, per_tensor: usize, seed: u64) -> Vec<GradSample> {
    let model = Sfno::new(cfg.clone()).expect("config");
    let mut params = model.init_params().expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move every scalar off its init value so biases and skips are generic
    let mut flat = params.to_flat();
    for v in flat.iter_mut() {
        *v += 0.1 * rng.random_range(-1.0..1.0);
    }
    params.load_flat(&flat).unwrap();
    let x = random_field(&mut rng, 2, cfg.in_channels, cfg.nlat, cfg.nlon).mapv(|v| 0.5 + 0.5 * v);
    let g = random_field(&mut rng, 2, cfg.out_channels, cfg.nlat, cfg.nlon);

    let (_, tape) = model.forward(&params, x.view(), true).unwrap();
    let grads = model.backward(&params, &tape.unwrap(), g.view()).unwrap();
    let analytic = grads.params.to_flat();

    let eps = 1e-5;
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, len) in params.layout() {
        for _ in 0..per_tensor.min(len) {
            let idx = offset + rng.random_range(0..len);
            let mut plus = flat.clone();
            plus[idx] += eps;
            let mut minus = flat.clone();
            minus[idx] -= eps;
            let mut pp = params.clone();
            pp.load_flat(&plus).unwrap();
            let lp = probe_loss(&model, &pp, x.view(), &g);
            pp.load_flat(&minus).unwrap();
            let lm = probe_loss(&model, &pp, x.view(), &g);
            out.push(GradSample {
                tensor: name.clone(),
                index: idx,
                analytic: analytic[idx],
                numeric: (lp - lm) / (2.0 * eps),
            });
        }
        offset += len;
    }
    for _ in 0..per_tensor {
        let (b, i, j) = (rng.random_range(0..2), rng.random_range(0..cfg.nlat), rng.random_range(0..cfg.nlon));
        let mut xp = x.clone();
        xp[[b, 0, i, j]] += eps;
        let lp = probe_loss(&model, &params, xp.view(), &g);
        xp[[b, 0, i, j]] -= 2.0 * eps;
        let lm = probe_loss(&model, &params, xp.view(), &g);
        out.push(GradSample {
            tensor: "input".into(),
            index: (b * cfg.nlat + i) * cfg.nlon + j,
            analytic: grads.input[[b, 0, i, j]],
            numeric: (lp - lm) / (2.0 * eps),
        });
    }
    out
}

/// The small configuration the gradient check is specified on.
pub fn audit_config() -> OperatorConfig {
    OperatorConfig {
        n_layers: 2,
        hidden_channels: 8,
        lmax: 6,
        mmax: 4,
        nlat: 7,
        nlon: 8,
        in_channels: 1,
        out_channels: 3,
        seed: 17,
        ..OperatorConfig::small(7, 8, 2, 8, 3)
    }
}

/// Random coefficients of a real field: `m = 0` and the Nyquist order (when
/// present) carry no imaginary part.
pub fn random_coeffs(
    rng: &mut ChaCha8Rng,
    lmax: usize,
    mmax: usize,
    nlon: usize,
) -> helioprop::sht::SpectralCoeffs {
    let mut c = helioprop::sht::SpectralCoeffs::zeros(lmax, mmax, 1);
    for m in 0..=mmax {
        for l in m..=lmax {
            let re = rng.random_range(-1.0..1.0);
            let im = if m == 0 || 2 * m == nlon { 0.0 } else { rng.random_range(-1.0..1.0) };
            c.set(0, l, m, num_complex::Complex64::new(re, im));
        }
    }
    c
}

pub fn max_abs_diff(a: &[num_complex::Complex64], b: &[num_complex::Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}
