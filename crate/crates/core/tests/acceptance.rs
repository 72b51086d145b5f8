//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! gated criterion fails. The horizon trend is reported but never gates.
//!
//! Knobs: `HELIOPROP_LEARN_EPOCHS` (default 150, at most 300) and
//! `HELIOPROP_TREND_EPOCHS` (default 40).

mod common;

use std::sync::Arc;
use std::time::Instant;

use helioprop::benchmark::{run_learnability, LearnabilityConfig};
use helioprop::dataio::{cube_from_bytes, cube_to_bytes};
use helioprop::grid::{gauss_legendre_rule, CubeMeta, LatLonGrid, RadialGrid, VelocityCube, VelocityMap, R_SUN_KM};
use helioprop::hux::{accelerate_boundary, hux_forward, HuxConfig};
use helioprop::metrics::{emd, sobel_edge_mask, uiqi, EdgeMaskConfig};
use helioprop::sfno::checkpoint::Checkpoint;
use helioprop::sfno::{OperatorConfig, OperatorParams};
use helioprop::sht::Sht;
use helioprop::training::{loss_l2_2d, rollout_steps, windows, NormBounds, WindowMode};
use helioprop::Error;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    audit_config, emd_lp, gradient_audit, legendre_p, loss_oracle, max_abs_diff, random_coeffs, random_field,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn sht_round_trip() -> Outcome {
    let t = Instant::now();
    let sht = Sht::new(Arc::new(LatLonGrid::standard()), 110, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = random_coeffs(&mut rng, 110, 64, 128);
        let f = sht.synthesis(&c).unwrap().remove(0);
        let back = sht.analysis(f.view()).unwrap();
        worst = worst.max(max_abs_diff(back.as_slice(), c.as_slice()));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 10.0,
        format!("111x128, lmax 110, mmax 64, 100 fields: max err {worst:.2e}, {secs:.2}s"),
    )
}

fn quadrature() -> Outcome {
    let (x, w) = gauss_legendre_rule(111);
    let mut worst = 0.0f64;
    for k in 0..=221 {
        let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * legendre_p(k, *xi)).sum();
        let exact = if k == 0 { 2.0 } else { 0.0 };
        worst = worst.max((q - exact).abs());
    }
    outcome(worst < 1e-10, format!("111 nodes, degrees 0..=221: max err {worst:.2e}"))
}

fn gradient() -> Outcome {
    let t = Instant::now();
    let cfg = audit_config();
    let samples = gradient_audit(&cfg, 4, 2024);
    let worst = samples.iter().map(|s| s.rel_error()).fold(0.0, f64::max);
    let tensors: std::collections::HashSet<_> = samples.iter().map(|s| &s.tensor).collect();
    let expected = OperatorParams::zeros(&cfg).layout().len() + 1;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        samples.len() >= 50 && worst < 1e-4 && tensors.len() == expected && secs < 60.0,
        format!(
            "{} samples over {} tensors: max rel err {worst:.2e}, {secs:.2}s",
            samples.len(),
            tensors.len()
        ),
    )
}

fn loss_fixtures() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (b, c, h, w) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..8),
            rng.random_range(1..9),
        );
        let pred = random_field(&mut rng, b, c, h, w);
        let truth = random_field(&mut rng, b, c, h, w);
        let mut mask = Array2::from_shape_fn((b, c), |_| rng.random_bool(0.75));
        mask[[0, 0]] = true;
        let got = loss_l2_2d(pred.view(), truth.view(), mask.view()).unwrap();
        worst = worst.max((got - loss_oracle(&pred, &truth, &mask)).abs());
    }
    outcome(worst < 1e-12, format!("200 fixtures: max |diff| {worst:.2e}"))
}

fn hux_invariants() -> Outcome {
    let (nlat, nlon) = (6, 32);
    let grid = Arc::new(LatLonGrid::gauss_legendre(nlat, nlon).unwrap());
    let rgrid = RadialGrid::standard();
    let plain = HuxConfig {
        apply_acceleration: false,
        ..HuxConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut failures = Vec::new();
    for n in 0..50 {
        let values = Array2::from_shape_fn((nlat, nlon), |_| rng.random_range(280.0..780.0));
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let b = VelocityMap::new(grid.clone(), values.clone()).unwrap();
        let cube = hux_forward(&b, &rgrid, &plain).unwrap();
        if !cube.data().iter().all(|&v| v >= lo && v <= hi) {
            failures.push(format!("bounds #{n}"));
        }
        let k = rng.random_range(1..nlon);
        let rolled = Array2::from_shape_fn((nlat, nlon), |(i, j)| values[[i, (j + k) % nlon]]);
        let rc = hux_forward(&VelocityMap::new(grid.clone(), rolled).unwrap(), &rgrid, &plain).unwrap();
        let exact = (0..rgrid.nr()).all(|r| {
            (0..nlat).all(|i| (0..nlon).all(|j| rc.slice(r)[[i, j]].to_bits() == cube.slice(r)[[i, (j + k) % nlon]].to_bits()))
        });
        if !exact {
            failures.push(format!("rotation #{n}"));
        }
        // a rotation rate that breaks CFL at the first step must be refused
        let c0 = rgrid.step(0) * R_SUN_KM * plain.omega_rot / (lo * grid.dphi());
        let fast = HuxConfig {
            omega_rot: plain.omega_rot * 1.5 / c0,
            ..plain
        };
        if !matches!(hux_forward(&b, &rgrid, &fast), Err(Error::Stability { slice: 0, .. })) {
            failures.push(format!("cfl #{n}"));
        }
    }
    let uniform = hux_forward(&VelocityMap::constant(grid.clone(), 512.5), &rgrid, &plain).unwrap();
    if !uniform.data().iter().all(|&v| v == 512.5) {
        failures.push("uniform".into());
    }
    let b = VelocityMap::new(grid.clone(), Array2::from_shape_fn((nlat, nlon), |(i, j)| 300.0 + (7 * i + 13 * j) as f64)).unwrap();
    let still = HuxConfig {
        omega_rot: 0.0,
        ..HuxConfig::default()
    };
    let frozen = hux_forward(&b, &rgrid, &still).unwrap();
    let boosted = accelerate_boundary(&b, &still, rgrid.values()[0]).unwrap();
    if !(0..rgrid.nr()).all(|r| frozen.slice(r) == boosted.values()) {
        failures.push("omega=0".into());
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "50 boundaries: bounds, exact roll equivariance, CFL refusal; uniform and omega=0 exact".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn window_arithmetic() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for h in [5, 10, 20, 139] {
        let ws = windows(140, h, WindowMode::Aligned);
        let calls = rollout_steps(140, h);
        let valid: usize = ws.iter().map(|w| w.valid).sum();
        let predicted = 1 + calls * h;
        let discarded = calls * h - valid;
        let want_discard = if h == 139 { 0 } else { 1 };
        ok &= valid == 139 && calls == ws.len() && discarded == want_discard && predicted - discarded == 140;
        lines.push(format!("H={h}: {calls} calls, {discarded} discarded"));
    }
    outcome(ok, lines.join("; "))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = Array2::from_shape_fn((4, 4), |_| rng.random_range(250.0..850.0));
        let b = Array2::from_shape_fn((4, 4), |_| rng.random_range(250.0..850.0));
        let lp = emd_lp(a.as_slice().unwrap(), b.as_slice().unwrap());
        worst = worst.max((emd(a.view(), b.view()).unwrap() - lp).abs());
    }
    let x = Array2::from_shape_fn((6, 8), |(i, j)| 300.0 + (i * 8 + j) as f64 * 3.5);
    let q = uiqi(x.view(), x.view()).unwrap();
    let step = Array2::from_shape_fn((5, 8), |(_, j)| if j < 4 { 350.0 } else { 750.0 });
    let mask = sobel_edge_mask(step.view(), &EdgeMaskConfig::default()).unwrap();
    let want: Array2<bool> = Array2::from_shape_fn((5, 8), |(_, j)| [0, 3, 4, 7].contains(&j));
    let sobel_ok = mask.mask == want;
    outcome(
        worst < 1e-9 && q == 1.0 && sobel_ok,
        format!("EMD vs LP max |diff| {worst:.2e}; UIQI(x,x) = {q}; Sobel 5x8 fixture {}", if sobel_ok { "matches" } else { "differs" }),
    )
}

fn persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let dir = tempfile::tempdir().unwrap();
    let mut bad = 0;
    for n in 0..100 {
        let (nr, nlat, nlon) = (rng.random_range(2..8), rng.random_range(2..9), 2 * rng.random_range(1..6));
        let data = Array3::from_shape_fn((nr, nlat, nlon), |_| rng.random_range(-1e4..1e4));
        let cube = VelocityCube::new(
            RadialGrid::uniform(nr, 30.0, 215.032).unwrap(),
            Arc::new(LatLonGrid::gauss_legendre(nlat, nlon).unwrap()),
            data,
            CubeMeta {
                carrington_rotation: Some(1625 + n),
                ..CubeMeta::default()
            },
        )
        .unwrap();
        let path = dir.path().join(format!("c{n}.hwc"));
        helioprop::dataio::save_cube(&cube, &path).unwrap();
        let back = helioprop::dataio::load_cube(&path).unwrap();
        if cube_to_bytes(&back) != std::fs::read(&path).unwrap() || back != cube {
            bad += 1;
        }
        if cube_from_bytes(&cube_to_bytes(&cube)).map(|c| cube_to_bytes(&c)).ok() != Some(cube_to_bytes(&cube)) {
            bad += 1;
        }

        let mut cfg = OperatorConfig::small(rng.random_range(2..7), 2 * rng.random_range(1..5), rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..4));
        cfg.seed = rng.random();
        let ck = Checkpoint::new(cfg.clone(), Some(NormBounds::new(300.0, 800.0).unwrap()), OperatorParams::init(&cfg).unwrap());
        let cpath = dir.path().join(format!("m{n}.sfnp"));
        ck.save(&cpath).unwrap();
        let back = Checkpoint::load(&cpath).unwrap();
        if back.to_bytes().unwrap() != std::fs::read(&cpath).unwrap() || back != ck {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("100 cubes + 100 checkpoints, {bad} mismatches"))
}

struct Learned {
    ratio: f64,
    checkpoint: Vec<u8>,
    reports: Vec<String>,
}

fn learn(cfg: &LearnabilityConfig) -> (Outcome, Option<Learned>) {
    let t = Instant::now();
    match run_learnability(cfg) {
        Ok(res) => {
            let ratio = res.ratio();
            let detail = format!(
                "{} epochs, H={}: rollout MSE {:.1} vs constant-boundary {:.1} (ratio {:.4}, best epoch {}), {:.0}s",
                cfg.train.epochs,
                cfg.train.horizon,
                res.model_mse,
                res.baseline_mse,
                ratio,
                res.outcome.best_epoch,
                t.elapsed().as_secs_f64()
            );
            let learned = Learned {
                ratio,
                checkpoint: res.outcome.checkpoint.to_bytes().unwrap(),
                reports: res.reports.iter().map(|r| r.to_json().unwrap()).collect(),
            };
            (outcome(ratio < 0.25, detail), Some(learned))
        }
        Err(e) => (outcome(false, format!("benchmark failed: {e}")), None),
    }
}

fn horizon_trend(base: &LearnabilityConfig, epochs: usize) -> Outcome {
    let horizons = [5, 10, 20, 39];
    let mut table = Vec::new();
    let mut monotone_seeds = 0;
    let mut monotone_short = 0;
    for seed in 0..3u64 {
        let mut row = Vec::new();
        for &h in &horizons {
            let mut cfg = base.clone();
            cfg.train.horizon = h;
            cfg.train.epochs = epochs;
            cfg.train.seed = seed;
            row.push(run_learnability(&cfg).map(|r| r.model_mse).unwrap_or(f64::NAN));
        }
        if row.windows(2).all(|w| w[0] <= w[1]) {
            monotone_seeds += 1;
        }
        if row[..3].windows(2).all(|w| w[0] <= w[1]) {
            monotone_short += 1;
        }
        table.push(format!(
            "seed {seed}: {}",
            row.iter().zip(&horizons).map(|(m, h)| format!("H{h}={m:.0}")).collect::<Vec<_>>().join(" ")
        ));
    }
    outcome(
        monotone_seeds == 3,
        format!(
            "{epochs} epochs, {monotone_seeds}/3 seeds monotone over all H, {monotone_short}/3 over H<=20; {}",
            table.join("; ")
        ),
    )
}

fn main() {
    // `cargo test -- --list` and similar probes expect no work
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut gated_failures = 0;
    let mut report = |name: &str, o: Outcome, gated: bool| {
        let tag = match (o.pass, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (soft, not gating)",
        };
        if !o.pass && gated {
            gated_failures += 1;
        }
        println!("{tag}  {name}: {}", o.detail);
    };

    report("SHT round trip", sht_round_trip(), true);
    report("Quadrature exactness", quadrature(), true);
    report("Gradient audit", gradient(), true);
    report("Loss oracle", loss_fixtures(), true);
    report("HUX-f invariants", hux_invariants(), true);
    report("Window arithmetic", window_arithmetic(), true);
    report("Metric oracles", metric_oracles(), true);

    let mut cfg = LearnabilityConfig::default();
    cfg.train.epochs = env_usize("HELIOPROP_LEARN_EPOCHS", 150).min(300);
    let (learn_outcome, first) = learn(&cfg);
    report("Learnability", learn_outcome, true);

    let trend_epochs = env_usize("HELIOPROP_TREND_EPOCHS", 40);
    report("Horizon trend", horizon_trend(&cfg, trend_epochs), false);

    let (_, second) = learn(&cfg);
    let determinism = match (first, second) {
        (Some(a), Some(b)) => outcome(
            a.checkpoint == b.checkpoint && a.reports == b.reports && a.ratio == b.ratio,
            format!(
                "checkpoints {} ({} bytes), reports {}",
                if a.checkpoint == b.checkpoint { "identical" } else { "differ" },
                a.checkpoint.len(),
                if a.reports == b.reports { "identical" } else { "differ" }
            ),
        ),
        _ => outcome(false, "benchmark did not complete twice"),
    };
    report("Determinism", determinism, true);
    report("Persistence", persistence(), true);

    if gated_failures > 0 {
        println!("{gated_failures} gated criteria failed");
        std::process::exit(1);
    }
}
