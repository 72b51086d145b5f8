use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use helioprop::dataio::{generate_dataset, load_cube, save_cube, write_dataset, Manifest, SplitLabel, SplitProtocol, SynthConfig};
use helioprop::grid::VelocityCube;
use helioprop::hux::{hux_forward, HuxConfig};
use helioprop::metrics::{evaluate_cube, EdgeMaskConfig, MetricsConfig, UiqiMode};
use helioprop::rollout::rollout as run_rollout;
use helioprop::sfno::checkpoint::Checkpoint;
use helioprop::sfno::{Activation, OperatorConfig, Sfno};
use helioprop::training::{train as run_train, write_loss_csv, TrainConfig, WindowMode};

use crate::{EvalArgs, GenArgs, MissingInput, RolloutArgs, TrainArgs, Windows};

pub fn require(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

pub fn load_input(path: &Path) -> anyhow::Result<VelocityCube> {
    require(path)?;
    load_cube(path).with_context(|| format!("loading cube {}", path.display()))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn gen(a: &GenArgs) -> anyhow::Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_cubes: a.n,
        seed: a.seed,
        v_slow: a.v_slow,
        v_fast: a.v_fast,
        stream_lmax: a.stream_lmax,
        hux: HuxConfig {
            alpha: a.alpha,
            ..defaults.hux
        },
        nlat: a.nlat,
        nlon: a.nlon,
        nr: a.nr,
        ..defaults
    };
    let cubes = generate_dataset(&cfg)?;
    let protocol = SplitProtocol::ChronologicalFraction {
        fraction: a.train_fraction,
    };
    let manifest = write_dataset(&a.out_dir, &cubes, &protocol, Some(cfg))?;
    let count = |l| manifest.cubes.iter().filter(|e| e.split == l).count();
    println!(
        "wrote {} cubes ({} train, {} test) of {}x{}x{} to {} (seed {})",
        cubes.len(),
        count(SplitLabel::Train),
        count(SplitLabel::Test),
        a.nr,
        a.nlat,
        a.nlon,
        a.out_dir.display(),
        a.seed
    );
    Ok(())
}

fn default_loss_csv(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}_loss.csv"))
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    require(&a.manifest)?;
    let manifest = Manifest::load(&a.manifest)?;
    let cubes = manifest
        .load_split(&a.manifest, SplitLabel::Train)
        .context("loading training cubes")?;
    let Some(first) = cubes.first() else {
        bail!("{} lists no training cubes", a.manifest.display());
    };
    let (nlat, nlon) = first.grid().shape();
    let lmax = a.lmax.unwrap_or(110.min(nlat - 1));
    let mmax = a.mmax.unwrap_or(64.min(nlon / 2).min(lmax));
    let model_cfg = OperatorConfig {
        n_layers: a.layers,
        hidden_channels: a.channels,
        lmax,
        mmax,
        nlat,
        nlon,
        in_channels: 1,
        out_channels: a.horizon,
        mlp_hidden_factor: 2.0,
        activation: Activation::Gelu,
        encoder_depth: 2,
        decoder_depth: 2,
        seed: a.seed,
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        horizon: a.horizon,
        seed: a.seed,
        val_fraction: a.val_fraction,
        windows: match a.windows {
            Windows::Aligned => WindowMode::Aligned,
            Windows::EveryIndex => WindowMode::EveryIndex,
        },
        ..TrainConfig::default()
    };
    let outcome = run_train(&cubes, &cfg, &model_cfg)?;
    create_parent(&a.out)?;
    outcome.checkpoint.save(&a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| default_loss_csv(&a.out));
    create_parent(&csv)?;
    write_loss_csv(&outcome.history, &csv)?;
    let last = outcome.history.last().map_or(outcome.initial_train_loss, |r| r.train_loss);
    println!(
        "trained {} epochs on {} cubes: loss {:.6e} -> {:.6e}, best epoch {}; wrote {} and {}",
        a.epochs,
        cubes.len(),
        outcome.initial_train_loss,
        last,
        outcome.best_epoch,
        a.out.display(),
        csv.display()
    );
    Ok(())
}

pub fn rollout(a: &RolloutArgs) -> anyhow::Result<()> {
    require(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let source = load_input(&a.boundary)?;
    let horizon = a.horizon.unwrap_or(ck.header.operator.out_channels);
    let Some(bounds) = ck.header.bounds else {
        bail!("{} carries no normalization bounds", a.checkpoint.display());
    };
    let model = Sfno::new(ck.header.operator.clone())?;
    let mut pred = run_rollout(&model, &ck.params, &source.boundary(), horizon, &bounds, source.rgrid())
        .with_context(|| format!("rolling out {} with {}", a.boundary.display(), a.checkpoint.display()))?;
    pred.meta.carrington_rotation = source.meta.carrington_rotation;
    create_parent(&a.out)?;
    save_cube(&pred, &a.out)?;
    println!("wrote {} radii (horizon {horizon}) to {}", pred.nr(), a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let truth = load_input(&a.truth)?;
    let (pred, pred_name) = match &a.pred {
        Some(p) => (load_input(p)?, p.display().to_string()),
        None => {
            let cfg = HuxConfig {
                alpha: a.alpha,
                apply_acceleration: a.hux_accelerate,
                ..HuxConfig::default()
            };
            (hux_forward(&truth.boundary(), truth.rgrid(), &cfg)?, "hux-f".to_string())
        }
    };
    let cfg = MetricsConfig {
        edge: EdgeMaskConfig {
            threshold_fraction: a.edge_threshold,
        },
        uiqi: match a.uiqi_window {
            Some(size) => UiqiMode::Window { size },
            None => UiqiMode::Global,
        },
    };
    let mut report = evaluate_cube(&pred, &truth, &cfg).context("evaluating prediction against truth")?;
    report.meta.label = a.label.clone().unwrap_or_else(|| pred_name.clone());
    report.meta.pred = Some(pred_name);
    report.meta.truth = Some(a.truth.display().to_string());
    create_parent(&a.out_json)?;
    create_parent(&a.out_csv)?;
    report.save_json(&a.out_json)?;
    report.save_csv_summary(&a.out_csv)?;
    let m = report.cube_mean;
    let edge = m.edge_mse.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: mse {:.4}, edge mse {edge}, emd {:.4}, uiqi {:.4} over {} slices",
        report.meta.label,
        m.mse,
        m.emd,
        m.uiqi,
        report.per_slice.len()
    );
    Ok(())
}
