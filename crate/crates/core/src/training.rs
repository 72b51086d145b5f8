//! Layer-wise L2 loss, min-max normalization, teacher-forced windows, Adam and
//! the training / cross-validation drivers.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VelocityCube;
use crate::metrics;
use crate::rollout;
use crate::sfno::checkpoint::Checkpoint;
use crate::sfno::{OperatorConfig, OperatorParams, Sfno};

/// Min-max bounds of the training split, km/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub v_min: f64,
    pub v_max: f64,
}

impl NormBounds {
    pub fn new(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max) {
            return Err(Error::InvalidArgument(format!(
                "degenerate normalization bounds [{v_min}, {v_max}]"
            )));
        }
        Ok(Self { v_min, v_max })
    }

    /// Bounds over every value of every cube.
    pub fn from_cubes<'a>(cubes: impl IntoIterator<Item = &'a VelocityCube>) -> Result<Self> {
        let (lo, hi) = cubes
            .into_iter()
            .flat_map(|c| c.data().iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self::new(lo, hi)
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.v_min) / (self.v_max - self.v_min)
    }

    #[inline]
    pub fn denormalize(&self, x: f64) -> f64 {
        x * (self.v_max - self.v_min) + self.v_min
    }

    /// Values outside the bounds map outside `[0, 1]`; nothing is clipped.
    pub fn normalize_cube(&self, cube: &VelocityCube) -> Array3<f64> {
        cube.data().mapv(|v| self.normalize(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Windows start at `0, H, 2H, …`, the same inputs a rollout sees.
    #[default]
    Aligned,
    /// A window starts at every radius.
    EveryIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub horizon: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub folds: usize,
    #[serde(default)]
    pub windows: WindowMode,
    /// Trailing fraction of the training cubes held out for checkpoint selection.
    pub val_fraction: f64,
    /// Shuffle cubes before assigning cross-validation folds.
    #[serde(default)]
    pub cv_shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            batch_size: 32,
            epochs: 200,
            horizon: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            folds: 5,
            windows: WindowMode::Aligned,
            val_fraction: 0.1,
            cv_shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.horizon == 0 || self.folds == 0 {
            return bad("batch_size, horizon and folds must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction = {}", self.val_fraction));
        }
        Ok(())
    }
}

/// A window: input radius `start`, targets `start+1 ..= start+horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    /// Targets that exist; the rest of the horizon runs past the last radius.
    pub valid: usize,
}

/// Window layout for a cube with `nr` radii.
pub fn windows(nr: usize, horizon: usize, mode: WindowMode) -> Vec<Window> {
    let step = match mode {
        WindowMode::Aligned => horizon,
        WindowMode::EveryIndex => 1,
    };
    (0..nr.saturating_sub(1))
        .step_by(step.max(1))
        .map(|start| Window {
            start,
            valid: horizon.min(nr - 1 - start),
        })
        .collect()
}

/// Number of forward calls a rollout over `nr` radii makes.
pub fn rollout_steps(nr: usize, horizon: usize) -> usize {
    (nr - 1).div_ceil(horizon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Array2<f64>,
    /// `(horizon, nlat, nlon)`; masked targets are zero.
    pub target: Array3<f64>,
    pub valid_mask: Vec<bool>,
}

/// Rollout-aligned ground-truth windows of one cube.
pub fn make_teacher_forced_samples(cube: &VelocityCube, horizon: usize) -> Result<Vec<TrainSample>> {
    let nr = cube.nr();
    if horizon == 0 || horizon > nr - 1 {
        return Err(Error::Shape(format!(
            "horizon {horizon} does not fit a cube with {nr} slices"
        )));
    }
    let (nlat, nlon) = cube.grid().shape();
    Ok(windows(nr, horizon, WindowMode::Aligned)
        .into_iter()
        .map(|w| {
            let mut target = Array3::zeros((horizon, nlat, nlon));
            target
                .slice_mut(s![..w.valid, .., ..])
                .assign(&cube.data().slice(s![w.start + 1..w.start + 1 + w.valid, .., ..]));
            TrainSample {
                input: cube.slice(w.start).to_owned(),
                target,
                valid_mask: (0..horizon).map(|h| h < w.valid).collect(),
            }
        })
        .collect())
}

fn check_loss_shapes(pred: &ArrayView4<'_, f64>, truth: &ArrayView4<'_, f64>, mask: &ArrayView2<'_, bool>) -> Result<()> {
    let (b, c, _, _) = pred.dim();
    if pred.dim() != truth.dim() || mask.dim() != (b, c) {
        return Err(Error::Shape(format!(
            "pred {:?}, truth {:?}, mask {:?}",
            pred.dim(),
            truth.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Layer-wise 2-D L2 loss: the Euclidean norm of each unmasked
/// `(batch, channel)` slice error, averaged over those slices.
pub fn loss_l2_2d(pred: ArrayView4<'_, f64>, truth: ArrayView4<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<f64> {
    Ok(loss_terms(pred, truth, mask)?.0)
}

/// `(loss, per-slice norms, pair count)`; norms are zero where masked.
fn loss_terms(
    pred: ArrayView4<'_, f64>,
    truth: ArrayView4<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> Result<(f64, Array2<f64>, usize)> {
    check_loss_shapes(&pred, &truth, &mask)?;
    let (b, c, _, _) = pred.dim();
    let mut norms = Array2::zeros((b, c));
    let mut count = 0;
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            if !mask[[bi, ci]] {
                continue;
            }
            let p = pred.slice(s![bi, ci, .., ..]);
            let t = truth.slice(s![bi, ci, .., ..]);
            let sq: f64 = p.iter().zip(t.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
            let n = sq.sqrt();
            norms[[bi, ci]] = n;
            total += n;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64, norms, count))
}

/// Loss and its gradient with respect to `pred`. A slice with zero error
/// contributes a zero gradient.
pub fn loss_l2_2d_with_grad(
    pred: ArrayView4<'_, f64>,
    truth: ArrayView4<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> Result<(f64, Array4<f64>)> {
    let (loss, norms, count) = loss_terms(pred, truth, mask)?;
    let mut grad = Array4::zeros(pred.dim());
    let (b, c, _, _) = pred.dim();
    for bi in 0..b {
        for ci in 0..c {
            let n = norms[[bi, ci]];
            if !mask[[bi, ci]] || n == 0.0 {
                continue;
            }
            let scale = 1.0 / (n * count as f64);
            let mut g = grad.slice_mut(s![bi, ci, .., ..]);
            let p = pred.slice(s![bi, ci, .., ..]);
            let t = truth.slice(s![bi, ci, .., ..]);
            ndarray::Zip::from(&mut g)
                .and(&p)
                .and(&t)
                .for_each(|g, &p, &t| *g = (p - t) * scale);
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at scalar {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest selection loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Loss of the initial parameters on the training windows.
    pub initial_train_loss: f64,
    pub best_epoch: usize,
}

/// Write `epoch,train_loss,val_loss`; a missing validation loss is empty.
pub fn write_loss_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!("{},{:e},{}\n", r.epoch, r.train_loss, val));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

struct WindowSet<'a> {
    cubes: &'a [Array3<f64>],
    /// `(cube index, window)`
    items: Vec<(usize, Window)>,
    horizon: usize,
}

impl<'a> WindowSet<'a> {
    fn new(cubes: &'a [Array3<f64>], horizon: usize, mode: WindowMode) -> Self {
        let items = cubes
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| windows(c.dim().0, horizon, mode).into_iter().map(move |w| (ci, w)))
            .collect();
        Self { cubes, items, horizon }
    }

    fn batch(&self, ids: &[usize]) -> (Array4<f64>, Array4<f64>, Array2<bool>) {
        let (_, nlat, nlon) = self.cubes[0].dim();
        let h = self.horizon;
        let b = ids.len();
        let mut input = Array4::zeros((b, 1, nlat, nlon));
        let mut target = Array4::zeros((b, h, nlat, nlon));
        let mut mask = Array2::from_elem((b, h), false);
        for (bi, &id) in ids.iter().enumerate() {
            let (ci, w) = self.items[id];
            let cube = &self.cubes[ci];
            input
                .slice_mut(s![bi, 0, .., ..])
                .assign(&cube.index_axis(Axis(0), w.start));
            target
                .slice_mut(s![bi, ..w.valid, .., ..])
                .assign(&cube.slice(s![w.start + 1..w.start + 1 + w.valid, .., ..]));
            mask.slice_mut(s![bi, ..w.valid]).fill(true);
        }
        (input, target, mask)
    }

    fn total_pairs(&self) -> usize {
        self.items.iter().map(|(_, w)| w.valid).sum()
    }

    /// Mean slice-error norm over every window, evaluated in index order.
    fn evaluate(&self, model: &Sfno, params: &OperatorParams, batch_size: usize) -> Result<f64> {
        let ids: Vec<usize> = (0..self.items.len()).collect();
        let mut per_window = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(batch_size) {
            let (input, target, mask) = self.batch(chunk);
            let (pred, _) = model.forward(params, input.view(), false)?;
            let (_, norms, _) = loss_terms(pred.view(), target.view(), mask.view())?;
            per_window.extend(norms.rows().into_iter().map(|r| r.sum()));
        }
        // same summation order as the epoch loss
        Ok(per_window.iter().sum::<f64>() / self.total_pairs() as f64)
    }
}

fn check_dataset(dataset: &[VelocityCube], model_cfg: &OperatorConfig, horizon: usize) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("training needs at least one cube".into()))?;
    if dataset.iter().any(|c| !c.same_grids(first)) {
        return Err(Error::Shape("cubes in the dataset use different grids".into()));
    }
    if first.grid().shape() != (model_cfg.nlat, model_cfg.nlon) {
        return Err(Error::Shape(format!(
            "cubes are on a {:?} grid, operator expects {}x{}",
            first.grid().shape(),
            model_cfg.nlat,
            model_cfg.nlon
        )));
    }
    if model_cfg.out_channels != horizon || model_cfg.in_channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "operator maps {} -> {} channels, training needs 1 -> {horizon}",
            model_cfg.in_channels, model_cfg.out_channels
        )));
    }
    if horizon > first.nr() - 1 {
        return Err(Error::Shape(format!("horizon {horizon} exceeds {} targets", first.nr() - 1)));
    }
    Ok(())
}

/// Teacher-forced training with best-checkpoint selection.
///
/// The trailing `val_fraction` of `dataset` (in the given, chronological
/// order) is held out for selection; when that rounds to zero cubes the
/// training loss selects instead. Normalization bounds come from the
/// training cubes only.
pub fn train(dataset: &[VelocityCube], cfg: &TrainConfig, model_cfg: &OperatorConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset, model_cfg, cfg.horizon)?;
    let n_val = (dataset.len() as f64 * cfg.val_fraction).floor() as usize;
    let (train_cubes, val_cubes) = dataset.split_at(dataset.len() - n_val);
    let bounds = NormBounds::from_cubes(train_cubes)?;
    let norm_train: Vec<Array3<f64>> = train_cubes.iter().map(|c| bounds.normalize_cube(c)).collect();
    let norm_val: Vec<Array3<f64>> = val_cubes.iter().map(|c| bounds.normalize_cube(c)).collect();

    let model = Sfno::new(model_cfg.clone())?;
    let mut params = model.init_params()?;
    let train_set = WindowSet::new(&norm_train, cfg.horizon, cfg.windows);
    let val_set = WindowSet::new(&norm_val, cfg.horizon, WindowMode::Aligned);
    let total_pairs = train_set.total_pairs() as f64;

    let adam = AdamConfig::from(cfg);
    let mut flat = params.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.items.len()).collect();

    let initial_train_loss = train_set.evaluate(&model, &params, cfg.batch_size)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, OperatorParams)> = None;
    let mut per_window = vec![0.0; order.len()];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (input, target, mask) = train_set.batch(chunk);
            let (pred, tape) = model.forward(&params, input.view(), true)?;
            let (loss, grad) = loss_l2_2d_with_grad(pred.view(), target.view(), mask.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let (_, norms, _) = loss_terms(pred.view(), target.view(), mask.view())?;
            for (bi, &id) in chunk.iter().enumerate() {
                per_window[id] = norms.row(bi).sum();
            }
            let grads = model.backward(&params, &tape.expect("recorded"), grad.view())?;
            adam_step(&mut flat, &grads.params.to_flat(), &mut state, &adam)
                .map_err(|_| Error::Diverged { epoch, loss: f64::NAN })?;
            params.load_flat(&flat)?;
        }
        let train_loss = per_window.iter().sum::<f64>() / total_pairs;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }
        let val_loss = if val_set.items.is_empty() {
            None
        } else {
            match val_set.evaluate(&model, &params, cfg.batch_size) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(v) => return Err(Error::Diverged { epoch, loss: v }),
                Err(Error::Numeric(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            }
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let select = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| select < *b) {
            best = Some((select, epoch, params.clone()));
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    let mut checkpoint = Checkpoint::new(model_cfg.clone(), Some(bounds), best_params);
    checkpoint.header.epoch = Some(best_epoch);
    Ok(TrainOutcome {
        checkpoint,
        history,
        initial_train_loss,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `mse[config][fold]`, closed-loop rollout MSE in (km/s)².
    pub mse: Vec<Vec<f64>>,
    pub mean_mse: Vec<f64>,
    pub selected: usize,
    /// Cube indices held out by each fold.
    pub folds: Vec<Vec<usize>>,
}

/// Contiguous fold assignment over `n` items; optionally shuffled first.
pub fn fold_indices(n: usize, folds: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || n < folds {
        return Err(Error::InvalidArgument(format!("{n} samples cannot fill {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok((0..folds)
        .map(|f| idx[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect())
}

/// K-fold selection among candidate operator configs by rollout MSE.
pub fn cross_validate(dataset: &[VelocityCube], candidates: &[OperatorConfig], cfg: &TrainConfig) -> Result<CvReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate configs".into()));
    }
    let folds = fold_indices(dataset.len(), cfg.folds, cfg.cv_shuffle.then_some(cfg.seed))?;
    let mut mse = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut row = Vec::with_capacity(folds.len());
        for held in &folds {
            let train_set: Vec<VelocityCube> = (0..dataset.len())
                .filter(|i| !held.contains(i))
                .map(|i| dataset[i].clone())
                .collect();
            let outcome = train(&train_set, cfg, cand)?;
            let model = Sfno::new(cand.clone())?;
            let bounds = outcome.checkpoint.header.bounds.expect("training sets bounds");
            let mut total = 0.0;
            for &i in held {
                let truth = &dataset[i];
                let pred = rollout::rollout(
                    &model,
                    &outcome.checkpoint.params,
                    &truth.boundary(),
                    cfg.horizon,
                    &bounds,
                    truth.rgrid(),
                )?;
                total += metrics::mse(&pred, truth)?.mean;
            }
            row.push(total / held.len() as f64);
        }
        mse.push(row);
    }
    let mean_mse: Vec<f64> = mse.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let selected = mean_mse
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < mean_mse[best] { i } else { best });
    Ok(CvReport {
        mse,
        mean_mse,
        selected,
        folds,
    })
}

/// Teacher-forced per-window loss of one normalized cube, in window order.
pub(crate) fn window_losses(
    model: &Sfno,
    params: &OperatorParams,
    cube: ArrayView3<'_, f64>,
    horizon: usize,
) -> Result<Vec<f64>> {
    let cubes = [cube.to_owned()];
    let set = WindowSet::new(&cubes, horizon, WindowMode::Aligned);
    let mut out = Vec::with_capacity(set.items.len());
    for id in 0..set.items.len() {
        let (input, target, mask) = set.batch(&[id]);
        let (pred, _) = model.forward(params, input.view(), false)?;
        out.push(loss_l2_2d(pred.view(), target.view(), mask.view())?);
    }
    Ok(out)
}
