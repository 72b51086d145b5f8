//! Autoregressive inference: predict `H` radii, feed the last one back, repeat.

use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::grid::{CubeMeta, RadialGrid, VelocityCube, VelocityMap};
use crate::sfno::{OperatorParams, Sfno};
use crate::training::{loss_l2_2d, rollout_steps, window_losses, NormBounds};

fn check_setup(model: &Sfno, boundary: &VelocityMap, horizon: usize, rgrid: &RadialGrid) -> Result<()> {
    if model.config().out_channels != horizon {
        return Err(Error::InvalidArgument(format!(
            "operator emits {} radii per call, rollout asked for {horizon}",
            model.config().out_channels
        )));
    }
    if model.config().in_channels != 1 {
        return Err(Error::InvalidArgument("rollout needs a single-channel operator".into()));
    }
    if boundary.grid().shape() != model.grid().shape() {
        return Err(Error::Shape(format!(
            "boundary is on a {:?} grid, operator expects {:?}",
            boundary.grid().shape(),
            model.grid().shape()
        )));
    }
    if horizon == 0 || rgrid.nr() < 2 {
        return Err(Error::InvalidArgument("rollout needs horizon >= 1 and nr >= 2".into()));
    }
    Ok(())
}

/// Closed-loop prediction in normalized space: `(nr, nlat, nlon)` with the
/// normalized boundary in slice 0. Also returns how many forward calls ran.
pub fn rollout_normalized(
    model: &Sfno,
    params: &OperatorParams,
    boundary: ndarray::ArrayView2<'_, f64>,
    horizon: usize,
    nr: usize,
) -> Result<(Array3<f64>, usize)> {
    let (nlat, nlon) = boundary.dim();
    let steps = rollout_steps(nr, horizon);
    let mut out = Array3::zeros((nr, nlat, nlon));
    out.index_axis_mut(Axis(0), 0).assign(&boundary);
    let mut input = Array4::zeros((1, 1, nlat, nlon));
    input.slice_mut(s![0, 0, .., ..]).assign(&boundary);
    for step in 0..steps {
        let (pred, _) = model
            .forward(params, input.view(), false)
            .map_err(|e| match e {
                Error::Numeric(_) => Error::RolloutDiverged { step },
                other => other,
            })?;
        let pred = pred.index_axis_move(Axis(0), 0);
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::RolloutDiverged { step });
        }
        let first = 1 + step * horizon;
        let keep = horizon.min(nr - first);
        out.slice_mut(s![first..first + keep, .., ..])
            .assign(&pred.slice(s![..keep, .., ..]));
        // feed back the last predicted radius, including a discarded surplus one
        input
            .slice_mut(s![0, 0, .., ..])
            .assign(&pred.index_axis(Axis(0), horizon - 1));
    }
    Ok((out, steps))
}

/// Roll the operator out from `boundary` across every radius of `rgrid`.
///
/// Slice 0 of the result is `boundary` itself; the remaining slices are
/// denormalized predictions. Predictions past the last radius are dropped.
pub fn rollout(
    model: &Sfno,
    params: &OperatorParams,
    boundary: &VelocityMap,
    horizon: usize,
    bounds: &NormBounds,
    rgrid: &RadialGrid,
) -> Result<VelocityCube> {
    check_setup(model, boundary, horizon, rgrid)?;
    let normalized = boundary.values().mapv(|v| bounds.normalize(v));
    let (pred, _) = rollout_normalized(model, params, normalized.view(), horizon, rgrid.nr())?;
    let mut data = pred.mapv(|v| bounds.denormalize(v));
    data.index_axis_mut(Axis(0), 0).assign(&boundary.values());
    VelocityCube::new(rgrid.clone(), boundary.grid().clone(), data, CubeMeta::default())
}

/// Per-window losses with ground-truth inputs next to the closed-loop ones.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLossProfile {
    pub teacher_forced: Vec<f64>,
    pub closed_loop: Vec<f64>,
}

/// Layer-wise L2 loss of every rollout window in normalized space, once with
/// the true slice as input (teacher forcing) and once fed by the model.
pub fn rollout_teacher_eval(
    model: &Sfno,
    params: &OperatorParams,
    cube: &VelocityCube,
    horizon: usize,
    bounds: &NormBounds,
) -> Result<WindowLossProfile> {
    check_setup(model, &cube.boundary(), horizon, cube.rgrid())?;
    let truth = bounds.normalize_cube(cube);
    let nr = cube.nr();
    let teacher_forced = window_losses(model, params, truth.view(), horizon)?;
    let (closed, _) = rollout_normalized(model, params, truth.index_axis(Axis(0), 0), horizon, nr)?;
    let (nlat, nlon) = cube.grid().shape();
    let closed_loop = (0..rollout_steps(nr, horizon))
        .map(|step| {
            let first = 1 + step * horizon;
            let keep = horizon.min(nr - first);
            let shape = (1, keep, nlat, nlon);
            let p = closed
                .slice(s![first..first + keep, .., ..])
                .to_owned()
                .into_shape_with_order(shape)
                .expect("contiguous");
            let t = truth
                .slice(s![first..first + keep, .., ..])
                .to_owned()
                .into_shape_with_order(shape)
                .expect("contiguous");
            let mask = ndarray::Array2::from_elem((1, keep), true);
            loss_l2_2d(p.view(), t.view(), mask.view())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowLossProfile {
        teacher_forced,
        closed_loop,
    })
}
