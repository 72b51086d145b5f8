//! Scaled-down end-to-end check: can the operator learn HUX-f dynamics?
//!
//! Synthetic cubes are split chronologically, an operator is trained on the
//! leading ones, and its closed-loop rollout on the held-out cubes is
//! compared with the constant-boundary predictor (slice 0 at every radius).

use serde::{Deserialize, Serialize};

use crate::dataio::{generate_dataset, split_dataset, SplitProtocol, SynthConfig};
use crate::error::Result;
use crate::grid::VelocityCube;
use crate::metrics::{self, MetricsConfig, MetricsReport};
use crate::rollout::rollout;
use crate::sfno::{OperatorConfig, Sfno};
use crate::training::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityConfig {
    pub synth: SynthConfig,
    pub n_test: usize,
    pub n_layers: usize,
    pub hidden_channels: usize,
    pub lmax: usize,
    pub mmax: usize,
    pub train: TrainConfig,
}

impl Default for LearnabilityConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            n_cubes: 16,
            seed: 2024,
            nlat: 31,
            nlon: 32,
            nr: 40,
            ..SynthConfig::default()
        };
        Self {
            synth,
            n_test: 4,
            n_layers: 2,
            hidden_channels: 16,
            lmax: 30,
            mmax: 16,
            train: TrainConfig {
                epochs: 300,
                horizon: 5,
                ..TrainConfig::default()
            },
        }
    }
}

impl LearnabilityConfig {
    pub fn operator(&self) -> OperatorConfig {
        OperatorConfig {
            lmax: self.lmax,
            mmax: self.mmax,
            seed: self.train.seed,
            ..OperatorConfig::small(
                self.synth.nlat,
                self.synth.nlon,
                self.n_layers,
                self.hidden_channels,
                self.train.horizon,
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnabilityResult {
    pub outcome: TrainOutcome,
    /// Mean closed-loop MSE over the held-out cubes, (km/s)².
    pub model_mse: f64,
    pub baseline_mse: f64,
    pub reports: Vec<MetricsReport>,
}

impl LearnabilityResult {
    pub fn ratio(&self) -> f64 {
        self.model_mse / self.baseline_mse
    }
}

/// Every radius set to the boundary slice.
pub fn constant_boundary_cube(truth: &VelocityCube) -> VelocityCube {
    let mut cube = truth.clone();
    let b = truth.slice(0);
    for i in 1..cube.nr() {
        cube.slice_mut(i).assign(&b);
    }
    cube
}

pub fn run_learnability(cfg: &LearnabilityConfig) -> Result<LearnabilityResult> {
    let cubes = generate_dataset(&cfg.synth)?;
    let n = cubes.len();
    let fraction = (n - cfg.n_test) as f64 / n as f64;
    let (train_cubes, test_cubes) = split_dataset(cubes, &SplitProtocol::ChronologicalFraction { fraction })?;
    let op = cfg.operator();
    let outcome = train(&train_cubes, &cfg.train, &op)?;
    let model = Sfno::new(op)?;
    let bounds = outcome.checkpoint.header.bounds.expect("training records bounds");
    let mut model_mse = 0.0;
    let mut baseline_mse = 0.0;
    let mut reports = Vec::with_capacity(test_cubes.len());
    for (i, truth) in test_cubes.iter().enumerate() {
        let pred = rollout(
            &model,
            &outcome.checkpoint.params,
            &truth.boundary(),
            cfg.train.horizon,
            &bounds,
            truth.rgrid(),
        )?;
        let mut report = metrics::evaluate_cube(&pred, truth, &MetricsConfig::default())?;
        report.meta.label = format!("heldout_{i}");
        model_mse += report.cube_mean.mse;
        baseline_mse += metrics::mse(&constant_boundary_cube(truth), truth)?.mean;
        reports.push(report);
    }
    let k = test_cubes.len() as f64;
    Ok(LearnabilityResult {
        outcome,
        model_mse: model_mse / k,
        baseline_mse: baseline_mse / k,
        reports,
    })
}
