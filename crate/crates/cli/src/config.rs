use std::path::Path;

use arrange_core::collision::GridConfig;
use arrange_core::metrics::PctMode;
use arrange_core::synthgen::DatasetSpec;
use arrange_model::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttachConfig {
    pub lr: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub grid: GridConfig,
}

impl Default for AttachConfig {
    fn default() -> Self {
        AttachConfig {
            lr: 0.1,
            tol: 0.05,
            max_iters: 500,
            grid: GridConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub pct_mode: PctMode,
    pub grid: GridConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_c: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { lambda_c: vec![0.0, 2.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSweepConfig {
    /// `[Δ_left, Δ_right]` offsets in mm.
    pub deltas: Vec<[f64; 2]>,
}

impl Default for ArchSweepConfig {
    fn default() -> Self {
        ArchSweepConfig {
            deltas: vec![[0.0, 0.0], [2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]],
        }
    }
}

/// Everything a command needs besides its input paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed, copied into the dataset, training and initialization seeds.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Save a checkpoint every this many epochs (0 keeps only the final one).
    pub checkpoint_every: usize,
    pub attach: AttachConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub arch_sweep: ArchSweepConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the master seed into the sub-configs.
    pub fn resolved(mut self) -> RunConfig {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.train.encoder.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let a = &self.attach;
        if !(a.lr > 0.0) || !(a.tol > 0.0) {
            return Err(CliError::Config("attach lr and tol must be > 0".into()));
        }
        for grid in [a.grid, self.eval.grid, self.train.grid] {
            if !(grid.interval > 0.0) || grid.rows < 2 || grid.cols < 2 {
                return Err(CliError::Config(format!("invalid grid {grid:?}")));
            }
        }
        if self.dataset.cases == 0 {
            return Err(CliError::Config("dataset.cases must be > 0".into()));
        }
        Ok(())
    }
}
