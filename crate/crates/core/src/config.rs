//! Run configuration: one JSON document pinning every knob of a run.
//!
//! Every field has a default, so `{}` is a valid config; unknown keys are
//! rejected at every nesting level so typos fail loudly instead of silently
//! running with defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsm::{BSMConfig, OptimConfig};
use crate::dataio::DataConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// Evaluation settings: boundary F-score tolerances (pixels) and the band
/// width parameter of the boundary IoU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerances: Vec<usize>,
    pub boundary_iou_d: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tolerances: vec![1, 2, 3, 5], boundary_iou_d: 2 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tolerances.is_empty() {
            return Err(Error::Config("tolerances must not be empty".into()));
        }
        if self.tolerances.iter().any(|t| *t == 0) {
            return Err(Error::Config("tolerances must all be >= 1".into()));
        }
        if self.boundary_iou_d == 0 {
            return Err(Error::Config("boundary_iou_d must be >= 1".into()));
        }
        Ok(())
    }
}

/// The complete, self-contained description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: BSMConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            model: BSMConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Check every section and their cross-constraints.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        if self.data.grid != self.model.target_grid() {
            return Err(Error::Config(format!(
                "data.grid ({}) must equal the model target grid ({} = 2 x feature_grid)",
                self.data.grid,
                self.model.target_grid()
            )));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write the config echo into an output directory (created if missing).
    pub fn write_echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json_pretty()?).map_err(|e| Error::io(&path, e))
    }
}
