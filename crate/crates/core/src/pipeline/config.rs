use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::completion::{rank_cap_dims, CompletionOptions, RankSelection};
use crate::covassembly::{build_band_mask, BandRule, CovOptions};
use crate::error::{invalid, Error, Result};
use crate::postprocess::PostprocessConfig;
use crate::rotation::{RotationMethod, RotationOptions};
use crate::simgen::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Single,
    Study1,
    Study2,
    Study3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RotationStage {
    pub method: RotationMethod,
    pub options: RotationOptions,
}

impl Default for RotationStage {
    fn default() -> Self {
        Self {
            method: RotationMethod::Varimax,
            options: RotationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ScoresConfig {
    /// Number of cubic B-splines; `J / 4` when absent.
    pub basis_size: Option<usize>,
    /// Fixed roughness weight(s); skips tuning when set.
    pub gamma: Option<Vec<f64>>,
    pub gamma_grid: Vec<f64>,
    /// Spatial folds (4 for the quadrant split of 2-D and 3-D grids).
    pub folds: usize,
    pub uniform: bool,
}

impl Default for ScoresConfig {
    fn default() -> Self {
        Self {
            basis_size: None,
            gamma: None,
            gamma_grid: vec![0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            folds: 4,
            uniform: true,
        }
    }
}

/// Study-specific sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Study 3: side lengths of the centered analysis window.
    pub heights: Vec<usize>,
    /// Study 3: simulated local-error bandwidths.
    pub deltas: Vec<f64>,
    /// Study 2: additional ranks fit beyond the true `K`.
    pub extra_ranks: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            heights: vec![20, 30, 40],
            deltas: vec![0.05, 0.1],
            extra_ranks: vec![2],
        }
    }
}

/// Complete configuration of a run or study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Output directory; the CLI's `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Simulated data (required for studies).
    #[serde(default)]
    pub simulation: Option<SimConfig>,
    /// Existing dataset manifest, used instead of a simulation in single runs.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_band")]
    pub band: BandRule,
    #[serde(default)]
    pub covariance: CovOptions,
    #[serde(default)]
    pub completion: CompletionOptions,
    #[serde(default)]
    pub rank: RankSelection,
    #[serde(default)]
    pub rotation: RotationStage,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub scores: ScoresConfig,
    #[serde(default)]
    pub study: StudyConfig,
}

fn default_replications() -> usize {
    10
}

fn default_band() -> BandRule {
    BandRule::Distance { delta: 0.1 }
}

impl PipelineConfig {
    /// Single run on a simulation.
    pub fn simulated(sim: SimConfig) -> Self {
        Self {
            mode: RunMode::Single,
            seed: sim.seed,
            replications: default_replications(),
            output: None,
            simulation: Some(sim),
            dataset: None,
            band: default_band(),
            covariance: CovOptions::default(),
            completion: CompletionOptions::default(),
            rank: RankSelection::default(),
            rotation: RotationStage::default(),
            postprocess: PostprocessConfig::default(),
            scores: ScoresConfig::default(),
            study: StudyConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let BandRule::Distance { delta } = self.band {
            if !(delta > 0.0 && delta < 0.5) {
                return Err(Error::Identifiability(format!(
                    "bandwidth {delta} must lie in (0, 1/2) for the global term to be identifiable"
                )));
            }
        }
        self.completion.validate()?;
        self.postprocess.validate()?;
        if self.scores.gamma_grid.is_empty() || self.scores.gamma_grid.iter().any(|g| !(*g >= 0.0)) {
            return Err(invalid("gamma grid must be nonempty and nonnegative"));
        }
        if self.scores.basis_size.is_some_and(|p| p < 4) {
            return Err(invalid("basis size must be at least 4"));
        }
        if let RankSelection::Fixed { j } = self.rank {
            if j > self.completion.max_rank {
                return Err(invalid(format!(
                    "fixed rank {j} exceeds max_rank {}",
                    self.completion.max_rank
                )));
            }
        }
        if matches!(self.rank, RankSelection::Elbow) && self.completion.max_rank < 3 {
            return Err(invalid("elbow selection needs max_rank >= 3"));
        }
        match self.mode {
            RunMode::Single => {
                if self.simulation.is_none() == self.dataset.is_none() {
                    return Err(invalid("a single run needs exactly one of `simulation` or `dataset`"));
                }
            }
            _ => {
                if self.simulation.is_none() {
                    return Err(invalid("studies need a `simulation` block"));
                }
                if self.replications == 0 {
                    return Err(invalid("a study needs at least one replication"));
                }
            }
        }
        if self.mode == RunMode::Study3 && (self.study.heights.is_empty() || self.study.deltas.is_empty()) {
            return Err(invalid("study 3 needs heights and deltas"));
        }
        if let Some(sim) = &self.simulation {
            sim.validate()?;
            if self.mode != RunMode::Study3 {
                let grid = sim.grid()?;
                let mask = build_band_mask(&grid, self.band.clone())?;
                let deltas = mask.deltas();
                let cap = rank_cap_dims(grid.dims(), deltas)?;
                let need = match self.mode {
                    RunMode::Study2 => sim.k + self.study.extra_ranks.iter().copied().max().unwrap_or(0),
                    _ => self.completion.max_rank,
                };
                if need > cap {
                    return Err(Error::Identifiability(format!("rank {need} exceeds K* = {cap}")));
                }
            }
        }
        Ok(())
    }

    pub fn schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::Scheme;

    #[test]
    fn wide_band_is_rejected() {
        let mut cfg = PipelineConfig::simulated(SimConfig::new(20, 2, 5, Scheme::Bi));
        cfg.validate().unwrap();
        cfg.band = BandRule::Distance { delta: 0.6 };
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn json_roundtrip_and_unknown_fields() {
        let cfg = PipelineConfig::simulated(SimConfig::new(20, 2, 5, Scheme::Bi));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        let bad = text.replacen('{', "{\"bogus\": 1,", 1);
        assert!(PipelineConfig::from_json(&bad).unwrap_err().is_validation());
        let schema = PipelineConfig::schema();
        assert!(schema["properties"]["completion"].is_object());
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg = PipelineConfig::from_json(
            r#"{"simulation": {"m": 20, "k": 2, "n": 5, "scheme": "BI"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.mode, RunMode::Single);
        assert_eq!(cfg.band, BandRule::Distance { delta: 0.1 });
        assert_eq!(cfg.postprocess.folds, 3);
    }
}
