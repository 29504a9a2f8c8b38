//! TOML run configuration.
//!
//! ```toml
//! [synthetic]            # or: [trace] path = "capture.json"
//! seed = 7
//! num_vision = 300
//! num_text = 16
//! num_experts = 16
//! top_k = 4
//! hidden_dim = 16
//! num_layers = 12
//!
//! [reduction]
//! start_layer = 6
//! reduced = 2            # or: ratio = 0.5
//! strategy = "topk"      # topk | randomk | mink
//! target = "vision"      # vision | text | all
//!
//! [pruning]
//! prune_layers = [2, 5, 8]
//! retention = 0.25       # overall; or beta = 0.63 per stage
//! window = 5
//! alpha = 1.0
//! gamma = 0.1
//!
//! [flops]
//! preset = "internvl48"
//! vision_tokens = 2048   # any preset field may be overridden
//!
//! [output]
//! dir = "out"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use routeprune_core::flops::{FlopsConfig, Schedule};
use routeprune_core::pruning::{MergeMode, PruneSchedule, SimilarityMode};
use routeprune_core::reduction::{ReducedCount, ReductionPolicy, Strategy, TargetModality};
use routeprune_core::theory::stage_beta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthetic::SyntheticSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSection {
    /// Unset means no reduction.
    pub start_layer: Option<usize>,
    pub reduced: Option<usize>,
    pub ratio: Option<f64>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub target: TargetModality,
    #[serde(default)]
    pub reduce_shared: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ReductionSection {
    pub fn policy(&self, num_layers: usize, top_k: usize) -> Result<ReductionPolicy, ConfigError> {
        let reduced = match (self.reduced, self.ratio) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "reduction: give either `reduced` or `ratio`, not both".into(),
                ))
            }
            (Some(k), None) => ReducedCount::Count(k),
            (None, Some(p)) => ReducedCount::Ratio(p),
            (None, None) => ReducedCount::Count(top_k),
        };
        Ok(ReductionPolicy {
            start_layer: self.start_layer.unwrap_or(num_layers),
            reduced,
            strategy: self.strategy,
            target: self.target,
            reduce_shared: self.reduce_shared,
            seed: self.seed,
        })
    }

    pub fn enabled(&self) -> bool {
        self.start_layer.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    #[serde(default)]
    pub prune_layers: Vec<usize>,
    /// Overall vision retention after all stages.
    pub retention: Option<f64>,
    /// Per-stage retention.
    pub beta: Option<f64>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub similarity: SimilarityMode,
    #[serde(default)]
    pub merge: MergeMode,
}

fn default_window() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.025
}

impl Default for PruningSection {
    fn default() -> Self {
        Self {
            prune_layers: Vec::new(),
            retention: None,
            beta: None,
            window: default_window(),
            alpha: default_alpha(),
            gamma: default_gamma(),
            similarity: SimilarityMode::default(),
            merge: MergeMode::default(),
        }
    }
}

impl PruningSection {
    pub fn stage_beta(&self) -> Result<f64, ConfigError> {
        match (self.beta, self.retention) {
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "pruning: give either `beta` or `retention`, not both".into(),
            )),
            (Some(b), None) => Ok(b),
            (None, Some(r)) if self.prune_layers.is_empty() => {
                if r == 1.0 {
                    Ok(1.0)
                } else {
                    Err(ConfigError::Invalid(
                        "pruning: retention below 1 needs prune_layers".into(),
                    ))
                }
            }
            (None, Some(r)) => stage_beta(r, self.prune_layers.len())
                .map_err(|e| ConfigError::Invalid(e.to_string())),
            (None, None) => Ok(1.0),
        }
    }

    pub fn schedule(&self) -> Result<PruneSchedule, ConfigError> {
        let s = PruneSchedule {
            prune_layers: self.prune_layers.clone(),
            beta: self.stage_beta()?,
            window: self.window,
            alpha: self.alpha,
            gamma: self.gamma,
            similarity: self.similarity,
            merge: self.merge,
        };
        s.validate()
            .map_err(|e| ConfigError::Invalid(format!("pruning: {e}")))?;
        Ok(s)
    }
}

/// Preset name plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsSection {
    pub preset: Option<Schedule>,
    pub batch: Option<usize>,
    pub total_tokens: Option<usize>,
    pub vision_tokens: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub dense_intermediate: Option<usize>,
    pub expert_intermediate: Option<usize>,
    pub num_experts: Option<usize>,
    pub top_k: Option<usize>,
    pub reduced_k: Option<usize>,
    pub num_shared: Option<usize>,
    pub reduction_start: Option<usize>,
    pub num_layers: Option<usize>,
    pub dense_layers: Option<Vec<usize>>,
    pub prune_layers: Option<Vec<usize>>,
    pub beta: Option<f64>,
}

impl FlopsSection {
    /// Preset (or an all-zero custom base) with overrides applied.
    pub fn resolve(&self) -> Result<(Schedule, FlopsConfig), ConfigError> {
        let schedule = self.preset.unwrap_or(Schedule::Custom);
        let mut c = FlopsConfig::preset(schedule).unwrap_or_else(|| FlopsConfig {
            batch: 1,
            total_tokens: 0,
            vision_tokens: 0,
            hidden: 0,
            heads: 0,
            head_dim: 0,
            dense_intermediate: 0,
            expert_intermediate: 0,
            num_experts: 0,
            top_k: 0,
            reduced_k: 0,
            num_shared: 0,
            reduction_start: 0,
            num_layers: 0,
            dense_layers: Vec::new(),
            prune_layers: Vec::new(),
            beta: 1.0,
        });
        let text = c.text_tokens();
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        apply!(
            batch,
            total_tokens,
            vision_tokens,
            hidden,
            heads,
            head_dim,
            dense_intermediate,
            expert_intermediate,
            num_experts,
            top_k,
            reduced_k,
            num_shared,
            reduction_start,
            num_layers,
            dense_layers,
            prune_layers,
            beta
        );
        if self.vision_tokens.is_some() && self.total_tokens.is_none() {
            // keep the preset's text length
            c.total_tokens = c.vision_tokens + text;
        }
        if self.reduction_start.is_none() && schedule == Schedule::Custom {
            c.reduction_start = c.num_layers;
        }
        if self.reduced_k.is_none() && schedule == Schedule::Custom {
            c.reduced_k = c.top_k;
        }
        c.validate(schedule)
            .map_err(|e| ConfigError::Invalid(format!("flops: {e}")))?;
        Ok((schedule, c))
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub trace: Option<TraceSource>,
    #[serde(default)]
    pub reduction: ReductionSection,
    #[serde(default)]
    pub pruning: PruningSection,
    pub flops: Option<FlopsSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Checks that do not need the trace itself.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.synthetic, &self.trace) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "give either [synthetic] or [trace], not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "no trace source: add [synthetic] or [trace]".into(),
                ))
            }
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            s.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.pruning.schedule()?;
        if let Some(f) = &self.flops {
            if f.preset.is_some() {
                f.resolve()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let text = r#"
            [synthetic]
            seed = 7
            num_vision = 300
            num_text = 16
            num_experts = 16
            top_k = 4
            hidden_dim = 16
            num_layers = 12
            [reduction]
            start_layer = 6
            reduced = 2
            strategy = "topk"
            target = "vision"
            [pruning]
            prune_layers = [2, 5, 8]
            retention = 0.25
            window = 5
            alpha = 1.0
            gamma = 0.1
            [flops]
            preset = "internvl48"
            vision_tokens = 2048
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        c.validate().unwrap();
        assert!((c.pruning.stage_beta().unwrap() - 0.63).abs() < 1e-3);
        let (s, f) = c.flops.unwrap().resolve().unwrap();
        assert_eq!(s, Schedule::Internvl48);
        assert_eq!(f.vision_tokens, 2048);
        assert_eq!(f.text_tokens(), 64);
        let p = c.reduction.policy(12, 4).unwrap();
        assert_eq!(p.strategy, Strategy::TopK);
        assert_eq!(p.reduced, ReducedCount::Count(2));
    }

    #[test]
    fn conflicting_fields_rejected() {
        let c = RunConfig::from_toml(
            "[trace]\npath='x'\n[pruning]\nbeta=0.5\nretention=0.5\nprune_layers=[1]",
        )
        .unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml("[pruning]\nwindw=3").is_err());
        assert!(RunConfig::default().validate().is_err());
    }
}
