//! Versioned JSON traces of routing, attention and (optionally) hidden
//! states captured per layer.
//!
//! ```json
//! {
//!   "version": 1,
//!   "metadata": { "model": "...", "num_layers": 2, "num_tokens": 5,
//!                 "num_experts": 8, "top_k": 2, "num_shared": 0,
//!                 "hidden_dim": 16, "attention": "post-softmax, head mean" },
//!   "modality": ["vision", "vision", "vision", "text", "text"],
//!   "layers": [
//!     { "routing": { "probs": [[...], ...] },
//!       "attention": [a_0, a_1, a_2],
//!       "hidden": [[...], ...],
//!       "expert_norms": [[...], ...] }
//!   ]
//! }
//! ```
//!
//! `routing` holds either `probs` or `logits`, one row per token. `attention`
//! is the last text token's attention to each vision token, in sequence
//! order. `hidden` and `expert_norms` are optional; `expert_norms[i]` lists
//! the output norms of the experts token `i` used.

use std::fs;
use std::path::Path;

use routeprune_core::moe::{routing_probs, Modality, ModalityMask, MoeConfig, RoutingDistribution};
use routeprune_core::{HiddenState, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_VERSION: u32 = 1;

/// Row sums of stored probabilities may drift this far from 1.
pub const PROB_ROW_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing trace: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported trace version {found} (expected {TRACE_VERSION})")]
    Version { found: u32 },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> TraceError {
    TraceError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub model: String,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub num_shared: usize,
    pub hidden_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_dim: Option<usize>,
    /// Free-form statement of how attention was taken (pre/post softmax,
    /// head reduction, source layer).
    pub attention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingRows {
    Probs(Vec<Vec<f64>>),
    Logits(Vec<Vec<f64>>),
}

impl RoutingRows {
    fn rows(&self) -> &[Vec<f64>] {
        match self {
            RoutingRows::Probs(r) | RoutingRows::Logits(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub routing: RoutingRows,
    pub attention: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_norms: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub version: u32,
    pub metadata: TraceMetadata,
    pub modality: Vec<Modality>,
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let trace: Trace = serde_json::from_str(text)?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serialization cannot fail")
    }

    pub fn mask(&self) -> ModalityMask {
        ModalityMask::new(self.modality.clone())
    }

    pub fn num_vision(&self) -> usize {
        self.modality
            .iter()
            .filter(|&&m| m == Modality::Vision)
            .count()
    }

    pub fn moe_config(&self) -> MoeConfig {
        let m = &self.metadata;
        MoeConfig {
            num_experts: m.num_experts,
            top_k: m.top_k,
            num_shared: m.num_shared,
            hidden_dim: m.hidden_dim,
            expert_dim: m.expert_dim.unwrap_or(1),
            num_layers: m.num_layers,
        }
    }

    /// Routing probabilities of a layer; logits go through softmax, stored
    /// probabilities are renormalized to remove drift.
    pub fn routing(&self, layer: usize) -> Result<RoutingDistribution, TraceError> {
        let e = self.metadata.num_experts;
        let path = format!("layers[{layer}].routing");
        let mut data = Vec::with_capacity(self.metadata.num_tokens * e);
        match &self.layers[layer].routing {
            RoutingRows::Logits(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    let p = routing_probs(r)
                        .map_err(|err| invalid(format!("{path}.logits[{i}]"), err.to_string()))?;
                    data.extend(p);
                }
            }
            RoutingRows::Probs(rows) => {
                for r in rows {
                    let s: f64 = r.iter().sum();
                    data.extend(r.iter().map(|p| p / s));
                }
            }
        }
        let m = Matrix::from_vec(self.metadata.num_tokens, e, data)
            .map_err(|err| invalid(&path, err.to_string()))?;
        RoutingDistribution::new(m).map_err(|err| invalid(path, err.to_string()))
    }

    pub fn hidden(&self, layer: usize) -> Option<Result<HiddenState, TraceError>> {
        let rows = self.layers[layer].hidden.as_ref()?;
        let path = format!("layers[{layer}].hidden");
        Some(
            Matrix::from_rows(rows, self.metadata.hidden_dim)
                .and_then(HiddenState::new)
                .map_err(|err| invalid(path, err.to_string())),
        )
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.version != TRACE_VERSION {
            return Err(TraceError::Version {
                found: self.version,
            });
        }
        let m = &self.metadata;
        if m.num_experts == 0 || m.hidden_dim == 0 {
            return Err(invalid(
                "metadata",
                "num_experts and hidden_dim must be positive",
            ));
        }
        if m.top_k == 0 || m.top_k > m.num_experts {
            return Err(invalid(
                "metadata.top_k",
                format!("must be in 1..={}", m.num_experts),
            ));
        }
        if self.modality.len() != m.num_tokens {
            return Err(invalid(
                "modality",
                format!(
                    "length {} != num_tokens {}",
                    self.modality.len(),
                    m.num_tokens
                ),
            ));
        }
        if self.layers.len() != m.num_layers {
            return Err(invalid(
                "layers",
                format!(
                    "{} layers present, metadata declares {}",
                    self.layers.len(),
                    m.num_layers
                ),
            ));
        }
        let n_v = self.num_vision();
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = layer.routing.rows();
            let kind = match layer.routing {
                RoutingRows::Probs(_) => "probs",
                RoutingRows::Logits(_) => "logits",
            };
            let rpath = format!("layers[{l}].routing.{kind}");
            if rows.len() != m.num_tokens {
                return Err(invalid(
                    &rpath,
                    format!("{} rows, expected {}", rows.len(), m.num_tokens),
                ));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.len() != m.num_experts {
                    return Err(invalid(
                        format!("{rpath}[{i}]"),
                        format!("{} columns, expected {}", r.len(), m.num_experts),
                    ));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("{rpath}[{i}]"), "non-finite value"));
                }
                if let RoutingRows::Probs(_) = layer.routing {
                    if r.iter().any(|&p| p < 0.0) {
                        return Err(invalid(format!("{rpath}[{i}]"), "negative probability"));
                    }
                    let s: f64 = r.iter().sum();
                    if (s - 1.0).abs() > PROB_ROW_TOL {
                        return Err(invalid(
                            format!("{rpath}[{i}]"),
                            format!("row {i} sums to {s}"),
                        ));
                    }
                }
            }
            let apath = format!("layers[{l}].attention");
            if layer.attention.len() != n_v {
                return Err(invalid(
                    &apath,
                    format!(
                        "{} entries, expected one per vision token ({n_v})",
                        layer.attention.len()
                    ),
                ));
            }
            if let Some((i, a)) = layer
                .attention
                .iter()
                .enumerate()
                .find(|(_, a)| !a.is_finite() || **a < 0.0)
            {
                return Err(invalid(
                    format!("{apath}[{i}]"),
                    format!("invalid attention {a}"),
                ));
            }
            if let Some(h) = &layer.hidden {
                let hpath = format!("layers[{l}].hidden");
                if h.len() != m.num_tokens {
                    return Err(invalid(
                        &hpath,
                        format!("{} rows, expected {}", h.len(), m.num_tokens),
                    ));
                }
                if let Some((i, r)) = h.iter().enumerate().find(|(_, r)| r.len() != m.hidden_dim) {
                    return Err(invalid(
                        format!("{hpath}[{i}]"),
                        format!("{} columns, expected {}", r.len(), m.hidden_dim),
                    ));
                }
                if h.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid(hpath, "non-finite value"));
                }
            }
            if let Some(norms) = &layer.expert_norms {
                let npath = format!("layers[{l}].expert_norms");
                if norms.len() != m.num_tokens {
                    return Err(invalid(
                        &npath,
                        format!("{} rows, expected {}", norms.len(), m.num_tokens),
                    ));
                }
                if norms.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(invalid(npath, "norms must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Trace::from_json(&text)
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    fs::write(path, trace.to_json()).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal() -> &'static str {
        r#"{
          "version": 1,
          "metadata": {"model": "toy", "num_layers": 1, "num_tokens": 2, "num_experts": 2,
                       "top_k": 1, "hidden_dim": 2, "attention": "post-softmax head mean"},
          "modality": ["vision", "text"],
          "layers": [{"routing": {"probs": [[0.25, 0.75], [0.5, 0.5]]}, "attention": [0.3]}]
        }"#
    }

    #[test]
    fn minimal_trace_loads() {
        let t = Trace::from_json(minimal()).unwrap();
        assert_eq!(t.metadata.num_tokens, 2);
        assert_eq!(t.routing(0).unwrap().row(0), &[0.25, 0.75]);
    }

    #[test]
    fn bad_row_sum_names_the_row() {
        let text = minimal().replace("[0.5, 0.5]", "[0.5, 0.6]");
        let err = Trace::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("layers[0].routing.probs[1]"), "{err}");
    }

    #[test]
    fn version_and_shape_errors() {
        let text = minimal().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            Trace::from_json(&text),
            Err(TraceError::Version { found: 9 })
        ));
        let text = minimal().replace("\"attention\": [0.3]", "\"attention\": [0.3, 0.1]");
        let err = Trace::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("layers[0].attention"), "{err}");
        let text = minimal().replace("[0.25, 0.75]", "[0.25, 0.75, 0.0]");
        assert!(Trace::from_json(&text).is_err());
    }

    #[test]
    fn logits_are_softmaxed() {
        let text = minimal().replace(
            r#"{"probs": [[0.25, 0.75], [0.5, 0.5]]}"#,
            r#"{"logits": [[0.0, 0.0], [1.0, 2.0]]}"#,
        );
        let t = Trace::from_json(&text).unwrap();
        let d = t.routing(0).unwrap();
        assert_eq!(d.row(0), &[0.5, 0.5]);
        assert!((d.row(1)[0] - 0.26894).abs() < 1e-5);
    }
}
