//! Seeded synthetic traces with optional planted blocks of near-identical
//! vision routing rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use routeprune_core::linalg::norm;
use routeprune_core::moe::{routing_probs, top_k_select, ExpertBank, Modality, MoeConfig};
use routeprune_core::pruning::window_similarity_exact;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{LayerTrace, RoutingRows, Trace, TraceMetadata, TRACE_VERSION};

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_vision: usize,
    pub num_text: usize,
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub num_shared: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_expert_dim")]
    pub expert_dim: usize,
    pub num_layers: usize,
    /// Standard deviation of the random routing logits.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    /// Length of each planted block, in vision tokens.
    #[serde(default)]
    pub block_len: usize,
    /// Minimum mean pairwise cosine inside each planted block.
    #[serde(default = "one")]
    pub block_similarity: f64,
    /// Start positions (vision subsequence) of the planted blocks.
    #[serde(default)]
    pub blocks: Vec<usize>,
    #[serde(default = "yes")]
    pub hidden: bool,
}

fn default_expert_dim() -> usize {
    8
}
fn default_logit_scale() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl SyntheticSpec {
    pub fn new(
        seed: u64,
        num_vision: usize,
        num_text: usize,
        num_experts: usize,
        top_k: usize,
    ) -> Self {
        Self {
            seed,
            num_vision,
            num_text,
            num_experts,
            top_k,
            num_shared: 0,
            hidden_dim: 16,
            expert_dim: default_expert_dim(),
            num_layers: 4,
            logit_scale: default_logit_scale(),
            block_len: 0,
            block_similarity: 1.0,
            blocks: Vec::new(),
            hidden: true,
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Infeasible(m));
        if self.num_text == 0 {
            return bad("at least one text token is needed as the attention query".into());
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return bad(format!(
                "need 1 <= top_k <= num_experts, got {} and {}",
                self.top_k, self.num_experts
            ));
        }
        if self.num_layers == 0 || self.hidden_dim == 0 || self.expert_dim == 0 {
            return bad("num_layers, hidden_dim and expert_dim must be positive".into());
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return bad(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.block_similarity) {
            return bad(format!(
                "block_similarity {} outside [0, 1]",
                self.block_similarity
            ));
        }
        if !self.blocks.is_empty() && self.block_len < 2 {
            return bad("planted blocks need block_len >= 2".into());
        }
        let mut sorted = self.blocks.clone();
        sorted.sort_unstable();
        for (i, &s) in sorted.iter().enumerate() {
            if s + self.block_len > self.num_vision {
                return bad(format!(
                    "block at {s} runs past {} vision tokens",
                    self.num_vision
                ));
            }
            if i > 0 && sorted[i - 1] + self.block_len > s {
                return bad(format!("blocks at {} and {s} overlap", sorted[i - 1]));
            }
        }
        Ok(())
    }

    fn block_of(&self, v: usize) -> Option<usize> {
        self.blocks
            .iter()
            .position(|&s| (s..s + self.block_len).contains(&v))
    }
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

fn random_probs<R: Rng>(rng: &mut R, e: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).expect("scale validated");
    let logits: Vec<f64> = (0..e).map(|_| normal.sample(rng)).collect();
    routing_probs(&logits).expect("finite logits")
}

fn mix(base: &[f64], noise: &[f64], lambda: f64) -> Vec<f64> {
    base.iter()
        .zip(noise)
        .map(|(b, n)| lambda * b + (1.0 - lambda) * n)
        .collect()
}

fn block_similarity(base: &[f64], noise: &[Vec<f64>], lambda: f64) -> f64 {
    let rows: Vec<Vec<f64>> = noise.iter().map(|n| mix(base, n, lambda)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    window_similarity_exact(&refs).expect("probability rows have positive norm")
}

/// Headroom so rounding in later re-measurement cannot dip below the target.
const TARGET_MARGIN: f64 = 1e-9;

/// Smallest mixing weight (to bisection precision) whose block similarity
/// reaches `target`; falls back to identical rows.
fn plant_block(base: &[f64], noise: &[Vec<f64>], target: f64) -> Vec<Vec<f64>> {
    let target = if target >= 1.0 {
        1.0
    } else {
        (target + TARGET_MARGIN).min(1.0)
    };
    let lambda = if target >= 1.0 {
        1.0
    } else if block_similarity(base, noise, 0.0) >= target {
        0.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if block_similarity(base, noise, mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if block_similarity(base, noise, hi) >= target {
            hi
        } else {
            1.0
        }
    };
    if lambda == 1.0 {
        return vec![base.to_vec(); noise.len()];
    }
    noise.iter().map(|n| mix(base, n, lambda)).collect()
}

/// Build a deterministic trace: vision tokens first, then text; the last text
/// token supplies the attention row.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Trace, SyntheticError> {
    spec.validate()?;
    let (nv, nt, e) = (spec.num_vision, spec.num_text, spec.num_experts);
    let n = nv + nt;
    let modality: Vec<Modality> = (0..n)
        .map(|i| {
            if i < nv {
                Modality::Vision
            } else {
                Modality::Text
            }
        })
        .collect();
    let config = MoeConfig {
        num_experts: e,
        top_k: spec.top_k,
        num_shared: spec.num_shared,
        hidden_dim: spec.hidden_dim,
        expert_dim: spec.expert_dim,
        num_layers: spec.num_layers,
    };

    let mut layers = Vec::with_capacity(spec.num_layers);
    for l in 0..spec.num_layers {
        let mut rng = layer_rng(spec.seed, l);
        let mut probs: Vec<Vec<f64>> = (0..n)
            .map(|_| random_probs(&mut rng, e, spec.logit_scale))
            .collect();
        for &start in &spec.blocks {
            let base = random_probs(&mut rng, e, spec.logit_scale);
            let noise = &probs[start..start + spec.block_len];
            let planted = plant_block(&base, noise, spec.block_similarity);
            probs.splice(start..start + spec.block_len, planted);
        }

        let raw: Vec<f64> = (0..n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f64>>();
        let total: f64 = raw.iter().map(|r: &f64| r.exp()).sum();
        let attention: Vec<f64> = raw[..nv].iter().map(|r| r.exp() / total).collect();

        let (hidden, expert_norms) = if spec.hidden {
            let hidden: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut row: Vec<f64> = (0..spec.hidden_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    if let Some(b) = (i < nv).then(|| spec.block_of(i)).flatten() {
                        // planted tokens share a direction as well
                        let mut brng = layer_rng(spec.seed ^ 0x9e37_79b9_7f4a_7c15, l * 1024 + b);
                        for x in row.iter_mut() {
                            let s: f64 = StandardNormal.sample(&mut brng);
                            *x = 0.2 * *x + s;
                        }
                    }
                    row
                })
                .collect();
            let bank = ExpertBank::seeded(&config, spec.seed.wrapping_add(l as u64))
                .map_err(|err| SyntheticError::Infeasible(err.to_string()))?;
            let norms = hidden
                .iter()
                .zip(&probs)
                .map(|(h, p)| {
                    top_k_select(p, spec.top_k)
                        .expect("validated top_k")
                        .iter()
                        .map(|&j| norm(&bank.routed[j].forward(h).expect("matching dims")))
                        .collect()
                })
                .collect();
            (Some(hidden), Some(norms))
        } else {
            (None, None)
        };

        layers.push(LayerTrace {
            routing: RoutingRows::Probs(probs),
            attention,
            hidden,
            expert_norms,
        });
    }

    Ok(Trace {
        version: TRACE_VERSION,
        metadata: TraceMetadata {
            model: format!("synthetic-seed{}", spec.seed),
            num_layers: spec.num_layers,
            num_tokens: n,
            num_experts: e,
            top_k: spec.top_k,
            num_shared: spec.num_shared,
            hidden_dim: spec.hidden_dim,
            expert_dim: Some(spec.expert_dim),
            attention: "last text token, softmax over the full sequence, vision entries".into(),
        },
        modality,
        layers,
    })
}
