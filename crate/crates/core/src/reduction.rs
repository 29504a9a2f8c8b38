//! Expert-activation reduction: from a start layer onward, tokens of the
//! targeted modality keep only `K_v < K` of their routed experts, and the gate
//! weights are re-normalized over the survivors.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::moe::{
    gate_weights, top_k_select, GateRow, Modality, ModalityMask, MoeConfig, RoutingDistribution,
};
use crate::{round_half_up, Error, Result};

/// How the `K_v` survivors are picked from the baseline top-K pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Strategy {
    /// Highest routing probability first.
    #[default]
    TopK,
    /// Uniform subset, seeded per (layer, token).
    RandomK,
    /// Lowest routing probability first.
    MinK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TargetModality {
    #[default]
    Vision,
    Text,
    All,
}

impl TargetModality {
    pub fn matches(self, m: Modality) -> bool {
        match self {
            TargetModality::All => true,
            TargetModality::Vision => m == Modality::Vision,
            TargetModality::Text => m == Modality::Text,
        }
    }
}

/// `K_v` given either directly or as an activation ratio `p` (`K_v = round(pK)`).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ReducedCount {
    Count(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReductionPolicy {
    /// First layer (0-based, inclusive) at which reduction applies.
    pub start_layer: usize,
    pub reduced: ReducedCount,
    pub strategy: Strategy,
    pub target: TargetModality,
    /// Halve the shared experts alongside the routed ones (proportionally
    /// to `K_v / K`). Off by default: shared experts stay on.
    pub reduce_shared: bool,
    pub seed: u64,
}

impl ReductionPolicy {
    /// A policy that never changes anything (`K_v = K`).
    pub fn disabled(top_k: usize) -> Self {
        Self {
            start_layer: 0,
            reduced: ReducedCount::Count(top_k),
            strategy: Strategy::TopK,
            target: TargetModality::Vision,
            reduce_shared: false,
            seed: 0,
        }
    }

    pub fn reduced_count(&self, top_k: usize) -> Result<usize> {
        match self.reduced {
            ReducedCount::Count(k) => Ok(k),
            ReducedCount::Ratio(p) => resolve_reduced_count(top_k, p),
        }
    }

    /// Shared experts kept on for a reduced token.
    pub fn shared_active(&self, config: &MoeConfig) -> Result<usize> {
        if !self.reduce_shared {
            return Ok(config.num_shared);
        }
        let kv = self.reduced_count(config.top_k)?;
        Ok(round_half_up(
            config.num_shared as f64 * kv as f64 / config.top_k as f64,
        ))
    }

    pub fn validate(&self, config: &MoeConfig) -> Result<()> {
        config.validate()?;
        let kv = self.reduced_count(config.top_k)?;
        if kv > config.top_k {
            return Err(Error::Invalid(alloc::format!(
                "reduced count {kv} exceeds top_k {}",
                config.top_k
            )));
        }
        if self.start_layer >= config.num_layers {
            return Err(Error::Invalid(alloc::format!(
                "start layer {} is past the last layer {}",
                self.start_layer,
                config.num_layers - 1
            )));
        }
        if kv == 0 && self.shared_active(config)? == 0 {
            return Err(Error::Invalid(
                "reduced tokens would activate no expert at all".into(),
            ));
        }
        Ok(())
    }
}

pub fn resolve_reduced_count(top_k: usize, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::OutOfRange {
            what: "activation ratio",
            value: ratio,
        });
    }
    Ok(round_half_up(ratio * top_k as f64))
}

/// Pick `reduced` experts out of the baseline pool (which must be in
/// descending-probability order, as [`top_k_select`] returns it). The
/// result keeps pool order.
pub fn select_reduced<R: Rng + ?Sized>(
    pool: &[usize],
    reduced: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if reduced > pool.len() {
        return Err(Error::Invalid(alloc::format!(
            "cannot keep {reduced} of {} experts",
            pool.len()
        )));
    }
    Ok(match strategy {
        Strategy::TopK => pool[..reduced].to_vec(),
        Strategy::MinK => pool[pool.len() - reduced..].to_vec(),
        Strategy::RandomK => {
            let mut picked = rand::seq::index::sample(rng, pool.len(), reduced).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pool[i]).collect()
        }
    })
}

/// Rng for one token, independent of evaluation order.
pub fn token_rng(seed: u64, layer: usize, token: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | token as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenGate {
    pub gates: GateRow,
    pub reduced: bool,
    pub shared_active: usize,
}

/// Per-token gating for one layer.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerGatePlan {
    pub tokens: Vec<TokenGate>,
}

impl LayerGatePlan {
    pub fn routed_evaluations(&self) -> usize {
        self.tokens.iter().map(|t| t.gates.len()).sum()
    }

    pub fn shared_evaluations(&self) -> usize {
        self.tokens.iter().map(|t| t.shared_active).sum()
    }

    pub fn reduced_tokens(&self) -> usize {
        self.tokens.iter().filter(|t| t.reduced).count()
    }
}

/// Plain top-K gating for every token.
pub fn baseline_gating(dist: &RoutingDistribution, config: &MoeConfig) -> Result<LayerGatePlan> {
    let tokens = (0..dist.num_tokens())
        .map(|i| {
            let p = dist.row(i);
            Ok(TokenGate {
                gates: gate_weights(p, &top_k_select(p, config.top_k)?)?,
                reduced: false,
                shared_active: config.num_shared,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerGatePlan { tokens })
}

/// Gate every token of `dist` at `layer` under `policy`.
pub fn apply_reduction(
    dist: &RoutingDistribution,
    mask: &ModalityMask,
    layer: usize,
    policy: &ReductionPolicy,
    config: &MoeConfig,
) -> Result<LayerGatePlan> {
    if dist.num_tokens() != mask.len() {
        return Err(Error::DimensionMismatch {
            what: "modality mask",
            expected: dist.num_tokens(),
            found: mask.len(),
        });
    }
    if dist.num_experts() != config.num_experts {
        return Err(Error::DimensionMismatch {
            what: "routing experts",
            expected: config.num_experts,
            found: dist.num_experts(),
        });
    }
    policy.validate(config)?;
    let kv = policy.reduced_count(config.top_k)?;
    let shared_reduced = policy.shared_active(config)?;
    let active = layer >= policy.start_layer;

    let tokens = (0..dist.num_tokens())
        .map(|i| {
            let p = dist.row(i);
            let pool = top_k_select(p, config.top_k)?;
            if active && policy.target.matches(mask.get(i)) {
                let mut rng = token_rng(policy.seed, layer, i);
                let keep = select_reduced(&pool, kv, policy.strategy, &mut rng)?;
                let gates = if keep.is_empty() {
                    GateRow {
                        selected: Vec::new(),
                        weights: Vec::new(),
                    }
                } else {
                    gate_weights(p, &keep)?
                };
                Ok(TokenGate {
                    gates,
                    reduced: true,
                    shared_active: shared_reduced,
                })
            } else {
                Ok(TokenGate {
                    gates: gate_weights(p, &pool)?,
                    reduced: false,
                    shared_active: config.num_shared,
                })
            }
        })
        .collect::<Result<_>>()?;
    Ok(LayerGatePlan { tokens })
}
