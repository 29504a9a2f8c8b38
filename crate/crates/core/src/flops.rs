//! Analytical FLOPs model for vision-token pruning, expert-activation
//! reduction, and both combined.
//!
//! Per-layer vision cost in an MoE layer is
//! `C(x) = 4x²H + 8xH² + 2xHE + 6xHS_mK` for `x` live vision tokens; `C'`
//! swaps `K` for `K_v`. Dense (non-MoE) layers cost `6xHS`. Layers are
//! grouped into stages separated by the pruning layers; stage `s` runs on
//! `β^s L_v` vision tokens. Every ratio is
//!
//! ```text
//! R = Σ_s [D_s·dense(x_s) + N_s C_s + m_s Δ_s] / [D·dense(L_v) + N·C(L_v)]
//! ```
//!
//! with `N_s` MoE layers and `D_s` dense layers in stage `s`, `m_s` of the MoE
//! layers at or past `l_v`, and `Δ_s = C'_s − C_s`.
//!
//! Besides this vision-only ratio, each report carries a whole-sequence
//! variant in which the text tokens share the attention, pass through the
//! router and full top-K, and shared experts are charged.

use alloc::string::String;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::{Error, Result};

pub fn attn_flops(batch: f64, len: f64, hidden: f64) -> f64 {
    4.0 * batch * len * len * hidden + 8.0 * batch * len * hidden * hidden
}

pub fn mlp_flops(batch: f64, len: f64, hidden: f64, inter: f64) -> f64 {
    6.0 * batch * len * hidden * inter
}

pub fn moe_flops(
    batch: f64,
    len: f64,
    hidden: f64,
    experts: f64,
    expert_inter: f64,
    top_k: f64,
) -> f64 {
    2.0 * batch * len * hidden * experts + 6.0 * batch * len * hidden * expert_inter * top_k
}

/// Which layer layout a config must follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Schedule {
    /// 30 layers, layer 0 dense, pruning after layers 2, 5, 8.
    Deepseek30,
    /// 48 MoE layers, pruning after layers 5, 8, 12.
    Internvl48,
    /// Whatever the config says.
    Custom,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Deepseek30 => "deepseek30",
            Schedule::Internvl48 => "internvl48",
            Schedule::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "deepseek30" => Some(Schedule::Deepseek30),
            "internvl48" => Some(Schedule::Internvl48),
            "custom" => Some(Schedule::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsConfig {
    pub batch: usize,
    /// `L`, vision plus text.
    pub total_tokens: usize,
    /// `L_v` before pruning.
    pub vision_tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `S`, dense MLP width.
    pub dense_intermediate: usize,
    /// `S_m`, expert width.
    pub expert_intermediate: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub reduced_k: usize,
    pub num_shared: usize,
    /// `l_v`, first reduced layer (inclusive).
    pub reduction_start: usize,
    pub num_layers: usize,
    /// Layers with a dense MLP instead of an MoE block.
    pub dense_layers: Vec<usize>,
    pub prune_layers: Vec<usize>,
    /// Per-stage retention.
    pub beta: f64,
}

impl FlopsConfig {
    /// 30-layer MoE backbone with two shared and 72 routed experts (6 routed
    /// active), first layer dense. Widths follow the public model config;
    /// `L_v = 1023` is a global view plus a 2×2 local tiling.
    pub fn deepseek30() -> Self {
        Self {
            batch: 1,
            total_tokens: 1023 + 64,
            vision_tokens: 1023,
            hidden: 2560,
            heads: 20,
            head_dim: 128,
            dense_intermediate: 12288,
            expert_intermediate: 1536,
            num_experts: 72,
            top_k: 6,
            reduced_k: 6,
            num_shared: 2,
            reduction_start: 30,
            num_layers: 30,
            dense_layers: alloc::vec![0],
            prune_layers: alloc::vec![2, 5, 8],
            beta: 1.0,
        }
    }

    /// 48-layer MoE backbone with 128 routed experts, 8 active, no shared
    /// experts. Widths follow the public model config; `L_v = 1792` is six
    /// 256-token tiles plus a thumbnail.
    pub fn internvl48() -> Self {
        Self {
            batch: 1,
            total_tokens: 1792 + 64,
            vision_tokens: 1792,
            hidden: 2048,
            heads: 32,
            head_dim: 64,
            dense_intermediate: 6144,
            expert_intermediate: 768,
            num_experts: 128,
            top_k: 8,
            reduced_k: 8,
            num_shared: 0,
            reduction_start: 48,
            num_layers: 48,
            dense_layers: Vec::new(),
            prune_layers: alloc::vec![5, 8, 12],
            beta: 1.0,
        }
    }

    pub fn preset(schedule: Schedule) -> Option<Self> {
        match schedule {
            Schedule::Deepseek30 => Some(Self::deepseek30()),
            Schedule::Internvl48 => Some(Self::internvl48()),
            Schedule::Custom => None,
        }
    }

    pub fn text_tokens(&self) -> usize {
        self.total_tokens.saturating_sub(self.vision_tokens)
    }

    pub fn validate(&self, schedule: Schedule) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.batch == 0 || self.hidden == 0 || self.num_experts == 0 || self.num_layers == 0 {
            return bad("batch, hidden, num_experts and num_layers must be positive".into());
        }
        if self.heads * self.head_dim != self.hidden {
            return bad(alloc::format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden,
                self.heads,
                self.head_dim
            ));
        }
        if self.vision_tokens > self.total_tokens {
            return bad("vision tokens exceed total tokens".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts || self.reduced_k > self.top_k {
            return bad(alloc::format!(
                "need 0 <= K_v <= K <= E, got K_v={} K={} E={}",
                self.reduced_k,
                self.top_k,
                self.num_experts
            ));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::OutOfRange {
                what: "beta",
                value: self.beta,
            });
        }
        for layers in [&self.prune_layers, &self.dense_layers] {
            if layers.windows(2).any(|w| w[0] >= w[1]) {
                return bad("layer lists must be strictly increasing".into());
            }
            if layers.last().is_some_and(|&l| l >= self.num_layers) {
                return bad("layer index past the last layer".into());
            }
        }
        let expected: Option<(usize, &[usize], &[usize])> = match schedule {
            Schedule::Deepseek30 => Some((30, &[0], &[2, 5, 8])),
            Schedule::Internvl48 => Some((48, &[], &[5, 8, 12])),
            Schedule::Custom => None,
        };
        if let Some((layers, dense, prune)) = expected {
            if self.num_layers != layers || self.dense_layers != dense || self.prune_layers != prune
            {
                return bad(alloc::format!(
                    "config does not follow the {} layer schedule",
                    schedule.name()
                ));
            }
        }
        Ok(())
    }
}

/// One group of consecutive layers sharing a live vision count.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageBreakdown {
    pub stage: usize,
    pub first_layer: usize,
    pub last_layer: usize,
    /// `β^s L_v`.
    pub vision_tokens: f64,
    pub moe_layers: usize,
    pub dense_layers: usize,
    /// MoE layers at or past `l_v`.
    pub reduced_layers: usize,
    /// `C_s`.
    pub cost: f64,
    /// `Δ_s = C'_s − C_s` (non-positive).
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsTotals {
    pub baseline_total: f64,
    pub optimized_total: f64,
    pub ratio: f64,
    pub savings: f64,
}

impl FlopsTotals {
    fn new(baseline: f64, change: f64) -> Self {
        let ratio = 1.0 + change / baseline;
        Self {
            baseline_total: baseline,
            optimized_total: baseline + change,
            ratio,
            savings: 1.0 - ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsReport {
    pub schedule: Schedule,
    pub beta: f64,
    pub reduced_k: usize,
    pub reduction_start: usize,
    /// Vision-token FLOPs only.
    pub vision_only: FlopsTotals,
    /// Vision and text tokens, shared experts included.
    pub whole_sequence: FlopsTotals,
    pub stages: Vec<StageBreakdown>,
}

impl FlopsReport {
    pub fn ratio(&self) -> f64 {
        self.vision_only.ratio
    }

    pub fn savings(&self) -> f64 {
        self.vision_only.savings
    }
}

struct Costs<'a>(&'a FlopsConfig);

impl Costs<'_> {
    fn moe(&self, x: f64, k: usize) -> f64 {
        let c = self.0;
        let (b, h) = (c.batch as f64, c.hidden as f64);
        attn_flops(b, x, h)
            + moe_flops(
                b,
                x,
                h,
                c.num_experts as f64,
                c.expert_intermediate as f64,
                k as f64,
            )
    }

    fn dense(&self, x: f64) -> f64 {
        let c = self.0;
        mlp_flops(
            c.batch as f64,
            x,
            c.hidden as f64,
            c.dense_intermediate as f64,
        )
    }

    fn whole_moe(&self, x: f64, k: usize) -> f64 {
        let c = self.0;
        let (b, h, t) = (c.batch as f64, c.hidden as f64, c.text_tokens() as f64);
        let sm = c.expert_intermediate as f64;
        attn_flops(b, x + t, h)
            + 2.0 * b * (x + t) * h * c.num_experts as f64
            + 6.0 * b * h * sm * (x * k as f64 + t * c.top_k as f64)
            + 6.0 * b * (x + t) * h * sm * c.num_shared as f64
    }

    fn whole_dense(&self, x: f64) -> f64 {
        let c = self.0;
        let (b, h, t) = (c.batch as f64, c.hidden as f64, c.text_tokens() as f64);
        attn_flops(b, x + t, h) + mlp_flops(b, x + t, h, c.dense_intermediate as f64)
    }
}

fn evaluate(
    config: &FlopsConfig,
    schedule: Schedule,
    beta: f64,
    reduced_k: usize,
) -> Result<FlopsReport> {
    config.validate(schedule)?;
    let costs = Costs(config);
    let lv = config.vision_tokens as f64;
    let k = config.top_k;

    let mut stages: Vec<StageBreakdown> = Vec::with_capacity(config.prune_layers.len() + 1);
    let mut first = 0;
    let mut x = lv;
    let bounds = config
        .prune_layers
        .iter()
        .copied()
        .chain(core::iter::once(config.num_layers - 1));
    for (s, last) in bounds.enumerate() {
        if s > 0 {
            x *= beta;
        }
        if last < first && s > 0 {
            // pruning at the final layer leaves an empty trailing stage
            continue;
        }
        let layers = first..last + 1;
        let dense = layers
            .clone()
            .filter(|l| config.dense_layers.contains(l))
            .count();
        let moe = layers.len() - dense;
        let reduced = layers
            .clone()
            .filter(|l| !config.dense_layers.contains(l) && *l >= config.reduction_start)
            .count();
        let cost = costs.moe(x, k);
        stages.push(StageBreakdown {
            stage: s,
            first_layer: first,
            last_layer: last,
            vision_tokens: x,
            moe_layers: moe,
            dense_layers: dense,
            reduced_layers: reduced,
            cost,
            delta: costs.moe(x, reduced_k) - cost,
        });
        first = last + 1;
    }

    let n_dense = config.dense_layers.len() as f64;
    let n_moe = (config.num_layers - config.dense_layers.len()) as f64;

    // accumulate differences from baseline so no-op configs give R = 1 exactly
    let base = n_dense * costs.dense(lv) + n_moe * costs.moe(lv, k);
    let mut change = 0.0;
    let whole_base = n_dense * costs.whole_dense(lv) + n_moe * costs.whole_moe(lv, k);
    let mut whole_change = 0.0;
    for st in &stages {
        let x = st.vision_tokens;
        change += st.dense_layers as f64 * (costs.dense(x) - costs.dense(lv))
            + st.moe_layers as f64 * (st.cost - costs.moe(lv, k))
            + st.reduced_layers as f64 * st.delta;
        whole_change += st.dense_layers as f64 * (costs.whole_dense(x) - costs.whole_dense(lv))
            + st.moe_layers as f64 * (costs.whole_moe(x, k) - costs.whole_moe(lv, k))
            + st.reduced_layers as f64 * (costs.whole_moe(x, reduced_k) - costs.whole_moe(x, k));
    }

    Ok(FlopsReport {
        schedule,
        beta,
        reduced_k,
        reduction_start: config.reduction_start,
        vision_only: FlopsTotals::new(base, change),
        whole_sequence: FlopsTotals::new(whole_base, whole_change),
        stages,
    })
}

/// Token pruning only (`K_v` forced to `K`).
pub fn ratio_prune(config: &FlopsConfig, schedule: Schedule) -> Result<FlopsReport> {
    evaluate(config, schedule, config.beta, config.top_k)
}

/// Activation reduction only (`β` forced to 1).
pub fn ratio_act(config: &FlopsConfig, schedule: Schedule) -> Result<FlopsReport> {
    evaluate(config, schedule, 1.0, config.reduced_k)
}

pub fn ratio_combined(config: &FlopsConfig, schedule: Schedule) -> Result<FlopsReport> {
    evaluate(config, schedule, config.beta, config.reduced_k)
}

/// Activation-reduction savings over a grid of start layers and `K_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub start_layers: Vec<usize>,
    pub reduced_counts: Vec<usize>,
    /// `savings.row(i)[j]` is `1 − R_act` at `start_layers[i]`, `reduced_counts[j]`.
    pub savings: Matrix,
}

pub fn savings_heatmap(
    config: &FlopsConfig,
    schedule: Schedule,
    start_layers: &[usize],
    reduced_counts: &[usize],
) -> Result<Heatmap> {
    let mut savings = Matrix::zeros(start_layers.len(), reduced_counts.len());
    let mut cfg = config.clone();
    for (i, &l) in start_layers.iter().enumerate() {
        for (j, &k) in reduced_counts.iter().enumerate() {
            cfg.reduction_start = l;
            cfg.reduced_k = k;
            savings.row_mut(i)[j] = ratio_act(&cfg, schedule)?.savings();
        }
    }
    Ok(Heatmap {
        start_layers: start_layers.to_vec(),
        reduced_counts: reduced_counts.to_vec(),
        savings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_hand_values() {
        assert_eq!(attn_flops(1.0, 0.0, 64.0), 0.0);
        assert_eq!(attn_flops(1.0, 100.0, 64.0), 5_836_800.0);
        assert!(attn_flops(1.0, 200.0, 64.0) > 2.0 * attn_flops(1.0, 100.0, 64.0));
        assert_eq!(mlp_flops(1.0, 10.0, 4.0, 8.0), 1920.0);
        assert_eq!(mlp_flops(1.0, 0.0, 4.0, 8.0), 0.0);
        assert_eq!(mlp_flops(2.0, 10.0, 4.0, 8.0), 2.0 * 1920.0);
        assert_eq!(moe_flops(1.0, 10.0, 4.0, 8.0, 16.0, 2.0), 8320.0);
        assert_eq!(moe_flops(1.0, 10.0, 4.0, 8.0, 16.0, 0.0), 640.0);
        assert_eq!(moe_flops(1.0, 0.0, 4.0, 8.0, 16.0, 2.0), 0.0);
    }

    #[test]
    fn internvl_stage_lengths() {
        let mut c = FlopsConfig::internvl48();
        c.beta = 0.63;
        let r = ratio_prune(&c, Schedule::Internvl48).unwrap();
        let lens: alloc::vec::Vec<_> = r.stages.iter().map(|s| s.moe_layers).collect();
        assert_eq!(lens, [6, 3, 4, 35]);
    }

    #[test]
    fn deepseek_stage_lengths() {
        let r = ratio_prune(&FlopsConfig::deepseek30(), Schedule::Deepseek30).unwrap();
        let moe: alloc::vec::Vec<_> = r.stages.iter().map(|s| s.moe_layers).collect();
        assert_eq!(moe, [2, 3, 3, 21]);
        assert_eq!(r.stages[0].dense_layers, 1);
    }

    #[test]
    fn no_op_is_exactly_one() {
        for s in [Schedule::Deepseek30, Schedule::Internvl48] {
            let c = FlopsConfig::preset(s).unwrap();
            for r in [ratio_prune(&c, s), ratio_act(&c, s), ratio_combined(&c, s)] {
                let r = r.unwrap();
                assert_eq!(r.ratio(), 1.0);
                assert_eq!(r.whole_sequence.ratio, 1.0);
            }
        }
    }

    #[test]
    fn schedule_mismatch_rejected() {
        let mut c = FlopsConfig::internvl48();
        c.prune_layers = alloc::vec![4, 8, 12];
        assert!(ratio_prune(&c, Schedule::Internvl48).is_err());
        assert!(ratio_prune(&c, Schedule::Custom).is_ok());
        c.heads = 3;
        assert!(ratio_prune(&c, Schedule::Custom).is_err());
    }
}
