//! Routing-aware sliding-window token pruning.
//!
//! Vision tokens are cut into contiguous windows. Each window gets a routing
//! similarity `S_i` (how alike its tokens' routing distributions are) and an
//! attention mass `Ā_i` (how much the last text token looks at it), combined
//! into a redundancy score `C_i = α S_i − (1 − α) Ā_i`. The most redundant
//! windows are merged into a single token, the least attended remaining
//! windows are dropped whole, and any remainder is taken token by token so the
//! surviving vision count hits the target exactly.

use alloc::vec::Vec;
use core::ops::Range;

use crate::linalg::{cosine, mean_rows, norm, Matrix};
use crate::moe::{HiddenState, Modality, ModalityMask, RoutingDistribution};
use crate::theory::gamma_upper_bound;
use crate::{round_half_up, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SimilarityMode {
    /// Mean pairwise cosine over all token pairs in the window.
    #[default]
    Exact,
    /// Mean cosine of each token against the window centroid.
    Approx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MergeMode {
    Mean,
    /// Mean direction rescaled to the largest member norm.
    #[default]
    Mlerp,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PruneSchedule {
    /// Layers after which pruning happens, strictly increasing.
    pub prune_layers: Vec<usize>,
    /// Per-stage retention `β ∈ (0, 1]`.
    pub beta: f64,
    /// Window size `W ≥ 2`.
    pub window: usize,
    /// Similarity/attention trade-off `α ∈ [0, 1]`.
    pub alpha: f64,
    /// Merge rate `γ ∈ [0, 1)`.
    pub gamma: f64,
    pub similarity: SimilarityMode,
    pub merge: MergeMode,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::OutOfRange {
                what: "window size",
                value: self.window as f64,
            });
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::OutOfRange {
                what: "beta",
                value: self.beta,
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::OutOfRange {
                what: "alpha",
                value: self.alpha,
            });
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::OutOfRange {
                what: "gamma",
                value: self.gamma,
            });
        }
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(
                "prune layers must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// `γ` above the feasibility bound `γ̂(β, W)`. Not an error; merge
    /// counts get clamped at plan time.
    pub fn gamma_exceeds_bound(&self) -> bool {
        self.gamma > gamma_upper_bound(self.beta, self.window).unwrap_or(0.0)
    }
}

/// Contiguous windows over `0..N_v`; only the last may be short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowView {
    windows: Vec<Range<usize>>,
    len: usize,
}

impl WindowView {
    pub fn count(&self) -> usize {
        self.windows.len()
    }

    pub fn window(&self, i: usize) -> Range<usize> {
        self.windows[i].clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.windows.iter().cloned()
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub fn window_partition(num_vision: usize, window: usize) -> Result<WindowView> {
    if window < 2 {
        return Err(Error::OutOfRange {
            what: "window size",
            value: window as f64,
        });
    }
    let windows = (0..num_vision.div_ceil(window))
        .map(|i| i * window..((i + 1) * window).min(num_vision))
        .collect();
    Ok(WindowView {
        windows,
        len: num_vision,
    })
}

/// Routing rows and last-text-token attention of the vision tokens, in
/// sequence order. `attention` is indexed by full-sequence position.
pub fn extract_vision(
    dist: &RoutingDistribution,
    attention: &[f64],
    mask: &ModalityMask,
) -> Result<(RoutingDistribution, Vec<f64>)> {
    let n = dist.num_tokens();
    if mask.len() != n {
        return Err(Error::DimensionMismatch {
            what: "modality mask",
            expected: n,
            found: mask.len(),
        });
    }
    if attention.len() != n {
        return Err(Error::DimensionMismatch {
            what: "attention row",
            expected: n,
            found: attention.len(),
        });
    }
    let pos = mask.positions(Modality::Vision);
    let attn: Vec<f64> = pos.iter().map(|&i| attention[i]).collect();
    check_attention(&attn)?;
    Ok((dist.select_rows(&pos), attn))
}

fn check_attention(attn: &[f64]) -> Result<()> {
    if attn.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite { what: "attention" });
    }
    if let Some(a) = attn.iter().find(|&&a| a < 0.0) {
        return Err(Error::OutOfRange {
            what: "attention",
            value: *a,
        });
    }
    Ok(())
}

/// Mean pairwise cosine over all unordered pairs; 1.0 for a single row.
pub fn window_similarity_exact(rows: &[&[f64]]) -> Result<f64> {
    match rows.len() {
        0 => Err(Error::Invalid("similarity of an empty window".into())),
        1 => {
            if norm(rows[0]) == 0.0 {
                return Err(Error::ZeroNorm {
                    what: "routing row",
                });
            }
            Ok(1.0)
        }
        n => {
            let mut acc = 0.0;
            for a in 1..n {
                for b in 0..a {
                    acc += cosine(rows[a], rows[b])?;
                }
            }
            Ok(acc / (n * (n - 1) / 2) as f64)
        }
    }
}

/// Mean cosine between each row and the window's mean row.
pub fn window_similarity_approx(rows: &[&[f64]]) -> Result<f64> {
    let first = *rows
        .first()
        .ok_or_else(|| Error::Invalid("similarity of an empty window".into()))?;
    if norm(first) == 0.0 {
        return Err(Error::ZeroNorm {
            what: "routing row",
        });
    }
    // the centroid of identical rows can differ from them in the last ulp
    if rows.iter().all(|r| *r == first) {
        return Ok(1.0);
    }
    let centroid = mean_rows(rows.iter().copied(), first.len());
    let mut acc = 0.0;
    for r in rows {
        acc += cosine(r, &centroid)?;
    }
    Ok(acc / rows.len() as f64)
}

pub fn window_similarity(rows: &[&[f64]], mode: SimilarityMode) -> Result<f64> {
    match mode {
        SimilarityMode::Exact => window_similarity_exact(rows),
        SimilarityMode::Approx => window_similarity_approx(rows),
    }
}

/// Per-window attention sums divided by the largest sum. Returns the
/// normalized masses and whether all attention was zero (in which case the
/// masses are left at zero).
pub fn window_attention(attn: &[f64], view: &WindowView) -> Result<(Vec<f64>, bool)> {
    if attn.len() != view.len() {
        return Err(Error::DimensionMismatch {
            what: "vision attention",
            expected: view.len(),
            found: attn.len(),
        });
    }
    check_attention(attn)?;
    let sums: Vec<f64> = view.iter().map(|w| attn[w].iter().sum()).collect();
    let max = sums.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok((sums, !attn.is_empty()));
    }
    Ok((sums.into_iter().map(|s| s / max).collect(), false))
}

/// `C = α S − (1 − α) Ā`, elementwise.
pub fn redundancy_scores(similarity: &[f64], attention: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if similarity.len() != attention.len() {
        return Err(Error::DimensionMismatch {
            what: "redundancy inputs",
            expected: similarity.len(),
            found: attention.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange {
            what: "alpha",
            value: alpha,
        });
    }
    Ok(similarity
        .iter()
        .zip(attention)
        .map(|(s, a)| alpha * s - (1.0 - alpha) * a)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WindowScores {
    pub similarity: Vec<f64>,
    pub attention: Vec<f64>,
    pub redundancy: Vec<f64>,
    pub attention_all_zero: bool,
}

/// Score every window of `view` from the vision routing rows and attention.
pub fn score_windows(
    routing: &RoutingDistribution,
    attn: &[f64],
    view: &WindowView,
    alpha: f64,
    mode: SimilarityMode,
) -> Result<WindowScores> {
    if routing.num_tokens() != view.len() {
        return Err(Error::DimensionMismatch {
            what: "vision routing rows",
            expected: view.len(),
            found: routing.num_tokens(),
        });
    }
    let similarity = view
        .iter()
        .map(|w| {
            let rows: Vec<&[f64]> = w.map(|i| routing.row(i)).collect();
            window_similarity(&rows, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let (attention, attention_all_zero) = window_attention(attn, view)?;
    let redundancy = redundancy_scores(&similarity, &attention, alpha)?;
    Ok(WindowScores {
        similarity,
        attention,
        redundancy,
        attention_all_zero,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum PlanWarning {
    /// Fewer windows merged than `round(η γ)` because merging more would
    /// remove more tokens than the stage budget allows.
    MergeCountClamped { requested: usize, used: usize },
    /// All vision attention was zero; windows were ranked on similarity alone.
    ZeroAttention,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MergedWindow {
    pub window: usize,
    /// Surviving position (the window's first token).
    pub position: usize,
    pub start: usize,
    pub end: usize,
}

/// Which vision tokens survive one pruning stage. Positions index the vision
/// subsequence, `0..vision_before`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PrunePlan {
    pub vision_before: usize,
    pub target: usize,
    pub merged: Vec<MergedWindow>,
    pub drop_windows: Vec<usize>,
    pub residual_drop_positions: Vec<usize>,
    pub kept_positions: Vec<usize>,
    pub warnings: Vec<PlanWarning>,
}

impl PrunePlan {
    pub fn identity(num_vision: usize) -> Self {
        Self {
            vision_before: num_vision,
            target: num_vision,
            merged: Vec::new(),
            drop_windows: Vec::new(),
            residual_drop_positions: Vec::new(),
            kept_positions: (0..num_vision).collect(),
            warnings: Vec::new(),
        }
    }

    pub fn merge_windows(&self) -> Vec<usize> {
        self.merged.iter().map(|m| m.window).collect()
    }

    /// Tokens folded into a merged representative (each merged window of size
    /// `s` absorbs `s − 1`).
    pub fn absorbed(&self) -> usize {
        self.merged.iter().map(|m| m.end - m.start - 1).sum()
    }

    /// Tokens removed outright (dropped windows and residual singles).
    pub fn dropped(&self) -> usize {
        self.vision_before - self.kept_positions.len() - self.absorbed()
    }
}

/// Indices `0..n` ordered by `key` ascending, ties to the smaller index.
fn argsort_by<F: Fn(usize) -> f64>(idx: impl Iterator<Item = usize>, key: F) -> Vec<usize> {
    let mut v: Vec<usize> = idx.collect();
    v.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    v
}

/// Decide merges and drops for one stage so exactly `target` vision tokens
/// survive.
///
/// `attn` is the per-token attention of the vision subsequence (used for the
/// residual single-token drops); window-level quantities come from `scores`.
pub fn plan_pruning(
    target: usize,
    schedule: &PruneSchedule,
    scores: &WindowScores,
    attn: &[f64],
    view: &WindowView,
) -> Result<PrunePlan> {
    let n_v = view.len();
    if target > n_v {
        return Err(Error::Invalid(alloc::format!(
            "target {target} exceeds {n_v} vision tokens"
        )));
    }
    if attn.len() != n_v {
        return Err(Error::DimensionMismatch {
            what: "vision attention",
            expected: n_v,
            found: attn.len(),
        });
    }
    let nw = view.count();
    if scores.redundancy.len() != nw || scores.attention.len() != nw {
        return Err(Error::DimensionMismatch {
            what: "window scores",
            expected: nw,
            found: scores.redundancy.len(),
        });
    }
    let excess = n_v - target;
    if excess == 0 {
        return Ok(PrunePlan::identity(n_v));
    }

    let mut warnings = Vec::new();
    if scores.attention_all_zero {
        warnings.push(PlanWarning::ZeroAttention);
    }
    let size = |w: usize| view.window(w).len();

    // merges: highest redundancy first; singletons would absorb nothing
    let requested = round_half_up(target as f64 * schedule.gamma);
    let mut ranked: Vec<usize> = (0..nw).filter(|&w| size(w) >= 2).collect();
    ranked.sort_by(|&a, &b| scores.redundancy[b].total_cmp(&scores.redundancy[a]));
    let mut merged_w = Vec::new();
    let mut absorbed = 0;
    for &w in &ranked {
        if merged_w.len() == requested {
            break;
        }
        if absorbed + size(w) - 1 > excess {
            break;
        }
        absorbed += size(w) - 1;
        merged_w.push(w);
    }
    if merged_w.len() < requested {
        warnings.push(PlanWarning::MergeCountClamped {
            requested,
            used: merged_w.len(),
        });
    }

    let mut state = alloc::vec![WindowFate::Keep; nw];
    for &w in &merged_w {
        state[w] = WindowFate::Merge;
    }

    // whole-window drops: least attended first
    let remaining = excess - absorbed;
    let want = remaining / schedule.window;
    let by_attention = argsort_by((0..nw).filter(|&w| state[w] == WindowFate::Keep), |w| {
        scores.attention[w]
    });
    let mut drop_windows = Vec::new();
    let mut dropped = 0;
    for &w in &by_attention {
        if drop_windows.len() == want {
            break;
        }
        if dropped + size(w) <= remaining {
            dropped += size(w);
            drop_windows.push(w);
            state[w] = WindowFate::Drop;
        }
    }

    // residual singles: least attended window first, then least attended token
    let mut residual = remaining - dropped;
    let mut residual_drop_positions = Vec::new();
    for &w in &by_attention {
        if residual == 0 {
            break;
        }
        if state[w] != WindowFate::Keep {
            continue;
        }
        for p in argsort_by(view.window(w), |p| attn[p]) {
            if residual == 0 {
                break;
            }
            residual_drop_positions.push(p);
            residual -= 1;
        }
    }
    if residual != 0 {
        return Err(Error::Invalid(alloc::format!(
            "could not reach target {target}: {residual} tokens left to remove"
        )));
    }
    residual_drop_positions.sort_unstable();

    // listed in priority order, not position order
    let merged: Vec<MergedWindow> = merged_w
        .iter()
        .map(|&w| {
            let r = view.window(w);
            MergedWindow {
                window: w,
                position: r.start,
                start: r.start,
                end: r.end,
            }
        })
        .collect();

    let mut kept_positions = Vec::with_capacity(target);
    for (w, fate) in state.iter().enumerate() {
        let r = view.window(w);
        match fate {
            WindowFate::Merge => kept_positions.push(r.start),
            WindowFate::Drop => {}
            WindowFate::Keep => kept_positions
                .extend(r.filter(|p| residual_drop_positions.binary_search(p).is_err())),
        }
    }
    debug_assert_eq!(kept_positions.len(), target);

    Ok(PrunePlan {
        vision_before: n_v,
        target,
        merged,
        drop_windows,
        residual_drop_positions,
        kept_positions,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WindowFate {
    Keep,
    Merge,
    Drop,
}

pub fn merge_mean(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Invalid("merge of an empty window".into()))?;
    Ok(mean_rows(rows.iter().copied(), first.len()))
}

/// Mean direction scaled to the largest member norm.
pub fn merge_mlerp(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let mean = merge_mean(rows)?;
    let mean_norm = norm(&mean);
    if mean_norm == 0.0 {
        return Err(Error::ZeroNorm {
            what: "merged mean",
        });
    }
    let max_norm = rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
    let scale = max_norm / mean_norm;
    Ok(mean.into_iter().map(|v| v * scale).collect())
}

pub fn merge_tokens(rows: &[&[f64]], mode: MergeMode) -> Result<Vec<f64>> {
    match mode {
        MergeMode::Mean => merge_mean(rows),
        MergeMode::Mlerp => merge_mlerp(rows),
    }
}

/// Rebuild the sequence: text tokens untouched, vision tokens filtered to the
/// plan's kept positions, merged windows collapsed onto their first position.
pub fn apply_plan(
    hidden: &HiddenState,
    mask: &ModalityMask,
    plan: &PrunePlan,
    mode: MergeMode,
) -> Result<(HiddenState, ModalityMask)> {
    if hidden.num_tokens() != mask.len() {
        return Err(Error::DimensionMismatch {
            what: "modality mask",
            expected: hidden.num_tokens(),
            found: mask.len(),
        });
    }
    let vision = mask.positions(Modality::Vision);
    if vision.len() != plan.vision_before {
        return Err(Error::DimensionMismatch {
            what: "plan vision count",
            expected: vision.len(),
            found: plan.vision_before,
        });
    }
    if plan.kept_positions.windows(2).any(|w| w[0] >= w[1])
        || plan
            .kept_positions
            .last()
            .is_some_and(|&p| p >= vision.len())
    {
        return Err(Error::Invalid(
            "plan kept positions are inconsistent".into(),
        ));
    }
    for m in &plan.merged {
        if m.start >= m.end || m.end > vision.len() || m.position != m.start {
            return Err(Error::Invalid("plan merge window is inconsistent".into()));
        }
    }

    let h = hidden.hidden_dim();
    let mut rows: Vec<f64> =
        Vec::with_capacity((mask.len() - plan.vision_before + plan.target) * h);
    let mut labels = Vec::with_capacity(mask.len());
    let mut kept = plan.kept_positions.iter().peekable();
    let mut v = 0usize;
    for (i, &label) in mask.labels().iter().enumerate() {
        match label {
            Modality::Text => {
                rows.extend_from_slice(hidden.token(i));
                labels.push(Modality::Text);
            }
            Modality::Vision => {
                if kept.peek() == Some(&&v) {
                    kept.next();
                    if let Some(m) = plan.merged.iter().find(|m| m.position == v) {
                        let members: Vec<&[f64]> = vision[m.start..m.end]
                            .iter()
                            .map(|&p| hidden.token(p))
                            .collect();
                        rows.extend(merge_tokens(&members, mode)?);
                    } else {
                        rows.extend_from_slice(hidden.token(i));
                    }
                    labels.push(Modality::Vision);
                }
                v += 1;
            }
        }
    }
    let n = labels.len();
    Ok((
        HiddenState::new(Matrix::from_vec(n, h, rows)?)?,
        ModalityMask::new(labels),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn schedule(window: usize, gamma: f64, alpha: f64) -> PruneSchedule {
        PruneSchedule {
            prune_layers: vec![0],
            beta: 0.5,
            window,
            alpha,
            gamma,
            similarity: SimilarityMode::Exact,
            merge: MergeMode::Mean,
        }
    }

    #[test]
    fn partitions() {
        let v = window_partition(10, 5).unwrap();
        assert_eq!(v.iter().collect::<Vec<_>>(), vec![0..5, 5..10]);
        let v = window_partition(11, 5).unwrap();
        assert_eq!(v.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![5, 5, 1]);
        assert_eq!(window_partition(0, 5).unwrap().count(), 0);
        assert!(window_partition(4, 1).is_err());
    }

    #[test]
    fn similarity_hand_cases() {
        let r = [0.2, 0.3, 0.5];
        let rows: [&[f64]; 3] = [&r, &r, &r];
        assert_eq!(window_similarity_exact(&rows).unwrap(), 1.0);
        assert_eq!(window_similarity_approx(&rows).unwrap(), 1.0);
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(window_similarity_exact(&[&a, &b]).unwrap(), 0.0);
        let approx = window_similarity_approx(&[&a, &b]).unwrap();
        assert!((approx - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(window_similarity_exact(&[&a]).unwrap(), 1.0);
        assert!(window_similarity_exact(&[&[0.0, 0.0], &a]).is_err());
    }

    #[test]
    fn attention_normalization() {
        let v = window_partition(4, 2).unwrap();
        let (a, zero) = window_attention(&[1.0, 2.0, 3.0, 4.0], &v).unwrap();
        assert!(!zero);
        assert!((a[0] - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(a[1], 1.0);
        let (a, _) = window_attention(&[0.0, 0.0, 0.5, 0.5], &v).unwrap();
        assert_eq!(a, vec![0.0, 1.0]);
        let (a, _) = window_attention(&[0.25; 4], &v).unwrap();
        assert_eq!(a, vec![1.0, 1.0]);
        let (a, zero) = window_attention(&[0.0; 4], &v).unwrap();
        assert!(zero);
        assert_eq!(a, vec![0.0, 0.0]);
        assert!(window_attention(&[-1.0, 0.0, 0.0, 0.0], &v).is_err());
    }

    #[test]
    fn redundancy_boundaries() {
        let s = [0.9, 0.4];
        let a = [0.5, 1.0];
        assert_eq!(redundancy_scores(&s, &a, 1.0).unwrap(), s.to_vec());
        assert_eq!(redundancy_scores(&s, &a, 0.0).unwrap(), vec![-0.5, -1.0]);
        let c = redundancy_scores(&s, &a, 0.5).unwrap();
        assert!((c[0] - 0.2).abs() < 1e-15);
        assert!(redundancy_scores(&s, &a[..1], 0.5).is_err());
    }

    fn uniform_scores(nw: usize, attention: Vec<f64>) -> WindowScores {
        WindowScores {
            similarity: vec![0.5; nw],
            redundancy: attention.iter().map(|a| -a).collect(),
            attention,
            attention_all_zero: false,
        }
    }

    #[test]
    fn identity_plan_when_nothing_to_remove() {
        let v = window_partition(10, 5).unwrap();
        let s = uniform_scores(2, vec![1.0, 0.5]);
        let plan = plan_pruning(10, &schedule(5, 0.2, 0.5), &s, &[0.1; 10], &v).unwrap();
        assert_eq!(plan, PrunePlan::identity(10));
    }

    #[test]
    fn merge_then_residual_single() {
        // N_v=10, W=5, η=5, γ=0.2: one merge removes 4, one residual drop
        let v = window_partition(10, 5).unwrap();
        let s = WindowScores {
            similarity: vec![0.9, 0.1],
            attention: vec![1.0, 0.4],
            redundancy: vec![0.8, 0.3],
            attention_all_zero: false,
        };
        let attn = [0.1, 0.1, 0.1, 0.1, 0.1, 0.05, 0.02, 0.1, 0.1, 0.03];
        let plan = plan_pruning(5, &schedule(5, 0.2, 0.5), &s, &attn, &v).unwrap();
        assert_eq!(plan.merge_windows(), vec![0]);
        assert!(plan.drop_windows.is_empty());
        assert_eq!(plan.residual_drop_positions, vec![6]);
        assert_eq!(plan.kept_positions, vec![0, 5, 7, 8, 9]);
        assert_eq!(plan.absorbed(), 4);
        assert_eq!(plan.dropped(), 1);
    }

    #[test]
    fn pure_drop_mode() {
        let v = window_partition(20, 5).unwrap();
        let s = uniform_scores(4, vec![1.0, 0.2, 0.6, 0.3]);
        let plan = plan_pruning(15, &schedule(5, 0.0, 0.0), &s, &[0.01; 20], &v).unwrap();
        assert_eq!(plan.drop_windows, vec![1]);
        assert!(plan.merged.is_empty() && plan.residual_drop_positions.is_empty());
        assert_eq!(plan.kept_positions.len(), 15);
    }

    #[test]
    fn oversized_gamma_is_clamped() {
        let v = window_partition(20, 5).unwrap();
        let s = uniform_scores(4, vec![1.0, 0.2, 0.6, 0.3]);
        // η=15 γ=0.9 asks for 14 merges; only one fits in ε=5
        let plan = plan_pruning(15, &schedule(5, 0.9, 0.5), &s, &[0.01; 20], &v).unwrap();
        assert_eq!(plan.merged.len(), 1);
        assert!(matches!(
            plan.warnings[0],
            PlanWarning::MergeCountClamped {
                requested: 14,
                used: 1
            }
        ));
        assert_eq!(plan.kept_positions.len(), 15);
        assert!(plan_pruning(21, &schedule(5, 0.0, 0.5), &s, &[0.01; 20], &v).is_err());
    }

    #[test]
    fn mlerp_hand_case() {
        let m = merge_mlerp(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        let s = 3.0 / 2.5f64.sqrt();
        assert!((m[0] - 1.5 * s).abs() < 1e-12 && (m[1] - 0.5 * s).abs() < 1e-12);
        assert!((m[0] - 2.8460).abs() < 1e-4 && (m[1] - 0.9487).abs() < 1e-4);
        assert!(merge_mlerp(&[&[1.0, 0.0], &[-1.0, 0.0]]).is_err());
        assert_eq!(
            merge_mean(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn apply_identity_and_merge() {
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 1.0]).collect();
        let hidden = HiddenState::new(Matrix::from_rows(&rows, 2).unwrap()).unwrap();
        use Modality::*;
        let mask = ModalityMask::new(vec![Text, Vision, Vision, Vision, Vision, Text]);
        let (h, m) = apply_plan(&hidden, &mask, &PrunePlan::identity(4), MergeMode::Mean).unwrap();
        assert_eq!(h, hidden);
        assert_eq!(m, mask);

        let plan = PrunePlan {
            vision_before: 4,
            target: 3,
            merged: vec![MergedWindow {
                window: 0,
                position: 0,
                start: 0,
                end: 2,
            }],
            drop_windows: vec![],
            residual_drop_positions: vec![],
            kept_positions: vec![0, 2, 3],
            warnings: vec![],
        };
        let (h, m) = apply_plan(&hidden, &mask, &plan, MergeMode::Mean).unwrap();
        assert_eq!(h.num_tokens(), 5);
        assert_eq!(h.token(1), &[1.5, 1.0]);
        assert_eq!(m.labels(), &[Text, Vision, Vision, Vision, Text]);

        let bad = PrunePlan {
            vision_before: 3,
            ..plan
        };
        assert!(apply_plan(&hidden, &mask, &bad, MergeMode::Mean).is_err());
    }
}
