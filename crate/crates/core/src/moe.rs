//! MoE layer mechanics: router logits, routing probabilities, top-K
//! selection, gate re-normalization and the expert-mixture forward pass.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Tolerance on row sums of a [`RoutingDistribution`].
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Modality {
    Vision,
    Text,
}

/// Per-token modality labels for a sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ModalityMask(Vec<Modality>);

impl ModalityMask {
    pub fn new(labels: Vec<Modality>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Modality {
        self.0[i]
    }

    pub fn labels(&self) -> &[Modality] {
        &self.0
    }

    /// Positions (in sequence order) carrying the given modality.
    pub fn positions(&self, m: Modality) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == m).then_some(i))
            .collect()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.0.iter().filter(|&&l| l == m).count()
    }
}

/// Token hidden states, `N × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(Matrix);

impl HiddenState {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() == 0 {
            return Err(Error::Invalid("hidden dimension must be at least 1".into()));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite {
                what: "hidden state",
            });
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn num_tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Expert centroid matrix `W_E`, `E × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights(Matrix);

impl RouterWeights {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::Invalid(
                "router needs at least one expert and one hidden unit".into(),
            ));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite {
                what: "router weights",
            });
        }
        Ok(Self(m))
    }

    pub fn num_experts(&self) -> usize {
        self.0.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Row-stochastic routing probabilities, `N × E`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDistribution(Matrix);

impl RoutingDistribution {
    /// Validates that every entry lies in `[0, 1]` and every row sums to one
    /// within [`ROW_SUM_TOL`].
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite {
                    what: "routing probability",
                });
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Invalid(alloc::format!(
                    "routing row {i} has an entry outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Invalid(alloc::format!(
                    "routing row {i} sums to {s}, not 1"
                )));
            }
        }
        Ok(Self(m))
    }

    /// Empty distribution over `num_experts` experts.
    pub fn empty(num_experts: usize) -> Self {
        Self(Matrix::zeros(0, num_experts))
    }

    pub fn num_tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }
}

/// Selected experts for one token and their re-normalized gate weights.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GateRow {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GateRow {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Gate vector padded with zeros to length `num_experts`.
    pub fn dense(&self, num_experts: usize) -> Vec<f64> {
        let mut g = alloc::vec![0.0; num_experts];
        for (&j, &w) in self.selected.iter().zip(&self.weights) {
            g[j] = w;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MoeConfig {
    /// Routed experts `E`.
    pub num_experts: usize,
    /// Baseline routed experts per token `K`.
    pub top_k: usize,
    /// Always-on shared experts `N_s`.
    pub num_shared: usize,
    pub hidden_dim: usize,
    /// Expert intermediate width `S_m`.
    pub expert_dim: usize,
    pub num_layers: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.hidden_dim == 0 || self.expert_dim == 0 {
            return Err(Error::Invalid("MoE dimensions must be at least 1".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Invalid("num_layers must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Invalid(alloc::format!(
                "top_k {} must be in 1..={}",
                self.top_k,
                self.num_experts
            )));
        }
        Ok(())
    }
}

/// `Z = W_E t`.
pub fn route_logits(token: &[f64], router: &RouterWeights) -> Result<Vec<f64>> {
    router.0.mul_vec(token)
}

/// Numerically stable softmax. Shift-invariant by construction.
pub fn routing_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { what: "logits" });
    }
    if logits.is_empty() {
        return Err(Error::Invalid("softmax over zero experts".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| libm::exp(z - max)).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Indices of the `k` largest probabilities, descending; ties go to the
/// smaller index.
pub fn top_k_select(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::OutOfRange {
            what: "top_k",
            value: k as f64,
        });
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps index order among equal probabilities
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Restrict `probs` to `selected` and rescale to unit mass.
pub fn gate_weights(probs: &[f64], selected: &[usize]) -> Result<GateRow> {
    if selected.is_empty() {
        return Err(Error::Invalid("empty expert selection".into()));
    }
    for (n, &j) in selected.iter().enumerate() {
        if j >= probs.len() {
            return Err(Error::OutOfRange {
                what: "expert index",
                value: j as f64,
            });
        }
        if selected[..n].contains(&j) {
            return Err(Error::Invalid(alloc::format!("expert {j} selected twice")));
        }
    }
    let total: f64 = selected.iter().map(|&j| probs[j]).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(GateRow {
        selected: selected.to_vec(),
        weights: selected.iter().map(|&j| probs[j] / total).collect(),
    })
}

/// Routing probabilities for every token of a sequence.
pub fn layer_routing(hidden: &HiddenState, router: &RouterWeights) -> Result<RoutingDistribution> {
    if hidden.hidden_dim() != router.hidden_dim() {
        return Err(Error::DimensionMismatch {
            what: "hidden vs router",
            expected: router.hidden_dim(),
            found: hidden.hidden_dim(),
        });
    }
    let e = router.num_experts();
    let mut data = Vec::with_capacity(hidden.num_tokens() * e);
    for row in hidden.matrix().iter_rows() {
        data.extend(routing_probs(&route_logits(row, router)?)?);
    }
    RoutingDistribution::new(Matrix::from_vec(hidden.num_tokens(), e, data)?)
}

/// One feed-forward expert.
#[derive(Debug, Clone, PartialEq)]
pub enum Expert {
    /// `t ↦ t`; handy for structural tests.
    Identity,
    /// `down · silu(up · t)` with `up: S_m × H`, `down: H × S_m`.
    FeedForward { up: Matrix, down: Matrix },
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

impl Expert {
    pub fn forward(&self, t: &[f64]) -> Result<Vec<f64>> {
        match self {
            Expert::Identity => Ok(t.to_vec()),
            Expert::FeedForward { up, down } => {
                let mut h = up.mul_vec(t)?;
                for v in &mut h {
                    *v = silu(*v);
                }
                down.mul_vec(&h)
            }
        }
    }
}

/// Shared and routed experts of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub shared: Vec<Expert>,
    pub routed: Vec<Expert>,
}

impl ExpertBank {
    /// Random feed-forward experts, uniform weights in `±1/sqrt(fan_in)`.
    /// Identical seeds give identical banks.
    pub fn seeded(config: &MoeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |rng: &mut ChaCha8Rng| -> Result<Expert> {
            let (h, s) = (config.hidden_dim, config.expert_dim);
            let a_up = 1.0 / libm::sqrt(h as f64);
            let a_down = 1.0 / libm::sqrt(s as f64);
            let up = (0..h * s).map(|_| rng.random_range(-a_up..a_up)).collect();
            let down = (0..h * s)
                .map(|_| rng.random_range(-a_down..a_down))
                .collect();
            Ok(Expert::FeedForward {
                up: Matrix::from_vec(s, h, up)?,
                down: Matrix::from_vec(h, s, down)?,
            })
        };
        let shared = (0..config.num_shared)
            .map(|_| make(&mut rng))
            .collect::<Result<_>>()?;
        let routed = (0..config.num_experts)
            .map(|_| make(&mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { shared, routed })
    }

    pub fn identity(config: &MoeConfig) -> Self {
        Self {
            shared: alloc::vec![Expert::Identity; config.num_shared],
            routed: alloc::vec![Expert::Identity; config.num_experts],
        }
    }

    /// Forward with only the first `shared_active` shared experts switched on.
    pub fn forward_with(
        &self,
        token: &[f64],
        gates: &GateRow,
        shared_active: usize,
    ) -> Result<MoeOutput> {
        if shared_active > self.shared.len() {
            return Err(Error::OutOfRange {
                what: "active shared experts",
                value: shared_active as f64,
            });
        }
        if gates.selected.len() != gates.weights.len() {
            return Err(Error::Invalid("gate row has mismatched lengths".into()));
        }
        let mut out = alloc::vec![0.0; token.len()];
        for expert in &self.shared[..shared_active] {
            for (o, v) in out.iter_mut().zip(expert.forward(token)?) {
                *o += v;
            }
        }
        for (&j, &w) in gates.selected.iter().zip(&gates.weights) {
            let expert = self.routed.get(j).ok_or(Error::OutOfRange {
                what: "expert index",
                value: j as f64,
            })?;
            for (o, v) in out.iter_mut().zip(expert.forward(token)?) {
                *o += w * v;
            }
        }
        Ok(MoeOutput {
            output: out,
            shared_evaluations: shared_active,
            routed_evaluations: gates.selected.len(),
        })
    }
}

/// Result of a forward pass plus how many experts were actually evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub output: Vec<f64>,
    pub shared_evaluations: usize,
    pub routed_evaluations: usize,
}

impl MoeOutput {
    pub fn evaluations(&self) -> usize {
        self.shared_evaluations + self.routed_evaluations
    }
}

/// `o = Σ shared(t) + Σ_j g_j routed_j(t)`; unselected experts are skipped.
pub fn moe_forward(
    token: &[f64],
    gates: &GateRow,
    bank: &ExpertBank,
    config: &MoeConfig,
) -> Result<MoeOutput> {
    if token.len() != config.hidden_dim {
        return Err(Error::DimensionMismatch {
            what: "token",
            expected: config.hidden_dim,
            found: token.len(),
        });
    }
    if bank.routed.len() != config.num_experts || bank.shared.len() != config.num_shared {
        return Err(Error::Invalid("expert bank does not match config".into()));
    }
    bank.forward_with(token, gates, config.num_shared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg(e: usize, k: usize, ns: usize, h: usize) -> MoeConfig {
        MoeConfig {
            num_experts: e,
            top_k: k,
            num_shared: ns,
            hidden_dim: h,
            expert_dim: 2 * h,
            num_layers: 1,
        }
    }

    #[test]
    fn identity_router_passes_token_through() {
        let r = RouterWeights::new(Matrix::identity(3)).unwrap();
        assert_eq!(
            route_logits(&[0.5, -1.0, 2.0], &r).unwrap(),
            vec![0.5, -1.0, 2.0]
        );
        assert_eq!(route_logits(&[0.0; 3], &r).unwrap(), vec![0.0; 3]);
        assert!(route_logits(&[0.0; 2], &r).is_err());
    }

    #[test]
    fn hand_matrix_router() {
        let r =
            RouterWeights::new(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]], 2).unwrap()).unwrap();
        assert_eq!(route_logits(&[1.0, 1.0], &r).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(routing_probs(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = routing_probs(&[1.0, 2.0]).unwrap();
        // e/(e+e²) evaluated directly
        let e1 = core::f64::consts::E;
        let oracle = e1 / (e1 + e1 * e1);
        assert!((p[0] - oracle).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5 && (p[1] - 0.73106).abs() < 1e-5);
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        let (a, b) = (routing_probs(&z).unwrap(), routing_probs(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(routing_probs(&[f64::NAN, 0.0]).is_err());
        assert!(routing_probs(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn top_k_ordering_and_ties() {
        assert_eq!(top_k_select(&[0.1, 0.5, 0.4], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_select(&[0.25; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(
            top_k_select(&[0.2, 0.3, 0.3, 0.2], 4).unwrap(),
            vec![1, 2, 0, 3]
        );
        assert!(top_k_select(&[0.5, 0.5], 3).is_err());
        assert!(top_k_select(&[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn gate_renormalization() {
        let g = gate_weights(&[0.3, 0.2, 0.5], &[0, 1]).unwrap();
        assert!((g.weights[0] - 0.6).abs() < 1e-15 && (g.weights[1] - 0.4).abs() < 1e-15);
        assert_eq!(gate_weights(&[0.3, 0.7], &[1]).unwrap().weights, vec![1.0]);
        let g = gate_weights(&[0.125; 8], &[3, 5, 7]).unwrap();
        for w in g.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(gate_weights(&[0.5, 0.5], &[]).is_err());
        assert!(gate_weights(&[0.5, 0.5], &[0, 0]).is_err());
        assert!(gate_weights(&[0.5, 0.5], &[2]).is_err());
        assert_eq!(gate_weights(&[0.0, 1.0], &[0]), Err(Error::ZeroMass));
    }

    #[test]
    fn identity_experts_form_convex_combination() {
        let c = cfg(4, 2, 0, 3);
        let bank = ExpertBank::identity(&c);
        let g = gate_weights(&[0.1, 0.2, 0.3, 0.4], &[3, 2]).unwrap();
        let t = [1.0, -2.0, 0.5];
        let out = moe_forward(&t, &g, &bank, &c).unwrap();
        for (o, v) in out.output.iter().zip(&t) {
            assert!((o - v).abs() < 1e-15);
        }
        assert_eq!(out.evaluations(), 2);
    }

    #[test]
    fn shared_plus_single_routed() {
        let c = cfg(3, 1, 1, 2);
        let bank = ExpertBank::identity(&c);
        let g = GateRow {
            selected: vec![1],
            weights: vec![1.0],
        };
        let out = moe_forward(&[2.0, 3.0], &g, &bank, &c).unwrap();
        assert_eq!(out.output, vec![4.0, 6.0]);
        assert_eq!(out.evaluations(), 2);
    }

    #[test]
    fn layer_routing_shapes() {
        let r = RouterWeights::new(Matrix::identity(3)).unwrap();
        let empty = HiddenState::new(Matrix::zeros(0, 3)).unwrap();
        assert_eq!(layer_routing(&empty, &r).unwrap().num_tokens(), 0);
        let one = HiddenState::new(Matrix::from_rows(&[[0.1, 0.2, 0.3]], 3).unwrap()).unwrap();
        let d = layer_routing(&one, &r).unwrap();
        assert_eq!(
            d.row(0),
            routing_probs(&[0.1, 0.2, 0.3]).unwrap().as_slice()
        );
    }

    #[test]
    fn distribution_validation() {
        assert!(RoutingDistribution::new(Matrix::from_rows(&[[0.5, 0.6]], 2).unwrap()).is_err());
        assert!(RoutingDistribution::new(Matrix::from_rows(&[[1.5, -0.5]], 2).unwrap()).is_err());
        assert!(RoutingDistribution::new(Matrix::from_rows(&[[0.5, 0.5]], 2).unwrap()).is_ok());
    }
}
