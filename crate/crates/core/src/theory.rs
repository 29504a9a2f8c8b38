//! Analytics behind the two techniques: magnitude stability of expert
//! outputs, the angular deviation caused by dropping low-weight experts,
//! routing-similarity profiles, and merge-rate feasibility.

use alloc::vec::Vec;

use crate::linalg::{cosine, dot, euclidean, Matrix};
use crate::moe::{Modality, ModalityMask, RoutingDistribution};
use crate::pruning::{window_partition, window_similarity_exact};
use crate::{Error, Result};

/// Norm statistics of expert outputs for one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stability {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub cv: f64,
    /// `1 / (1 + CV)`, in `(0, 1]`.
    pub score: f64,
}

/// Coefficient of variation and stability score of a set of norms.
pub fn stability_score(norms: &[f64]) -> Result<Stability> {
    if norms.is_empty() {
        return Err(Error::Invalid("stability of an empty norm set".into()));
    }
    if norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
        return Err(Error::Invalid(
            "norms must be finite and non-negative".into(),
        ));
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::OutOfRange {
            what: "mean norm",
            value: mean,
        });
    }
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    let cv = std / mean;
    Ok(Stability {
        count: norms.len(),
        mean,
        std,
        cv,
        score: 1.0 / (1.0 + cv),
    })
}

/// Per-modality stability for one layer, and `ΔV = V_vision − V_text`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerStability {
    pub layer: usize,
    pub vision: Option<Stability>,
    pub text: Option<Stability>,
    pub delta: Option<f64>,
}

/// `norms[i]` holds the output norms of every expert token `i` used.
pub fn layer_stability<R: AsRef<[f64]>>(
    layer: usize,
    norms: &[R],
    mask: &ModalityMask,
) -> Result<LayerStability> {
    if norms.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            what: "expert norms",
            expected: mask.len(),
            found: norms.len(),
        });
    }
    let gather = |m: Modality| -> Result<Option<Stability>> {
        let all: Vec<f64> = norms
            .iter()
            .zip(mask.labels())
            .filter(|(_, &l)| l == m)
            .flat_map(|(r, _)| r.as_ref().iter().copied())
            .collect();
        if all.is_empty() {
            Ok(None)
        } else {
            stability_score(&all).map(Some)
        }
    };
    let vision = gather(Modality::Vision)?;
    let text = gather(Modality::Text)?;
    let delta = match (&vision, &text) {
        (Some(v), Some(t)) => Some(v.score - t.score),
        _ => None,
    };
    Ok(LayerStability {
        layer,
        vision,
        text,
        delta,
    })
}

/// Worst-case cosine between full and reduced outputs, `sqrt(m / K)`.
pub fn angular_lower_bound(kept: usize, total: usize) -> Result<f64> {
    if kept == 0 || kept > total {
        return Err(Error::Invalid(alloc::format!(
            "need 1 <= m <= K, got m={kept}, K={total}"
        )));
    }
    Ok(libm::sqrt(kept as f64 / total as f64))
}

/// Sorted fusion weights, expert outputs and a reduced count.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularCase {
    /// Positive, non-increasing, summing to 1.
    pub weights: Vec<f64>,
    /// `p_i`, one row per weight.
    pub outputs: Matrix,
    pub kept: usize,
}

impl AngularCase {
    pub fn new(weights: Vec<f64>, outputs: Matrix, kept: usize) -> Result<Self> {
        if weights.len() != outputs.rows() {
            return Err(Error::DimensionMismatch {
                what: "expert outputs",
                expected: weights.len(),
                found: outputs.rows(),
            });
        }
        if kept == 0 || kept > weights.len() {
            return Err(Error::Invalid("kept count must be in 1..=K".into()));
        }
        if weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
            return Err(Error::Invalid("weights must be positive".into()));
        }
        if weights.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Invalid("weights must be non-increasing".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(alloc::format!("weights sum to {s}")));
        }
        Ok(Self {
            weights,
            outputs,
            kept,
        })
    }

    fn fuse(&self, count: usize) -> Vec<f64> {
        let mass: f64 = self.weights[..count].iter().sum();
        let mut y = alloc::vec![0.0; self.outputs.cols()];
        for (w, p) in self.weights[..count].iter().zip(self.outputs.iter_rows()) {
            for (yi, pi) in y.iter_mut().zip(p) {
                *yi += w / mass * pi;
            }
        }
        y
    }

    /// `y = Σ a_i p_i` over all K experts.
    pub fn full_output(&self) -> Vec<f64> {
        self.fuse(self.weights.len())
    }

    /// `y' = Σ_{i≤m} (a_i / Σ_{j≤m} a_j) p_i`.
    pub fn reduced_output(&self) -> Vec<f64> {
        self.fuse(self.kept)
    }
}

/// Cosine between the full and reduced outputs, computed from the vectors.
pub fn reduced_output_cosine(case: &AngularCase) -> Result<f64> {
    cosine(&case.full_output(), &case.reduced_output())
}

/// Closed form valid for orthonormal outputs:
/// `sqrt(Σ_{i≤m} a_i²) / sqrt(Σ_{i≤K} a_i²)`.
pub fn orthonormal_cosine(weights: &[f64], kept: usize) -> f64 {
    libm::sqrt(dot(&weights[..kept], &weights[..kept]) / dot(weights, weights))
}

/// Mean in-window routing similarity per modality, each modality's
/// subsequence windowed separately. `None` for an absent modality.
pub fn adjacent_routing_similarity(
    dist: &RoutingDistribution,
    mask: &ModalityMask,
    window: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    if mask.len() != dist.num_tokens() {
        return Err(Error::DimensionMismatch {
            what: "modality mask",
            expected: dist.num_tokens(),
            found: mask.len(),
        });
    }
    let profile = |m: Modality| -> Result<Option<f64>> {
        let pos = mask.positions(m);
        let view = window_partition(pos.len(), window)?;
        if view.count() == 0 {
            return Ok(None);
        }
        let mut acc = 0.0;
        for w in view.iter() {
            let rows: Vec<&[f64]> = w.map(|i| dist.row(pos[i])).collect();
            acc += window_similarity_exact(&rows)?;
        }
        Ok(Some(acc / view.count() as f64))
    };
    Ok((profile(Modality::Vision)?, profile(Modality::Text)?))
}

/// Mean over tokens of the sum of each token's `k` largest probabilities,
/// per modality.
pub fn topk_prob_sum(
    dist: &RoutingDistribution,
    mask: &ModalityMask,
    k: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    if mask.len() != dist.num_tokens() {
        return Err(Error::DimensionMismatch {
            what: "modality mask",
            expected: dist.num_tokens(),
            found: mask.len(),
        });
    }
    if k == 0 || k > dist.num_experts() {
        return Err(Error::OutOfRange {
            what: "k",
            value: k as f64,
        });
    }
    let per_token = |i: usize| {
        let mut row = dist.row(i).to_vec();
        row.sort_by(|a, b| b.total_cmp(a));
        row[..k].iter().sum::<f64>()
    };
    let mean = |m: Modality| {
        let pos = mask.positions(m);
        (!pos.is_empty()).then(|| pos.iter().map(|&i| per_token(i)).sum::<f64>() / pos.len() as f64)
    };
    Ok((mean(Modality::Vision), mean(Modality::Text)))
}

/// Pairwise cosine and `1 / (1 + distance)` similarity between expert
/// outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSimilarity {
    pub cosine: Matrix,
    pub euclidean: Matrix,
}

pub fn expert_output_similarity(outputs: &Matrix) -> Result<ExpertSimilarity> {
    let n = outputs.rows();
    let mut cos = Matrix::zeros(n, n);
    let mut euc = Matrix::zeros(n, n);
    for i in 0..n {
        cos.row_mut(i)[i] = 1.0;
        euc.row_mut(i)[i] = 1.0;
        for j in 0..i {
            let c = cosine(outputs.row(i), outputs.row(j))?;
            let e = 1.0 / (1.0 + euclidean(outputs.row(i), outputs.row(j)));
            cos.row_mut(i)[j] = c;
            cos.row_mut(j)[i] = c;
            euc.row_mut(i)[j] = e;
            euc.row_mut(j)[i] = e;
        }
    }
    Ok(ExpertSimilarity {
        cosine: cos,
        euclidean: euc,
    })
}

/// Largest feasible merge rate, `γ̂ = (1/β − 1) / (W − 1)`: the rate at which
/// merging alone removes every token a stage must shed.
pub fn gamma_upper_bound(beta: f64, window: usize) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::OutOfRange {
            what: "beta",
            value: beta,
        });
    }
    if window < 2 {
        return Err(Error::OutOfRange {
            what: "window size",
            value: window as f64,
        });
    }
    Ok((1.0 / beta - 1.0) / (window - 1) as f64)
}

/// Per-stage retention giving overall retention `r` after `stages` stages.
pub fn stage_beta(overall: f64, stages: usize) -> Result<f64> {
    if !(overall > 0.0 && overall <= 1.0) {
        return Err(Error::OutOfRange {
            what: "overall retention",
            value: overall,
        });
    }
    if stages == 0 {
        return Err(Error::Invalid("need at least one pruning stage".into()));
    }
    Ok(libm::pow(overall, 1.0 / stages as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn stability_points() {
        let s = stability_score(&[2.0; 5]).unwrap();
        assert_eq!((s.cv, s.score), (0.0, 1.0));
        let s = stability_score(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.cv - 0.4082).abs() < 1e-4);
        assert!((s.score - 0.7101).abs() < 1e-4);
        // CV = 1 ⇒ V = 1/2: norms {0, 2} have mean 1 and population std 1
        assert_eq!(stability_score(&[0.0, 2.0]).unwrap().score, 0.5);
        assert!(stability_score(&[0.0, 0.0]).is_err());
        assert!(stability_score(&[]).is_err());
    }

    #[test]
    fn bound_points() {
        assert_eq!(angular_lower_bound(8, 8).unwrap(), 1.0);
        assert!(
            (angular_lower_bound(4, 8).unwrap() - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12
        );
        assert!((angular_lower_bound(1, 128).unwrap() - 0.08839).abs() < 1e-5);
        assert!(angular_lower_bound(0, 8).is_err());
    }

    #[test]
    fn uniform_weights_hit_the_bound() {
        let k = 8;
        let case = AngularCase::new(vec![1.0 / k as f64; k], Matrix::identity(k), 3).unwrap();
        let c = reduced_output_cosine(&case).unwrap();
        assert!((c - (3.0f64 / 8.0).sqrt()).abs() < 1e-12);
        let full = AngularCase { kept: k, ..case };
        assert!((reduced_output_cosine(&full).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_and_beta_points() {
        assert_eq!(gamma_upper_bound(1.0, 5).unwrap(), 0.0);
        assert!((gamma_upper_bound(0.91, 5).unwrap() - 0.0247).abs() < 1e-4);
        assert!((gamma_upper_bound(0.63, 5).unwrap() - 0.1468).abs() < 1e-4);
        assert!(gamma_upper_bound(0.0, 5).is_err());
        assert!(gamma_upper_bound(0.5, 1).is_err());
        assert_eq!(stage_beta(1.0, 3).unwrap(), 1.0);
        assert!((stage_beta(0.75, 3).unwrap() - 0.9086).abs() < 1e-4);
        assert!((stage_beta(0.25, 3).unwrap() - 0.62996).abs() < 1e-5);
    }

    #[test]
    fn expert_similarity_orthonormal() {
        let s = expert_output_similarity(&Matrix::identity(3)).unwrap();
        let off = 1.0 / (1.0 + 2f64.sqrt());
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(s.cosine.row(i)[j], 1.0);
                    assert_eq!(s.euclidean.row(i)[j], 1.0);
                } else {
                    assert_eq!(s.cosine.row(i)[j], 0.0);
                    assert!((s.euclidean.row(i)[j] - off).abs() < 1e-15);
                    assert!((off - 0.4142).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn topk_sums() {
        use Modality::*;
        let d = RoutingDistribution::new(
            Matrix::from_rows(&[[0.125; 8], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]], 8).unwrap(),
        )
        .unwrap();
        let mask = ModalityMask::new(vec![Vision, Text]);
        let (v, t) = topk_prob_sum(&d, &mask, 4).unwrap();
        assert_eq!(v, Some(0.5));
        assert_eq!(t, Some(1.0));
    }
}
