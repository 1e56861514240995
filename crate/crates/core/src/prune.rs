//! Expert pruning: saliency scoring and expert removal with router
//! re-normalization.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibStats;
use crate::error::{Error, Result};
use crate::moe::{MoeLayer, RouterConfig};
use crate::tensor::Tensor;

/// Pruning saliency criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneCriterion {
    /// Usage frequency: `S_i = nu_i`.
    Frequency,
    /// Expert activation norm: `S_i = Σ_{active} ||f_i(x)||`.
    Ean,
    /// Router-weighted expert activation: the mean over active tokens of
    /// `g_i(x) * ||f_i(x)||` — the average magnitude the expert adds to the
    /// layer output when selected.
    Reap,
}

impl std::fmt::Display for PruneCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PruneCriterion::Frequency => write!(f, "frequency"),
            PruneCriterion::Ean => write!(f, "ean"),
            PruneCriterion::Reap => write!(f, "reap"),
        }
    }
}

impl std::str::FromStr for PruneCriterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<PruneCriterion> {
        match s {
            "frequency" => Ok(PruneCriterion::Frequency),
            "ean" => Ok(PruneCriterion::Ean),
            "reap" => Ok(PruneCriterion::Reap),
            other => Err(Error::Config(format!("unknown prune criterion `{other}`"))),
        }
    }
}

/// Per-expert saliency scores; lower scores are pruned first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub criterion: PruneCriterion,
    pub scores: Vec<f64>,
}

/// Which experts survive and which are removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Surviving expert indices, ascending.
    pub keep: Vec<usize>,
    /// Removed expert indices, ascending.
    pub removed: Vec<usize>,
    /// Requested removal fraction.
    pub ratio: f64,
}

/// Computes saliency scores from calibration statistics. Never-active
/// experts score 0 under REAP (they contribute nothing, so they go first).
pub fn compute_saliency(stats: &CalibStats, criterion: PruneCriterion) -> SaliencyScores {
    let scores = match criterion {
        PruneCriterion::Frequency => stats.nu.iter().map(|&n| n as f64).collect(),
        PruneCriterion::Ean => stats.sum_norm.clone(),
        PruneCriterion::Reap => stats
            .nu
            .iter()
            .zip(&stats.sum_gate_norm)
            .map(|(&n, &s)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect(),
    };
    SaliencyScores { criterion, scores }
}

/// Removes the `floor(K * ratio)` lowest-scoring experts. Ties remove the
/// higher index first, so lower indices survive.
pub fn select_prune_set(scores: &SaliencyScores, ratio: f64) -> Result<PrunePlan> {
    let k = scores.scores.len();
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::Config(format!("prune ratio {ratio} must be in (0, 1)")));
    }
    if (k as f64 * ratio).ceil() as usize >= k {
        return Err(Error::Config(format!(
            "ratio {ratio} would leave no experts out of {k}"
        )));
    }
    let remove_count = (k as f64 * ratio).floor() as usize;
    let mut order: Vec<usize> = (0..k).collect();
    // Ascending score; equal scores put the higher index first.
    order.sort_by(|&a, &b| {
        scores.scores[a]
            .partial_cmp(&scores.scores[b])
            .unwrap()
            .then(b.cmp(&a))
    });
    let mut removed: Vec<usize> = order[..remove_count].to_vec();
    removed.sort_unstable();
    let keep: Vec<usize> = (0..k).filter(|i| !removed.contains(i)).collect();
    Ok(PrunePlan {
        keep,
        removed,
        ratio,
    })
}

/// Builds the pruned layer: surviving experts and router rows only, with
/// `top_k' = min(top_k, |keep|)`. Gate re-normalization over survivors is
/// realized by the softmax over the reduced logit set.
pub fn apply_prune(layer: &MoeLayer, plan: &PrunePlan) -> Result<MoeLayer> {
    let k = layer.num_experts();
    let mut seen = vec![false; k];
    for &i in plan.keep.iter().chain(&plan.removed) {
        if i >= k {
            return Err(Error::Domain(format!("plan index {i} out of range for K={k}")));
        }
        if seen[i] {
            return Err(Error::Domain(format!("plan mentions expert {i} twice")));
        }
        seen[i] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Domain("plan does not cover every expert".into()));
    }
    if plan.keep.is_empty() {
        return Err(Error::Domain("plan keeps no experts".into()));
    }
    let d = layer.d();
    let mut weight = Tensor::zeros(vec![plan.keep.len(), d]);
    for (row, &i) in plan.keep.iter().enumerate() {
        for j in 0..d {
            weight.set(row, j, layer.router.weight.at(i, j));
        }
    }
    let pruned = MoeLayer {
        router: RouterConfig {
            weight,
            top_k: layer.router.top_k.min(plan.keep.len()),
            gate_mode: layer.router.gate_mode,
        },
        experts: plan.keep.iter().map(|&i| layer.experts[i].clone()).collect(),
        shared_experts: layer.shared_experts.clone(),
    };
    pruned.validate()?;
    Ok(pruned)
}

/// Calibration-set mean of `||g_j(x) f_j(x)||` — the average contribution the
/// expert makes per token, the small-gate approximation of the error induced
/// by pruning it. Uses the accumulated per-token gate-norm products.
pub fn prune_error_estimate(stats: &CalibStats, expert: usize) -> Result<f64> {
    if expert >= stats.k {
        return Err(Error::Domain(format!(
            "expert {expert} out of range for K={}",
            stats.k
        )));
    }
    if stats.token_count == 0 {
        return Err(Error::Domain("empty calibration statistics".into()));
    }
    Ok(stats.sum_gate_norm[expert] / stats.token_count as f64)
}
