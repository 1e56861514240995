//! Diagnostic measurements: functional-subspace projections, expert weight
//! distances, singular-vector alignment, n-gram diversity, and
//! Jensen-Shannon divergence.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibStats;
use crate::error::{Error, Result};
use crate::linalg::{pca, svd};
use crate::merge::{apply_permutation, weight_matching_permutation};
use crate::moe::{ExpertWeights, MoeLayer};
use crate::tensor::dot;

/// Sentinel reported when the merged spread is zero.
pub const COLLAPSE_RATIO_CAP: f64 = 1e6;

/// Projection of one variant's experts onto the shared 2-D basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSubspace {
    /// One (pc1, pc2) point per expert.
    pub points: Vec<[f64; 2]>,
    /// Mean squared deviation from the centroid, summed over both axes.
    pub total_variance: f64,
    /// max - min along each axis.
    pub range: [f64; 2],
}

fn project_variant(basis: &crate::linalg::PcaResult, stats: &CalibStats) -> Result<VariantSubspace> {
    let means = stats.mean_act_active();
    let mut points = Vec::with_capacity(stats.k);
    for i in 0..stats.k {
        let p = basis.project(means.row(i))?;
        points.push([p[0], p[1]]);
    }
    let n = points.len() as f64;
    let centroid = [
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let total_variance = points
        .iter()
        .map(|p| (p[0] - centroid[0]).powi(2) + (p[1] - centroid[1]).powi(2))
        .sum::<f64>()
        / n;
    let range = [0, 1].map(|axis| {
        let lo = points.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    });
    Ok(VariantSubspace {
        points,
        total_variance,
        range,
    })
}

/// Functional-subspace comparison of the original layer against a pruned and
/// a merged variant, all projected onto the original's top-2 PCA basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceReport {
    pub original: VariantSubspace,
    pub pruned: VariantSubspace,
    pub merged: VariantSubspace,
    /// original total variance / merged total variance, capped at
    /// [`COLLAPSE_RATIO_CAP`].
    pub collapse_ratio: f64,
}

/// Projects each variant's per-expert mean activations (over active tokens)
/// onto the PCA basis fitted to the original variant alone. Reusing one
/// basis is what makes contraction visible; per-variant bases would hide it.
pub fn functional_subspace(
    stats_original: &CalibStats,
    stats_pruned: &CalibStats,
    stats_merged: &CalibStats,
) -> Result<SubspaceReport> {
    if stats_original.k < 3 {
        return Err(Error::Domain(format!(
            "subspace projection needs at least 3 experts, got {}",
            stats_original.k
        )));
    }
    let basis = pca(&stats_original.mean_act_active(), 2)?;
    let original = project_variant(&basis, stats_original)?;
    let pruned = project_variant(&basis, stats_pruned)?;
    let merged = project_variant(&basis, stats_merged)?;
    let collapse_ratio = if merged.total_variance > 0.0 {
        (original.total_variance / merged.total_variance).min(COLLAPSE_RATIO_CAP)
    } else {
        COLLAPSE_RATIO_CAP
    };
    Ok(SubspaceReport {
        original,
        pruned,
        merged,
        collapse_ratio,
    })
}

/// Mean over the three weight matrices of `||W_i - W_j||_F / ||W_i||_F`.
/// The first operand's norm is the reference, so the measure is asymmetric.
pub fn expert_distance(layer: &MoeLayer, i: usize, j: usize) -> Result<f64> {
    let k = layer.num_experts();
    if i >= k || j >= k {
        return Err(Error::Domain(format!("expert pair ({i}, {j}) out of range for K={k}")));
    }
    let a = &layer.experts[i];
    let b = &layer.experts[j];
    let mut acc = 0.0;
    for (wa, wb) in [
        (&a.w_up, &b.w_up),
        (&a.w_gate, &b.w_gate),
        (&a.w_down, &b.w_down),
    ] {
        let ref_norm = wa.frobenius_norm();
        if ref_norm == 0.0 {
            return Err(Error::Domain("zero-norm reference weight matrix".into()));
        }
        acc += wa.add_scaled(wb, -1.0)?.frobenius_norm() / ref_norm;
    }
    Ok(acc / 3.0)
}

/// Singular-vector alignment between two experts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvAlignment {
    /// Mean over the three weight matrices and the top-r ranks of
    /// `|u_k · u'_k| * |v_k · v'_k|`, in [0, 1].
    pub value: f64,
    /// Set when either decomposition has (near-)repeated singular values in
    /// the compared range; index pairing is kept regardless.
    pub degenerate: bool,
}

/// Compares the top-`r` singular vector pairs of the two experts' weight
/// matrices. With `permute_first`, `b` is aligned onto `a` by weight
/// matching before decomposing.
pub fn sv_alignment(
    a: &ExpertWeights,
    b: &ExpertWeights,
    r: usize,
    permute_first: bool,
) -> Result<SvAlignment> {
    let limit = a.d().min(a.d_ff());
    if r == 0 || r > limit {
        return Err(Error::Domain(format!(
            "rank {r} out of range 1..={limit} for singular-vector alignment"
        )));
    }
    let aligned_b;
    let b = if permute_first {
        let perm = weight_matching_permutation(a, b)?;
        aligned_b = apply_permutation(b, &perm)?;
        &aligned_b
    } else {
        b
    };
    let mut acc = 0.0;
    let mut degenerate = false;
    for (wa, wb) in [
        (&a.w_up, &b.w_up),
        (&a.w_gate, &b.w_gate),
        (&a.w_down, &b.w_down),
    ] {
        let da = svd(wa)?;
        let db = svd(wb)?;
        for s in [&da.s, &db.s] {
            for w in s[..r].windows(2) {
                if (w[0] - w[1]).abs() <= 1e-9 * w[0].max(1e-300) {
                    degenerate = true;
                }
            }
        }
        for k in 0..r {
            let ua = da.u.column(k);
            let ub = db.u.column(k);
            let va = da.vt.row(k);
            let vb = db.vt.row(k);
            acc += dot(&ua, &ub).abs() * dot(va, vb).abs();
        }
    }
    Ok(SvAlignment {
        value: acc / (3.0 * r as f64),
        degenerate,
    })
}

/// Weight-space diagnostics aggregated over the intra-cluster (anchor,
/// member) pairs of a clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean relative L2 distance over compared pairs.
    pub rel_l2: f64,
    /// Mean singular-vector alignment over compared pairs.
    pub sv_alignment: f64,
    /// Pairs with degenerate singular values in the compared range.
    pub degenerate_pairs: usize,
    pub pairs: usize,
}

/// Measures weight distance and singular-vector alignment between each
/// cluster anchor and its members.
pub fn alignment_report(
    layer: &MoeLayer,
    clusters: &[Vec<usize>],
    anchors: &[usize],
    rank: usize,
    permute_first: bool,
) -> Result<AlignmentReport> {
    let mut rel = 0.0;
    let mut align = 0.0;
    let mut degenerate = 0usize;
    let mut pairs = 0usize;
    for (members, &anchor) in clusters.iter().zip(anchors) {
        for &m in members {
            if m == anchor {
                continue;
            }
            rel += expert_distance(layer, anchor, m)?;
            let sv = sv_alignment(&layer.experts[anchor], &layer.experts[m], rank, permute_first)?;
            align += sv.value;
            degenerate += sv.degenerate as usize;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(AlignmentReport {
            rel_l2: 0.0,
            sv_alignment: 1.0,
            degenerate_pairs: 0,
            pairs: 0,
        });
    }
    Ok(AlignmentReport {
        rel_l2: rel / pairs as f64,
        sv_alignment: align / pairs as f64,
        degenerate_pairs: degenerate,
        pairs,
    })
}

/// Distinct n-grams divided by total n-gram positions.
pub fn ngram_diversity<T: Eq + Hash>(tokens: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("n-gram size must be positive".into()));
    }
    if tokens.len() < n {
        return Err(Error::Domain(format!(
            "sequence of length {} is shorter than n = {n}",
            tokens.len()
        )));
    }
    let positions = tokens.len() - n + 1;
    let distinct: HashSet<&[T]> = tokens.windows(n).collect();
    Ok(distinct.len() as f64 / positions as f64)
}

/// Jensen-Shannon divergence with base-2 logarithms, so the result lies in
/// [0, 1]. Inputs must already sum to 1 within 1e-9 and are renormalized
/// exactly before the computation; `0 log 0` counts as 0.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(format!(
            "distribution support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Domain("empty distributions".into()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::Domain(format!("{name} has negative or non-finite mass")));
        }
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("{name} sums to {total}, not 1")));
        }
    }
    let sum_p: f64 = p.iter().sum();
    let sum_q: f64 = q.iter().sum();
    let mut acc = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        let pi = pi / sum_p;
        let qi = qi / sum_q;
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).log2();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).log2();
        }
    }
    // Clamp tiny negative round-off.
    Ok(acc.max(0.0))
}
