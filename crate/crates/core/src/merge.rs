//! Expert merging: clustering (M-SMoE, HC-SMoE), weight-matching alignment,
//! frequency-weighted parameter averaging, and gate-tied merged layers.

use serde::{Deserialize, Serialize};

use crate::assignment::{linear_assignment, Assignment};
use crate::calibration::CalibStats;
use crate::error::{Error, Result};
use crate::moe::{ExpertWeights, GateMode, GateResult, Model, MoeLayer};
use crate::tensor::{cosine_distance, Tensor};

/// Clustering method identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Msmoe,
    Hcsmoe,
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeMethod::Msmoe => write!(f, "msmoe"),
            MergeMethod::Hcsmoe => write!(f, "hcsmoe"),
        }
    }
}

/// Distance used between representative vectors for HC-SMoE. Cosine is the
/// reference behaviour; euclidean is available as an alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MergeDistance {
    #[default]
    Cosine,
    Euclidean,
}

/// A partition of the experts into clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id per expert.
    pub assignment: Vec<usize>,
    /// Member index sets, each sorted ascending; clusters ordered by their
    /// smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub method: MergeMethod,
    pub max_cluster_size: Option<usize>,
}

impl Clustering {
    pub fn from_clusters(
        mut clusters: Vec<Vec<usize>>,
        k: usize,
        method: MergeMethod,
        max_cluster_size: Option<usize>,
    ) -> Clustering {
        for c in clusters.iter_mut() {
            c.sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        let mut assignment = vec![0usize; k];
        for (id, members) in clusters.iter().enumerate() {
            for &m in members {
                assignment[m] = id;
            }
        }
        Clustering {
            assignment,
            clusters,
            method,
            max_cluster_size,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }
}

/// Fraction of clusters containing a single expert.
pub fn singleton_fraction(clustering: &Clustering) -> f64 {
    if clustering.clusters.is_empty() {
        return 0.0;
    }
    let singles = clustering.clusters.iter().filter(|c| c.len() == 1).count();
    singles as f64 / clustering.clusters.len() as f64
}

fn target_cluster_count(k: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("merge ratio {ratio} must be in [0, 1)")));
    }
    let target = k - (k as f64 * ratio).floor() as usize;
    if target == 0 {
        return Err(Error::Config(format!(
            "ratio {ratio} would leave no clusters out of {k}"
        )));
    }
    Ok(target)
}

/// M-SMoE clustering: the `K - floor(K * ratio)` most-used experts are the
/// dominant cluster anchors; every other expert joins the dominant expert
/// whose gate-value vector over the calibration tokens is closest in cosine
/// distance. An expert with an all-zero gate vector joins the most-used
/// dominant expert.
pub fn cluster_msmoe(stats: &CalibStats, ratio: f64) -> Result<Clustering> {
    let k = stats.k;
    let m = target_cluster_count(k, ratio)?;
    if stats.gate_trace.iter().any(|t| t.len() != stats.token_count) {
        return Err(Error::Domain("gate trace incomplete".into()));
    }

    // Dominant experts: top-m by usage, ties to the lower index.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| stats.nu[b].cmp(&stats.nu[a]).then(a.cmp(&b)));
    let mut dominant: Vec<usize> = order[..m].to_vec();
    dominant.sort_unstable();

    let top_dominant = *dominant
        .iter()
        .max_by(|&&a, &&b| stats.nu[a].cmp(&stats.nu[b]).then(b.cmp(&a)))
        .unwrap();

    let mut clusters: Vec<Vec<usize>> = dominant.iter().map(|&d| vec![d]).collect();
    for j in 0..k {
        if dominant.binary_search(&j).is_ok() {
            continue;
        }
        let trace_j = &stats.gate_trace[j];
        let all_zero = trace_j.iter().all(|g| *g == 0.0);
        let host = if all_zero {
            top_dominant
        } else {
            let mut best = dominant[0];
            let mut best_dist = f64::INFINITY;
            for &i in &dominant {
                let dist = cosine_distance(&stats.gate_trace[i], trace_j);
                if dist < best_dist {
                    best_dist = dist;
                    best = i;
                }
            }
            best
        };
        let slot = dominant.binary_search(&host).unwrap();
        clusters[slot].push(j);
    }
    Ok(Clustering::from_clusters(clusters, k, MergeMethod::Msmoe, None))
}

/// HC-SMoE clustering: agglomerative average-linkage clustering of the
/// representative vectors under the chosen distance, stopping at
/// `K - floor(K * ratio)` clusters. Joins that would exceed
/// `max_cluster_size` are skipped; if no join is possible before the target
/// count is reached the cap is infeasible.
pub fn cluster_hcsmoe(
    stats: &CalibStats,
    ratio: f64,
    max_cluster_size: Option<usize>,
) -> Result<Clustering> {
    cluster_hcsmoe_with(stats, ratio, max_cluster_size, MergeDistance::Cosine)
}

pub fn cluster_hcsmoe_with(
    stats: &CalibStats,
    ratio: f64,
    max_cluster_size: Option<usize>,
    distance: MergeDistance,
) -> Result<Clustering> {
    let k = stats.k;
    let target = target_cluster_count(k, ratio)?;
    if let Some(cap) = max_cluster_size {
        if cap == 0 {
            return Err(Error::Config("max_cluster_size must be positive".into()));
        }
    }
    let reps = stats.representative_vectors()?;
    let base = pairwise_distances(&reps, distance);

    let mut members: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
    let mut dist = base.clone();
    let mut alive: Vec<bool> = vec![true; k];
    let mut count = k;

    while count > target {
        // Closest eligible pair; ties take the lexicographically smallest
        // (min member of a, min member of b) pair.
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..k {
            if !alive[a] {
                continue;
            }
            for b in (a + 1)..k {
                if !alive[b] {
                    continue;
                }
                if let Some(cap) = max_cluster_size {
                    if members[a].len() + members[b].len() > cap {
                        continue;
                    }
                }
                let d = dist[a][b];
                let key = (members[a][0], members[b][0]);
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => d < bd || (d == bd && key < (bi, bj)),
                };
                if better {
                    best = Some((d, key.0, key.1));
                }
            }
        }
        let Some((_, li, lj)) = best else {
            return Err(Error::Config(format!(
                "max_cluster_size {max_cluster_size:?} makes {target} clusters unreachable"
            )));
        };
        // Recover slots from the smallest-member labels.
        let a = (0..k).find(|&s| alive[s] && members[s][0] == li).unwrap();
        let b = (0..k).find(|&s| alive[s] && members[s][0] == lj).unwrap();
        let (a, b) = (a.min(b), a.max(b));

        // Average linkage: distance from the union to any other cluster is
        // the member-count-weighted mean, equal to the mean over all cross
        // pairs of the base distances.
        let (na, nb) = (members[a].len() as f64, members[b].len() as f64);
        for c in 0..k {
            if !alive[c] || c == a || c == b {
                continue;
            }
            let d = (na * dist[a][c] + nb * dist[b][c]) / (na + nb);
            dist[a][c] = d;
            dist[c][a] = d;
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        members[a].sort_unstable();
        alive[b] = false;
        count -= 1;
    }

    let clusters: Vec<Vec<usize>> = (0..k)
        .filter(|&s| alive[s])
        .map(|s| members[s].clone())
        .collect();
    Ok(Clustering::from_clusters(
        clusters,
        k,
        MergeMethod::Hcsmoe,
        max_cluster_size,
    ))
}

fn pairwise_distances(reps: &Tensor, distance: MergeDistance) -> Vec<Vec<f64>> {
    let k = reps.rows();
    let mut d = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in (a + 1)..k {
            let val = match distance {
                MergeDistance::Cosine => cosine_distance(reps.row(a), reps.row(b)),
                MergeDistance::Euclidean => {
                    let mut acc = 0.0;
                    for j in 0..reps.cols() {
                        let diff = reps.at(a, j) - reps.at(b, j);
                        acc += diff * diff;
                    }
                    acc.sqrt()
                }
            };
            d[a][b] = val;
            d[b][a] = val;
        }
    }
    d
}

/// Similarity-maximizing permutation of `other`'s hidden units onto
/// `anchor`'s: unit `p` of the anchor is matched with unit `perm[p]` of
/// `other`. The similarity couples the up and gate projection rows with the
/// down projection columns; a single assignment solve is exact because the
/// expert has one hidden layer.
pub fn weight_matching_permutation(
    anchor: &ExpertWeights,
    other: &ExpertWeights,
) -> Result<Assignment> {
    if anchor.w_up.shape() != other.w_up.shape()
        || anchor.w_down.shape() != other.w_down.shape()
    {
        return Err(Error::Dimension("experts disagree on (d, d_ff)".into()));
    }
    let d_ff = anchor.w_up.rows();
    let d = anchor.w_up.cols();
    let mut sim = Tensor::zeros(vec![d_ff, d_ff]);
    for p in 0..d_ff {
        for q in 0..d_ff {
            let mut acc = 0.0;
            for j in 0..d {
                acc += anchor.w_up.at(p, j) * other.w_up.at(q, j);
                acc += anchor.w_gate.at(p, j) * other.w_gate.at(q, j);
            }
            for i in 0..d {
                acc += anchor.w_down.at(i, p) * other.w_down.at(i, q);
            }
            sim.set(p, q, acc);
        }
    }
    linear_assignment(&sim, true)
}

/// Applies a hidden-unit permutation: row `p` of the permuted up/gate
/// projections (and column `p` of the down projection) comes from position
/// `perm[p]` of the source. Leaves the expert's function unchanged.
pub fn apply_permutation(e: &ExpertWeights, perm: &Assignment) -> Result<ExpertWeights> {
    let d_ff = e.d_ff();
    let d = e.d();
    if perm.perm.len() != d_ff || !perm.is_permutation() {
        return Err(Error::Dimension(format!(
            "permutation of length {} does not match d_ff {d_ff}",
            perm.perm.len()
        )));
    }
    let mut up = Tensor::zeros(vec![d_ff, d]);
    let mut gate = Tensor::zeros(vec![d_ff, d]);
    let mut down = Tensor::zeros(vec![d, d_ff]);
    for p in 0..d_ff {
        let src = perm.perm[p];
        for j in 0..d {
            up.set(p, j, e.w_up.at(src, j));
            gate.set(p, j, e.w_gate.at(src, j));
        }
        for i in 0..d {
            down.set(i, p, e.w_down.at(i, src));
        }
    }
    Ok(ExpertWeights {
        w_up: up,
        w_gate: gate,
        w_down: down,
    })
}

/// Aligns every member to the anchor and returns the usage-weighted average
/// of the aligned weights. If every member has zero usage the average is
/// uniform.
pub fn merge_cluster(
    members: &[ExpertWeights],
    anchor: usize,
    nu: &[u64],
) -> Result<ExpertWeights> {
    if members.is_empty() {
        return Err(Error::Domain("cannot merge an empty cluster".into()));
    }
    if anchor >= members.len() || nu.len() != members.len() {
        return Err(Error::Domain(
            "anchor or usage counts inconsistent with members".into(),
        ));
    }
    let total: u64 = nu.iter().sum();
    let weights: Vec<f64> = if total == 0 {
        vec![1.0 / members.len() as f64; members.len()]
    } else {
        nu.iter().map(|&n| n as f64 / total as f64).collect()
    };
    let mut aligned = Vec::with_capacity(members.len());
    for (idx, member) in members.iter().enumerate() {
        if idx == anchor {
            aligned.push(member.clone());
        } else {
            let perm = weight_matching_permutation(&members[anchor], member)?;
            aligned.push(apply_permutation(member, &perm)?);
        }
    }
    Ok(weighted_average(&aligned, &weights))
}

fn weighted_average(experts: &[ExpertWeights], weights: &[f64]) -> ExpertWeights {
    let d_ff = experts[0].d_ff();
    let d = experts[0].d();
    let mut up = Tensor::zeros(vec![d_ff, d]);
    let mut gate = Tensor::zeros(vec![d_ff, d]);
    let mut down = Tensor::zeros(vec![d, d_ff]);
    for (e, &w) in experts.iter().zip(weights) {
        up = up.add_scaled(&e.w_up, w).unwrap();
        gate = gate.add_scaled(&e.w_gate, w).unwrap();
        down = down.add_scaled(&e.w_down, w).unwrap();
    }
    ExpertWeights {
        w_up: up,
        w_gate: gate,
        w_down: down,
    }
}

/// A complete, replayable description of a merge: the clustering, the
/// hidden-unit alignment of every expert onto its cluster anchor, and the
/// usage-weighted averaging weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub clustering: Clustering,
    /// Anchor expert per cluster (largest usage, ties to the lowest index).
    pub anchors: Vec<usize>,
    /// Per-expert alignment onto its cluster anchor; anchors get the
    /// identity.
    pub permutations: Vec<Assignment>,
    /// Per-expert merge weight; weights within each cluster sum to 1.
    pub weights: Vec<f64>,
}

/// Builds the merge plan for a clustering: picks anchors, computes
/// weight-matching permutations, and usage-proportional weights.
pub fn build_merge_plan(
    layer: &MoeLayer,
    stats: &CalibStats,
    clustering: &Clustering,
) -> Result<MergePlan> {
    let k = layer.num_experts();
    if clustering.assignment.len() != k || stats.k != k {
        return Err(Error::Dimension(
            "clustering or stats inconsistent with the layer".into(),
        ));
    }
    let d_ff = layer.d_ff();
    let mut anchors = Vec::with_capacity(clustering.clusters.len());
    let mut permutations = vec![Assignment::identity(d_ff); k];
    let mut weights = vec![0.0; k];
    for members in &clustering.clusters {
        let anchor = *members
            .iter()
            .max_by(|&&a, &&b| stats.nu[a].cmp(&stats.nu[b]).then(b.cmp(&a)))
            .unwrap();
        anchors.push(anchor);
        let total: u64 = members.iter().map(|&i| stats.nu[i]).sum();
        for &i in members {
            weights[i] = if total == 0 {
                1.0 / members.len() as f64
            } else {
                stats.nu[i] as f64 / total as f64
            };
            if i != anchor {
                permutations[i] =
                    weight_matching_permutation(&layer.experts[anchor], &layer.experts[i])?;
            }
        }
    }
    Ok(MergePlan {
        clustering: clustering.clone(),
        anchors,
        permutations,
        weights,
    })
}

/// A merged layer: the original router is kept in full; gates of experts in
/// the same cluster are summed through `index_map` onto the merged expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedLayer {
    pub router: crate::moe::RouterConfig,
    pub experts: Vec<ExpertWeights>,
    pub shared_experts: Vec<ExpertWeights>,
    /// Original expert index -> merged expert index (surjective).
    pub index_map: Vec<usize>,
}

impl MergedLayer {
    pub fn num_merged_experts(&self) -> usize {
        self.experts.len()
    }
}

impl Model for MergedLayer {
    fn d(&self) -> usize {
        self.experts[0].d()
    }

    fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn gate_mode(&self) -> GateMode {
        self.router.gate_mode
    }

    fn route(&self, x: &[f64]) -> Result<GateResult> {
        let original = crate::moe::gate_compute(&self.router, x)?;
        let mut gates = vec![0.0; self.experts.len()];
        let mut active = Vec::new();
        for &i in &original.active {
            let m = self.index_map[i];
            active.push(m);
            gates[m] += original.gates[i];
        }
        active.sort_unstable();
        active.dedup();
        Ok(GateResult { gates, active })
    }

    fn expert_output(&self, idx: usize, x: &[f64]) -> Result<Vec<f64>> {
        crate::moe::expert_forward(&self.experts[idx], x)
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GateResult)> {
        let gates = self.route(x)?;
        let mut y = vec![0.0; self.d()];
        for &m in &gates.active {
            let out = self.expert_output(m, x)?;
            for (acc, v) in y.iter_mut().zip(&out) {
                *acc += gates.gates[m] * v;
            }
        }
        for shared in &self.shared_experts {
            let out = crate::moe::expert_forward(shared, x)?;
            for (acc, v) in y.iter_mut().zip(&out) {
                *acc += v;
            }
        }
        Ok((y, gates))
    }
}

/// Realizes a merge plan: aligns and averages each cluster into one expert,
/// keeps the original router rows, and routes summed gates through the
/// cluster map.
pub fn apply_merge_plan(layer: &MoeLayer, plan: &MergePlan) -> Result<MergedLayer> {
    let k = layer.num_experts();
    if plan.clustering.assignment.len() != k
        || plan.permutations.len() != k
        || plan.weights.len() != k
        || plan.anchors.len() != plan.clustering.clusters.len()
    {
        return Err(Error::Dimension("merge plan inconsistent with layer".into()));
    }
    let mut experts = Vec::with_capacity(plan.clustering.clusters.len());
    for (cluster_id, members) in plan.clustering.clusters.iter().enumerate() {
        let weight_sum: f64 = members.iter().map(|&i| plan.weights[i]).sum();
        if (weight_sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "cluster {cluster_id} weights sum to {weight_sum}, expected 1"
            )));
        }
        let mut aligned = Vec::with_capacity(members.len());
        let mut weights = Vec::with_capacity(members.len());
        for &i in members {
            if i == plan.anchors[cluster_id] {
                aligned.push(layer.experts[i].clone());
            } else {
                aligned.push(apply_permutation(&layer.experts[i], &plan.permutations[i])?);
            }
            weights.push(plan.weights[i]);
        }
        experts.push(weighted_average(&aligned, &weights));
    }
    Ok(MergedLayer {
        router: layer.router.clone(),
        experts,
        shared_experts: layer.shared_experts.clone(),
        index_map: plan.clustering.assignment.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate, TokenStream};
    use crate::moe::{expert_forward, layer_forward, synth_model, GateMode, SynthConfig};
    use crate::rng::CounterRng;

    fn random_expert(seed: u64, d: usize, d_ff: usize) -> ExpertWeights {
        let mut rng = CounterRng::new(seed, 900);
        let mut up = vec![0.0; d_ff * d];
        let mut gate = vec![0.0; d_ff * d];
        let mut down = vec![0.0; d * d_ff];
        rng.fill_gaussian(&mut up);
        rng.fill_gaussian(&mut gate);
        rng.fill_gaussian(&mut down);
        ExpertWeights {
            w_up: Tensor::new(vec![d_ff, d], up).unwrap(),
            w_gate: Tensor::new(vec![d_ff, d], gate).unwrap(),
            w_down: Tensor::new(vec![d, d_ff], down).unwrap(),
        }
    }

    fn shuffle_units(e: &ExpertWeights, perm: &[usize]) -> ExpertWeights {
        apply_permutation(
            e,
            &Assignment {
                perm: perm.to_vec(),
                total_cost: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn recovers_planted_permutation() {
        let anchor = random_expert(1, 4, 5);
        // other[p] = anchor[planted[p]]; aligning `other` back onto `anchor`
        // must invert the shuffle: perm = planted^{-1}, so that
        // aligned[u] = other[perm[u]] = anchor[planted[perm[u]]] = anchor[u].
        let planted = vec![3, 0, 4, 1, 2];
        let other = shuffle_units(&anchor, &planted);
        let perm = weight_matching_permutation(&anchor, &other).unwrap();
        let mut inverse = vec![0usize; 5];
        for (p, &src) in planted.iter().enumerate() {
            inverse[src] = p;
        }
        assert_eq!(perm.perm, inverse);
        let aligned = apply_permutation(&other, &perm).unwrap();
        assert_eq!(aligned, anchor);
    }

    #[test]
    fn self_match_is_identity() {
        let e = random_expert(2, 4, 6);
        let perm = weight_matching_permutation(&e, &e).unwrap();
        assert_eq!(perm.perm, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn matches_exhaustive_similarity_search() {
        let a = random_expert(3, 3, 5);
        let b = random_expert(4, 3, 5);
        let got = weight_matching_permutation(&a, &b).unwrap();

        // Exhaustive oracle over all 120 permutations of the hidden units.
        let mut best_total = f64::NEG_INFINITY;
        let mut idx = [0usize, 1, 2, 3, 4];
        let mut best_perm = idx.to_vec();
        permute_all(&mut idx, 0, &mut |perm| {
            let mut total = 0.0;
            for p in 0..5 {
                let q = perm[p];
                for j in 0..3 {
                    total += a.w_up.at(p, j) * b.w_up.at(q, j);
                    total += a.w_gate.at(p, j) * b.w_gate.at(q, j);
                    total += a.w_down.at(j, p) * b.w_down.at(j, q);
                }
            }
            if total > best_total {
                best_total = total;
                best_perm = perm.to_vec();
            }
        });
        assert_eq!(got.perm, best_perm);
        assert!((got.total_cost - best_total).abs() < 1e-9);
    }

    fn permute_all(items: &mut [usize; 5], k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute_all(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn identity_permutation_is_byte_identical() {
        let e = random_expert(5, 4, 4);
        let out = apply_permutation(&e, &Assignment::identity(4)).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn permutation_preserves_forward() {
        let e = random_expert(6, 5, 7);
        let perm = Assignment {
            perm: vec![6, 2, 0, 5, 1, 4, 3],
            total_cost: 0.0,
        };
        let permuted = apply_permutation(&e, &perm).unwrap();
        let mut rng = CounterRng::new(7, 40);
        for _ in 0..100 {
            let mut x = vec![0.0; 5];
            rng.fill_gaussian(&mut x);
            let a = expert_forward(&e, &x).unwrap();
            let b = expert_forward(&permuted, &x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_composed_with_inverse_is_identity() {
        let e = random_expert(8, 3, 6);
        let perm = Assignment {
            perm: vec![2, 4, 0, 5, 3, 1],
            total_cost: 0.0,
        };
        let there = apply_permutation(&e, &perm).unwrap();
        let back = apply_permutation(&there, &perm.inverse()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn merge_identical_members_is_idempotent() {
        let e = random_expert(9, 4, 5);
        let merged = merge_cluster(&[e.clone(), e.clone(), e.clone()], 0, &[5, 1, 2]).unwrap();
        for (a, b) in merged.w_up.data().iter().zip(e.w_up.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_weighted_mean_arithmetic() {
        // Scalar experts with weights 0 and 4 and usage (3, 1): mean = 1.0.
        let make = |v: f64| ExpertWeights {
            w_up: Tensor::matrix(1, 1, vec![v]).unwrap(),
            w_gate: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            w_down: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
        };
        let merged = merge_cluster(&[make(0.0), make(4.0)], 0, &[3, 1]).unwrap();
        assert!((merged.w_up.at(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singleton_cluster_returns_anchor() {
        let e = random_expert(10, 3, 4);
        let merged = merge_cluster(&[e.clone()], 0, &[7]).unwrap();
        assert_eq!(merged, e);
    }

    fn toy_stats(nu: Vec<u64>, reps: Vec<Vec<f64>>, traces: Vec<Vec<f64>>) -> CalibStats {
        let k = nu.len();
        let d = reps[0].len();
        let token_count = traces[0].len();
        CalibStats {
            k,
            d,
            gate_mode: GateMode::Renormalized,
            token_count,
            nu,
            sum_gate_norm: vec![0.0; k],
            sum_norm: vec![0.0; k],
            act_sum: Some(
                reps.iter()
                    .map(|r| r.iter().map(|v| v * token_count as f64).collect())
                    .collect(),
            ),
            act_sum_active: reps,
            gate_trace: traces,
        }
    }

    #[test]
    fn msmoe_identical_traces_join() {
        let stats = toy_stats(
            vec![10, 2],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.5, 0.5, 0.0], vec![0.5, 0.5, 0.0]],
        );
        let c = cluster_msmoe(&stats, 0.5).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn msmoe_ratio_zero_keeps_singletons() {
        let stats = toy_stats(
            vec![3, 2, 1],
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![vec![0.1], vec![0.2], vec![0.3]],
        );
        let c = cluster_msmoe(&stats, 0.0).unwrap();
        assert_eq!(c.num_clusters(), 3);
        assert!(c.clusters.iter().all(|m| m.len() == 1));
        assert!((singleton_fraction(&c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn msmoe_all_zero_trace_falls_back_to_top_dominant() {
        let stats = toy_stats(
            vec![10, 8, 0],
            vec![vec![1.0], vec![1.0], vec![1.0]],
            vec![vec![0.7, 0.7], vec![0.3, 0.3], vec![0.0, 0.0]],
        );
        let c = cluster_msmoe(&stats, 0.34).unwrap();
        // Expert 2 never fires; it joins the most-used dominant expert 0.
        assert_eq!(c.assignment[2], c.assignment[0]);
    }

    #[test]
    fn msmoe_recovers_planted_routing_groups() {
        let layer = synth_model(
            &SynthConfig {
                d: 8,
                d_ff: 16,
                num_experts: 6,
                top_k: 2,
                groups: 2,
                noise: 0.2,
                router_skew: 1.0,
                shared_experts: 0,
                gate_mode: GateMode::Renormalized,
            },
            55,
        )
        .unwrap();
        let stream = TokenStream::synthetic(8, 400, 3);
        let stats = calibrate(&layer, &stream).unwrap();
        let c = cluster_msmoe(&stats, 0.5).unwrap();

        // Brute-force nearest-dominant oracle.
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| stats.nu[b].cmp(&stats.nu[a]).then(a.cmp(&b)));
        let dominant = &order[..3];
        for j in 0..6 {
            if dominant.contains(&j) {
                continue;
            }
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for &i in dominant {
                let d = cosine_distance(&stats.gate_trace[i], &stats.gate_trace[j]);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(
                c.assignment[j], c.assignment[best],
                "expert {j} should join dominant {best}"
            );
        }
        // Group blocks are {0,1,2} and {3,4,5}; clusters should not mix them.
        for members in &c.clusters {
            let in_first = members.iter().filter(|&&m| m < 3).count();
            assert!(in_first == 0 || in_first == members.len(), "{members:?}");
        }
    }

    #[test]
    fn hcsmoe_clusters_by_representative_direction() {
        // A-vectors: e1, e1 + eps, e2, e2 + eps -> clusters {0,1}, {2,3}.
        let eps = 0.05;
        let stats = toy_stats(
            vec![4, 3, 2, 1],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![1.0, eps, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![eps, 0.0, 1.0],
            ],
            vec![vec![0.0; 2]; 4],
        );
        let c = cluster_hcsmoe(&stats, 0.5, None).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1], vec![2, 3]]);

        // Brute-force pairwise check: the joined pairs are the two closest.
        let reps = stats.representative_vectors().unwrap();
        let d01 = cosine_distance(reps.row(0), reps.row(1));
        let d23 = cosine_distance(reps.row(2), reps.row(3));
        for (a, b) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            let cross = cosine_distance(reps.row(a), reps.row(b));
            assert!(cross > d01 && cross > d23);
        }
    }

    #[test]
    fn hcsmoe_ratio_zero_is_noop() {
        let stats = toy_stats(
            vec![1, 1],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0]; 2],
        );
        let c = cluster_hcsmoe(&stats, 0.0, None).unwrap();
        assert_eq!(c.num_clusters(), 2);
    }

    #[test]
    fn hcsmoe_infeasible_cap_is_config_error() {
        let stats = toy_stats(
            vec![1, 1, 1, 1],
            vec![vec![1.0, 0.0]; 4],
            vec![vec![0.0]; 4],
        );
        assert!(matches!(
            cluster_hcsmoe(&stats, 0.5, Some(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hcsmoe_matches_exhaustive_linkage_reimplementation() {
        // Independent oracle: recompute the agglomeration with cluster-to-
        // cluster distances evaluated from scratch as the mean over all
        // cross pairs at every step.
        let layer = synth_model(
            &SynthConfig {
                d: 6,
                d_ff: 10,
                num_experts: 8,
                top_k: 2,
                groups: 3,
                noise: 0.5,
                router_skew: 1.0,
                shared_experts: 0,
                gate_mode: GateMode::Renormalized,
            },
            77,
        )
        .unwrap();
        let stream = TokenStream::synthetic(6, 100, 12);
        let stats = calibrate(&layer, &stream).unwrap();
        let got = cluster_hcsmoe(&stats, 0.5, None).unwrap();

        let reps = stats.representative_vectors().unwrap();
        let base = pairwise_distances(&reps, MergeDistance::Cosine);
        let mut clusters: Vec<Vec<usize>> = (0..8).map(|i| vec![i]).collect();
        while clusters.len() > 4 {
            let mut best: Option<(f64, usize, usize)> = None;
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let mut acc = 0.0;
                    for &i in &clusters[a] {
                        for &j in &clusters[b] {
                            acc += base[i][j];
                        }
                    }
                    let d = acc / (clusters[a].len() * clusters[b].len()) as f64;
                    let key = (clusters[a][0], clusters[b][0]);
                    let better = match best {
                        None => true,
                        Some((bd, bi, bj)) => d < bd || (d == bd && key < (bi, bj)),
                    };
                    if better {
                        best = Some((d, a, b));
                    }
                }
            }
            let (_, a, b) = best.unwrap();
            let moved = clusters.remove(b);
            clusters[a].extend(moved);
            clusters[a].sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        assert_eq!(got.clusters, clusters);
    }

    #[test]
    fn merged_layer_with_singletons_is_identity() {
        let layer = synth_model(
            &SynthConfig {
                d: 6,
                d_ff: 8,
                num_experts: 4,
                top_k: 2,
                groups: 2,
                noise: 0.3,
                router_skew: 1.0,
                shared_experts: 1,
                gate_mode: GateMode::Renormalized,
            },
            31,
        )
        .unwrap();
        let stream = TokenStream::synthetic(6, 64, 8);
        let stats = calibrate(&layer, &stream).unwrap();
        let clustering = Clustering::from_clusters(
            (0..4).map(|i| vec![i]).collect(),
            4,
            MergeMethod::Hcsmoe,
            None,
        );
        let plan = build_merge_plan(&layer, &stats, &clustering).unwrap();
        let merged = apply_merge_plan(&layer, &plan).unwrap();
        for t in 0..32 {
            let x = stream.token(t);
            let (a, _) = layer_forward(&layer, &x).unwrap();
            let (b, _) = merged.forward(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn merging_duplicate_experts_reproduces_the_layer() {
        // noise = 0 makes group members exact copies; merging each group is
        // exact because the expert gap is zero.
        let layer = synth_model(
            &SynthConfig {
                d: 6,
                d_ff: 8,
                num_experts: 4,
                top_k: 2,
                groups: 2,
                noise: 0.0,
                router_skew: 1.0,
                shared_experts: 0,
                gate_mode: GateMode::Renormalized,
            },
            32,
        )
        .unwrap();
        let stream = TokenStream::synthetic(6, 64, 9);
        let stats = calibrate(&layer, &stream).unwrap();
        let clustering = Clustering::from_clusters(
            vec![vec![0, 1], vec![2, 3]],
            4,
            MergeMethod::Hcsmoe,
            None,
        );
        let plan = build_merge_plan(&layer, &stats, &clustering).unwrap();
        let merged = apply_merge_plan(&layer, &plan).unwrap();
        for t in 0..64 {
            let x = stream.token(t);
            let (a, _) = layer_forward(&layer, &x).unwrap();
            let (b, _) = merged.forward(&x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_tying_preserves_gate_mass() {
        let layer = synth_model(
            &SynthConfig {
                d: 6,
                d_ff: 8,
                num_experts: 6,
                top_k: 3,
                groups: 2,
                noise: 0.4,
                router_skew: 1.3,
                shared_experts: 0,
                gate_mode: GateMode::Zeroed,
            },
            33,
        )
        .unwrap();
        let stream = TokenStream::synthetic(6, 64, 10);
        let stats = calibrate(&layer, &stream).unwrap();
        let clustering = cluster_hcsmoe(&stats, 0.5, None).unwrap();
        let plan = build_merge_plan(&layer, &stats, &clustering).unwrap();
        let merged = apply_merge_plan(&layer, &plan).unwrap();
        for t in 0..64 {
            let x = stream.token(t);
            let original = layer.route(&x).unwrap();
            let tied = merged.route(&x).unwrap();
            assert!((original.gate_sum() - tied.gate_sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_weights_sum_to_one_per_cluster() {
        let layer = synth_model(
            &SynthConfig {
                d: 6,
                d_ff: 8,
                num_experts: 8,
                top_k: 2,
                groups: 4,
                noise: 0.3,
                router_skew: 1.5,
                shared_experts: 0,
                gate_mode: GateMode::Renormalized,
            },
            34,
        )
        .unwrap();
        let stream = TokenStream::synthetic(6, 128, 11);
        let stats = calibrate(&layer, &stream).unwrap();
        for clustering in [
            cluster_hcsmoe(&stats, 0.5, None).unwrap(),
            cluster_msmoe(&stats, 0.25).unwrap(),
        ] {
            let plan = build_merge_plan(&layer, &stats, &clustering).unwrap();
            for members in &plan.clustering.clusters {
                let total: f64 = members.iter().map(|&i| plan.weights[i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            for (cid, members) in plan.clustering.clusters.iter().enumerate() {
                let anchor = plan.anchors[cid];
                assert!(members.contains(&anchor));
                assert_eq!(plan.permutations[anchor].perm, (0..8).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn singleton_fraction_counts() {
        let c = Clustering::from_clusters(
            vec![vec![0, 1], vec![2], vec![3]],
            4,
            MergeMethod::Msmoe,
            None,
        );
        assert!((singleton_fraction(&c) - 2.0 / 3.0).abs() < 1e-15);
        let all = Clustering::from_clusters(vec![vec![0], vec![1]], 2, MergeMethod::Msmoe, None);
        assert_eq!(singleton_fraction(&all), 1.0);
        let one = Clustering::from_clusters(vec![vec![0, 1]], 2, MergeMethod::Msmoe, None);
        assert_eq!(singleton_fraction(&one), 0.0);
    }
}
