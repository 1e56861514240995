//! Original-vs-compressed layer comparison on held-out tokens.

use serde::{Deserialize, Serialize};

use crate::analysis::jsd;
use crate::calibration::TokenStream;
use crate::error::{Error, Result};
use crate::merge::MergedLayer;
use crate::moe::{GateMode, Model, MoeLayer};
use crate::tensor::l2_norm;

/// A compressed layer along with the mapping from original expert indices to
/// its own expert space.
#[derive(Debug, Clone)]
pub enum Compressed {
    Pruned { layer: MoeLayer, keep: Vec<usize> },
    Merged(MergedLayer),
}

impl Compressed {
    /// Compressed index of an original expert; `None` if it was removed.
    pub fn index_of(&self, original: usize) -> Option<usize> {
        match self {
            Compressed::Pruned { keep, .. } => keep.binary_search(&original).ok(),
            Compressed::Merged(m) => m.index_map.get(original).copied(),
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            Compressed::Pruned { layer, .. } => layer.num_experts(),
            Compressed::Merged(m) => m.num_experts(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, crate::moe::GateResult)> {
        match self {
            Compressed::Pruned { layer, .. } => layer.forward(x),
            Compressed::Merged(m) => m.forward(x),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Compressed::Pruned { layer, .. } => layer.d(),
            Compressed::Merged(m) => m.d(),
        }
    }
}

/// Error and routing-fidelity measurements for one compressed model.
///
/// `gate_jsd_mean` compares, per token, the original routing distribution
/// projected onto the compressed expert space (masses of merged experts sum;
/// masses of removed experts drop, with renormalization) against the
/// compressed model's own routing. Merged layers reproduce the projection
/// exactly, so the metric isolates the routing distortion of pruning's
/// re-normalization and re-selection. `runtime_seconds` is informational and
/// excluded from serialized reports so artifacts are byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ratio: f64,
    pub gate_mode: GateMode,
    pub tokens: usize,
    /// `mean ||h - h'|| / mean ||h||` over the held-out tokens.
    pub rel_output_error: f64,
    pub gate_jsd_mean: f64,
    /// Fraction of tokens whose top original expert maps to the compressed
    /// model's top expert.
    pub top1_agreement: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singleton_fraction: Option<f64>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// Runs both layers over the stream and reports relative output error, mean
/// gate-distribution divergence, and top-1 expert agreement.
pub fn evaluate(
    original: &MoeLayer,
    compressed: &Compressed,
    stream: &TokenStream,
    method: &str,
    ratio: f64,
) -> Result<EvalReport> {
    if original.d() != compressed.d() {
        return Err(Error::Dimension(format!(
            "original d={} vs compressed d={}",
            original.d(),
            compressed.d()
        )));
    }
    if stream.count() == 0 {
        return Err(Error::Domain("empty evaluation stream".into()));
    }
    let start = std::time::Instant::now();
    let kc = compressed.num_experts();
    let mut err_sum = 0.0;
    let mut ref_sum = 0.0;
    let mut jsd_sum = 0.0;
    let mut agree = 0usize;
    for t in 0..stream.count() {
        let x = stream.token(t);
        let (h, gates) = original.forward(&x)?;
        let (hc, gates_c) = compressed.forward(&x)?;
        let diff: Vec<f64> = h.iter().zip(&hc).map(|(a, b)| a - b).collect();
        err_sum += l2_norm(&diff);
        ref_sum += l2_norm(&h);

        // Project the original routing onto the compressed expert space.
        let mut projected = vec![0.0; kc];
        for &i in &gates.active {
            if let Some(c) = compressed.index_of(i) {
                projected[c] += gates.gates[i];
            }
        }
        let p_total: f64 = projected.iter().sum();
        let mut own: Vec<f64> = gates_c.gates.clone();
        let own_total: f64 = own.iter().sum();
        if p_total > 0.0 && own_total > 0.0 {
            for v in projected.iter_mut() {
                *v /= p_total;
            }
            for v in own.iter_mut() {
                *v /= own_total;
            }
            jsd_sum += jsd(&projected, &own)?;
        } else {
            // Every active original expert was removed: maximal divergence.
            jsd_sum += 1.0;
        }

        let top_original = gates.top1();
        if let Some(mapped) = compressed.index_of(top_original) {
            if mapped == gates_c.top1() {
                agree += 1;
            }
        }
    }
    let n = stream.count() as f64;
    Ok(EvalReport {
        method: method.to_owned(),
        ratio,
        gate_mode: original.router.gate_mode,
        tokens: stream.count(),
        rel_output_error: if ref_sum > 0.0 { err_sum / ref_sum } else { 0.0 },
        gate_jsd_mean: jsd_sum / n,
        top1_agreement: agree as f64 / n,
        singleton_fraction: None,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate;
    use crate::merge::{apply_merge_plan, build_merge_plan, cluster_hcsmoe};
    use crate::moe::{synth_model, GateMode, SynthConfig};
    use crate::prune::{apply_prune, compute_saliency, select_prune_set, PruneCriterion};

    fn layer(seed: u64) -> MoeLayer {
        synth_model(
            &SynthConfig {
                d: 8,
                d_ff: 12,
                num_experts: 8,
                top_k: 2,
                groups: 4,
                noise: 0.4,
                router_skew: 1.2,
                shared_experts: 0,
                gate_mode: GateMode::Renormalized,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identical_model_scores_perfectly() {
        let l = layer(1);
        let compressed = Compressed::Pruned {
            layer: l.clone(),
            keep: (0..8).collect(),
        };
        let stream = TokenStream::synthetic(8, 64, 5);
        let report = evaluate(&l, &compressed, &stream, "identity", 0.0).unwrap();
        assert_eq!(report.rel_output_error, 0.0);
        assert_eq!(report.top1_agreement, 1.0);
        assert!(report.gate_jsd_mean < 1e-12);
    }

    #[test]
    fn pruning_dead_experts_is_lossless() {
        use crate::moe::{ExpertWeights, RouterConfig};
        use crate::tensor::Tensor;
        let ident = ExpertWeights {
            w_up: Tensor::identity(2),
            w_gate: Tensor::identity(2),
            w_down: Tensor::identity(2),
        };
        let l = MoeLayer {
            router: RouterConfig {
                // Expert 1 can never reach the top slot.
                weight: Tensor::matrix(2, 2, vec![80.0, 80.0, -80.0, -80.0]).unwrap(),
                top_k: 1,
                gate_mode: GateMode::Renormalized,
            },
            experts: vec![ident.clone(), ident.clone()],
            shared_experts: vec![],
        };
        let pruned = apply_prune(
            &l,
            &crate::prune::PrunePlan {
                keep: vec![0],
                removed: vec![1],
                ratio: 0.5,
            },
        )
        .unwrap();
        let compressed = Compressed::Pruned {
            layer: pruned,
            keep: vec![0],
        };
        // Positive-sum tokens keep expert 0 on top.
        let tokens =
            Tensor::matrix(4, 2, vec![0.5, 0.4, 0.9, 0.1, 0.2, 0.7, 1.5, 0.3]).unwrap();
        let stream = TokenStream::from_matrix(&tokens).unwrap();
        let report = evaluate(&l, &compressed, &stream, "frequency", 0.5).unwrap();
        assert!(report.rel_output_error < 1e-12);
        assert_eq!(report.top1_agreement, 1.0);
    }

    #[test]
    fn merged_layers_preserve_projected_routing() {
        let l = layer(2);
        let calib = TokenStream::synthetic(8, 128, 7);
        let stats = calibrate(&l, &calib).unwrap();
        let clustering = cluster_hcsmoe(&stats, 0.5, None).unwrap();
        let plan = build_merge_plan(&l, &stats, &clustering).unwrap();
        let merged = apply_merge_plan(&l, &plan).unwrap();
        let eval_stream = TokenStream::synthetic(8, 64, 8);
        let report = evaluate(
            &l,
            &Compressed::Merged(merged),
            &eval_stream,
            "hcsmoe",
            0.5,
        )
        .unwrap();
        // Gate tying makes the projected and actual distributions coincide.
        assert!(report.gate_jsd_mean < 1e-12);
        assert_eq!(report.top1_agreement, 1.0);
        assert!(report.rel_output_error > 0.0);
    }

    #[test]
    fn pruned_models_have_nonzero_but_bounded_divergence() {
        let l = layer(3);
        let calib = TokenStream::synthetic(8, 256, 9);
        let stats = calibrate(&l, &calib).unwrap();
        let scores = compute_saliency(&stats, PruneCriterion::Reap);
        let plan = select_prune_set(&scores, 0.5).unwrap();
        let pruned = apply_prune(&l, &plan).unwrap();
        let eval_stream = TokenStream::synthetic(8, 64, 10);
        let report = evaluate(
            &l,
            &Compressed::Pruned {
                layer: pruned,
                keep: plan.keep.clone(),
            },
            &eval_stream,
            "reap",
            0.5,
        )
        .unwrap();
        assert!(report.rel_output_error > 0.0);
        assert!((0.0..=1.0).contains(&report.gate_jsd_mean));
        assert!((0.0..=1.0).contains(&report.top1_agreement));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = layer(4);
        let b = synth_model(
            &SynthConfig {
                d: 6,
                d_ff: 12,
                num_experts: 8,
                top_k: 2,
                groups: 4,
                noise: 0.4,
                router_skew: 1.2,
                shared_experts: 0,
                gate_mode: GateMode::Renormalized,
            },
            5,
        )
        .unwrap();
        let stream = TokenStream::synthetic(8, 8, 1);
        let compressed = Compressed::Pruned {
            layer: b,
            keep: (0..8).collect(),
        };
        assert!(matches!(
            evaluate(&a, &compressed, &stream, "x", 0.0),
            Err(Error::Dimension(_))
        ));
    }
}
