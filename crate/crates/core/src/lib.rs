//! Desk-scale sparse mixture-of-experts (SMoE) compression laboratory.
//!
//! This crate implements a single SMoE layer (top-k router + SwiGLU experts),
//! streaming calibration statistics, the standard expert compression methods
//! built on them, and Monte-Carlo checks of the error theory that separates
//! pruning from merging:
//!
//! * pruning criteria: usage frequency, expert activation norm (EAN), and
//!   router-weighted expert activation pruning (REAP);
//! * merging baselines: M-SMoE (weight matching + frequency-weighted averaging
//!   over router-similarity clusters) and HC-SMoE (agglomerative clustering of
//!   representative activation vectors);
//! * theory: the irreducible error of gate-tied merging, the pruning
//!   reallocation error, and the cluster-level generalization, all verified
//!   against closed forms and grid searches;
//! * analysis: functional-subspace PCA projections, expert weight distances,
//!   singular-vector alignment, n-gram diversity, and Jensen-Shannon
//!   divergence.
//!
//! Everything is deterministic: all randomness flows through the counter-based
//! generator in [`rng`], and every operation specifies its accumulation order.

pub mod analysis;
pub mod assignment;
pub mod calibration;
pub mod container;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod merge;
pub mod modelio;
pub mod moe;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use assignment::{linear_assignment, Assignment};
pub use calibration::{calibrate, merge_stats, CalibOptions, CalibStats, TokenStream};
pub use error::{Error, Result};
pub use eval::{evaluate, Compressed, EvalReport};
pub use linalg::{pca, svd, PcaResult, SvdResult};
pub use merge::{
    apply_merge_plan, apply_permutation, build_merge_plan, cluster_hcsmoe, cluster_msmoe,
    merge_cluster, singleton_fraction, weight_matching_permutation, Clustering, MergeDistance,
    MergePlan, MergedLayer,
};
pub use moe::{
    expert_forward, gate_compute, layer_forward, synth_model, ExpertWeights, GateMode, GateResult,
    Model, MoeLayer, RouterConfig, SynthConfig,
};
pub use prune::{
    apply_prune, compute_saliency, prune_error_estimate, select_prune_set, PruneCriterion,
    PrunePlan, SaliencyScores,
};
pub use tensor::{softmax, Tensor};
pub use theory::{
    hierarchical_error_mc, merge_error_mc, optimal_alpha, prune_error_mc, theory_report,
    ClusterScenario, ExpertSpec, HierarchicalReport, MixScenario, ScalarSampler, TheoryReport,
};
