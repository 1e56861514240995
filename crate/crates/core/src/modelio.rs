//! Model, statistics, and token-stream persistence.
//!
//! Every artifact is a pair of files sharing a base path: `<base>.nt`, the
//! named-tensor container, and `<base>.json`, the manifest. Manifests carry
//! the format version, layer geometry, gate mode, and seed provenance;
//! merged layers additionally store their expert index map. Serialization is
//! deterministic, so identical inputs produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibStats, TokenStream};
use crate::container::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::merge::MergedLayer;
use crate::moe::{ExpertWeights, GateMode, MoeLayer, RouterConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Moe,
    Merged,
    Stats,
    Tokens,
}

/// Manifest stored next to every tensor container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ArtifactKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_mode: Option<GateMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared_expert_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_only: Option<bool>,
    /// Original expert index -> merged expert index, merged layers only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_map: Option<Vec<usize>>,
    /// Seeds, methods, ratios — whatever identifies how the artifact was
    /// produced. Ordered map for reproducible serialization.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn new(kind: ArtifactKind) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            kind,
            d: None,
            d_ff: None,
            num_experts: None,
            top_k: None,
            gate_mode: None,
            shared_expert_count: None,
            token_count: None,
            active_only: None,
            index_map: None,
            provenance: BTreeMap::new(),
        }
    }
}

pub fn tensor_path(base: &Path) -> PathBuf {
    base.with_extension("nt")
}

pub fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn write_manifest(base: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(manifest_path(base), text)?;
    Ok(())
}

fn read_manifest(base: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(manifest_path(base))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::FormatInconsistent(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion(format!(
            "artifact declares format version {}, this build reads {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn expert_entries<'a>(
    prefix: &str,
    experts: &'a [ExpertWeights],
    names: &mut Vec<String>,
) -> Vec<(usize, &'a Tensor)> {
    let mut refs = Vec::new();
    for (i, e) in experts.iter().enumerate() {
        for (suffix, tensor) in [("w_up", &e.w_up), ("w_gate", &e.w_gate), ("w_down", &e.w_down)] {
            names.push(format!("{prefix}.{i}.{suffix}"));
            refs.push((names.len() - 1, tensor));
        }
    }
    refs
}

fn layer_tensor_entries<'a>(
    router: &'a Tensor,
    experts: &'a [ExpertWeights],
    shared: &'a [ExpertWeights],
) -> (Vec<String>, Vec<&'a Tensor>) {
    let mut names = vec!["router.weight".to_string()];
    let mut tensors: Vec<&Tensor> = vec![router];
    for (idx, t) in expert_entries("experts", experts, &mut names) {
        debug_assert_eq!(idx, tensors.len());
        tensors.push(t);
    }
    for (idx, t) in expert_entries("shared", shared, &mut names) {
        debug_assert_eq!(idx, tensors.len());
        tensors.push(t);
    }
    (names, tensors)
}

fn save_layer_tensors(
    base: &Path,
    router: &Tensor,
    experts: &[ExpertWeights],
    shared: &[ExpertWeights],
) -> Result<()> {
    let (names, tensors) = layer_tensor_entries(router, experts, shared);
    let entries: Vec<(&str, &Tensor)> = names
        .iter()
        .map(String::as_str)
        .zip(tensors.into_iter())
        .collect();
    save_tensors(&tensor_path(base), &entries)
}

fn load_expert(
    tensors: &BTreeMap<String, Tensor>,
    prefix: &str,
    i: usize,
) -> Result<ExpertWeights> {
    let get = |suffix: &str| -> Result<Tensor> {
        tensors
            .get(&format!("{prefix}.{i}.{suffix}"))
            .cloned()
            .ok_or_else(|| {
                Error::FormatInconsistent(format!("missing tensor `{prefix}.{i}.{suffix}`"))
            })
    };
    let e = ExpertWeights {
        w_up: get("w_up")?,
        w_gate: get("w_gate")?,
        w_down: get("w_down")?,
    };
    e.validate()?;
    Ok(e)
}

/// Saves an uncompressed or pruned layer as `<base>.nt` + `<base>.json`.
pub fn save_model(
    layer: &MoeLayer,
    base: &Path,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    layer.validate()?;
    save_layer_tensors(base, &layer.router.weight, &layer.experts, &layer.shared_experts)?;
    let mut manifest = Manifest::new(ArtifactKind::Moe);
    manifest.d = Some(layer.d());
    manifest.d_ff = Some(layer.d_ff());
    manifest.num_experts = Some(layer.num_experts());
    manifest.top_k = Some(layer.router.top_k);
    manifest.gate_mode = Some(layer.router.gate_mode);
    manifest.shared_expert_count = Some(layer.shared_experts.len());
    manifest.provenance = provenance;
    write_manifest(base, &manifest)
}

/// Saves a merged layer; the index map lives in the manifest.
pub fn save_merged_model(
    layer: &MergedLayer,
    base: &Path,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    save_layer_tensors(base, &layer.router.weight, &layer.experts, &layer.shared_experts)?;
    let mut manifest = Manifest::new(ArtifactKind::Merged);
    manifest.d = Some(layer.experts[0].d());
    manifest.d_ff = Some(layer.experts[0].d_ff());
    manifest.num_experts = Some(layer.num_merged_experts());
    manifest.top_k = Some(layer.router.top_k);
    manifest.gate_mode = Some(layer.router.gate_mode);
    manifest.shared_expert_count = Some(layer.shared_experts.len());
    manifest.index_map = Some(layer.index_map.clone());
    manifest.provenance = provenance;
    write_manifest(base, &manifest)
}

/// A loaded model artifact: either a plain layer or a merged layer.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Moe(MoeLayer),
    Merged(MergedLayer),
}

impl LoadedModel {
    pub fn d(&self) -> usize {
        match self {
            LoadedModel::Moe(l) => l.d(),
            LoadedModel::Merged(m) => m.experts[0].d(),
        }
    }

    pub fn as_moe(self) -> Result<MoeLayer> {
        match self {
            LoadedModel::Moe(l) => Ok(l),
            LoadedModel::Merged(_) => Err(Error::FormatInconsistent(
                "expected an uncompressed layer, found a merged artifact".into(),
            )),
        }
    }
}

/// Loads a model artifact, cross-checking tensors against the manifest.
pub fn load_model(base: &Path) -> Result<(LoadedModel, Manifest)> {
    let manifest = read_manifest(base)?;
    let tensors = load_tensors(&tensor_path(base))?;
    let k = manifest
        .num_experts
        .ok_or_else(|| Error::FormatInconsistent("manifest lacks num_experts".into()))?;
    let gate_mode = manifest
        .gate_mode
        .ok_or_else(|| Error::FormatInconsistent("manifest lacks gate_mode".into()))?;
    let top_k = manifest
        .top_k
        .ok_or_else(|| Error::FormatInconsistent("manifest lacks top_k".into()))?;
    let shared_count = manifest.shared_expert_count.unwrap_or(0);

    let router_weight = tensors
        .get("router.weight")
        .cloned()
        .ok_or_else(|| Error::FormatInconsistent("missing tensor `router.weight`".into()))?;
    let experts: Vec<ExpertWeights> = (0..k)
        .map(|i| load_expert(&tensors, "experts", i))
        .collect::<Result<_>>()?;
    let shared: Vec<ExpertWeights> = (0..shared_count)
        .map(|i| load_expert(&tensors, "shared", i))
        .collect::<Result<_>>()?;

    let expected_tensors = 1 + 3 * (k + shared_count);
    if tensors.len() != expected_tensors {
        return Err(Error::FormatInconsistent(format!(
            "container holds {} tensors, manifest implies {expected_tensors}",
            tensors.len()
        )));
    }
    if let (Some(d), Some(d_ff)) = (manifest.d, manifest.d_ff) {
        if experts.iter().chain(&shared).any(|e| e.d() != d || e.d_ff() != d_ff) {
            return Err(Error::FormatInconsistent(
                "expert shapes disagree with the manifest".into(),
            ));
        }
    }

    match manifest.kind {
        ArtifactKind::Moe => {
            if router_weight.rows() != k {
                return Err(Error::FormatInconsistent(format!(
                    "router has {} rows, manifest claims {k} experts",
                    router_weight.rows()
                )));
            }
            let layer = MoeLayer {
                router: RouterConfig {
                    weight: router_weight,
                    top_k,
                    gate_mode,
                },
                experts,
                shared_experts: shared,
            };
            layer.validate()?;
            Ok((LoadedModel::Moe(layer), manifest))
        }
        ArtifactKind::Merged => {
            let index_map = manifest
                .index_map
                .clone()
                .ok_or_else(|| Error::FormatInconsistent("merged artifact lacks index_map".into()))?;
            if index_map.len() != router_weight.rows() {
                return Err(Error::FormatInconsistent(format!(
                    "index map covers {} experts, router has {} rows",
                    index_map.len(),
                    router_weight.rows()
                )));
            }
            if index_map.iter().any(|&m| m >= k) {
                return Err(Error::FormatInconsistent(
                    "index map points past the merged expert list".into(),
                ));
            }
            let layer = MergedLayer {
                router: RouterConfig {
                    weight: router_weight,
                    top_k,
                    gate_mode,
                },
                experts,
                shared_experts: shared,
                index_map,
            };
            Ok((LoadedModel::Merged(layer), manifest))
        }
        other => Err(Error::FormatInconsistent(format!(
            "expected a model artifact, found {other:?}"
        ))),
    }
}

/// Saves calibration statistics. The gate trace and activation sums ride in
/// the tensor container; counters in the manifest.
pub fn save_stats(
    stats: &CalibStats,
    base: &Path,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let nu = Tensor::new(vec![stats.k], stats.nu.iter().map(|&n| n as f64).collect())?;
    let sum_gate_norm = Tensor::new(vec![stats.k], stats.sum_gate_norm.clone())?;
    let sum_norm = Tensor::new(vec![stats.k], stats.sum_norm.clone())?;
    let act_sum_active = Tensor::new(
        vec![stats.k, stats.d],
        stats.act_sum_active.concat(),
    )?;
    let gate_trace = Tensor::new(
        vec![stats.k, stats.token_count],
        stats.gate_trace.concat(),
    )?;
    let mut entries: Vec<(&str, &Tensor)> = vec![
        ("nu", &nu),
        ("sum_gate_norm", &sum_gate_norm),
        ("sum_norm", &sum_norm),
        ("act_sum_active", &act_sum_active),
        ("gate_trace", &gate_trace),
    ];
    let act_sum_tensor;
    if let Some(act_sum) = &stats.act_sum {
        act_sum_tensor = Tensor::new(vec![stats.k, stats.d], act_sum.concat())?;
        entries.push(("act_sum", &act_sum_tensor));
    }
    save_tensors(&tensor_path(base), &entries)?;

    let mut manifest = Manifest::new(ArtifactKind::Stats);
    manifest.d = Some(stats.d);
    manifest.num_experts = Some(stats.k);
    manifest.gate_mode = Some(stats.gate_mode);
    manifest.token_count = Some(stats.token_count);
    manifest.active_only = Some(stats.act_sum.is_none());
    manifest.provenance = provenance;
    write_manifest(base, &manifest)
}

pub fn load_stats(base: &Path) -> Result<(CalibStats, Manifest)> {
    let manifest = read_manifest(base)?;
    if manifest.kind != ArtifactKind::Stats {
        return Err(Error::FormatInconsistent(format!(
            "expected a stats artifact, found {:?}",
            manifest.kind
        )));
    }
    let tensors = load_tensors(&tensor_path(base))?;
    let k = manifest
        .num_experts
        .ok_or_else(|| Error::FormatInconsistent("stats manifest lacks num_experts".into()))?;
    let d = manifest
        .d
        .ok_or_else(|| Error::FormatInconsistent("stats manifest lacks d".into()))?;
    let token_count = manifest
        .token_count
        .ok_or_else(|| Error::FormatInconsistent("stats manifest lacks token_count".into()))?;
    let gate_mode = manifest
        .gate_mode
        .ok_or_else(|| Error::FormatInconsistent("stats manifest lacks gate_mode".into()))?;
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .get(name)
            .ok_or_else(|| Error::FormatInconsistent(format!("missing tensor `{name}`")))
    };
    let expect_shape = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::FormatInconsistent(format!(
                "tensor `{name}` has shape {:?}, manifest implies {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    let nu_t = get("nu")?;
    expect_shape("nu", nu_t, &[k])?;
    let sum_gate_norm = get("sum_gate_norm")?;
    expect_shape("sum_gate_norm", sum_gate_norm, &[k])?;
    let sum_norm = get("sum_norm")?;
    expect_shape("sum_norm", sum_norm, &[k])?;
    let act_sum_active = get("act_sum_active")?;
    expect_shape("act_sum_active", act_sum_active, &[k, d])?;
    let gate_trace = get("gate_trace")?;
    expect_shape("gate_trace", gate_trace, &[k, token_count])?;
    let act_sum = match tensors.get("act_sum") {
        Some(t) => {
            expect_shape("act_sum", t, &[k, d])?;
            Some((0..k).map(|i| t.row(i).to_vec()).collect())
        }
        None => None,
    };
    if manifest.active_only == Some(false) && act_sum.is_none() {
        return Err(Error::FormatInconsistent(
            "manifest promises full stats but act_sum is missing".into(),
        ));
    }
    let stats = CalibStats {
        k,
        d,
        gate_mode,
        token_count,
        nu: nu_t.data().iter().map(|&v| v as u64).collect(),
        sum_gate_norm: sum_gate_norm.data().to_vec(),
        sum_norm: sum_norm.data().to_vec(),
        act_sum,
        act_sum_active: (0..k).map(|i| act_sum_active.row(i).to_vec()).collect(),
        gate_trace: (0..k).map(|i| gate_trace.row(i).to_vec()).collect(),
    };
    Ok((stats, manifest))
}

/// Saves a token stream as a single `tokens` tensor of shape
/// `[count, d]`.
pub fn save_tokens(
    stream: &TokenStream,
    base: &Path,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let matrix = stream.to_matrix();
    save_tensors(&tensor_path(base), &[("tokens", &matrix)])?;
    let mut manifest = Manifest::new(ArtifactKind::Tokens);
    manifest.d = Some(stream.d());
    manifest.token_count = Some(stream.count());
    manifest.provenance = provenance;
    write_manifest(base, &manifest)
}

pub fn load_tokens(base: &Path) -> Result<TokenStream> {
    let manifest = read_manifest(base)?;
    if manifest.kind != ArtifactKind::Tokens {
        return Err(Error::FormatInconsistent(format!(
            "expected a token artifact, found {:?}",
            manifest.kind
        )));
    }
    let tensors = load_tensors(&tensor_path(base))?;
    let matrix = tensors
        .get("tokens")
        .ok_or_else(|| Error::FormatInconsistent("missing tensor `tokens`".into()))?;
    if let (Some(d), Some(count)) = (manifest.d, manifest.token_count) {
        if matrix.shape() != [count, d] {
            return Err(Error::FormatInconsistent(format!(
                "token tensor shape {:?} disagrees with manifest [{count}, {d}]",
                matrix.shape()
            )));
        }
    }
    TokenStream::from_matrix(matrix)
}
