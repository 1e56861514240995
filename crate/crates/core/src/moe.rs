//! The sparse mixture-of-experts layer: top-k router, SwiGLU experts, and a
//! deterministic synthetic model generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{softmax, Tensor};

/// How gates behave after top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Non-selected gates are zeroed; survivors keep their softmax values, so
    /// the gate vector sums to at most 1.
    Zeroed,
    /// Survivors are rescaled to sum to 1.
    Renormalized,
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateMode::Zeroed => write!(f, "zeroed"),
            GateMode::Renormalized => write!(f, "renormalized"),
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<GateMode> {
        match s {
            "zeroed" => Ok(GateMode::Zeroed),
            "renormalized" => Ok(GateMode::Renormalized),
            other => Err(Error::Config(format!("unknown gate mode `{other}`"))),
        }
    }
}

/// One SwiGLU expert: `f(x) = w_down * (silu(w_gate * x) ⊙ (w_up * x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    /// `d_ff x d`
    pub w_up: Tensor,
    /// `d_ff x d`
    pub w_gate: Tensor,
    /// `d x d_ff`
    pub w_down: Tensor,
}

impl ExpertWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.w_up.is_matrix() || !self.w_gate.is_matrix() || !self.w_down.is_matrix() {
            return Err(Error::Dimension("expert weights must be matrices".into()));
        }
        let (d_ff, d) = (self.w_up.rows(), self.w_up.cols());
        if self.w_gate.shape() != [d_ff, d] {
            return Err(Error::Dimension(format!(
                "w_gate shape {:?} does not match w_up {:?}",
                self.w_gate.shape(),
                self.w_up.shape()
            )));
        }
        if self.w_down.shape() != [d, d_ff] {
            return Err(Error::Dimension(format!(
                "w_down shape {:?} inconsistent with d={d}, d_ff={d_ff}",
                self.w_down.shape()
            )));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.w_up.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.w_up.rows()
    }
}

/// Router: a `K x d` weight matrix plus the top-k truncation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub weight: Tensor,
    pub top_k: usize,
    pub gate_mode: GateMode,
}

impl RouterConfig {
    pub fn num_experts(&self) -> usize {
        self.weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_matrix() {
            return Err(Error::Dimension("router weight must be a matrix".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts() {
            return Err(Error::Config(format!(
                "top_k {} out of range 1..={}",
                self.top_k,
                self.num_experts()
            )));
        }
        Ok(())
    }
}

/// Gate values after top-k truncation. `gates[i] == 0` for inactive experts;
/// `active` holds the selected indices in ascending order, `|active| == top_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub gates: Vec<f64>,
    pub active: Vec<usize>,
}

impl GateResult {
    pub fn gate_sum(&self) -> f64 {
        self.active.iter().map(|&i| self.gates[i]).sum()
    }

    /// Index of the largest gate (ties go to the lowest index).
    pub fn top1(&self) -> usize {
        let mut best = self.active[0];
        for &i in &self.active[1..] {
            if self.gates[i] > self.gates[best] {
                best = i;
            }
        }
        best
    }
}

/// A single MoE layer. Shared experts run on every token with unit gate and
/// are never compressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub router: RouterConfig,
    pub experts: Vec<ExpertWeights>,
    pub shared_experts: Vec<ExpertWeights>,
}

impl MoeLayer {
    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        if self.experts.is_empty() {
            return Err(Error::Config("layer needs at least one expert".into()));
        }
        if self.router.num_experts() != self.experts.len() {
            return Err(Error::Dimension(format!(
                "router has {} rows but layer has {} experts",
                self.router.num_experts(),
                self.experts.len()
            )));
        }
        let d = self.experts[0].d();
        let d_ff = self.experts[0].d_ff();
        for e in self.experts.iter().chain(&self.shared_experts) {
            e.validate()?;
            if e.d() != d || e.d_ff() != d_ff {
                return Err(Error::Dimension(
                    "experts disagree on (d, d_ff)".into(),
                ));
            }
        }
        if self.router.weight.cols() != d {
            return Err(Error::Dimension(format!(
                "router expects inputs of dimension {}, experts use {d}",
                self.router.weight.cols()
            )));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.experts[0].d()
    }

    pub fn d_ff(&self) -> usize {
        self.experts[0].d_ff()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Forward interface shared by original and compressed layers, so calibration
/// and evaluation run on either.
pub trait Model {
    fn d(&self) -> usize;
    fn num_experts(&self) -> usize;
    fn gate_mode(&self) -> GateMode;
    /// Gate values over this model's expert space.
    fn route(&self, x: &[f64]) -> Result<GateResult>;
    /// Output of routed expert `idx` on `x` (no gate applied).
    fn expert_output(&self, idx: usize, x: &[f64]) -> Result<Vec<f64>>;
    /// Full layer output (routed mixture plus shared experts) and the gates.
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GateResult)>;
}

impl Model for MoeLayer {
    fn d(&self) -> usize {
        MoeLayer::d(self)
    }

    fn num_experts(&self) -> usize {
        MoeLayer::num_experts(self)
    }

    fn gate_mode(&self) -> GateMode {
        self.router.gate_mode
    }

    fn route(&self, x: &[f64]) -> Result<GateResult> {
        gate_compute(&self.router, x)
    }

    fn expert_output(&self, idx: usize, x: &[f64]) -> Result<Vec<f64>> {
        expert_forward(&self.experts[idx], x)
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GateResult)> {
        layer_forward(self, x)
    }
}

/// Full softmax over router logits, keep the `top_k` largest gates (ties go
/// to the lowest index), zero the rest, and renormalize the survivors iff the
/// mode asks for it.
pub fn gate_compute(router: &RouterConfig, x: &[f64]) -> Result<GateResult> {
    router.validate()?;
    let logits = router.weight.matvec(x)?;
    let full = softmax(&logits)?;
    let k = router.top_k;
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.sort_by(|&a, &b| full[b].partial_cmp(&full[a]).unwrap().then(a.cmp(&b)));
    let mut active: Vec<usize> = order[..k].to_vec();
    active.sort_unstable();
    let mut gates = vec![0.0; full.len()];
    for &i in &active {
        gates[i] = full[i];
    }
    if router.gate_mode == GateMode::Renormalized {
        let total: f64 = active.iter().map(|&i| gates[i]).sum();
        for &i in &active {
            gates[i] /= total;
        }
    }
    Ok(GateResult { gates, active })
}

fn silu(t: f64) -> f64 {
    // Split the sigmoid so neither branch overflows.
    if t >= 0.0 {
        t / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        t * e / (1.0 + e)
    }
}

/// SwiGLU forward: `w_down * (silu(w_gate * x) ⊙ (w_up * x))`.
pub fn expert_forward(e: &ExpertWeights, x: &[f64]) -> Result<Vec<f64>> {
    let up = e.w_up.matvec(x)?;
    let gate = e.w_gate.matvec(x)?;
    let hidden: Vec<f64> = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| silu(*g) * u)
        .collect();
    e.w_down.matvec(&hidden)
}

/// Layer output: gate-weighted sum of active experts plus all shared experts
/// at unit gate. Accumulation order is ascending expert index.
pub fn layer_forward(layer: &MoeLayer, x: &[f64]) -> Result<(Vec<f64>, GateResult)> {
    let gates = gate_compute(&layer.router, x)?;
    let mut y = vec![0.0; layer.d()];
    for &k in &gates.active {
        let out = expert_forward(&layer.experts[k], x)?;
        let g = gates.gates[k];
        for (acc, v) in y.iter_mut().zip(&out) {
            *acc += g * v;
        }
    }
    for shared in &layer.shared_experts {
        let out = expert_forward(shared, x)?;
        for (acc, v) in y.iter_mut().zip(&out) {
            *acc += v;
        }
    }
    Ok((y, gates))
}

/// Parameters of the synthetic planted-specialization layer.
///
/// The generator plants `groups` base experts; expert `i` belongs to the
/// block `i * groups / num_experts` and equals its group base plus Gaussian
/// noise of relative scale `noise`. Router rows share a direction per group
/// and are scaled by a Zipf-like factor in both the expert's rank within its
/// group and the group index, so usage is imbalanced: early groups dominate,
/// late groups are rare but receive large gates when they fire, and low-rank
/// group members tag along with small gate shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub d_ff: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub groups: usize,
    /// Within-group weight noise, relative to the base weight scale. Zero
    /// makes group members exact copies.
    pub noise: f64,
    /// Router bias skew >= 0; zero gives balanced usage.
    pub router_skew: f64,
    pub shared_experts: usize,
    pub gate_mode: GateMode,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.num_experts == 0 {
            return Err(Error::Config("d, d_ff and num_experts must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k {} out of range 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.groups == 0 || self.groups > self.num_experts {
            return Err(Error::Config(format!(
                "groups {} out of range 1..={}",
                self.groups, self.num_experts
            )));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        if self.router_skew < 0.0 || !self.router_skew.is_finite() {
            return Err(Error::Config("router_skew must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Block group of expert `i`: experts are split into `groups` contiguous
    /// blocks of (nearly) equal size.
    pub fn group_of(&self, i: usize) -> usize {
        i * self.groups / self.num_experts
    }

    /// Rank of expert `i` within its group block (0 = group leader).
    pub fn rank_in_group(&self, i: usize) -> usize {
        let g = self.group_of(i);
        let start = (g * self.num_experts).div_ceil(self.groups);
        i - start
    }
}

// RNG stream ids for the generator.
const STREAM_EXPERT_BASE: u64 = 1;
const STREAM_EXPERT_NOISE: u64 = 2;
const STREAM_ROUTER_DIR: u64 = 3;
const STREAM_ROUTER_NOISE: u64 = 4;
const STREAM_SHARED: u64 = 5;

// Logit gain: scales all router rows, controlling gate sharpness.
const ROUTER_GAIN: f64 = 8.0;
// Relative perturbation of each expert's router direction away from its
// group direction.
const ROUTER_DIR_NOISE: f64 = 0.15;

fn random_expert(rng: &mut CounterRng, d: usize, d_ff: usize) -> ExpertWeights {
    let proj_scale = 1.0 / (d as f64).sqrt();
    let down_scale = 1.0 / (d_ff as f64).sqrt();
    let mut up = vec![0.0; d_ff * d];
    let mut gate = vec![0.0; d_ff * d];
    let mut down = vec![0.0; d * d_ff];
    for v in up.iter_mut().chain(gate.iter_mut()) {
        *v = rng.next_gaussian() * proj_scale;
    }
    for v in down.iter_mut() {
        *v = rng.next_gaussian() * down_scale;
    }
    ExpertWeights {
        w_up: Tensor::new(vec![d_ff, d], up).unwrap(),
        w_gate: Tensor::new(vec![d_ff, d], gate).unwrap(),
        w_down: Tensor::new(vec![d, d_ff], down).unwrap(),
    }
}

fn perturb_expert(base: &ExpertWeights, rng: &mut CounterRng, noise: f64) -> ExpertWeights {
    let d = base.d();
    let d_ff = base.d_ff();
    let proj_scale = noise / (d as f64).sqrt();
    let down_scale = noise / (d_ff as f64).sqrt();
    let jitter = |t: &Tensor, scale: f64, rng: &mut CounterRng| {
        let data = t.data().iter().map(|v| v + rng.next_gaussian() * scale).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    ExpertWeights {
        w_up: jitter(&base.w_up, proj_scale, rng),
        w_gate: jitter(&base.w_gate, proj_scale, rng),
        w_down: jitter(&base.w_down, down_scale, rng),
    }
}

/// Deterministically synthesizes a planted-specialization layer from a seed.
pub fn synth_model(cfg: &SynthConfig, seed: u64) -> Result<MoeLayer> {
    cfg.validate()?;
    let (d, d_ff, k, g) = (cfg.d, cfg.d_ff, cfg.num_experts, cfg.groups);

    let mut base_rng = CounterRng::new(seed, STREAM_EXPERT_BASE);
    let bases: Vec<ExpertWeights> = (0..g).map(|_| random_expert(&mut base_rng, d, d_ff)).collect();

    let mut noise_rng = CounterRng::new(seed, STREAM_EXPERT_NOISE);
    let experts: Vec<ExpertWeights> = (0..k)
        .map(|i| perturb_expert(&bases[cfg.group_of(i)], &mut noise_rng, cfg.noise))
        .collect();

    let mut dir_rng = CounterRng::new(seed, STREAM_ROUTER_DIR);
    let group_dirs: Vec<Vec<f64>> = (0..g)
        .map(|_| {
            let mut v = vec![0.0; d];
            dir_rng.fill_gaussian(&mut v);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut router_rng = CounterRng::new(seed, STREAM_ROUTER_NOISE);
    let mut weight = Tensor::zeros(vec![k, d]);
    for i in 0..k {
        let group = cfg.group_of(i);
        let rank = cfg.rank_in_group(i);
        let rank_factor = (1.0 / (1.0 + rank as f64)).powf(cfg.router_skew);
        let group_factor = (1.0 / (1.0 + group as f64)).powf(0.5 * cfg.router_skew);
        let scale = ROUTER_GAIN * rank_factor * group_factor;
        let mut row: Vec<f64> = group_dirs[group].clone();
        for v in row.iter_mut() {
            *v += ROUTER_DIR_NOISE * router_rng.next_gaussian() / (d as f64).sqrt();
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, v) in row.iter().enumerate() {
            weight.set(i, j, scale * v / norm);
        }
    }

    let mut shared_rng = CounterRng::new(seed, STREAM_SHARED);
    let shared_experts: Vec<ExpertWeights> = (0..cfg.shared_experts)
        .map(|_| random_expert(&mut shared_rng, d, d_ff))
        .collect();

    let layer = MoeLayer {
        router: RouterConfig {
            weight,
            top_k: cfg.top_k,
            gate_mode: cfg.gate_mode,
        },
        experts,
        shared_experts,
    };
    layer.validate()?;
    Ok(layer)
}
