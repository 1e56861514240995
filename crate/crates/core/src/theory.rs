//! Monte-Carlo verification of the compression error theory.
//!
//! Merging two experts with summed gates forces a static convex combination
//! to stand in for the router's input-dependent mixture. With
//! `s = g_i + g_j`, mixing ratio `r`, and expert gap `Δ`, the squared error
//! of the constant-`α` merge is `E[s² (r - α)² ||Δ||²]`; when `s` and `r` are
//! independent it factors into `E[s²] · E[(r - α)²] · ||Δ||²` and is
//! minimized at `α* = E[r]` with value `E[s²] · Var[r] · ||Δ||²`. Pruning
//! expert `j` and handing its gate to `i` instead costs `E[g_j² ||Δ||²]`,
//! which does not involve the policy variability at all. The cluster-level
//! generalization replaces `Var[r]` with the variance of the within-cluster
//! gate-weighted mixture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

const STREAM_PAIR: u64 = 501;
const STREAM_CLUSTER: u64 = 502;

/// Scalar distributions with closed-form moments, so Monte-Carlo estimates
/// can be checked against exact values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalarSampler {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Takes value 1 with probability `p`, else 0.
    Bernoulli { p: f64 },
}

impl ScalarSampler {
    pub fn sample(&self, rng: &mut CounterRng) -> f64 {
        match self {
            ScalarSampler::Constant { value } => *value,
            ScalarSampler::Uniform { lo, hi } => rng.next_range(*lo, *hi),
            ScalarSampler::Bernoulli { p } => {
                if rng.next_f64() < *p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ScalarSampler::Constant { value } => *value,
            ScalarSampler::Uniform { lo, hi } => 0.5 * (lo + hi),
            ScalarSampler::Bernoulli { p } => *p,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            ScalarSampler::Constant { .. } => 0.0,
            ScalarSampler::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            ScalarSampler::Bernoulli { p } => p * (1.0 - p),
        }
    }

    pub fn second_moment(&self) -> f64 {
        self.variance() + self.mean().powi(2)
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match self {
            ScalarSampler::Constant { value } => value.is_finite(),
            ScalarSampler::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ScalarSampler::Bernoulli { p } => (0.0..=1.0).contains(p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampler for {what}: {self:?}")))
        }
    }

    fn within_unit_interval(&self) -> bool {
        match self {
            ScalarSampler::Constant { value } => (0.0..=1.0).contains(value),
            ScalarSampler::Uniform { lo, hi } => *lo >= 0.0 && *hi <= 1.0,
            ScalarSampler::Bernoulli { .. } => true,
        }
    }
}

/// Expert gap specification: a fixed vector or a per-sample Gaussian draw
/// independent of the mixing ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DeltaSpec {
    Fixed { vector: Vec<f64> },
    Gaussian { dim: usize, scale: f64 },
}

impl DeltaSpec {
    /// Draws `||Δ||²` for one sample (constant for the fixed variant).
    fn norm_sq(&self, rng: &mut CounterRng) -> f64 {
        match self {
            DeltaSpec::Fixed { vector } => vector.iter().map(|v| v * v).sum(),
            DeltaSpec::Gaussian { dim, scale } => {
                let mut acc = 0.0;
                for _ in 0..*dim {
                    let g = rng.next_gaussian() * scale;
                    acc += g * g;
                }
                acc
            }
        }
    }

    /// Exact `E[||Δ||²]`.
    pub fn mean_norm_sq(&self) -> f64 {
        match self {
            DeltaSpec::Fixed { vector } => vector.iter().map(|v| v * v).sum(),
            DeltaSpec::Gaussian { dim, scale } => *dim as f64 * scale * scale,
        }
    }
}

/// A two-expert mixing scenario: samplers for the summed gate `s`, the
/// mixing ratio `r`, the expert gap, and optionally a separate sampler for
/// the gate of a prune candidate. When `gj` is absent the pruned gate is
/// derived from the same draw as `g_j = (1 - r) * s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixScenario {
    pub s: ScalarSampler,
    pub r: ScalarSampler,
    pub delta: DeltaSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gj: Option<ScalarSampler>,
    pub n_samples: usize,
    pub seed: u64,
}

impl MixScenario {
    pub fn validate(&self) -> Result<()> {
        self.s.validate("s")?;
        self.r.validate("r")?;
        if let Some(gj) = &self.gj {
            gj.validate("gj")?;
        }
        if !self.r.within_unit_interval() {
            return Err(Error::Config("r sampler must stay within [0, 1]".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Domain("n_samples must be positive".into()));
        }
        Ok(())
    }

    /// Draws the full sample table: `(s, r, ||Δ||², g_j)` per row. One
    /// sequential stream keeps draws identical across estimator calls.
    fn draw(&self) -> Vec<(f64, f64, f64, f64)> {
        let mut rng = CounterRng::new(self.seed, STREAM_PAIR);
        let mut rows = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            let s = self.s.sample(&mut rng);
            let r = self.r.sample(&mut rng);
            let nsq = self.delta.norm_sq(&mut rng);
            let gj = match &self.gj {
                Some(sampler) => sampler.sample(&mut rng),
                None => (1.0 - r) * s,
            };
            rows.push((s, r, nsq, gj));
        }
        rows
    }
}

/// Monte-Carlo estimate of the merged-pair error `E[s² (r - α)² ||Δ||²]` at a
/// fixed mixing weight `α`.
pub fn merge_error_mc(sc: &MixScenario, alpha: f64) -> Result<f64> {
    sc.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let rows = sc.draw();
    Ok(mean_merge_error(&rows, alpha))
}

fn mean_merge_error(rows: &[(f64, f64, f64, f64)], alpha: f64) -> f64 {
    let mut acc = 0.0;
    for &(s, r, nsq, _) in rows {
        let e = s * (r - alpha);
        acc += e * e * nsq;
    }
    acc / rows.len() as f64
}

/// Estimates the optimal static mixing weight `α* = mean(r)` and the error
/// at it, then confirms by a grid scan over `α ∈ {0, 0.01, ..., 1}` that no
/// grid point does meaningfully better.
pub fn optimal_alpha(sc: &MixScenario) -> Result<(f64, f64)> {
    let report = theory_report(sc)?;
    Ok((report.alpha_star_empirical, report.empirical_min_error))
}

/// Monte-Carlo estimate of the pruning error `E[g_j² ||Δ||²]`.
pub fn prune_error_mc(sc: &MixScenario) -> Result<f64> {
    sc.validate()?;
    let rows = sc.draw();
    let mut acc = 0.0;
    for &(_, _, nsq, gj) in &rows {
        acc += gj * gj * nsq;
    }
    Ok(acc / rows.len() as f64)
}

/// Full verification record for a mixing scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Error of the constant-α merge at the empirical α*.
    pub empirical_min_error: f64,
    /// Closed form `E[s²] · Var[r] · E[||Δ||²]` from the sampler moments
    /// (exact under independence of s, r, and Δ).
    pub predicted_error: f64,
    /// Sample mean of `r`.
    pub alpha_star_empirical: f64,
    /// Exact `E[r]`.
    pub alpha_star_predicted: f64,
    /// `|empirical - predicted| / predicted` (0 when the prediction is 0).
    pub relative_gap: f64,
    /// Best α on the 0.01 grid (same sample set as the estimate).
    pub grid_argmin: f64,
    pub grid_min_error: f64,
    /// Pruning error on the same draws.
    pub prune_error: f64,
    /// Exact `E[g_j²] · E[||Δ||²]` when `gj` is an explicit sampler.
    pub prune_error_predicted: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Runs every estimator on one shared sample table.
pub fn theory_report(sc: &MixScenario) -> Result<TheoryReport> {
    sc.validate()?;
    let rows = sc.draw();
    let n = rows.len() as f64;
    let alpha_star = rows.iter().map(|&(_, r, _, _)| r).sum::<f64>() / n;
    let empirical_min_error = mean_merge_error(&rows, alpha_star);

    let mut grid_argmin = 0.0;
    let mut grid_min_error = f64::INFINITY;
    for step in 0..=100 {
        let alpha = step as f64 / 100.0;
        let err = mean_merge_error(&rows, alpha);
        if err < grid_min_error {
            grid_min_error = err;
            grid_argmin = alpha;
        }
    }

    let mut prune_error = 0.0;
    for &(_, _, nsq, gj) in &rows {
        prune_error += gj * gj * nsq / n;
    }

    let predicted_error = sc.s.second_moment() * sc.r.variance() * sc.delta.mean_norm_sq();
    let relative_gap = if predicted_error == 0.0 {
        0.0
    } else {
        (empirical_min_error - predicted_error).abs() / predicted_error
    };
    Ok(TheoryReport {
        empirical_min_error,
        predicted_error,
        alpha_star_empirical: alpha_star,
        alpha_star_predicted: sc.r.mean(),
        relative_gap,
        grid_argmin,
        grid_min_error,
        prune_error,
        prune_error_predicted: sc
            .gj
            .as_ref()
            .map(|gj| gj.second_moment() * sc.delta.mean_norm_sq()),
        n_samples: sc.n_samples,
        seed: sc.seed,
    })
}

/// One member of a merged cluster: a constant output vector or a linear map
/// applied to a standard-Gaussian input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExpertSpec {
    Constant { vector: Vec<f64> },
    Linear { matrix: Tensor },
}

impl ExpertSpec {
    fn out_dim(&self) -> usize {
        match self {
            ExpertSpec::Constant { vector } => vector.len(),
            ExpertSpec::Linear { matrix } => matrix.rows(),
        }
    }

    fn in_dim(&self) -> usize {
        match self {
            ExpertSpec::Constant { .. } => 0,
            ExpertSpec::Linear { matrix } => matrix.cols(),
        }
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ExpertSpec::Constant { vector } => vector.clone(),
            ExpertSpec::Linear { matrix } => matrix.matvec(x).unwrap(),
        }
    }
}

/// A cluster merged into one expert: per-sample gates are a total-gate draw
/// multiplied by Dirichlet mixing weights, independent of the expert inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScenario {
    pub total_gate: ScalarSampler,
    /// Dirichlet concentration per member.
    pub mix_alphas: Vec<f64>,
    pub experts: Vec<ExpertSpec>,
    pub n_samples: usize,
    pub seed: u64,
}

impl ClusterScenario {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Domain("cluster needs at least one member".into()));
        }
        if self.mix_alphas.len() != self.experts.len() {
            return Err(Error::Config(
                "mix_alphas and experts must have the same length".into(),
            ));
        }
        if self.mix_alphas.iter().any(|a| *a <= 0.0 || !a.is_finite()) {
            return Err(Error::Config("Dirichlet concentrations must be positive".into()));
        }
        self.total_gate.validate("total_gate")?;
        let dim = self.experts[0].out_dim();
        if self.experts.iter().any(|e| e.out_dim() != dim) {
            return Err(Error::Dimension("cluster members disagree on output dim".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Domain("n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Cluster-error verification: the factored estimate and the direct grid
/// minimum over static simplex weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalReport {
    /// `E[(Σ g)²] · Var_x[Σ w_j f_j]` estimated by Monte Carlo.
    pub factored_error: f64,
    /// Minimum over the 0.05-step simplex grid of the direct error
    /// `E[||Σ g_j f_j - (Σ g) Σ α_j f_j||²]`.
    pub grid_min_error: f64,
    pub grid_argmin: Vec<f64>,
    /// Samples skipped because the total gate was zero.
    pub skipped_samples: usize,
    pub n_samples: usize,
}

/// Marsaglia-Tsang gamma draw (shape >= 1 via boosting), deterministic given
/// the stream state.
fn gamma_sample(rng: &mut CounterRng, shape: f64) -> f64 {
    if shape < 1.0 {
        let boost = gamma_sample(rng, shape + 1.0);
        let u: f64 = rng.next_f64().max(f64::MIN_POSITIVE);
        return boost * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let g = rng.next_gaussian();
        let v = (1.0 + c * g).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.next_f64().max(f64::MIN_POSITIVE);
        if u.ln() < 0.5 * g * g + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

fn dirichlet_sample(rng: &mut CounterRng, alphas: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alphas.iter().map(|&a| gamma_sample(rng, a)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

/// Estimates the irreducible error of merging a whole cluster and
/// cross-checks the factored form against a direct simplex grid search for
/// the best static mixture.
pub fn hierarchical_error_mc(sc: &ClusterScenario) -> Result<HierarchicalReport> {
    sc.validate()?;
    let members = sc.experts.len();
    let out_dim = sc.experts[0].out_dim();
    let in_dim = sc.experts.iter().map(ExpertSpec::in_dim).max().unwrap();

    let mut rng = CounterRng::new(sc.seed, STREAM_CLUSTER);
    // Per-sample records: total gate, mixing weights, member outputs.
    let mut totals = Vec::with_capacity(sc.n_samples);
    let mut mixes = Vec::with_capacity(sc.n_samples);
    let mut outputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sc.n_samples);
    let mut skipped = 0usize;
    for _ in 0..sc.n_samples {
        let total = sc.total_gate.sample(&mut rng);
        let w = dirichlet_sample(&mut rng, &sc.mix_alphas);
        let mut x = vec![0.0; in_dim];
        rng.fill_gaussian(&mut x);
        if total == 0.0 {
            skipped += 1;
            continue;
        }
        totals.push(total);
        mixes.push(w);
        outputs.push(sc.experts.iter().map(|e| e.eval(&x)).collect());
    }
    if totals.is_empty() {
        return Err(Error::Domain("every sample had zero total gate".into()));
    }
    let n = totals.len() as f64;

    // Factored form: E[(Σ g)²] * Var_x[Σ w_j f_j], with the variance of a
    // vector taken as E||m - E m||².
    let mean_sq_total = totals.iter().map(|t| t * t).sum::<f64>() / n;
    let mut mean_mix = vec![0.0; out_dim];
    let mut mean_sq_mix = 0.0;
    let mut mixtures: Vec<Vec<f64>> = Vec::with_capacity(totals.len());
    for (w, outs) in mixes.iter().zip(&outputs) {
        let mut m = vec![0.0; out_dim];
        for (j, out) in outs.iter().enumerate() {
            for (acc, v) in m.iter_mut().zip(out) {
                *acc += w[j] * v;
            }
        }
        for (acc, v) in mean_mix.iter_mut().zip(&m) {
            *acc += v / n;
        }
        mean_sq_mix += m.iter().map(|v| v * v).sum::<f64>() / n;
        mixtures.push(m);
    }
    let var_mix = mean_sq_mix - mean_mix.iter().map(|v| v * v).sum::<f64>();
    let factored_error = mean_sq_total * var_mix.max(0.0);

    // Direct route: best static simplex combination on a 0.05-step grid.
    let mut grid_min_error = f64::INFINITY;
    let mut grid_argmin = vec![0.0; members];
    let mut point = vec![0usize; members];
    enumerate_simplex_grid(members, 20, &mut point, 0, 20, &mut |units| {
        let alphas: Vec<f64> = units.iter().map(|&u| u as f64 / 20.0).collect();
        let mut acc = 0.0;
        for ((total, mixture), outs) in totals.iter().zip(&mixtures).zip(&outputs) {
            // ||Σ g_j f_j - (Σ g) Σ α_j f_j||² = (Σ g)² ||m - f̃||²
            let mut err_sq = 0.0;
            for c in 0..out_dim {
                let mut static_mix = 0.0;
                for (j, out) in outs.iter().enumerate() {
                    static_mix += alphas[j] * out[c];
                }
                let diff = mixture[c] - static_mix;
                err_sq += diff * diff;
            }
            acc += total * total * err_sq / n;
        }
        if acc < grid_min_error {
            grid_min_error = acc;
            grid_argmin = alphas;
        }
    });

    Ok(HierarchicalReport {
        factored_error,
        grid_min_error,
        grid_argmin,
        skipped_samples: skipped,
        n_samples: sc.n_samples,
    })
}

/// Visits every composition of `total` units into `members` parts (the
/// simplex grid with step `1/total`).
fn enumerate_simplex_grid(
    members: usize,
    total: usize,
    point: &mut Vec<usize>,
    idx: usize,
    remaining: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if idx == members - 1 {
        point[idx] = remaining;
        visit(point);
        return;
    }
    for units in 0..=remaining {
        point[idx] = units;
        enumerate_simplex_grid(members, total, point, idx + 1, remaining - units, visit);
    }
}
