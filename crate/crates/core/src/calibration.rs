//! Streaming calibration: run tokens through a layer and accumulate the
//! per-expert statistics every compression method consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{GateMode, Model};
use crate::rng::CounterRng;
use crate::tensor::{l2_norm, Tensor};

const STREAM_TOKENS: u64 = 101;

/// A finite stream of `d`-dimensional tokens: either packed vectors loaded
/// from a file or a seeded synthetic standard-Gaussian generator.
///
/// Tokens are addressable by index, so shards of the stream can be calibrated
/// independently and combined with [`merge_stats`].
#[derive(Debug, Clone)]
pub struct TokenStream {
    d: usize,
    count: usize,
    kind: StreamKind,
}

#[derive(Debug, Clone)]
enum StreamKind {
    Synthetic { seed: u64 },
    Packed { data: Vec<f64> },
}

impl TokenStream {
    /// Standard Gaussian tokens, fully determined by `seed`. Token `i` draws
    /// from its own counter sub-stream, independent of traversal order.
    pub fn synthetic(d: usize, count: usize, seed: u64) -> TokenStream {
        TokenStream {
            d,
            count,
            kind: StreamKind::Synthetic { seed },
        }
    }

    /// Wraps a `count x d` matrix of packed token vectors.
    pub fn from_matrix(tokens: &Tensor) -> Result<TokenStream> {
        if !tokens.is_matrix() {
            return Err(Error::Dimension("token tensor must be 2-D".into()));
        }
        Ok(TokenStream {
            d: tokens.cols(),
            count: tokens.rows(),
            kind: StreamKind::Packed {
                data: tokens.data().to_vec(),
            },
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn token(&self, i: usize) -> Vec<f64> {
        debug_assert!(i < self.count);
        match &self.kind {
            StreamKind::Synthetic { seed } => {
                let mut rng = CounterRng::new(*seed, STREAM_TOKENS + i as u64);
                let mut x = vec![0.0; self.d];
                rng.fill_gaussian(&mut x);
                x
            }
            StreamKind::Packed { data } => data[i * self.d..(i + 1) * self.d].to_vec(),
        }
    }

    /// Materializes the stream as a `count x d` matrix (for writing to disk).
    pub fn to_matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.count * self.d);
        for i in 0..self.count {
            data.extend_from_slice(&self.token(i));
        }
        Tensor::new(vec![self.count, self.d], data).unwrap()
    }

    /// The contiguous sub-stream `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<TokenStream> {
        if start + len > self.count {
            return Err(Error::Domain(format!(
                "slice {start}..{} exceeds stream of {} tokens",
                start + len,
                self.count
            )));
        }
        let mut data = Vec::with_capacity(len * self.d);
        for i in start..start + len {
            data.extend_from_slice(&self.token(i));
        }
        Ok(TokenStream {
            d: self.d,
            count: len,
            kind: StreamKind::Packed { data },
        })
    }
}

/// Mergeable per-expert streaming statistics.
///
/// * `nu[i]` — tokens on which expert `i` was active;
/// * `sum_gate_norm[i]` — Σ over active tokens of `g_i(x) * ||f_i(x)||`;
/// * `sum_norm[i]` — Σ over active tokens of `||f_i(x)||`;
/// * `act_sum[i]` — Σ over *all* tokens of `f_i(x)` (absent in active-only
///   calibration);
/// * `act_sum_active[i]` — Σ over active tokens of `f_i(x)`;
/// * `gate_trace[i]` — the gate applied to expert `i` on every token, zero
///   where inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub k: usize,
    pub d: usize,
    pub gate_mode: GateMode,
    pub token_count: usize,
    pub nu: Vec<u64>,
    pub sum_gate_norm: Vec<f64>,
    pub sum_norm: Vec<f64>,
    pub act_sum: Option<Vec<Vec<f64>>>,
    pub act_sum_active: Vec<Vec<f64>>,
    pub gate_trace: Vec<Vec<f64>>,
}

impl CalibStats {
    pub fn empty(k: usize, d: usize, gate_mode: GateMode, active_only: bool) -> CalibStats {
        CalibStats {
            k,
            d,
            gate_mode,
            token_count: 0,
            nu: vec![0; k],
            sum_gate_norm: vec![0.0; k],
            sum_norm: vec![0.0; k],
            act_sum: if active_only {
                None
            } else {
                Some(vec![vec![0.0; d]; k])
            },
            act_sum_active: vec![vec![0.0; d]; k],
            gate_trace: vec![Vec::new(); k],
        }
    }

    /// Mean activation of each expert over the tokens it was active on
    /// (zero row for never-active experts). Feeds the functional-subspace
    /// projection.
    pub fn mean_act_active(&self) -> Tensor {
        let mut out = Tensor::zeros(vec![self.k, self.d]);
        for i in 0..self.k {
            if self.nu[i] == 0 {
                continue;
            }
            for j in 0..self.d {
                out.set(i, j, self.act_sum_active[i][j] / self.nu[i] as f64);
            }
        }
        out
    }

    /// Representative vectors `A_i`: each expert's mean activation across
    /// every calibration token.
    pub fn representative_vectors(&self) -> Result<Tensor> {
        if self.token_count == 0 {
            return Err(Error::Domain(
                "representative vectors need a non-empty calibration run".into(),
            ));
        }
        let sums = self.act_sum.as_ref().ok_or_else(|| {
            Error::Domain(
                "stats were collected active-only; representative vectors unavailable".into(),
            )
        })?;
        let mut out = Tensor::zeros(vec![self.k, self.d]);
        for i in 0..self.k {
            for j in 0..self.d {
                out.set(i, j, sums[i][j] / self.token_count as f64);
            }
        }
        Ok(out)
    }

    /// Restriction to a subset of experts, preserving per-token traces.
    /// Surviving experts keep exactly the statistics they had in `self`;
    /// this realizes the coordinate-subspace view of pruning, whose surviving
    /// experts are unchanged functions.
    pub fn restrict(&self, keep: &[usize]) -> Result<CalibStats> {
        for &i in keep {
            if i >= self.k {
                return Err(Error::Domain(format!("expert index {i} out of range")));
            }
        }
        Ok(CalibStats {
            k: keep.len(),
            d: self.d,
            gate_mode: self.gate_mode,
            token_count: self.token_count,
            nu: keep.iter().map(|&i| self.nu[i]).collect(),
            sum_gate_norm: keep.iter().map(|&i| self.sum_gate_norm[i]).collect(),
            sum_norm: keep.iter().map(|&i| self.sum_norm[i]).collect(),
            act_sum: self
                .act_sum
                .as_ref()
                .map(|s| keep.iter().map(|&i| s[i].clone()).collect()),
            act_sum_active: keep.iter().map(|&i| self.act_sum_active[i].clone()).collect(),
            gate_trace: keep.iter().map(|&i| self.gate_trace[i].clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CalibOptions {
    /// Skip the all-token activation sums. Pruning criteria only need
    /// active-token statistics, so pruning-only runs can avoid evaluating
    /// every expert on every token.
    pub active_only: bool,
}

/// Runs every token through the model and accumulates [`CalibStats`].
///
/// Unless `active_only` is set, every expert is evaluated on every token so
/// the all-token activation means are exact.
pub fn calibrate_with<M: Model>(
    model: &M,
    stream: &TokenStream,
    opts: CalibOptions,
) -> Result<CalibStats> {
    if stream.d() != model.d() {
        return Err(Error::Dimension(format!(
            "stream dimension {} does not match model dimension {}",
            stream.d(),
            model.d()
        )));
    }
    if stream.count() == 0 {
        return Err(Error::Domain("empty calibration stream".into()));
    }
    let k = model.num_experts();
    let mut stats = CalibStats::empty(k, model.d(), model.gate_mode(), opts.active_only);
    stats.token_count = stream.count();
    for i in 0..k {
        stats.gate_trace[i] = vec![0.0; stream.count()];
    }
    for t in 0..stream.count() {
        let x = stream.token(t);
        let gates = model.route(&x)?;
        for i in 0..k {
            let active = gates.active.binary_search(&i).is_ok();
            let need_output = active || !opts.active_only;
            if !need_output {
                continue;
            }
            let f = model.expert_output(i, &x)?;
            if let Some(sums) = stats.act_sum.as_mut() {
                for (acc, v) in sums[i].iter_mut().zip(&f) {
                    *acc += v;
                }
            }
            if active {
                let g = gates.gates[i];
                let norm = l2_norm(&f);
                stats.nu[i] += 1;
                stats.sum_gate_norm[i] += g * norm;
                stats.sum_norm[i] += norm;
                stats.gate_trace[i][t] = g;
                for (acc, v) in stats.act_sum_active[i].iter_mut().zip(&f) {
                    *acc += v;
                }
            }
        }
    }
    Ok(stats)
}

/// [`calibrate_with`] under default options (all experts evaluated).
pub fn calibrate<M: Model>(model: &M, stream: &TokenStream) -> Result<CalibStats> {
    calibrate_with(model, stream, CalibOptions::default())
}

/// Combines statistics from two shards of one stream. Counters and sums add;
/// gate traces concatenate in argument order.
pub fn merge_stats(a: &CalibStats, b: &CalibStats) -> Result<CalibStats> {
    if a.k != b.k || a.d != b.d {
        return Err(Error::Domain(format!(
            "cannot merge stats for ({}, {}) with ({}, {})",
            a.k, a.d, b.k, b.d
        )));
    }
    if a.gate_mode != b.gate_mode {
        return Err(Error::Domain("cannot merge stats from different gate modes".into()));
    }
    if a.act_sum.is_some() != b.act_sum.is_some() {
        return Err(Error::Domain(
            "cannot merge active-only stats with full stats".into(),
        ));
    }
    let add_vecs = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .zip(y)
            .map(|(xa, ya)| xa.iter().zip(ya).map(|(p, q)| p + q).collect())
            .collect()
    };
    Ok(CalibStats {
        k: a.k,
        d: a.d,
        gate_mode: a.gate_mode,
        token_count: a.token_count + b.token_count,
        nu: a.nu.iter().zip(&b.nu).map(|(x, y)| x + y).collect(),
        sum_gate_norm: a
            .sum_gate_norm
            .iter()
            .zip(&b.sum_gate_norm)
            .map(|(x, y)| x + y)
            .collect(),
        sum_norm: a
            .sum_norm
            .iter()
            .zip(&b.sum_norm)
            .map(|(x, y)| x + y)
            .collect(),
        act_sum: match (&a.act_sum, &b.act_sum) {
            (Some(x), Some(y)) => Some(add_vecs(x, y)),
            _ => None,
        },
        act_sum_active: add_vecs(&a.act_sum_active, &b.act_sum_active),
        gate_trace: a
            .gate_trace
            .iter()
            .zip(&b.gate_trace)
            .map(|(x, y)| {
                let mut row = x.clone();
                row.extend_from_slice(y);
                row
            })
            .collect(),
    })
}

/// Representative vectors as a free function, mirroring the method.
pub fn representative_vectors(stats: &CalibStats) -> Result<Tensor> {
    stats.representative_vectors()
}
