//! Token-choice Top-K gating and expert activation bookkeeping.
//!
//! A router scores every token against every expert with a bias-free linear
//! map, normalizes the scores with a softmax and keeps the K largest
//! probabilities per token. Gate weights are the kept probabilities
//! themselves; by default they are not renormalized.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{uniform_tensor, Ctx, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Router {
    pub weight: ParamId,
    pub d_in: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub renormalize: bool,
}

impl Router {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        n_experts: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if top_k == 0 || top_k > n_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={n_experts}, got {top_k}"
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.w"),
            uniform_tensor(&[d_in, n_experts], bound, rng),
            true,
        );
        Ok(Self {
            weight,
            d_in,
            n_experts,
            top_k,
            renormalize: false,
        })
    }
}

/// Routing outcome for a block of `T` tokens.
#[derive(Clone, Debug)]
pub struct GateDecision {
    /// `[T×N]` raw router scores.
    pub logits: Var,
    /// `[T×N]` full softmax.
    pub probs: Var,
    /// `[T×N]`, K nonzeros per row.
    pub weights: Var,
    /// Per token, the K chosen experts by descending probability.
    pub indices: Vec<Vec<usize>>,
    pub n_experts: usize,
    pub top_k: usize,
}

impl GateDecision {
    pub fn tokens(&self) -> usize {
        self.indices.len()
    }
}

/// Arg-top-K of one probability row. Ties go to the lower expert id.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn compute_gates(ctx: &mut Ctx, tokens: Var, router: &Router) -> Result<GateDecision> {
    let shape = ctx.tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[1] != router.d_in {
        return Err(shape_err("compute_gates", &shape, &[router.d_in, router.n_experts]));
    }
    let w = ctx.p(router.weight);
    let logits = ctx.tape.matmul(tokens, w)?;
    let probs = ctx.tape.softmax_rows(logits)?;
    let (t, n) = (shape[0], router.n_experts);
    let p = ctx.value(probs);
    let indices: Vec<Vec<usize>> = (0..t)
        .map(|r| top_k_indices(p.row(r), router.top_k))
        .collect();
    let mut mask = vec![0.0; t * n];
    for (r, sel) in indices.iter().enumerate() {
        for &e in sel {
            mask[r * n + e] = 1.0;
        }
    }
    let mask = ctx.constant(Tensor::new(vec![t, n], mask)?);
    // The selection mask is a constant: gradient reaches W only through the
    // surviving softmax entries.
    let masked = ctx.tape.mul(probs, mask)?;
    let weights = if router.renormalize {
        let sums = ctx.tape.row_sum(masked)?;
        let inv = ctx.tape.recip(sums);
        ctx.tape.row_scale(masked, inv)?
    } else {
        masked
    };
    Ok(GateDecision {
        logits,
        probs,
        weights,
        indices,
        n_experts: n,
        top_k: router.top_k,
    })
}

/// Per-expert counters of how often each expert was picked as 1st, 2nd, ...
/// K-th choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationStats {
    pub n_experts: usize,
    pub top_k: usize,
    /// `counts[j][i]`: tokens that chose expert `i` as their `(j+1)`-th choice.
    pub counts: Vec<Vec<u64>>,
    pub total_tokens: u64,
}

impl ActivationStats {
    pub fn new(n_experts: usize, top_k: usize) -> Self {
        Self {
            n_experts,
            top_k,
            counts: vec![vec![0; n_experts]; top_k],
            total_tokens: 0,
        }
    }

    pub fn record(&mut self, decision: &GateDecision) -> Result<()> {
        if decision.n_experts != self.n_experts || decision.top_k != self.top_k {
            return Err(shape_err(
                "record_stats",
                &[self.n_experts, self.top_k],
                &[decision.n_experts, decision.top_k],
            ));
        }
        self.record_indices(&decision.indices);
        Ok(())
    }

    pub(crate) fn record_indices(&mut self, indices: &[Vec<usize>]) {
        for sel in indices {
            for (j, &e) in sel.iter().enumerate() {
                self.counts[j][e] += 1;
            }
        }
        self.total_tokens += indices.len() as u64;
    }

    /// Adds another shard's counters.
    pub fn merge(&mut self, other: &ActivationStats) -> Result<()> {
        if other.n_experts != self.n_experts || other.top_k != self.top_k {
            return Err(shape_err(
                "merge_stats",
                &[self.n_experts, self.top_k],
                &[other.n_experts, other.top_k],
            ));
        }
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
        self.total_tokens += other.total_tokens;
        Ok(())
    }

    pub fn report(&self) -> Result<StatsReport> {
        if self.total_tokens == 0 {
            return Err(Error::EmptyStats);
        }
        let total = self.total_tokens as f64;
        let choice_frac: Vec<Vec<f64>> = self
            .counts
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / total).collect())
            .collect();
        let either: Vec<f64> = (0..self.n_experts)
            .map(|i| self.counts.iter().map(|row| row[i]).sum::<u64>() as f64 / total)
            .collect();
        let normalized = either.iter().map(|p| p / self.top_k as f64).collect();
        Ok(StatsReport {
            top_k: self.top_k,
            choice_frac,
            either,
            normalized,
        })
    }
}

/// Fractions derived from [`ActivationStats`].
#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub top_k: usize,
    /// `choice_frac[j][i]`: share of tokens choosing expert `i` as `(j+1)`-th.
    pub choice_frac: Vec<Vec<f64>>,
    /// Share of tokens routed to expert `i` in any slot; sums to K.
    pub either: Vec<f64>,
    /// `either / K`; sums to 1.
    pub normalized: Vec<f64>,
}

impl StatsReport {
    /// `max / min` of the either-choice proportions (infinite if an expert
    /// was never used).
    pub fn imbalance_ratio(&self) -> f64 {
        let max = self.either.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.either.iter().copied().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

pub const STATS_CSV_HEADER: &str =
    "router,expert_id,first_choice_frac,second_choice_frac,either_choice_frac";

/// Rows for `routing_stats.csv`. The second-choice column is empty when
/// K = 1; deeper choices (K > 2) are folded into the either-choice column.
pub fn stats_csv_rows(router: &str, report: &StatsReport) -> String {
    let mut out = String::new();
    for (i, either) in report.either.iter().enumerate() {
        let first = report.choice_frac[0][i];
        let second = report
            .choice_frac
            .get(1)
            .map(|r| r[i].to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "{router},{i},{first},{second},{either}");
    }
    out
}
