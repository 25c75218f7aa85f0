//! Training objectives: next-token NLL, load balancing, router z-loss and
//! their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Ctx;
use crate::routing::GateDecision;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_b: f64,
    pub alpha_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_b: 0.01,
            alpha_z: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_b >= 0.0 && self.alpha_z >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha_b={} alpha_z={}",
                self.alpha_b, self.alpha_z
            )));
        }
        Ok(())
    }
}

/// How auxiliary losses from several routers are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxAggregation {
    #[default]
    Mean,
    Sum,
}

/// Per-expert share of the K·T assignment slots.
pub fn dispatch_fractions(decision: &GateDecision) -> Vec<f64> {
    let slots = (decision.top_k * decision.tokens()) as f64;
    let mut f = vec![0.0; decision.n_experts];
    for sel in &decision.indices {
        for &e in sel {
            f[e] += 1.0;
        }
    }
    f.iter_mut().for_each(|v| *v /= slots);
    f
}

/// `L_b = N · Σ_i f_i · P_i` with `f` the dispatch fractions (held constant)
/// and `P` the mean router probability per expert.
pub fn load_balance_loss(ctx: &mut Ctx, decision: &GateDecision) -> Result<Var> {
    let t = decision.tokens();
    if t == 0 {
        return Err(Error::Empty("load_balance_loss"));
    }
    let n = decision.n_experts;
    let f = dispatch_fractions(decision);
    let avg = ctx.constant(Tensor::full(&[1, t], 1.0 / t as f64));
    let mean_probs = ctx.tape.matmul(avg, decision.probs)?;
    let f = ctx.constant(Tensor::new(vec![n, 1], f)?);
    let dot = ctx.tape.matmul(mean_probs, f)?;
    let dot = ctx.tape.sum(dot);
    Ok(ctx.tape.scale(dot, n as f64))
}

/// `L_z = mean_t (log Σ_i exp logits_{t,i})²`
pub fn router_z_loss(ctx: &mut Ctx, decision: &GateDecision) -> Result<Var> {
    if decision.tokens() == 0 {
        return Err(Error::Empty("router_z_loss"));
    }
    let lse = ctx.tape.log_sum_exp_rows(decision.logits)?;
    let sq = ctx.tape.mul(lse, lse)?;
    Ok(ctx.tape.mean(sq))
}

/// Mean over positions of `−log softmax(logits_l)[y_l]`.
pub fn next_token_nll(ctx: &mut Ctx, logits: Var, targets: &[usize]) -> Result<Var> {
    let weights = vec![1.0 / targets.len().max(1) as f64; targets.len()];
    weighted_nll(ctx, logits, targets, &weights)
}

/// `−Σ_l w_l · log softmax(logits_l)[y_l]`; lets a packed batch average
/// per sample first and across samples second.
pub fn weighted_nll(ctx: &mut Ctx, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Empty("next_token_nll targets"));
    }
    let shape = ctx.tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || weights.len() != targets.len() {
        return Err(crate::error::shape_err("next_token_nll", &shape, &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::Contract(format!(
            "target id {bad} out of vocabulary of size {}",
            shape[1]
        )));
    }
    let logp = ctx.tape.log_softmax_rows(logits)?;
    let picks: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let picked = ctx.tape.pick(logp, &picks)?;
    let w = ctx.constant(Tensor::vector(weights.to_vec()));
    let weighted = ctx.tape.mul(picked, w)?;
    let s = ctx.tape.sum(weighted);
    Ok(ctx.tape.scale(s, -1.0))
}

/// Load-balancing and z-losses over all routers, aggregated per `agg`.
pub fn aux_losses(
    ctx: &mut Ctx,
    decisions: &[&GateDecision],
    agg: AuxAggregation,
) -> Result<(Var, Var)> {
    if decisions.is_empty() {
        return Err(Error::Empty("aux_losses decisions"));
    }
    let mut lb = Vec::with_capacity(decisions.len());
    let mut lz = Vec::with_capacity(decisions.len());
    for d in decisions {
        lb.push(load_balance_loss(ctx, d)?);
        lz.push(router_z_loss(ctx, d)?);
    }
    let scale = match agg {
        AuxAggregation::Mean => 1.0 / decisions.len() as f64,
        AuxAggregation::Sum => 1.0,
    };
    let mut combine = |parts: Vec<Var>| -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = ctx.tape.add(acc, p)?;
        }
        Ok(if parts.len() > 1 { ctx.tape.scale(acc, scale) } else { acc })
    };
    Ok((combine(lb)?, combine(lz)?))
}

/// `nll + α_b · lb + α_z · lz`
pub fn total_loss(ctx: &mut Ctx, nll: Var, lb: Var, lz: Var, w: LossWeights) -> Result<Var> {
    let b = ctx.tape.scale(lb, w.alpha_b);
    let z = ctx.tape.scale(lz, w.alpha_z);
    let s = ctx.tape.add(nll, b)?;
    ctx.tape.add(s, z)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(nll: f64, lb: f64, lz: f64, w: LossWeights) -> f64 {
    nll + w.alpha_b * lb + w.alpha_z * lz
}

/// Loss components of one step, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub lb: f64,
    pub lz: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.lb.is_finite() && self.lz.is_finite() && self.total.is_finite()
    }
}
