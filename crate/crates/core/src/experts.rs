//! Two-layer MLP expert projectors and the sparse gate-weighted combination.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{uniform_tensor, Ctx, ParamId, ParamStore};
use crate::routing::GateDecision;
use crate::seed::{rng, sub_seed};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct ExpertMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl ExpertMlp {
    /// Uniform init in `±1/√fan_in` per layer, zero biases.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng(seed);
        let w1 = uniform_tensor(&[d_in, d_hidden], 1.0 / (d_in as f64).sqrt(), &mut r);
        let w2 = uniform_tensor(&[d_hidden, d_out], 1.0 / (d_hidden as f64).sqrt(), &mut r);
        Self {
            w1: store.add(format!("{name}.w1"), w1, true),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[d_hidden]), true),
            w2: store.add(format!("{name}.w2"), w2, true),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[d_out]), true),
            d_in,
            d_hidden,
            d_out,
        }
    }

    pub fn param_count(&self) -> usize {
        expert_param_count(self.d_in, self.d_hidden, self.d_out)
    }

    /// `GELU(x·W1 + b1)·W2 + b2`
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var) -> Result<Var> {
        let shape = ctx.tape.shape(tokens);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(shape_err("expert_forward", shape, &[self.d_in, self.d_hidden]));
        }
        let (w1, b1, w2, b2) = (ctx.p(self.w1), ctx.p(self.b1), ctx.p(self.w2), ctx.p(self.b2));
        let h = ctx.tape.matmul(tokens, w1)?;
        let h = ctx.tape.add_bias(h, b1)?;
        let h = ctx.tape.gelu(h);
        let o = ctx.tape.matmul(h, w2)?;
        ctx.tape.add_bias(o, b2)
    }
}

pub fn expert_param_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
    d_in * d_hidden + d_hidden + d_hidden * d_out + d_out
}

#[derive(Clone, Debug)]
pub struct ExpertPool {
    pub experts: Vec<ExpertMlp>,
}

impl ExpertPool {
    /// `n` experts, each seeded independently from `seed`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let base: u64 = rng.random();
        let experts = (0..n)
            .map(|i| {
                ExpertMlp::new(
                    store,
                    &format!("{name}.expert{i}"),
                    d_in,
                    d_hidden,
                    d_out,
                    sub_seed(base, i as u64),
                )
            })
            .collect();
        Self { experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].d_out
    }
}

/// Output of [`pool_combine`].
#[derive(Clone, Debug)]
pub struct Combined {
    pub output: Var,
    /// Number of (token, expert) evaluations performed.
    pub evaluations: usize,
}

/// `z_t = Σ_i w_{t,i} · E_i(x_t)`, evaluating each expert only on the tokens
/// routed to it.
pub fn pool_combine(
    ctx: &mut Ctx,
    pool: &ExpertPool,
    tokens: Var,
    decision: &GateDecision,
) -> Result<Combined> {
    if pool.len() != decision.n_experts {
        return Err(shape_err("pool_combine", &[pool.len()], &[decision.n_experts]));
    }
    let t = ctx.tape.shape(tokens)[0];
    if t != decision.tokens() {
        return Err(shape_err("pool_combine", ctx.tape.shape(tokens), &[decision.tokens()]));
    }
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); pool.len()];
    for (row, sel) in decision.indices.iter().enumerate() {
        for &e in sel {
            routed[e].push(row);
        }
    }
    let mut acc: Option<Var> = None;
    let mut evaluations = 0;
    for (e, (expert, rows)) in pool.experts.iter().zip(&routed).enumerate() {
        if rows.is_empty() {
            continue;
        }
        evaluations += rows.len();
        let x = ctx.tape.gather_rows(tokens, rows)?;
        let y = expert.forward(ctx, x)?;
        let picks: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let gates = ctx.tape.pick(decision.weights, &picks)?;
        let scaled = ctx.tape.row_scale(y, gates)?;
        let placed = ctx.tape.scatter_rows(scaled, rows, t)?;
        acc = Some(match acc {
            Some(a) => ctx.tape.add(a, placed)?,
            None => placed,
        });
    }
    let output = match acc {
        Some(v) => v,
        None if t == 0 => return Err(Error::Empty("pool_combine")),
        None => ctx.constant(Tensor::zeros(&[t, pool.d_out()])),
    };
    Ok(Combined {
        output,
        evaluations,
    })
}
