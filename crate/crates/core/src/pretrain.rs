//! Text-only pretraining of the decoder base before it is frozen: the
//! decoder learns to repeat a symbol string shown earlier in its context.
//! No audio or video features are involved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::decoder::{Decoder, PrefixSequence};
use crate::error::{Error, Result};
use crate::losses::weighted_nll;
use crate::optim::{clip_global_norm, cosine_lr, AdamW};
use crate::params::{normal_tensor, Ctx, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::seed::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Zero leaves the base at its random initialization.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Each prefix row packs between 1 and `max_pack` consecutive tokens.
    pub max_pack: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 16,
            learning_rate: 1e-2,
            min_len: 2,
            max_len: 16,
            max_pack: 3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.steps > 0 && (self.batch_size == 0 || self.min_len == 0 || self.min_len > self.max_len || self.max_pack == 0) {
            return Err(Error::Config("pretraining needs batch_size > 0 and 0 < min_len <= max_len".into()));
        }
        if self.steps > 0 && 2 * self.max_len + 2 > max_positions {
            return Err(Error::Config(format!(
                "pretraining length {} does not fit in {max_positions} positions",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Base parameter ids of `decoder`, in store order.
pub fn base_ids(decoder: &Decoder) -> Vec<ParamId> {
    let b = &decoder.base;
    let mut ids = vec![b.embed, b.pos];
    for blk in &b.blocks {
        ids.extend([
            blk.ln1_g, blk.ln1_b, blk.wq, blk.wk, blk.wv, blk.wo, blk.ln2_g, blk.ln2_b, blk.w1, blk.b1, blk.w2, blk.b2,
        ]);
    }
    ids.extend([b.lnf_g, b.lnf_b]);
    ids.sort();
    ids
}

/// Trains the base weights in place on the copy task and returns the loss
/// of every step. Adapters are bypassed.
pub fn pretrain_base(decoder: &Decoder, store: &mut ParamStore, cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate(decoder.config.max_positions)?;
    let ids = base_ids(decoder);
    let vocab = decoder.vocab();
    let tasks = [Task::Asr, Task::Vsr, Task::Avsr];
    let mut r = rng(seed);
    let d = decoder.config.d_model;
    let slots: Vec<Tensor> = (0..cfg.max_pack)
        .map(|_| normal_tensor(&[d, d], 1.0 / (d as f64).sqrt(), &mut r))
        .collect();
    let mut opt = AdamW::new(store, ids.clone(), 0.9, 0.999, 1e-8, 0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let strings: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| {
                let n = r.random_range(cfg.min_len..=cfg.max_len);
                (0..n).map(|_| r.random_range(0..vocab.n_symbols)).collect()
            })
            .collect();
        let prompts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| vocab.task_token(tasks[r.random_range(0..tasks.len())]))
            .collect();
        let (loss, mut grads) = {
            let mut ctx = Ctx::with_grads_for(store, &ids);
            let embed = ctx.p(decoder.base.embed);
            let mut seqs = Vec::with_capacity(strings.len());
            let slot_vars: Vec<Var> = slots.iter().map(|t| ctx.constant(t.clone())).collect();
            for (s, &p) in strings.iter().zip(&prompts) {
                let z = packed_prefix(&mut ctx, embed, &slot_vars, s, &mut r)?;
                seqs.push(PrefixSequence {
                    z,
                    prompt: vec![p],
                    text: std::iter::once(vocab.bos()).chain(s.iter().copied()).collect(),
                });
            }
            let out = decoder.forward_with(&mut ctx, &seqs, None)?;
            let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
            for (si, s) in strings.iter().enumerate() {
                let w = 1.0 / ((s.len() + 1) * strings.len()) as f64;
                for (l, &y) in s.iter().chain([vocab.eos()].iter()).enumerate() {
                    rows.push(out.text_row(si, l));
                    targets.push(y);
                    weights.push(w);
                }
            }
            let picked = ctx.tape.gather_rows(out.logits, &rows)?;
            let loss = weighted_nll(&mut ctx, picked, &targets, &weights)?;
            ctx.tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = ids.iter().map(|&id| ctx.grad(id).unwrap_or_else(|| vec![0.0; ctx.store().get(id).len()])).collect();
            (ctx.scalar(loss), grads)
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                nll: loss,
                lb: 0.0,
                lz: 0.0,
                total: loss,
            });
        }
        clip_global_norm(&mut grads, 1.0);
        opt.step(store, &grads, cosine_lr(cfg.learning_rate, step, cfg.steps));
        losses.push(loss);
    }
    Ok(losses)
}

/// Prefix rows for `s`: consecutive tokens are grouped into runs of random
/// length, and each row sums its tokens' embeddings through per-slot maps.
fn packed_prefix(ctx: &mut Ctx, embed: Var, slots: &[Var], s: &[usize], r: &mut impl Rng) -> Result<Var> {
    let mut by_slot: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); slots.len()];
    let (mut i, mut row) = (0, 0);
    while i < s.len() {
        let g = r.random_range(1..=slots.len()).min(s.len() - i);
        for k in 0..g {
            by_slot[k].0.push(s[i + k]);
            by_slot[k].1.push(row);
        }
        i += g;
        row += 1;
    }
    let mut z: Option<Var> = None;
    for ((syms, rows), &slot) in by_slot.iter().zip(slots) {
        if syms.is_empty() {
            continue;
        }
        let e = ctx.tape.gather_rows(embed, syms)?;
        let e = ctx.tape.matmul(e, slot)?;
        let e = ctx.tape.scatter_rows(e, rows, row)?;
        z = Some(match z {
            Some(acc) => ctx.tape.add(acc, e)?,
            None => e,
        });
    }
    z.ok_or(Error::Empty("pretraining string"))
}
