//! A small frozen causal transformer that stands in for the language model,
//! with trainable low-rank adapters on the attention query and value
//! projections, plus greedy and beam-search decoding.
//!
//! Input layout per sequence: `[Z_AV rows ; task token ; BOS y_1 … y_L]`.
//! The output head is tied to the token embedding table and covers the
//! symbols plus BOS/EOS/PAD; task tokens are input-only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{shape_err, Error, Result};
use crate::params::{normal_tensor, uniform_tensor, Ctx, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_symbols: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_symbols: 16,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl DecoderConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_symbols: self.n_symbols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_symbols == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        Ok(())
    }
}

/// Token id layout: symbols `0..n`, then BOS, EOS, PAD, then one token per
/// task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_symbols: usize,
}

impl Vocab {
    pub fn bos(&self) -> usize {
        self.n_symbols
    }

    pub fn eos(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn pad(&self) -> usize {
        self.n_symbols + 2
    }

    pub fn task_token(&self, task: Task) -> usize {
        self.n_symbols
            + 3
            + match task {
                Task::Asr => 0,
                Task::Vsr => 1,
                Task::Avsr => 2,
            }
    }

    /// Size of the output distribution (symbols + BOS/EOS/PAD).
    pub fn output_size(&self) -> usize {
        self.n_symbols + 3
    }

    /// Rows of the embedding table.
    pub fn table_size(&self) -> usize {
        self.n_symbols + 6
    }

    /// Tokens a decoder may emit: every symbol, then EOS.
    pub fn candidates(&self) -> Vec<usize> {
        (0..self.n_symbols).chain([self.eos()]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Frozen base weights.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

/// Low-rank update `W₀ + (α/r)·A·B` of one projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LoraAdapter {
    fn new(store: &mut ParamStore, name: &str, d: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let a = uniform_tensor(&[d, rank], 1.0 / (d as f64).sqrt(), rng);
        Self {
            a: store.add(format!("{name}.lora_a"), a, true),
            b: store.add(format!("{name}.lora_b"), Tensor::zeros(&[rank, d]), true),
            scale: alpha / rank as f64,
        }
    }

    /// `W₀ + scale·A·B` as a dense matrix.
    pub fn effective_weight(&self, store: &ParamStore, base: ParamId) -> Result<Tensor> {
        let mut ctx = Ctx::eval(store);
        let (w, a, b) = (ctx.p(base), ctx.p(self.a), ctx.p(self.b));
        let ab = ctx.tape.matmul(a, b)?;
        let ab = ctx.tape.scale(ab, self.scale);
        let eff = ctx.tape.add(w, ab)?;
        Ok(ctx.value(eff).clone())
    }
}

#[derive(Clone, Debug)]
pub struct LayerAdapters {
    pub query: LoraAdapter,
    pub value: LoraAdapter,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub base: DecoderParams,
    pub lora: Vec<LayerAdapters>,
}

/// One decoder input sequence.
#[derive(Clone, Debug)]
pub struct PrefixSequence {
    /// Projected multimodal rows `[n × d_model]`.
    pub z: Var,
    pub prompt: Vec<usize>,
    /// Text input ids, starting with BOS.
    pub text: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[Σ len × output_size]`
    pub logits: Var,
    /// Row offset of each sequence in `logits`.
    pub offsets: Vec<usize>,
    /// Rows before the text part (Z rows + prompt) for each sequence.
    pub prefix_lens: Vec<usize>,
    pub lens: Vec<usize>,
}

impl DecoderOutput {
    /// Packed row index of text position `l` (0 = BOS) of sequence `s`.
    pub fn text_row(&self, s: usize, l: usize) -> usize {
        self.offsets[s] + self.prefix_lens[s] + l
    }
}

impl Decoder {
    /// Frozen base weights come from `base_rng`, adapter `A` matrices from
    /// `adapter_rng` (`B` starts at zero).
    pub fn new(
        config: DecoderConfig,
        store: &mut ParamStore,
        base_rng: &mut impl Rng,
        adapter_rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let rng = base_rng;
        let d = config.d_model;
        let vocab = config.vocab();
        let lin = 1.0 / (d as f64).sqrt();
        let embed = store.add("decoder.embed", normal_tensor(&[vocab.table_size(), d], 1.0, rng), false);
        let pos = store.add("decoder.pos", normal_tensor(&[config.max_positions, d], 1.0, rng), false);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("decoder.layer{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: store.add(n("ln1.g"), Tensor::ones(&[d]), false),
                ln1_b: store.add(n("ln1.b"), Tensor::zeros(&[d]), false),
                wq: store.add(n("wq"), normal_tensor(&[d, d], lin, rng), false),
                wk: store.add(n("wk"), normal_tensor(&[d, d], lin, rng), false),
                wv: store.add(n("wv"), normal_tensor(&[d, d], lin, rng), false),
                wo: store.add(n("wo"), normal_tensor(&[d, d], lin, rng), false),
                ln2_g: store.add(n("ln2.g"), Tensor::ones(&[d]), false),
                ln2_b: store.add(n("ln2.b"), Tensor::zeros(&[d]), false),
                w1: store.add(n("w1"), normal_tensor(&[d, config.d_ff], lin, rng), false),
                b1: store.add(n("b1"), Tensor::zeros(&[config.d_ff]), false),
                w2: store.add(
                    n("w2"),
                    normal_tensor(&[config.d_ff, d], 1.0 / (config.d_ff as f64).sqrt(), rng),
                    false,
                ),
                b2: store.add(n("b2"), Tensor::zeros(&[d]), false),
            });
        }
        let base = DecoderParams {
            embed,
            pos,
            blocks,
            lnf_g: store.add("decoder.lnf.g", Tensor::ones(&[d]), false),
            lnf_b: store.add("decoder.lnf.b", Tensor::zeros(&[d]), false),
        };
        let lora = (0..config.n_layers)
            .map(|l| LayerAdapters {
                query: LoraAdapter::new(store, &format!("decoder.layer{l}.q"), d, config.lora_rank, config.lora_alpha, adapter_rng),
                value: LoraAdapter::new(store, &format!("decoder.layer{l}.v"), d, config.lora_rank, config.lora_alpha, adapter_rng),
            })
            .collect();
        Ok(Self { config, base, lora })
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn forward(&self, ctx: &mut Ctx, seqs: &[PrefixSequence]) -> Result<DecoderOutput> {
        self.forward_with(ctx, seqs, Some(&self.lora))
    }

    /// Forward with explicit adapters; `None` runs the bare frozen base.
    pub fn forward_with(
        &self,
        ctx: &mut Ctx,
        seqs: &[PrefixSequence],
        lora: Option<&[LayerAdapters]>,
    ) -> Result<DecoderOutput> {
        if seqs.is_empty() {
            return Err(Error::Empty("decoder batch"));
        }
        let d = self.config.d_model;
        let vocab = self.vocab();
        let embed = ctx.p(self.base.embed);

        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.prompt.iter().chain(&s.text).copied())
            .collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.table_size()) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        let tok = ctx.tape.embedding(embed, &ids)?;

        let mut parts = Vec::with_capacity(seqs.len() * 2);
        let mut lens = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut prefix_lens = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        let (mut tok_off, mut row_off) = (0, 0);
        for s in seqs {
            let zs = ctx.tape.shape(s.z).to_vec();
            if zs.len() != 2 || zs[1] != d {
                return Err(shape_err("decoder_forward", &zs, &[zs[0], d]));
            }
            let n_tok = s.prompt.len() + s.text.len();
            let len = zs[0] + n_tok;
            if len > self.config.max_positions {
                return Err(Error::Contract(format!(
                    "sequence length {len} exceeds max_positions {}",
                    self.config.max_positions
                )));
            }
            parts.push(s.z);
            if n_tok > 0 {
                parts.push(ctx.tape.slice_rows(tok, tok_off, tok_off + n_tok)?);
            }
            tok_off += n_tok;
            positions.extend(0..len);
            offsets.push(row_off);
            prefix_lens.push(zs[0] + s.prompt.len());
            lens.push(len);
            row_off += len;
        }
        let x = ctx.tape.concat_rows(&parts)?;
        let pos_table = ctx.p(self.base.pos);
        let pos = ctx.tape.gather_rows(pos_table, &positions)?;
        let mut x = ctx.tape.add(x, pos)?;

        for (l, block) in self.base.blocks.iter().enumerate() {
            let adapters = lora.map(|a| &a[l]);
            x = self.block(ctx, block, adapters, x, &lens)?;
        }
        let (g, b) = (ctx.p(self.base.lnf_g), ctx.p(self.base.lnf_b));
        let h = ctx.tape.layer_norm(x, g, b, LN_EPS)?;
        let head = ctx.tape.slice_rows(embed, 0, vocab.output_size())?;
        let logits = ctx.tape.matmul_t(h, head)?;
        let logits = ctx.tape.scale(logits, 1.0 / (d as f64).sqrt());
        Ok(DecoderOutput {
            logits,
            offsets,
            prefix_lens,
            lens,
        })
    }

    fn block(
        &self,
        ctx: &mut Ctx,
        p: &BlockParams,
        lora: Option<&LayerAdapters>,
        x: Var,
        segments: &[usize],
    ) -> Result<Var> {
        let (g1, b1) = (ctx.p(p.ln1_g), ctx.p(p.ln1_b));
        let h = ctx.tape.layer_norm(x, g1, b1, LN_EPS)?;
        let q = project(ctx, h, p.wq, lora.map(|a| &a.query))?;
        let wk = ctx.p(p.wk);
        let k = ctx.tape.matmul(h, wk)?;
        let v = project(ctx, h, p.wv, lora.map(|a| &a.value))?;
        let att = ctx.tape.causal_attention(q, k, v, self.config.n_heads, segments)?;
        let wo = ctx.p(p.wo);
        let att = ctx.tape.matmul(att, wo)?;
        let x = ctx.tape.add(x, att)?;

        let (g2, b2) = (ctx.p(p.ln2_g), ctx.p(p.ln2_b));
        let h = ctx.tape.layer_norm(x, g2, b2, LN_EPS)?;
        let (w1, bb1, w2, bb2) = (ctx.p(p.w1), ctx.p(p.b1), ctx.p(p.w2), ctx.p(p.b2));
        let m = ctx.tape.matmul(h, w1)?;
        let m = ctx.tape.add_bias(m, bb1)?;
        let m = ctx.tape.gelu(m);
        let m = ctx.tape.matmul(m, w2)?;
        let m = ctx.tape.add_bias(m, bb2)?;
        ctx.tape.add(x, m)
    }

    /// Logits over the candidate tokens at the last position of each
    /// `(z, text)` hypothesis.
    pub fn last_logits(
        &self,
        store: &ParamStore,
        hyps: &[(&Tensor, &[usize], &[usize])],
        use_lora: bool,
    ) -> Result<Vec<Vec<f64>>> {
        let mut ctx = Ctx::eval(store);
        let seqs: Vec<PrefixSequence> = hyps
            .iter()
            .map(|&(z, prompt, text)| PrefixSequence {
                z: ctx.constant(z.clone()),
                prompt: prompt.to_vec(),
                text: text.to_vec(),
            })
            .collect();
        let out = self.forward_with(&mut ctx, &seqs, use_lora.then_some(self.lora.as_slice()))?;
        let logits = ctx.value(out.logits);
        let cands = self.vocab().candidates();
        Ok((0..seqs.len())
            .map(|s| {
                let row = logits.row(out.offsets[s] + out.lens[s] - 1);
                cands.iter().map(|&c| row[c]).collect()
            })
            .collect())
    }
}

const LN_EPS: f64 = 1e-5;

fn project(ctx: &mut Ctx, h: Var, base: ParamId, lora: Option<&LoraAdapter>) -> Result<Var> {
    let w = ctx.p(base);
    let y = ctx.tape.matmul(h, w)?;
    let Some(ad) = lora else { return Ok(y) };
    let (a, b) = (ctx.p(ad.a), ctx.p(ad.b));
    let low = ctx.tape.matmul(h, a)?;
    let low = ctx.tape.matmul(low, b)?;
    let low = ctx.tape.scale(low, ad.scale);
    ctx.tape.add(y, low)
}

/// Something that scores the next token of a growing hypothesis.
pub trait StepScorer {
    /// Emittable token ids; logits returned by `next_logits` follow this order.
    fn candidates(&self) -> &[usize];
    fn eos(&self) -> usize;
    /// One logit vector per hypothesis.
    fn next_logits(&self, hyps: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Decoder conditioned on one sample's projected tokens and prompt.
pub struct DecoderScorer<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
    pub z: Tensor,
    pub prompt: Vec<usize>,
    pub use_lora: bool,
    candidates: Vec<usize>,
}

impl<'a> DecoderScorer<'a> {
    pub fn new(decoder: &'a Decoder, store: &'a ParamStore, z: Tensor, task: Task) -> Self {
        let vocab = decoder.vocab();
        Self {
            decoder,
            store,
            z,
            prompt: vec![vocab.task_token(task)],
            use_lora: true,
            candidates: vocab.candidates(),
        }
    }
}

impl StepScorer for DecoderScorer<'_> {
    fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    fn eos(&self) -> usize {
        self.decoder.vocab().eos()
    }

    fn next_logits(&self, hyps: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let bos = self.decoder.vocab().bos();
        let texts: Vec<Vec<usize>> = hyps
            .iter()
            .map(|h| std::iter::once(bos).chain(h.iter().copied()).collect())
            .collect();
        let batch: Vec<(&Tensor, &[usize], &[usize])> = texts
            .iter()
            .map(|t| (&self.z, self.prompt.as_slice(), t.as_slice()))
            .collect();
        self.decoder.last_logits(self.store, &batch, self.use_lora)
    }
}

/// `log softmax(logits / temperature)`
pub fn tempered_log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - lse).collect()
}

fn check_decode_args(max_len: usize, temperature: f64) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be >= 1".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

/// Index of the largest value; ties go to the earliest.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Appends the most likely candidate until EOS or `max_len` tokens.
/// The returned sequence excludes EOS.
pub fn greedy_decode(scorer: &impl StepScorer, max_len: usize, temperature: f64) -> Result<Vec<usize>> {
    check_decode_args(max_len, temperature)?;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = scorer.next_logits(std::slice::from_ref(&out))?.remove(0);
        let logp = tempered_log_probs(&logits, temperature);
        let tok = scorer.candidates()[argmax(&logp)];
        if tok == scorer.eos() {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Beam search scored by summed tempered log-probabilities, no length
/// normalization. The `width` best expansions are kept each step;
/// expansions ending in EOS are retired as finished. Ties are broken by
/// lower token id, then by earlier hypothesis.
pub fn beam_search(
    scorer: &impl StepScorer,
    width: usize,
    temperature: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    check_decode_args(max_len, temperature)?;
    if width == 0 {
        return Err(Error::Contract("beam width must be >= 1".into()));
    }
    let cands = scorer.candidates().to_vec();
    let eos = scorer.eos();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
        let seqs: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let logits = scorer.next_logits(&seqs)?;
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * cands.len());
        for (hi, (hyp, lg)) in live.iter().zip(&logits).enumerate() {
            for (ci, lp) in tempered_log_probs(lg, temperature).into_iter().enumerate() {
                expansions.push((hyp.score + lp, cands[ci], hi));
            }
        }
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        expansions.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, tok, hi) in expansions {
            let tokens = live[hi].tokens.clone();
            if tok == eos {
                finished.push(Hypothesis { tokens, score });
            } else {
                let mut tokens = tokens;
                tokens.push(tok);
                next.push(Hypothesis { tokens, score });
            }
        }
        live = next;
    }
    finished.extend(live);
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score > finished[best].score {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}
