//! Model assembly, training, evaluation and the sweep protocols.

use crate::config::TrainConfig;
use crate::data::{edit_distance, inject_babble, Dataset, Emissions, Sample, Task};
use crate::decoder::{argmax, beam_search, tempered_log_probs, Decoder, DecoderScorer, PrefixSequence};
use crate::error::{Error, Result};
use crate::losses::{aux_losses, total_loss, weighted_nll, LossParts};
use crate::optim::{clip_global_norm, cosine_lr, AdamW};
use crate::params::{Ctx, ParamStore};
use crate::routing::{ActivationStats, GateDecision, StatsReport};
use crate::seed::{rng, sub_seed};
use crate::smop::{activated_param_count, ModalityInput, ParamAccounting, RouterRole, SmopModule};
use crate::tensor::{Tensor, Var};

use rand::seq::SliceRandom;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::pretrain::{base_ids, pretrain_base};

/// Projector, frozen decoder and adapters sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub smop: SmopModule,
    pub decoder: Decoder,
}

/// Decoding rule used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decode {
    Greedy,
    Beam { width: usize, temperature: f64 },
}

impl Decode {
    /// Beam width 15 at temperature 0.6.
    pub const BEAM_DEFAULT: Decode = Decode::Beam {
        width: 15,
        temperature: 0.6,
    };
}

pub struct BatchLoss {
    pub total: Var,
    pub parts: LossParts,
    pub decisions: Vec<(RouterRole, GateDecision)>,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let decoder = Decoder::new(
            config.decoder.clone(),
            &mut store,
            &mut rng(config.decoder_seed),
            &mut rng(sub_seed(config.seed, 1)),
        )?;
        if config.pretrain.steps > 0 {
            let base = pretrained_base(&config, &decoder, &store)?;
            for (id, value) in base_ids(&decoder).into_iter().zip(base.iter()) {
                *store.get_mut(id) = value.clone();
            }
        }
        let smop = SmopModule::new(config.smop.clone(), &mut store, &mut rng(sub_seed(config.seed, 2)))?;
        Ok(Self {
            config,
            store,
            smop,
            decoder,
        })
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn inputs<'s>(&self, s: &'s Sample) -> ModalityInput<'s> {
        ModalityInput {
            audio: self.task().uses_audio().then_some(&s.audio),
            video: self.task().uses_video().then_some(&s.video),
        }
    }

    pub fn accounting(&self) -> Result<ParamAccounting> {
        activated_param_count(&self.config.smop)
    }

    /// Empty activation counters, one per router the task exercises.
    pub fn new_stats(&self) -> Vec<(RouterRole, ActivationStats)> {
        self.smop
            .routers()
            .into_iter()
            .filter(|(role, _)| match role {
                RouterRole::Joint => true,
                RouterRole::Audio => self.task().uses_audio(),
                RouterRole::Video => self.task().uses_video(),
            })
            .map(|(role, r)| (role, ActivationStats::new(r.n_experts, r.top_k)))
            .collect()
    }

    /// Total loss for a batch: NLL averaged per sample then across samples,
    /// plus weighted auxiliary routing losses.
    pub fn batch_loss(&self, ctx: &mut Ctx, samples: &[&Sample]) -> Result<BatchLoss> {
        let inputs: Vec<ModalityInput> = samples.iter().map(|s| self.inputs(s)).collect();
        let out = self.smop.forward_batch(ctx, &inputs)?;
        let vocab = self.decoder.vocab();
        let prompt = vec![vocab.task_token(self.task())];
        let seqs: Vec<PrefixSequence> = samples
            .iter()
            .zip(&out.z)
            .map(|(s, &z)| PrefixSequence {
                z,
                prompt: prompt.clone(),
                text: std::iter::once(vocab.bos()).chain(s.y.iter().copied()).collect(),
            })
            .collect();
        let dec = self.decoder.forward(ctx, &seqs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (si, s) in samples.iter().enumerate() {
            let w = 1.0 / ((s.y.len() + 1) * samples.len()) as f64;
            for (l, &y) in s.y.iter().chain([vocab.eos()].iter()).enumerate() {
                rows.push(dec.text_row(si, l));
                targets.push(y);
                weights.push(w);
            }
        }
        let picked = ctx.tape.gather_rows(dec.logits, &rows)?;
        let nll = weighted_nll(ctx, picked, &targets, &weights)?;
        let refs: Vec<&GateDecision> = out.decisions.iter().map(|d| &d.decision).collect();
        let (lb, lz) = aux_losses(ctx, &refs, self.config.aux_aggregation)?;
        let total = total_loss(ctx, nll, lb, lz, self.config.loss_weights())?;
        let parts = LossParts {
            nll: ctx.scalar(nll),
            lb: ctx.scalar(lb),
            lz: ctx.scalar(lz),
            total: ctx.scalar(total),
        };
        Ok(BatchLoss {
            total,
            parts,
            decisions: out.decisions.into_iter().map(|d| (d.role, d.decision)).collect(),
        })
    }

    /// Projected prefix rows per sample, recording routing choices into
    /// `stats` when given.
    pub fn project(
        &self,
        samples: &[Sample],
        stats: Option<&mut [(RouterRole, ActivationStats)]>,
    ) -> Result<Vec<Tensor>> {
        let mut ctx = Ctx::eval(&self.store);
        let inputs: Vec<ModalityInput> = samples.iter().map(|s| self.inputs(s)).collect();
        let out = self.smop.forward_batch(&mut ctx, &inputs)?;
        if let Some(stats) = stats {
            for d in &out.decisions {
                if let Some((_, st)) = stats.iter_mut().find(|(r, _)| *r == d.role) {
                    st.record(&d.decision)?;
                }
            }
        }
        Ok(out.z.iter().map(|&z| ctx.value(z).clone()).collect())
    }

    pub fn transcribe(&self, samples: &[Sample], decode: Decode) -> Result<Vec<Vec<usize>>> {
        let zs = self.project(samples, None)?;
        self.decode_prefixes(&zs, decode)
    }

    pub fn decode_prefixes(&self, zs: &[Tensor], decode: Decode) -> Result<Vec<Vec<usize>>> {
        let max_len = self.config.max_decode_len;
        match decode {
            Decode::Greedy => self.greedy_batch(zs, max_len),
            Decode::Beam { width, temperature } => zs
                .iter()
                .map(|z| {
                    let scorer = DecoderScorer::new(&self.decoder, &self.store, z.clone(), self.task());
                    beam_search(&scorer, width, temperature, max_len).map(|h| h.tokens)
                })
                .collect(),
        }
    }

    /// Greedy decoding of many prefixes at once; identical to running
    /// [`crate::decoder::greedy_decode`] on each at temperature 1.
    fn greedy_batch(&self, zs: &[Tensor], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let vocab = self.decoder.vocab();
        let prompt = [vocab.task_token(self.task())];
        let cands = vocab.candidates();
        let mut outs: Vec<Vec<usize>> = vec![Vec::new(); zs.len()];
        let mut active: Vec<usize> = (0..zs.len()).collect();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let texts: Vec<Vec<usize>> = active
                .iter()
                .map(|&i| std::iter::once(vocab.bos()).chain(outs[i].iter().copied()).collect())
                .collect();
            let batch: Vec<(&Tensor, &[usize], &[usize])> = active
                .iter()
                .zip(&texts)
                .map(|(&i, t)| (&zs[i], &prompt[..], t.as_slice()))
                .collect();
            let logits = self.decoder.last_logits(&self.store, &batch, true)?;
            let mut still = Vec::with_capacity(active.len());
            for (&i, lg) in active.iter().zip(&logits) {
                let tok = cands[argmax(&tempered_log_probs(lg, 1.0))];
                if tok != vocab.eos() {
                    outs[i].push(tok);
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outs)
    }

    /// Mean loss components over `samples` without gradient tracking.
    pub fn eval_loss(&self, samples: &[Sample]) -> Result<LossParts> {
        let mut acc = LossParts::default();
        let bs = self.config.batch_size;
        for chunk in samples.chunks(bs) {
            let mut ctx = Ctx::eval(&self.store);
            let refs: Vec<&Sample> = chunk.iter().collect();
            let p = self.batch_loss(&mut ctx, &refs)?.parts;
            let w = chunk.len() as f64 / samples.len() as f64;
            acc.nll += w * p.nll;
            acc.lb += w * p.lb;
            acc.lz += w * p.lz;
            acc.total += w * p.total;
        }
        Ok(acc)
    }
}

/// Corpus-level token error rate: total edits over total reference length.
pub fn corpus_ter(refs: &[&[usize]], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(|r| r.len()).sum();
    if total == 0 {
        return Err(Error::Empty("reference sequences"));
    }
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train: LossParts,
    pub val: Option<LossParts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub task: Task,
    pub epochs: Vec<EpochMetrics>,
    /// Per optimizer step.
    pub steps: Vec<LossParts>,
    pub test_ter: f64,
    /// Inference-time routing on the test split.
    pub routing: Vec<(RouterRole, StatsReport)>,
    pub accounting: ParamAccounting,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub frozen_digest: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Metrics,
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(config, dataset, |_| {})
}

/// Trains the projector and adapters against the frozen decoder, calling
/// `on_epoch` after every epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let mut model = Model::new(config.clone())?;
    check_dataset(&model, dataset)?;
    let frozen_before = model.store.frozen_digest();
    let trainable = model.store.trainable_ids();
    let mut opt = AdamW::new(
        &model.store,
        trainable.clone(),
        config.beta1,
        config.beta2,
        config.eps,
        config.weight_decay,
    );
    let n = dataset.train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let base_lr = config.lr();
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng(sub_seed(sub_seed(config.seed, 3), epoch as u64)));
        let mut sum = LossParts::default();
        let mut lr = base_lr;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &dataset.train[i]).collect();
            let (parts, mut grads) = {
                let mut ctx = Ctx::train(&model.store);
                let bl = model.batch_loss(&mut ctx, &samples)?;
                if !bl.parts.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        nll: bl.parts.nll,
                        lb: bl.parts.lb,
                        lz: bl.parts.lz,
                        total: bl.parts.total,
                    });
                }
                ctx.tape.backward(bl.total)?;
                let grads: Vec<Vec<f64>> = trainable
                    .iter()
                    .map(|&id| ctx.grad(id).unwrap_or_else(|| vec![0.0; model.store.get(id).len()]))
                    .collect();
                (bl.parts, grads)
            };
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            lr = cosine_lr(base_lr, step, total_steps);
            opt.step(&mut model.store, &grads, lr);
            steps.push(parts);
            sum.nll += parts.nll;
            sum.lb += parts.lb;
            sum.lz += parts.lz;
            sum.total += parts.total;
            step += 1;
        }
        let k = per_epoch as f64;
        let train = LossParts {
            nll: sum.nll / k,
            lb: sum.lb / k,
            lz: sum.lz / k,
            total: sum.total / k,
        };
        let val = if dataset.val.is_empty() {
            None
        } else {
            Some(model.eval_loss(&dataset.val)?)
        };
        let em = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train,
            val,
        };
        on_epoch(&em);
        epochs.push(em);
    }

    let frozen_digest = model.store.frozen_digest();
    if frozen_digest != frozen_before {
        return Err(Error::Contract("frozen parameters changed during training".into()));
    }
    let (test_ter, routing) = if dataset.test.is_empty() {
        (f64::NAN, Vec::new())
    } else {
        let ev = evaluate(&model, &dataset.test, Decode::Greedy)?;
        (ev.ter, ev.routing)
    };
    let metrics = Metrics {
        task: config.task,
        epochs,
        steps,
        test_ter,
        routing,
        accounting: model.accounting()?,
        trainable_params: model.store.numel(&trainable),
        frozen_params: model.store.numel(&model.store.frozen_ids()),
        frozen_digest,
    };
    Ok(TrainOutcome { model, metrics })
}

fn check_dataset(model: &Model, dataset: &Dataset) -> Result<()> {
    let spec = &dataset.spec;
    let c = &model.config;
    if spec.d_audio != c.smop.d_audio || spec.d_video != c.smop.d_video || spec.n_symbols != c.decoder.n_symbols {
        return Err(Error::Config(format!(
            "dataset dims (audio {}, video {}, symbols {}) do not match the model",
            spec.d_audio, spec.d_video, spec.n_symbols
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ter: f64,
    pub hypotheses: Vec<Vec<usize>>,
    pub routing: Vec<(RouterRole, StatsReport)>,
}

pub fn evaluate(model: &Model, samples: &[Sample], decode: Decode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let mut stats = model.new_stats();
    let zs = model.project(samples, Some(&mut stats))?;
    let hypotheses = model.decode_prefixes(&zs, decode)?;
    let refs: Vec<&[usize]> = samples.iter().map(|s| s.y.as_slice()).collect();
    let ter = corpus_ter(&refs, &hypotheses)?;
    let routing = stats
        .into_iter()
        .map(|(role, st)| st.report().map(|r| (role, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        ter,
        hypotheses,
        routing,
    })
}

/// Checks a dataset against a loaded model before evaluating on it.
pub fn evaluate_dataset(model: &Model, dataset: &Dataset, decode: Decode) -> Result<EvalReport> {
    check_dataset(model, dataset)?;
    evaluate(model, &dataset.test, decode)
}

pub const DEFAULT_SNR_LEVELS: [f64; 5] = [7.5, 5.0, 2.5, 0.0, -2.5];
pub const BABBLE_TALKERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub snr_db: f64,
    pub task: Task,
    pub ter: f64,
}

/// Interferer seeds for sample `index`; fixed across SNR levels so only the
/// babble gain changes between rows.
pub fn babble_seeds(data_seed: u64, index: usize) -> Vec<u64> {
    (0..BABBLE_TALKERS)
        .map(|j| sub_seed(sub_seed(data_seed, 0xBAB1E), (index * BABBLE_TALKERS + j) as u64))
        .collect()
}

/// Token error rate of `model` on `samples` with babble injected at each SNR.
pub fn noise_sweep(model: &Model, dataset: &Dataset, levels: &[f64], decode: Decode) -> Result<Vec<NoiseRow>> {
    if levels.is_empty() {
        return Err(Error::Empty("snr levels"));
    }
    check_dataset(model, dataset)?;
    let em = Emissions::new(&dataset.spec)?;
    levels
        .iter()
        .map(|&snr| {
            let noisy = dataset
                .test
                .iter()
                .enumerate()
                .map(|(i, s)| inject_babble(s, &dataset.spec, &em, snr, &babble_seeds(dataset.seed, i)))
                .collect::<Result<Vec<_>>>()?;
            let ter = evaluate(model, &noisy, decode)?.ter;
            Ok(NoiseRow {
                snr_db: snr,
                task: model.task(),
                ter,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_experts: usize,
    pub ter: f64,
    pub accounting: ParamAccounting,
}

/// Trains one model per pool size (every pool of the variant gets `N`
/// experts) with the same seed and reports accuracy and parameter counts.
pub fn expert_sweep(base: &TrainConfig, dataset: &Dataset, counts: &[usize]) -> Result<Vec<SweepRow>> {
    if let Some(&n) = counts.iter().find(|&&n| n < base.smop.top_k) {
        return Err(Error::Config(format!(
            "expert count {n} below top_k {}",
            base.smop.top_k
        )));
    }
    counts
        .iter()
        .map(|&n| {
            let cfg = with_experts(base, n);
            let out = train(&cfg, dataset)?;
            Ok(SweepRow {
                n_experts: n,
                ter: out.metrics.test_ter,
                accounting: out.metrics.accounting,
            })
        })
        .collect()
}

pub fn with_experts(base: &TrainConfig, n: usize) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.smop.n_experts = n;
    cfg.smop.n_experts_audio = n;
    cfg.smop.n_experts_video = n;
    cfg
}

/// Dataset sized and seeded as the config asks.
pub fn dataset_for(config: &TrainConfig) -> Result<Dataset> {
    Dataset::generate(
        &config.data,
        config.data_seed,
        [config.n_train, config.n_val, config.n_test],
        config.task,
    )
}

/// Pretrained base weights, computed once per process for each
/// (decoder config, pretraining config, decoder seed).
fn pretrained_base(config: &TrainConfig, decoder: &Decoder, store: &ParamStore) -> Result<Arc<Vec<Tensor>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<Vec<Tensor>>>>> = OnceLock::new();
    let key = format!("{:?}|{:?}|{}", config.decoder, config.pretrain, config.decoder_seed);
    // The lock is held while pretraining so concurrent callers wait for one run.
    let mut cache = CACHE
        .get_or_init(Default::default)
        .lock()
        .map_err(|_| Error::Contract("pretraining cache poisoned".into()))?;
    if let Some(v) = cache.get(&key) {
        return Ok(v.clone());
    }
    let mut scratch = store.clone();
    pretrain_base(decoder, &mut scratch, &config.pretrain, sub_seed(config.decoder_seed, 1))?;
    let values: Arc<Vec<Tensor>> = Arc::new(base_ids(decoder).into_iter().map(|id| scratch.get(id).clone()).collect());
    cache.insert(key, Arc::clone(&values));
    Ok(values)
}
