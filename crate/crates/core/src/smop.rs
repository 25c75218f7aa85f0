//! The sparse mixture of projectors: token compression, an optional video
//! width adapter, and one of three router/expert-pool topologies mapping
//! encoder tokens into the decoder's embedding space.
//!
//! | variant | routers           | expert pools          |
//! |---------|-------------------|-----------------------|
//! | JEJR    | one joint         | one shared            |
//! | DEDR    | audio, video      | audio, video          |
//! | JEDR    | audio, video      | one shared            |
//!
//! Tokens are compressed (r consecutive frames stacked along the hidden
//! axis) before routing. For the shared-pool variants the compressed video
//! tokens are mapped to the compressed audio width when the two differ.
//! Output rows are always ordered audio first, then video.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{expert_param_count, pool_combine, ExpertPool};
use crate::params::{uniform_tensor, Ctx, ParamId, ParamStore};
use crate::routing::{compute_gates, GateDecision, Router};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "JEJR")]
    Jejr,
    #[serde(rename = "DEDR")]
    Dedr,
    #[serde(rename = "JEDR")]
    Jedr,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Jejr => "JEJR",
            Variant::Dedr => "DEDR",
            Variant::Jedr => "JEDR",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmopConfig {
    pub variant: Variant,
    /// Shared pool size (JEJR, JEDR).
    pub n_experts: usize,
    /// Per-modality pool sizes (DEDR).
    pub n_experts_audio: usize,
    pub n_experts_video: usize,
    pub top_k: usize,
    pub compression_rate: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub d_llm: usize,
    /// Expert hidden width; `None` means `2 · d_llm`.
    pub d_hidden: Option<usize>,
    pub renormalize_gates: bool,
}

impl Default for SmopConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dedr,
            n_experts: 4,
            n_experts_audio: 3,
            n_experts_video: 3,
            top_k: 2,
            compression_rate: 3,
            d_audio: 8,
            d_video: 12,
            d_llm: 32,
            d_hidden: None,
            renormalize_gates: false,
        }
    }
}

impl SmopConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.d_hidden.unwrap_or(2 * self.d_llm)
    }

    pub fn audio_width(&self) -> usize {
        self.compression_rate * self.d_audio
    }

    pub fn video_width(&self) -> usize {
        self.compression_rate * self.d_video
    }

    pub fn needs_adapter(&self) -> bool {
        self.variant != Variant::Dedr && self.d_audio != self.d_video
    }

    /// Pool sizes in declaration order.
    pub fn pool_sizes(&self) -> Vec<usize> {
        match self.variant {
            Variant::Dedr => vec![self.n_experts_audio, self.n_experts_video],
            Variant::Jejr | Variant::Jedr => vec![self.n_experts],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("compression_rate", self.compression_rate),
            ("d_audio", self.d_audio),
            ("d_video", self.d_video),
            ("d_llm", self.d_llm),
            ("top_k", self.top_k),
            ("d_hidden", self.hidden()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if let Some(&n) = self.pool_sizes().iter().find(|&&n| n < self.top_k) {
            return Err(Error::Config(format!(
                "top_k {} exceeds pool size {n}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Which router produced a decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RouterRole {
    Joint,
    Audio,
    Video,
}

impl RouterRole {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterRole::Joint => "joint",
            RouterRole::Audio => "audio",
            RouterRole::Video => "video",
        }
    }
}

#[derive(Clone, Debug)]
enum Topology {
    Joint {
        router: Router,
        pool: ExpertPool,
    },
    Disjoint {
        audio_router: Router,
        audio_pool: ExpertPool,
        video_router: Router,
        video_pool: ExpertPool,
    },
    SharedPool {
        audio_router: Router,
        video_router: Router,
        pool: ExpertPool,
    },
}

#[derive(Clone, Debug)]
pub struct SmopModule {
    pub config: SmopConfig,
    topology: Topology,
    adapter: Option<ParamId>,
}

/// One sample's encoder tokens; at least one modality must be present.
#[derive(Clone, Copy, Debug)]
pub struct ModalityInput<'a> {
    pub audio: Option<&'a Tensor>,
    pub video: Option<&'a Tensor>,
}

#[derive(Clone, Debug)]
pub struct RoutedDecision {
    pub role: RouterRole,
    pub decision: GateDecision,
}

#[derive(Clone, Debug)]
pub struct SmopOutput {
    /// Per sample, `[ceil(T_A/r) + ceil(T_V/r) × d_llm]`.
    pub z: Vec<Var>,
    pub decisions: Vec<RoutedDecision>,
    /// Total (token, expert) evaluations across all pools.
    pub evaluations: usize,
}

/// Stacks `rate` consecutive rows along the hidden axis, zero-padding the
/// last incomplete group: `[T×d] → [ceil(T/r) × r·d]`.
pub fn compress_tokens(tokens: &Tensor, rate: usize) -> Result<Tensor> {
    if rate == 0 {
        return Err(Error::Contract("compression rate must be >= 1".into()));
    }
    let (t, d) = crate::tensor::expect_matrix("compress_tokens", tokens)?;
    let groups = t.div_ceil(rate);
    let mut data = tokens.data().to_vec();
    data.resize(groups * rate * d, 0.0);
    Tensor::new(vec![groups, rate * d], data)
}

impl SmopModule {
    pub fn new(config: SmopConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (wa, wv, h, out, k) = (c.audio_width(), c.video_width(), c.hidden(), c.d_llm, c.top_k);
        let adapter = c.needs_adapter().then(|| {
            let w = uniform_tensor(&[wv, wa], 1.0 / (wv as f64).sqrt(), rng);
            store.add("smop.adapter.w", w, true)
        });
        let topology = match c.variant {
            Variant::Jejr => Topology::Joint {
                router: Router::new(store, "smop.joint.router", wa, c.n_experts, k, rng)?,
                pool: ExpertPool::new(store, "smop.joint", c.n_experts, wa, h, out, rng),
            },
            Variant::Dedr => Topology::Disjoint {
                audio_router: Router::new(store, "smop.audio.router", wa, c.n_experts_audio, k, rng)?,
                audio_pool: ExpertPool::new(store, "smop.audio", c.n_experts_audio, wa, h, out, rng),
                video_router: Router::new(store, "smop.video.router", wv, c.n_experts_video, k, rng)?,
                video_pool: ExpertPool::new(store, "smop.video", c.n_experts_video, wv, h, out, rng),
            },
            Variant::Jedr => Topology::SharedPool {
                audio_router: Router::new(store, "smop.audio.router", wa, c.n_experts, k, rng)?,
                video_router: Router::new(store, "smop.video.router", wa, c.n_experts, k, rng)?,
                pool: ExpertPool::new(store, "smop.shared", c.n_experts, wa, h, out, rng),
            },
        };
        let mut module = Self {
            config,
            topology,
            adapter,
        };
        let renorm = module.config.renormalize_gates;
        for r in module.routers_mut() {
            r.renormalize = renorm;
        }
        Ok(module)
    }

    fn routers_mut(&mut self) -> Vec<&mut Router> {
        match &mut self.topology {
            Topology::Joint { router, .. } => vec![router],
            Topology::Disjoint {
                audio_router,
                video_router,
                ..
            }
            | Topology::SharedPool {
                audio_router,
                video_router,
                ..
            } => vec![audio_router, video_router],
        }
    }

    /// Routers with their roles, in declaration order.
    pub fn routers(&self) -> Vec<(RouterRole, &Router)> {
        match &self.topology {
            Topology::Joint { router, .. } => vec![(RouterRole::Joint, router)],
            Topology::Disjoint {
                audio_router,
                video_router,
                ..
            }
            | Topology::SharedPool {
                audio_router,
                video_router,
                ..
            } => vec![
                (RouterRole::Audio, audio_router),
                (RouterRole::Video, video_router),
            ],
        }
    }

    pub fn pools(&self) -> Vec<&ExpertPool> {
        match &self.topology {
            Topology::Joint { pool, .. } | Topology::SharedPool { pool, .. } => vec![pool],
            Topology::Disjoint {
                audio_pool,
                video_pool,
                ..
            } => vec![audio_pool, video_pool],
        }
    }

    pub fn adapter(&self) -> Option<ParamId> {
        self.adapter
    }

    /// Linear map of compressed video tokens to the compressed audio width.
    pub fn adapt_dims(&self, ctx: &mut Ctx, video_tokens: Var) -> Result<Var> {
        if self.config.variant == Variant::Dedr {
            return Err(Error::Contract(
                "adapt_dims is not defined for DEDR (per-modality pools need no adapter)".into(),
            ));
        }
        match self.adapter {
            Some(a) => {
                let w = ctx.p(a);
                ctx.tape.matmul(video_tokens, w)
            }
            None => Ok(video_tokens),
        }
    }

    /// Single-sample forward.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        audio: Option<&Tensor>,
        video: Option<&Tensor>,
    ) -> Result<(Var, Vec<RoutedDecision>)> {
        let out = self.forward_batch(ctx, &[ModalityInput { audio, video }])?;
        Ok((out.z[0], out.decisions))
    }

    /// Forward over a batch. All tokens of one modality are routed together,
    /// so each router yields a single decision covering the whole batch.
    pub fn forward_batch(&self, ctx: &mut Ctx, batch: &[ModalityInput]) -> Result<SmopOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("smop batch"));
        }
        let c = &self.config;
        let audio = self.stack(ctx, batch, |m| m.audio, c.d_audio)?;
        let video = self.stack(ctx, batch, |m| m.video, c.d_video)?;
        if batch.iter().any(|m| m.audio.is_none() && m.video.is_none()) {
            return Err(Error::Contract("sample has neither audio nor video tokens".into()));
        }

        let mut decisions = Vec::new();
        let mut evaluations = 0;
        let mut route = |ctx: &mut Ctx, role, router: &Router, pool: &ExpertPool, x: Var| -> Result<Var> {
            let d = compute_gates(ctx, x, router)?;
            let comb = pool_combine(ctx, pool, x, &d)?;
            evaluations += comb.evaluations;
            decisions.push(RoutedDecision { role, decision: d });
            Ok(comb.output)
        };

        let (audio_out, video_out) = match &self.topology {
            Topology::Joint { router, pool } => {
                let video_in = match &video {
                    Some(s) => Some(self.adapt_dims(ctx, s.tokens)?),
                    None => None,
                };
                let parts: Vec<Var> = audio.iter().map(|s| s.tokens).chain(video_in).collect();
                let joint = ctx.tape.concat_rows(&parts)?;
                let z = route(ctx, RouterRole::Joint, router, pool, joint)?;
                let a_rows = audio.as_ref().map_or(0, |s| s.total);
                let a_out = match &audio {
                    Some(s) if video.is_some() => Some(ctx.tape.slice_rows(z, 0, s.total)?),
                    Some(_) => Some(z),
                    None => None,
                };
                let v_out = match &video {
                    Some(s) if audio.is_some() => {
                        Some(ctx.tape.slice_rows(z, a_rows, a_rows + s.total)?)
                    }
                    Some(_) => Some(z),
                    None => None,
                };
                (a_out, v_out)
            }
            Topology::Disjoint {
                audio_router,
                audio_pool,
                video_router,
                video_pool,
            } => {
                let a_out = match &audio {
                    Some(s) => Some(route(ctx, RouterRole::Audio, audio_router, audio_pool, s.tokens)?),
                    None => None,
                };
                let v_out = match &video {
                    Some(s) => Some(route(ctx, RouterRole::Video, video_router, video_pool, s.tokens)?),
                    None => None,
                };
                (a_out, v_out)
            }
            Topology::SharedPool {
                audio_router,
                video_router,
                pool,
            } => {
                let a_out = match &audio {
                    Some(s) => Some(route(ctx, RouterRole::Audio, audio_router, pool, s.tokens)?),
                    None => None,
                };
                let v_out = match &video {
                    Some(s) => {
                        let x = self.adapt_dims(ctx, s.tokens)?;
                        Some(route(ctx, RouterRole::Video, video_router, pool, x)?)
                    }
                    None => None,
                };
                (a_out, v_out)
            }
        };

        let mut z = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let mut parts = Vec::with_capacity(2);
            for (stack, out) in [(&audio, audio_out), (&video, video_out)] {
                if let (Some(s), Some(o)) = (stack, out) {
                    let (off, n) = s.spans[i];
                    if n == 0 {
                        continue;
                    }
                    parts.push(if s.total == n { o } else { ctx.tape.slice_rows(o, off, off + n)? });
                }
            }
            z.push(if parts.len() == 1 {
                parts[0]
            } else {
                ctx.tape.concat_rows(&parts)?
            });
        }
        Ok(SmopOutput {
            z,
            decisions,
            evaluations,
        })
    }

    /// Compresses one modality for every sample and stacks the results.
    fn stack<'t>(
        &self,
        ctx: &mut Ctx,
        batch: &[ModalityInput<'t>],
        pick: impl Fn(&ModalityInput<'t>) -> Option<&'t Tensor>,
        d: usize,
    ) -> Result<Option<Stacked>> {
        let r = self.config.compression_rate;
        let mut spans = Vec::with_capacity(batch.len());
        let mut data = Vec::new();
        let mut total = 0;
        for m in batch {
            match pick(m) {
                Some(t) => {
                    if t.shape().len() != 2 || t.cols() != d {
                        return Err(crate::error::shape_err("smop_forward", t.shape(), &[t.rows(), d]));
                    }
                    let c = compress_tokens(t, r)?;
                    spans.push((total, c.rows()));
                    total += c.rows();
                    data.extend_from_slice(c.data());
                }
                None => spans.push((total, 0)),
            }
        }
        if total == 0 {
            return Ok(None);
        }
        let tokens = ctx.constant(Tensor::new(vec![total, r * d], data)?);
        Ok(Some(Stacked {
            tokens,
            spans,
            total,
        }))
    }
}

struct Stacked {
    tokens: Var,
    /// `(row offset, rows)` per sample.
    spans: Vec<(usize, usize)>,
    total: usize,
}

/// Parameter accounting for conditional computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamAccounting {
    /// K × (parameters of one expert), for the widest expert in the module.
    pub activated_expert_params: usize,
    /// Router weights touched per token (`d_in · N`), for the widest router.
    pub router_params_per_token: usize,
    pub total_expert_params: usize,
    pub total_router_params: usize,
    pub adapter_params: usize,
}

impl ParamAccounting {
    pub fn per_token_activated(&self) -> usize {
        self.activated_expert_params + self.router_params_per_token
    }

    pub fn total_params(&self) -> usize {
        self.total_expert_params + self.total_router_params + self.adapter_params
    }
}

pub fn activated_param_count(config: &SmopConfig) -> Result<ParamAccounting> {
    config.validate()?;
    let (wa, wv, h, out, k) = (
        config.audio_width(),
        config.video_width(),
        config.hidden(),
        config.d_llm,
        config.top_k,
    );
    // (router d_in, pool size, expert d_in) per router.
    let branches: Vec<(usize, usize, usize)> = match config.variant {
        Variant::Jejr => vec![(wa, config.n_experts, wa)],
        Variant::Dedr => vec![
            (wa, config.n_experts_audio, wa),
            (wv, config.n_experts_video, wv),
        ],
        Variant::Jedr => vec![(wa, config.n_experts, wa), (wa, config.n_experts, wa)],
    };
    let pools: Vec<(usize, usize)> = match config.variant {
        Variant::Jejr | Variant::Jedr => vec![(config.n_experts, wa)],
        Variant::Dedr => vec![(config.n_experts_audio, wa), (config.n_experts_video, wv)],
    };
    let activated_expert_params = branches
        .iter()
        .map(|&(_, _, d_in)| k * expert_param_count(d_in, h, out))
        .max()
        .unwrap_or(0);
    let router_params_per_token = branches.iter().map(|&(d, n, _)| d * n).max().unwrap_or(0);
    Ok(ParamAccounting {
        activated_expert_params,
        router_params_per_token,
        total_expert_params: pools
            .iter()
            .map(|&(n, d_in)| n * expert_param_count(d_in, h, out))
            .sum(),
        total_router_params: branches.iter().map(|&(d, n, _)| d * n).sum(),
        adapter_params: if config.needs_adapter() { wv * wa } else { 0 },
    })
}
