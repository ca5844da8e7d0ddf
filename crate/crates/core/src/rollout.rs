//! Synthetic chunked autoregressive rollout.
//!
//! The stand-in model is a residual stack of per-head linear attention
//! blocks: for layer `ℓ` and head `h`, Q/K/V are seeded random linear maps of
//! the hidden state, the head output is projected back with `W_o[ℓ,h]` and
//! added to the residual stream. Each chunk of `chunk_frames` frames is run
//! through every layer; its K/V enter the layer cache before attention so the
//! chunk attends to itself plus whatever history the policy retains.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::cost::frame_cost_from_masks;
use crate::error::{config_err, Error, Result};
use crate::importance::HeadBudgetTable;
use crate::model::{mix_seed, synthetic_stream, FrameTensor, KvCache, ModelShape};
use crate::packed::{pack, scatter, varlen_attention, OutputLayout};
use crate::rope::RopeSpec;
use crate::scoring::{score_history, select_history, MaskEntry, ScoringParams, SelectionMask};

/// A (layer, head) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    /// Row-major flat index `layer · H + head`.
    pub fn from_flat(flat: usize, heads: usize) -> Self {
        Self::new(flat / heads, flat % heads)
    }
}

/// Parameters of the synthetic linear attention stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModelSpec {
    /// Std of Q/K/V weights is `qkv_scale / √width`.
    #[serde(default = "default_qkv_scale")]
    pub qkv_scale: f64,
    /// Std of output projections is `output_scale / √(H · head_dim)`.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
    /// Heads whose output projection is zero.
    #[serde(default)]
    pub dead_heads: Vec<HeadId>,
    /// When set, every other head is dead.
    #[serde(default)]
    pub signal_head: Option<HeadId>,
}

fn default_qkv_scale() -> f64 {
    1.0
}
fn default_output_scale() -> f64 {
    0.5
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            qkv_scale: default_qkv_scale(),
            output_scale: default_output_scale(),
            dead_heads: Vec::new(),
            signal_head: None,
        }
    }
}

impl SyntheticModelSpec {
    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        for h in self.dead_heads.iter().chain(&self.signal_head) {
            check_head(*h, shape)?;
        }
        if !(self.qkv_scale.is_finite() && self.output_scale.is_finite()) {
            return Err(config_err("model scales must be finite"));
        }
        Ok(())
    }

    fn is_dead(&self, id: HeadId) -> bool {
        self.dead_heads.contains(&id) || self.signal_head.is_some_and(|s| s != id)
    }
}

pub(crate) fn check_head(id: HeadId, shape: &ModelShape) -> Result<()> {
    if id.layer >= shape.num_layers || id.head >= shape.heads_per_layer {
        return Err(config_err(format!(
            "head ({}, {}) outside {}x{} model",
            id.layer, id.head, shape.num_layers, shape.heads_per_layer
        )));
    }
    Ok(())
}

/// Seeded per-head weights. Input projections are `width × head_dim`,
/// output projections `head_dim × width`, both row-major.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    shape: ModelShape,
    wq: Vec<Vec<f32>>,
    wk: Vec<Vec<f32>>,
    wv: Vec<Vec<f32>>,
    wo: Vec<Vec<f32>>,
}

impl SyntheticModel {
    pub fn new(shape: &ModelShape, spec: &SyntheticModelSpec, seed: u64) -> Result<Self> {
        shape.validate()?;
        spec.validate(shape)?;
        let width = shape.width();
        let d = shape.head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0DE1_0DE1));
        let in_std = spec.qkv_scale / (width as f64).sqrt();
        let out_std = spec.output_scale / (width as f64).sqrt();
        let normal = |std: f64| Normal::new(0.0f64, std.abs()).map_err(|e| config_err(e.to_string()));
        let (n_in, n_out) = (normal(in_std)?, normal(out_std)?);
        let heads = shape.num_layers * shape.heads_per_layer;
        let mut draw = |n: &Normal<f64>, len: usize| -> Vec<f32> {
            (0..len).map(|_| n.sample(&mut rng) as f32).collect()
        };
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        let mut wo = Vec::with_capacity(heads);
        for flat in 0..heads {
            wq.push(draw(&n_in, width * d));
            wk.push(draw(&n_in, width * d));
            wv.push(draw(&n_in, width * d));
            let o = draw(&n_out, d * width);
            if spec.is_dead(HeadId::from_flat(flat, shape.heads_per_layer)) {
                wo.push(vec![0.0; d * width]);
            } else {
                wo.push(o);
            }
        }
        Ok(Self {
            shape: *shape,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    fn project(&self, x: &FrameTensor, weights: &[Vec<f32>], layer: usize) -> FrameTensor {
        let s = &self.shape;
        let (width, d, heads) = (s.width(), s.head_dim, s.heads_per_layer);
        let mut out = FrameTensor::zeros(x.frame_index(), s.tokens_per_frame, heads, d);
        for t in 0..s.tokens_per_frame {
            let xt = x.token(t);
            for h in 0..heads {
                let w = &weights[layer * heads + h];
                let dst = out.row_mut(t, h);
                for (i, &xi) in xt.iter().enumerate().take(width) {
                    let wr = &w[i * d..(i + 1) * d];
                    for (o, &wij) in dst.iter_mut().zip(wr) {
                        *o += xi * wij;
                    }
                }
            }
        }
        out
    }

    fn residual(&self, x: &FrameTensor, attn: &FrameTensor, layer: usize) -> FrameTensor {
        let s = &self.shape;
        let (width, heads) = (s.width(), s.heads_per_layer);
        let mut next = x.clone();
        let data = next.data_mut();
        for t in 0..s.tokens_per_frame {
            let dst = &mut data[t * width..(t + 1) * width];
            for h in 0..heads {
                let w = &self.wo[layer * heads + h];
                for (j, &a) in attn.row(t, h).iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &wjk) in dst.iter_mut().zip(&w[j * width..(j + 1) * width]) {
                        *o += a * wjk;
                    }
                }
            }
        }
        next
    }
}

/// History-retention policy for a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// Sliding window over the newest `window` historical frames.
    DenseWindow { window: usize },
    /// Sliding window plus the first `sinks` frames.
    AttentionSink { window: usize, sinks: usize },
    /// Budgeted selection by attention score alone.
    AttentionOnly,
    /// Budgeted selection by diversity score alone.
    DiversityOnly,
    /// Budgeted selection by the fused score with the configured lambda.
    Focused,
}

impl Policy {
    pub fn parse(name: &str, shape: &ModelShape) -> Result<Self> {
        match name {
            "dense_window" | "dense" => Ok(Policy::DenseWindow { window: shape.dense_window }),
            "attention_sink" | "sink" => Ok(Policy::AttentionSink {
                window: shape.dense_window,
                sinks: 1,
            }),
            "attention_only" => Ok(Policy::AttentionOnly),
            "diversity_only" => Ok(Policy::DiversityOnly),
            "focused" => Ok(Policy::Focused),
            other => Err(config_err(format!("unknown policy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::DenseWindow { .. } => "dense_window",
            Policy::AttentionSink { .. } => "attention_sink",
            Policy::AttentionOnly => "attention_only",
            Policy::DiversityOnly => "diversity_only",
            Policy::Focused => "focused",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::DenseWindow { window } | Policy::AttentionSink { window, .. } if *window == 0 => {
                Err(config_err("policy window must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    fn lambda(&self, config: &RunConfig) -> Option<f64> {
        match self {
            Policy::AttentionOnly => Some(1.0),
            Policy::DiversityOnly => Some(0.0),
            Policy::Focused => Some(config.lambda),
            _ => None,
        }
    }

    pub fn needs_budgets(&self) -> bool {
        self.window().is_none()
    }

    /// Window length for the sliding-window policies.
    pub fn window(&self) -> Option<usize> {
        match self {
            Policy::DenseWindow { window } | Policy::AttentionSink { window, .. } => Some(*window),
            _ => None,
        }
    }
}

/// One row of the rollout trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    pub chunk: usize,
    pub policy: String,
    /// Retained historical (layer, head, query frame, key frame) interactions.
    pub frame_cost: u64,
    /// Frames stored in the cache at the end of the chunk.
    pub cache_frames: usize,
    /// Historical frames visible to this chunk.
    pub history_frames: usize,
    pub mean_budget_utilization: f64,
    pub divergence_vs_dense: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub chunks: Vec<ChunkTrace>,
}

impl RolloutTrace {
    pub const CSV_HEADER: &'static str =
        "chunk,policy,frame_cost,cache_frames,mean_budget_utilization,divergence_vs_dense";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.chunks {
            let div = c.divergence_vs_dense.map(|d| format!("{d:.9e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                c.chunk, c.policy, c.frame_cost, c.cache_frames, c.mean_budget_utilization, div
            );
        }
        out
    }

    pub fn total_frame_cost(&self) -> u64 {
        self.chunks.iter().map(|c| c.frame_cost).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    /// Final hidden state of every generated frame, in frame order.
    pub trajectory: Vec<FrameTensor>,
    pub trace: RolloutTrace,
    /// Masks of every chunk and layer.
    pub masks: SelectionMask,
    /// Masks grouped per chunk, aligned with `trace.chunks`.
    pub chunk_masks: Vec<SelectionMask>,
}

impl RolloutOutput {
    pub fn chunk_frames(&self, chunk: usize, chunk_frames: usize) -> &[FrameTensor] {
        &self.trajectory[chunk * chunk_frames..(chunk + 1) * chunk_frames]
    }
}

/// Model, rotary spec and configuration bundled for repeated rollouts.
#[derive(Debug, Clone)]
pub struct RolloutEngine {
    config: RunConfig,
    model: SyntheticModel,
    rope: RopeSpec,
}

impl RolloutEngine {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: SyntheticModel::new(&config.shape, &config.model, config.seed)?,
            rope: config.rope_spec()?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }

    /// Runs the stream chunk by chunk. `head_mask` zeroes one head's attention
    /// output at every step.
    pub fn run(
        &self,
        stream: &[Vec<FrameTensor>],
        policy: &Policy,
        budgets: Option<&HeadBudgetTable>,
        head_mask: Option<HeadId>,
    ) -> Result<RolloutOutput> {
        policy.validate()?;
        let shape = &self.config.shape;
        if let Some(m) = head_mask {
            check_head(m, shape)?;
        }
        let budgets = match (policy.needs_budgets(), budgets) {
            (true, None) => {
                return Err(config_err(format!("policy {} requires a budget table", policy.name())))
            }
            (true, Some(b)) => {
                b.check_shape(shape)?;
                Some(b)
            }
            (false, b) => b,
        };

        let mut cache = KvCache::new(shape.num_layers, self.config.anchors.iter().copied());
        let mut trajectory = Vec::new();
        let mut trace = RolloutTrace::default();
        let mut all_masks = SelectionMask::default();
        let mut chunk_masks = Vec::with_capacity(stream.len());

        for (chunk_idx, chunk) in stream.iter().enumerate() {
            if chunk.len() != shape.chunk_frames {
                return Err(config_err(format!(
                    "chunk {chunk_idx} has {} frames, expected {}",
                    chunk.len(),
                    shape.chunk_frames
                )));
            }
            let generated: BTreeSet<usize> = chunk.iter().map(FrameTensor::frame_index).collect();
            let history_frames = cache.stored_frames();
            cache.begin_chunk(generated.iter().copied());

            let mut x: Vec<FrameTensor> = chunk.clone();
            let mut masks = SelectionMask::default();
            let mut frame_cost = 0u64;
            let (mut used, mut offered) = (0usize, 0usize);

            for layer in 0..shape.num_layers {
                let q: Vec<FrameTensor> =
                    x.iter().map(|f| self.model.project(f, &self.model.wq, layer)).collect();
                for f in &x {
                    let k = self.model.project(f, &self.model.wk, layer);
                    let v = self.model.project(f, &self.model.wv, layer);
                    cache.append(layer, k, v)?;
                }
                let layer_mask = self.layer_mask(policy, budgets, &cache, &q, layer)?;
                for e in &layer_mask.entries {
                    used += e.retained.len() - e.reserved.len();
                    offered += match policy.window() {
                        Some(w) => w,
                        None => budgets.and_then(|b| b.budget(e.layer, e.head)).unwrap_or(0) as usize,
                    };
                }

                let batch = pack(&layer_mask, &q, cache.layer(layer)?, layer, Some(&self.rope))?;
                for (i, seg) in batch.segments.iter().enumerate() {
                    let frames = batch.k_len(i) / shape.tokens_per_frame;
                    let current = seg.retained.iter().filter(|f| generated.contains(f)).count();
                    frame_cost += (frames - current) as u64;
                }
                let o_pack = varlen_attention(&batch)?;
                let mut attn = scatter(&o_pack, &batch.segments, &OutputLayout::of(&q))?;
                if let Some(m) = head_mask.filter(|m| m.layer == layer) {
                    for frame in &mut attn {
                        for t in 0..shape.tokens_per_frame {
                            frame.row_mut(t, m.head).fill(0.0);
                        }
                    }
                }
                x = x
                    .iter()
                    .zip(&attn)
                    .map(|(xf, af)| self.model.residual(xf, af, layer))
                    .collect();
                masks.extend(layer_mask);
            }

            match policy {
                Policy::DenseWindow { window } => cache.evict_to_window(*window, &BTreeSet::new()),
                Policy::AttentionSink { window, sinks } => {
                    let pinned: BTreeSet<usize> = (0..*sinks).collect();
                    cache.evict_to_window(*window, &pinned)
                }
                _ => {}
            }
            cache.begin_chunk([]);

            trace.chunks.push(ChunkTrace {
                chunk: chunk_idx,
                policy: policy.name().to_string(),
                frame_cost,
                cache_frames: cache.stored_frames(),
                history_frames,
                mean_budget_utilization: if offered == 0 { 0.0 } else { used as f64 / offered as f64 },
                divergence_vs_dense: None,
            });
            all_masks.extend(masks.clone());
            chunk_masks.push(masks);
            trajectory.extend(x);
        }
        Ok(RolloutOutput {
            trajectory,
            trace,
            masks: all_masks,
            chunk_masks,
        })
    }

    fn layer_mask(
        &self,
        policy: &Policy,
        budgets: Option<&HeadBudgetTable>,
        cache: &KvCache,
        queries: &[FrameTensor],
        layer: usize,
    ) -> Result<SelectionMask> {
        let history = cache.history_indices(layer)?;
        let generated: Vec<usize> = cache.generated_indices().iter().copied().collect();
        let heads = self.config.shape.heads_per_layer;
        let window_mask = |window: usize, sinks: usize| {
            let pinned: Vec<usize> = history.iter().copied().filter(|&f| f < sinks).collect();
            let rest: Vec<usize> = history.iter().copied().filter(|&f| f >= sinks).collect();
            let recent = &rest[rest.len().saturating_sub(window)..];
            let mut reserved: Vec<usize> = pinned.iter().chain(&generated).copied().collect();
            reserved.sort_unstable();
            let mut retained: Vec<usize> = reserved.iter().chain(recent).copied().collect();
            retained.sort_unstable();
            let mut entries = Vec::with_capacity(queries.len() * heads);
            for q in queries {
                for h in 0..heads {
                    entries.push(MaskEntry {
                        layer,
                        head: h,
                        query_frame: q.frame_index(),
                        retained: retained.clone(),
                        reserved: reserved.clone(),
                    });
                }
            }
            SelectionMask { entries }
        };
        match (policy, policy.lambda(&self.config)) {
            (Policy::DenseWindow { window }, _) => Ok(window_mask(*window, 0)),
            (Policy::AttentionSink { window, sinks }, _) => Ok(window_mask(*window, *sinks)),
            (_, Some(lambda)) => {
                let budgets = budgets.ok_or_else(|| config_err("budget table required"))?;
                let params = ScoringParams {
                    groups: self.config.groups,
                    lambda,
                    epsilon: self.config.epsilon,
                    rope: self.config.score_on_rotated.then_some(&self.rope),
                };
                let scores = score_history(queries, cache.layer(layer)?, &history, params)?;
                select_history(&scores.fused, budgets, cache, layer)
            }
            _ => Err(Error::Validation(format!("policy {} has no selection rule", policy.name()))),
        }
    }
}

/// Generates the seeded stream for `config` and runs one rollout.
pub fn run_rollout(
    config: &RunConfig,
    policy: &Policy,
    num_chunks: usize,
    budgets: Option<&HeadBudgetTable>,
) -> Result<RolloutOutput> {
    let engine = RolloutEngine::new(config)?;
    let stream = synthetic_stream(&config.shape, config.stream.redundancy, config.seed, num_chunks)?;
    engine.run(&stream, policy, budgets, None)
}

/// Mean squared difference per chunk between two trajectories.
pub fn chunk_divergence(a: &[FrameTensor], b: &[FrameTensor], chunk_frames: usize) -> Vec<f64> {
    a.chunks(chunk_frames)
        .zip(b.chunks(chunk_frames))
        .map(|(ca, cb)| {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for (fa, fb) in ca.iter().zip(cb) {
                for (&x, &y) in fa.data().iter().zip(fb.data()) {
                    sum += (x as f64 - y as f64).powi(2);
                    n += 1;
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

/// Dense sliding-window baseline used for divergence figures.
pub fn dense_baseline(shape: &ModelShape) -> Policy {
    Policy::DenseWindow { window: shape.dense_window }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub total_frame_cost: u64,
    /// Mean retained historical frames per (layer, head, query frame).
    pub mean_retained_frames: f64,
    /// Mean squared trajectory difference against the dense baseline.
    pub divergence_vs_dense: f64,
    pub trace: RolloutTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub num_chunks: usize,
    pub policies: Vec<PolicySummary>,
}

/// Runs each policy on the same stream and reports cost and divergence
/// against the dense-window baseline.
pub fn compare_policies(
    config: &RunConfig,
    policies: &[Policy],
    num_chunks: usize,
    budgets: Option<&HeadBudgetTable>,
) -> Result<ComparisonReport> {
    if policies.len() < 2 {
        return Err(config_err("compare_policies needs at least two policies"));
    }
    let engine = RolloutEngine::new(config)?;
    let shape = &config.shape;
    let stream = synthetic_stream(shape, config.stream.redundancy, config.seed, num_chunks)?;
    let dense = engine.run(&stream, &dense_baseline(shape), None, None)?;
    let mut summaries = Vec::with_capacity(policies.len());
    for policy in policies {
        let mut out = engine.run(&stream, policy, budgets, None)?;
        let per_chunk = chunk_divergence(&out.trajectory, &dense.trajectory, shape.chunk_frames);
        for (c, d) in out.trace.chunks.iter_mut().zip(&per_chunk) {
            c.divergence_vs_dense = Some(*d);
        }
        let entries = out.masks.entries.len().max(1);
        let retained_hist = frame_cost_from_masks(&out.masks, shape.chunk_frames);
        summaries.push(PolicySummary {
            policy: policy.clone(),
            total_frame_cost: out.trace.total_frame_cost(),
            mean_retained_frames: retained_hist as f64 / entries as f64,
            divergence_vs_dense: per_chunk.iter().sum::<f64>() / per_chunk.len().max(1) as f64,
            trace: out.trace,
        });
    }
    Ok(ComparisonReport {
        num_chunks,
        policies: summaries,
    })
}
