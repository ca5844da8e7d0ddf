//! Per-query-frame history scoring and budgeted Top-K selection.
//!
//! For every query frame and head, each cached historical frame receives
//!
//! - a grouped attention score: the mean scaled inner product between the
//!   `P` pooled query groups and the `P` pooled key groups,
//! - a diversity score: the negated average cosine similarity between the
//!   frame's keys and the mean historical key, token by token.
//!
//! Both are standardised along the history axis and mixed with weight
//! `lambda`; the highest-scoring non-reserved frames fill the head budget.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::importance::HeadBudgetTable;
use crate::model::{FrameTensor, KvCache, LayerCache};
use crate::rope::RopeSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    AttentionRaw,
    AttentionStd,
    DiversityStd,
    Fused,
}

/// Scores laid out `[query_frame][head][history_frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub kind: ScoreKind,
    pub query_frames: Vec<usize>,
    pub heads: usize,
    pub history: Vec<usize>,
    pub values: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(
        kind: ScoreKind,
        query_frames: Vec<usize>,
        heads: usize,
        history: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != query_frames.len() * heads * history.len() {
            return Err(shape_err(format!(
                "score tensor expects {}x{}x{} values, got {}",
                query_frames.len(),
                heads,
                history.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("score tensor has non-finite values".into()));
        }
        Ok(Self {
            kind,
            query_frames,
            heads,
            history,
            values,
        })
    }

    /// Scores over history for one (query frame position, head).
    pub fn slice(&self, q: usize, h: usize) -> &[f64] {
        let n = self.history.len();
        let start = (q * self.heads + h) * n;
        &self.values[start..start + n]
    }

    fn same_axes(&self, other: &ScoreTensor) -> bool {
        self.query_frames == other.query_frames && self.heads == other.heads && self.history == other.history
    }

    fn map_slices(&self, kind: ScoreKind, f: impl Fn(&[f64]) -> Vec<f64>) -> ScoreTensor {
        let n = self.history.len();
        let mut values = Vec::with_capacity(self.values.len());
        if n > 0 {
            for slice in self.values.chunks(n) {
                values.extend(f(slice));
            }
        }
        ScoreTensor {
            kind,
            query_frames: self.query_frames.clone(),
            heads: self.heads,
            history: self.history.clone(),
            values,
        }
    }
}

/// Mean-pooled token groups of one frame, laid out `[group][head][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFrame {
    pub frame_index: usize,
    pub groups: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub data: Vec<f64>,
}

impl PooledFrame {
    pub fn group(&self, g: usize, h: usize) -> &[f64] {
        let start = (g * self.heads + h) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    /// Rotates every pooled vector at this frame's index. Temporal rotation is
    /// the same for every token of a frame, so it commutes with pooling.
    pub fn rotated(&self, rope: &RopeSpec) -> Result<PooledFrame> {
        let mut data = Vec::with_capacity(self.data.len());
        for v in self.data.chunks(self.head_dim) {
            data.extend(rope.apply(v, self.frame_index as i64)?);
        }
        Ok(PooledFrame { data, ..self.clone() })
    }

    /// Per-head mean over groups, `[head][dim]`.
    fn group_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.heads * self.head_dim];
        for g in 0..self.groups {
            for h in 0..self.heads {
                for (o, x) in out[h * self.head_dim..(h + 1) * self.head_dim]
                    .iter_mut()
                    .zip(self.group(g, h))
                {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / self.groups as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Partitions tokens into `groups` contiguous groups (group `g` spans tokens
/// `⌊g·N/P⌋ .. ⌊(g+1)·N/P⌋`) and averages each group per head.
pub fn group_pool(frame: &FrameTensor, groups: usize) -> Result<PooledFrame> {
    let n = frame.tokens();
    if groups == 0 || groups > n {
        return Err(config_err(format!("group count {groups} outside [1, {n}]")));
    }
    let (heads, dim) = (frame.heads(), frame.head_dim());
    let mut data = vec![0.0f64; groups * heads * dim];
    for g in 0..groups {
        let (lo, hi) = (g * n / groups, (g + 1) * n / groups);
        let inv = 1.0 / (hi - lo) as f64;
        for h in 0..heads {
            let out = &mut data[(g * heads + h) * dim..(g * heads + h + 1) * dim];
            for t in lo..hi {
                for (o, &x) in out.iter_mut().zip(frame.row(t, h)) {
                    *o += x as f64;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(PooledFrame {
        frame_index: frame.frame_index(),
        groups,
        heads,
        head_dim: dim,
        data,
    })
}

/// Frame-level attention score `(1/P²) Σ_u Σ_v ⟨Q̄_u, K̄_v⟩ / √D`.
///
/// The double sum factorises into the inner product of the group means.
pub fn attention_scores(queries: &[PooledFrame], keys: &[PooledFrame]) -> Result<ScoreTensor> {
    let Some(first) = queries.first().or(keys.first()) else {
        return ScoreTensor::new(ScoreKind::AttentionRaw, vec![], 0, vec![], vec![]);
    };
    let (heads, dim) = (first.heads, first.head_dim);
    for p in queries.iter().chain(keys) {
        if p.heads != heads || p.head_dim != dim {
            return Err(shape_err("pooled frames disagree on heads or head_dim"));
        }
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let q_means: Vec<Vec<f64>> = queries.iter().map(PooledFrame::group_mean).collect();
    let k_means: Vec<Vec<f64>> = keys.iter().map(PooledFrame::group_mean).collect();
    let mut values = Vec::with_capacity(queries.len() * heads * keys.len());
    for qm in &q_means {
        for h in 0..heads {
            let qv = &qm[h * dim..(h + 1) * dim];
            for km in &k_means {
                let kv = &km[h * dim..(h + 1) * dim];
                values.push(qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() * scale);
            }
        }
    }
    ScoreTensor::new(
        ScoreKind::AttentionRaw,
        queries.iter().map(|p| p.frame_index).collect(),
        heads,
        keys.iter().map(|p| p.frame_index).collect(),
        values,
    )
}

/// `(x − μ) / (σ + ε)` with the population standard deviation.
pub fn standardize_slice(xs: &[f64], epsilon: f64) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    xs.iter().map(|x| (x - mean) / denom).collect()
}

/// Standardises raw attention scores along the history axis.
pub fn standardize(scores: &ScoreTensor, epsilon: f64) -> Result<ScoreTensor> {
    if scores.kind != ScoreKind::AttentionRaw {
        return Err(Error::Validation(format!(
            "standardize expects attention_raw scores, got {:?}",
            scores.kind
        )));
    }
    Ok(scores.map_slices(ScoreKind::AttentionStd, |s| standardize_slice(s, epsilon)))
}

/// Redundancy `R[h][k]`: token-averaged cosine between each frame's key and
/// the mean key over all given frames.
pub fn redundancy(keys: &[&FrameTensor], epsilon: f64) -> Result<Vec<f64>> {
    let Some(first) = keys.first() else {
        return Ok(Vec::new());
    };
    if keys.iter().any(|k| !k.same_layout(first)) {
        return Err(shape_err("historical key frames disagree on layout"));
    }
    let (tokens, heads, dim) = (first.tokens(), first.heads(), first.head_dim());
    let f_h = keys.len();
    let inv_f = 1.0 / f_h as f64;
    let mut out = vec![0.0f64; heads * f_h];
    let mut mean = vec![0.0f64; dim];
    for t in 0..tokens {
        for h in 0..heads {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for k in keys {
                for (m, &x) in mean.iter_mut().zip(k.row(t, h)) {
                    *m += x as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_f);
            let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt() + epsilon;
            for (kf, k) in keys.iter().enumerate() {
                let row = k.row(t, h);
                let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() + epsilon;
                let dot: f64 = row.iter().zip(&mean).map(|(&x, m)| x as f64 * m).sum();
                out[h * f_h + kf] += dot / (norm * mean_norm);
            }
        }
    }
    let inv_t = 1.0 / tokens as f64;
    out.iter_mut().for_each(|r| *r *= inv_t);
    Ok(out)
}

/// Standardised diversity `D̃ = std(−R)`, broadcast to every query frame.
pub fn diversity_scores(keys: &[&FrameTensor], query_frames: &[usize], epsilon: f64) -> Result<ScoreTensor> {
    let history: Vec<usize> = keys.iter().map(|k| k.frame_index()).collect();
    let heads = keys.first().map_or(0, |k| k.heads());
    let r = redundancy(keys, epsilon)?;
    let f_h = keys.len();
    let mut per_head = Vec::with_capacity(r.len());
    if f_h > 0 {
        for slice in r.chunks(f_h) {
            let neg: Vec<f64> = slice.iter().map(|x| -x).collect();
            per_head.extend(standardize_slice(&neg, epsilon));
        }
    }
    let mut values = Vec::with_capacity(query_frames.len() * per_head.len());
    for _ in query_frames {
        values.extend_from_slice(&per_head);
    }
    ScoreTensor::new(ScoreKind::DiversityStd, query_frames.to_vec(), heads, history, values)
}

/// `S = λ·Ã + (1 − λ)·D̃`.
pub fn fuse_scores(attention: &ScoreTensor, diversity: &ScoreTensor, lambda: f64) -> Result<ScoreTensor> {
    if attention.kind != ScoreKind::AttentionStd || diversity.kind != ScoreKind::DiversityStd {
        return Err(Error::Validation("fuse expects attention_std and diversity_std".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config_err(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if !attention.same_axes(diversity) {
        return Err(shape_err("attention and diversity scores have different axes"));
    }
    let values = attention
        .values
        .iter()
        .zip(&diversity.values)
        .map(|(a, d)| lambda * a + (1.0 - lambda) * d)
        .collect();
    Ok(ScoreTensor {
        kind: ScoreKind::Fused,
        values,
        ..attention.clone()
    })
}

/// Retained frames for one (layer, head, query frame).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub layer: usize,
    pub head: usize,
    pub query_frame: usize,
    pub retained: Vec<usize>,
    pub reserved: Vec<usize>,
}

/// Selections for any number of layers, heads and query frames.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionMask {
    pub entries: Vec<MaskEntry>,
}

impl SelectionMask {
    pub fn entry(&self, layer: usize, head: usize, query_frame: usize) -> Option<&MaskEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.head == head && e.query_frame == query_frame)
    }

    pub fn for_layer(&self, layer: usize) -> impl Iterator<Item = &MaskEntry> {
        self.entries.iter().filter(move |e| e.layer == layer)
    }

    pub fn extend(&mut self, other: SelectionMask) {
        self.entries.extend(other.entries);
    }

    /// Checks ordering, duplicates and reserved ⊆ retained. With `budgets`,
    /// also checks |retained \ reserved| ≤ b for each entry.
    pub fn validate(&self, budgets: Option<&HeadBudgetTable>) -> Result<()> {
        for e in &self.entries {
            let ctx = || format!("layer {} head {} query frame {}", e.layer, e.head, e.query_frame);
            if e.retained.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Integrity(format!("{}: retained not strictly ascending", ctx())));
            }
            if e.reserved.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Integrity(format!("{}: reserved not strictly ascending", ctx())));
            }
            if e.reserved.iter().any(|r| e.retained.binary_search(r).is_err()) {
                return Err(Error::Integrity(format!("{}: reserved frame not retained", ctx())));
            }
            if let Some(table) = budgets {
                let b = table
                    .budget(e.layer, e.head)
                    .ok_or_else(|| config_err(format!("{}: no budget", ctx())))?;
                if e.retained.len() - e.reserved.len() > b as usize {
                    return Err(Error::Integrity(format!("{}: selection exceeds budget {b}", ctx())));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Frames kept outside the budget: anchors and the current chunk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReservedFrames {
    pub anchors: BTreeSet<usize>,
    pub generated: BTreeSet<usize>,
}

impl ReservedFrames {
    pub fn from_cache(cache: &KvCache) -> Self {
        Self {
            anchors: cache.anchor_indices().clone(),
            generated: cache.generated_indices().clone(),
        }
    }
}

/// Budgeted Top-K per (query frame, head) with reservation.
///
/// Ranking is by descending score; ties go to the larger (more recent) frame
/// index. Reserved frames never consume budget.
pub fn select_with_reserved(
    scores: &ScoreTensor,
    head_budgets: &[u32],
    layer: usize,
    reserved: &ReservedFrames,
) -> Result<SelectionMask> {
    if head_budgets.len() < scores.heads {
        return Err(config_err(format!(
            "layer {layer}: {} head budgets for {} heads",
            head_budgets.len(),
            scores.heads
        )));
    }
    let reserved_hist: BTreeSet<usize> = scores
        .history
        .iter()
        .copied()
        .filter(|f| reserved.anchors.contains(f) || reserved.generated.contains(f))
        .collect();
    let reserved_all: Vec<usize> = reserved_hist.union(&reserved.generated).copied().collect();

    let mut entries = Vec::with_capacity(scores.query_frames.len() * scores.heads);
    for (qi, &qf) in scores.query_frames.iter().enumerate() {
        for (h, &budget) in head_budgets.iter().enumerate().take(scores.heads) {
            let slice = scores.slice(qi, h);
            let mut candidates: Vec<(f64, usize)> = scores
                .history
                .iter()
                .zip(slice)
                .filter(|(f, _)| !reserved_hist.contains(f))
                .map(|(&f, &s)| (s, f))
                .collect();
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
            let mut retained: Vec<usize> = candidates
                .iter()
                .take(budget as usize)
                .map(|&(_, f)| f)
                .chain(reserved_all.iter().copied())
                .collect();
            retained.sort_unstable();
            retained.dedup();
            entries.push(MaskEntry {
                layer,
                head: h,
                query_frame: qf,
                retained,
                reserved: reserved_all.clone(),
            });
        }
    }
    Ok(SelectionMask { entries })
}

/// Top-K selection for one layer using the frozen budget table and the
/// cache's anchor and current-chunk sets.
pub fn select_history(
    scores: &ScoreTensor,
    budgets: &HeadBudgetTable,
    cache: &KvCache,
    layer: usize,
) -> Result<SelectionMask> {
    let row = budgets
        .layer_budgets(layer)
        .ok_or_else(|| config_err(format!("budget table has no layer {layer}")))?;
    select_with_reserved(scores, row, layer, &ReservedFrames::from_cache(cache))
}

/// Knobs for scoring one layer's history.
#[derive(Debug, Clone, Copy)]
pub struct ScoringParams<'a> {
    pub groups: usize,
    pub lambda: f64,
    pub epsilon: f64,
    /// When set, pooled Q/K are rotated at their frame index before scoring.
    pub rope: Option<&'a RopeSpec>,
}

#[derive(Debug, Clone)]
pub struct LayerScores {
    pub attention: ScoreTensor,
    pub diversity: ScoreTensor,
    pub fused: ScoreTensor,
}

/// Scores every cached frame listed in `history` against the chunk queries.
/// Keys are read as stored (pre-rotation).
pub fn score_history(
    queries: &[FrameTensor],
    layer_cache: &LayerCache,
    history: &[usize],
    params: ScoringParams<'_>,
) -> Result<LayerScores> {
    let keys: Vec<&FrameTensor> = history
        .iter()
        .map(|&f| {
            layer_cache
                .key(f)
                .ok_or_else(|| Error::Integrity(format!("history frame {f} missing from cache")))
        })
        .collect::<Result<_>>()?;
    let pool = |f: &FrameTensor| -> Result<PooledFrame> {
        let p = group_pool(f, params.groups)?;
        match params.rope {
            Some(rope) => p.rotated(rope),
            None => Ok(p),
        }
    };
    let q_pooled = queries.iter().map(pool).collect::<Result<Vec<_>>>()?;
    let k_pooled = keys.iter().map(|k| pool(k)).collect::<Result<Vec<_>>>()?;
    let mut raw = attention_scores(&q_pooled, &k_pooled)?;
    if raw.heads == 0 {
        raw.heads = queries.first().map_or(0, FrameTensor::heads);
    }
    let attention = standardize(&raw, params.epsilon)?;
    let query_frames: Vec<usize> = queries.iter().map(FrameTensor::frame_index).collect();
    let mut diversity = diversity_scores(&keys, &query_frames, params.epsilon)?;
    diversity.heads = attention.heads;
    let fused = fuse_scores(&attention, &diversity, params.lambda)?;
    Ok(LayerScores {
        attention,
        diversity,
        fused,
    })
}
