//! Variable-length packed attention.
//!
//! Each (query frame, head) pair becomes one segment: its query rows are the
//! frame's tokens in that head, its key/value rows are the tokens of the
//! retained frames concatenated in ascending frame order. Segments are laid
//! end to end in flat buffers delimited by the cumulative boundary arrays
//! `cu_q` and `cu_k`, and attention is computed per segment only.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::model::{FrameTensor, LayerCache};
use crate::rope::RopeSpec;
use crate::scoring::SelectionMask;

/// Prefix sums with a leading zero: `[0, l0, l0 + l1, ...]`.
pub fn build_cu(lengths: &[usize]) -> Vec<usize> {
    let mut cu = Vec::with_capacity(lengths.len() + 1);
    cu.push(0);
    let mut acc = 0;
    for &l in lengths {
        acc += l;
        cu.push(acc);
    }
    cu
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMeta {
    pub layer: usize,
    pub head: usize,
    pub query_frame: usize,
    pub retained: Vec<usize>,
    /// First packed query row of this segment.
    pub q_start: usize,
    pub q_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub head_dim: usize,
    pub q_pack: Vec<f32>,
    pub k_pack: Vec<f32>,
    pub v_pack: Vec<f32>,
    pub cu_q: Vec<usize>,
    pub cu_k: Vec<usize>,
    pub segments: Vec<SegmentMeta>,
}

impl PackedBatch {
    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn total_q(&self) -> usize {
        *self.cu_q.last().unwrap_or(&0)
    }

    pub fn total_k(&self) -> usize {
        *self.cu_k.last().unwrap_or(&0)
    }

    pub fn k_len(&self, segment: usize) -> usize {
        self.cu_k[segment + 1] - self.cu_k[segment]
    }

    /// Boundary arrays start at 0, never decrease, end at the buffer lengths
    /// and agree with the segment metadata.
    pub fn validate(&self) -> Result<()> {
        let d = self.head_dim;
        let n = self.segments.len();
        if self.cu_q.len() != n + 1 || self.cu_k.len() != n + 1 {
            return Err(Error::Integrity(format!(
                "{n} segments but cu_q has {} and cu_k has {} entries",
                self.cu_q.len(),
                self.cu_k.len()
            )));
        }
        for cu in [&self.cu_q, &self.cu_k] {
            if cu[0] != 0 || cu.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Integrity("cumulative boundaries must start at 0 and be non-decreasing".into()));
            }
        }
        if d == 0
            || self.q_pack.len() != self.total_q() * d
            || self.k_pack.len() != self.total_k() * d
            || self.v_pack.len() != self.k_pack.len()
        {
            return Err(Error::Integrity("packed buffers disagree with boundary arrays".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.q_start != self.cu_q[i] || s.q_len != self.cu_q[i + 1] - self.cu_q[i] {
                return Err(Error::Integrity(format!("segment {i} query offsets disagree with cu_q")));
            }
            if s.retained.is_empty() != (self.k_len(i) == 0) {
                return Err(Error::Integrity(format!("segment {i} key length disagrees with its retained frames")));
            }
            if !s.retained.is_empty() && self.k_len(i) % s.retained.len() != 0 {
                return Err(Error::Integrity(format!("segment {i} key length is not a whole number of frames")));
            }
        }
        Ok(())
    }
}

/// Packs one layer. Segments are ordered by query frame (in the order given),
/// then by head. Queries and keys are rotated at their frame index when a
/// rotary spec is supplied; values are never rotated.
pub fn pack(
    mask: &SelectionMask,
    queries: &[FrameTensor],
    layer_cache: &LayerCache,
    layer: usize,
    rope: Option<&RopeSpec>,
) -> Result<PackedBatch> {
    let Some(first) = queries.first() else {
        return Ok(PackedBatch {
            head_dim: layer_cache.keys().first().map_or(1, FrameTensor::head_dim),
            q_pack: vec![],
            k_pack: vec![],
            v_pack: vec![],
            cu_q: vec![0],
            cu_k: vec![0],
            segments: vec![],
        });
    };
    let (tokens, heads, d) = (first.tokens(), first.heads(), first.head_dim());
    if let Some(k) = layer_cache.keys().first() {
        if k.heads() != heads || k.head_dim() != d {
            return Err(shape_err("query and cached key layouts differ"));
        }
    }
    let mut entries: Vec<Option<&crate::scoring::MaskEntry>> = vec![None; queries.len() * heads];
    let positions: std::collections::HashMap<usize, usize> =
        queries.iter().enumerate().map(|(i, q)| (q.frame_index(), i)).collect();
    for e in mask.for_layer(layer) {
        if let Some(&qi) = positions.get(&e.query_frame) {
            if e.head >= heads {
                return Err(Error::Integrity(format!("mask head {} out of range", e.head)));
            }
            entries[qi * heads + e.head] = Some(e);
        }
    }

    let mut q_pack = Vec::with_capacity(queries.len() * heads * tokens * d);
    let mut k_pack = Vec::new();
    let mut v_pack = Vec::new();
    let mut q_lens = Vec::with_capacity(entries.len());
    let mut k_lens = Vec::with_capacity(entries.len());
    let mut segments = Vec::with_capacity(entries.len());
    let mut row = vec![0.0f32; d];

    for (qi, q) in queries.iter().enumerate() {
        if !q.same_layout(first) {
            return Err(shape_err("query frames disagree on layout"));
        }
        for h in 0..heads {
            let entry = entries[qi * heads + h].ok_or_else(|| {
                Error::Integrity(format!(
                    "no mask entry for layer {layer} head {h} query frame {}",
                    q.frame_index()
                ))
            })?;
            let q_start = q_pack.len() / d;
            for t in 0..tokens {
                row.copy_from_slice(q.row(t, h));
                if let Some(r) = rope {
                    r.rotate_f32(&mut row, q.frame_index() as i64);
                }
                q_pack.extend_from_slice(&row);
            }
            let mut k_rows = 0;
            for &f in &entry.retained {
                let (key, value) = match (layer_cache.key(f), layer_cache.value(f)) {
                    (Some(k), Some(v)) => (k, v),
                    _ => {
                        return Err(Error::Integrity(format!(
                            "mask retains frame {f} which is not in the layer {layer} cache"
                        )))
                    }
                };
                for t in 0..key.tokens() {
                    row.copy_from_slice(key.row(t, h));
                    if let Some(r) = rope {
                        r.rotate_f32(&mut row, f as i64);
                    }
                    k_pack.extend_from_slice(&row);
                    v_pack.extend_from_slice(value.row(t, h));
                }
                k_rows += key.tokens();
            }
            q_lens.push(tokens);
            k_lens.push(k_rows);
            segments.push(SegmentMeta {
                layer,
                head: h,
                query_frame: q.frame_index(),
                retained: entry.retained.clone(),
                q_start,
                q_len: tokens,
            });
        }
    }
    let batch = PackedBatch {
        head_dim: d,
        q_pack,
        k_pack,
        v_pack,
        cu_q: build_cu(&q_lens),
        cu_k: build_cu(&k_lens),
        segments,
    };
    batch.validate()?;
    Ok(batch)
}

fn segment_attention(q: &[f32], k: &[f32], v: &[f32], d: usize) -> Vec<f32> {
    let n_q = q.len() / d;
    let n_k = k.len() / d;
    let mut out = vec![0.0f32; n_q * d];
    if n_k == 0 {
        return out;
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut logits = vec![0.0f32; n_k];
    for (qi, o) in out.chunks_mut(d).enumerate() {
        let qr = &q[qi * d..(qi + 1) * d];
        for (l, kr) in logits.iter_mut().zip(k.chunks(d)) {
            *l = qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for (w, vr) in logits.iter().zip(v.chunks(d)) {
            for (oj, vj) in o.iter_mut().zip(vr) {
                *oj += w * vj;
            }
        }
        let inv = 1.0 / sum;
        o.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

/// Segment-wise softmax attention, `O_pack` laid out like `q_pack`.
/// A segment without keys yields zero output rows.
pub fn varlen_attention(batch: &PackedBatch) -> Result<Vec<f32>> {
    batch.validate()?;
    let d = batch.head_dim;
    let parts: Vec<Vec<f32>> = (0..batch.num_segments())
        .into_par_iter()
        .map(|i| {
            let q = &batch.q_pack[batch.cu_q[i] * d..batch.cu_q[i + 1] * d];
            let k = &batch.k_pack[batch.cu_k[i] * d..batch.cu_k[i + 1] * d];
            let v = &batch.v_pack[batch.cu_k[i] * d..batch.cu_k[i + 1] * d];
            segment_attention(q, k, v, d)
        })
        .collect();
    Ok(parts.concat())
}

/// Layout of the unpacked attention output: one frame tensor per query frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputLayout {
    pub query_frames: Vec<usize>,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl OutputLayout {
    pub fn of(queries: &[FrameTensor]) -> Self {
        let first = queries.first();
        Self {
            query_frames: queries.iter().map(FrameTensor::frame_index).collect(),
            tokens: first.map_or(0, FrameTensor::tokens),
            heads: first.map_or(0, FrameTensor::heads),
            head_dim: first.map_or(0, FrameTensor::head_dim),
        }
    }
}

/// Writes each segment's rows back to `[frame][token][head][dim]`. Segment
/// order is irrelevant; overlapping or missing placements are integrity errors.
pub fn scatter(o_pack: &[f32], segments: &[SegmentMeta], layout: &OutputLayout) -> Result<Vec<FrameTensor>> {
    let d = layout.head_dim;
    let mut out: Vec<FrameTensor> = layout
        .query_frames
        .iter()
        .map(|&f| FrameTensor::zeros(f, layout.tokens, layout.heads, d))
        .collect();
    let mut written = vec![false; layout.query_frames.len() * layout.heads];
    for s in segments {
        let pos = layout
            .query_frames
            .iter()
            .position(|&f| f == s.query_frame)
            .ok_or_else(|| Error::Integrity(format!("segment for unknown query frame {}", s.query_frame)))?;
        if s.head >= layout.heads || s.q_len != layout.tokens {
            return Err(Error::Integrity(format!(
                "segment (frame {}, head {}) does not fit the output layout",
                s.query_frame, s.head
            )));
        }
        if (s.q_start + s.q_len) * d > o_pack.len() {
            return Err(Error::Integrity("segment rows exceed packed output".into()));
        }
        let slot = &mut written[pos * layout.heads + s.head];
        if *slot {
            return Err(Error::Integrity(format!(
                "overlapping placement for frame {} head {}",
                s.query_frame, s.head
            )));
        }
        *slot = true;
        for t in 0..s.q_len {
            let src = &o_pack[(s.q_start + t) * d..(s.q_start + t + 1) * d];
            out[pos].row_mut(t, s.head).copy_from_slice(src);
        }
    }
    if let Some(missing) = written.iter().position(|w| !w) {
        return Err(Error::Integrity(format!(
            "no segment for frame {} head {}",
            layout.query_frames[missing / layout.heads.max(1)],
            missing % layout.heads.max(1)
        )));
    }
    Ok(out)
}

/// Inverse of [`scatter`]: reads rows back into packed order.
pub fn gather(frames: &[FrameTensor], segments: &[SegmentMeta]) -> Result<Vec<f32>> {
    let total: usize = segments.iter().map(|s| s.q_start + s.q_len).max().unwrap_or(0);
    let d = frames.first().map_or(0, FrameTensor::head_dim);
    let mut out = vec![0.0f32; total * d];
    for s in segments {
        let frame = frames
            .iter()
            .find(|f| f.frame_index() == s.query_frame)
            .ok_or_else(|| Error::Integrity(format!("no frame {}", s.query_frame)))?;
        for t in 0..s.q_len {
            out[(s.q_start + t) * d..(s.q_start + t + 1) * d].copy_from_slice(frame.row(t, s.head));
        }
    }
    Ok(out)
}

/// Softmax over `logits` restricted to `keep`, with max subtraction.
/// Returns all zeros when nothing is kept.
pub fn masked_softmax(logits: &[f32], keep: &[bool]) -> Vec<f32> {
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&l, _)| l)
        .fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let mut w: Vec<f32> = logits
        .iter()
        .zip(keep)
        .map(|(&l, &k)| if k { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f32 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Reference attention over the whole layer cache: full logits against every
/// cached token, non-retained frames masked to −∞, stable softmax, times V.
pub fn dense_oracle(
    queries: &[FrameTensor],
    layer_cache: &LayerCache,
    mask: &SelectionMask,
    layer: usize,
    rope: Option<&RopeSpec>,
) -> Result<Vec<FrameTensor>> {
    let keys = layer_cache.keys();
    let values = layer_cache.values();
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let (tokens, heads, d) = (q.tokens(), q.heads(), q.head_dim());
        let scale = 1.0 / (d as f32).sqrt();
        let mut o = FrameTensor::zeros(q.frame_index(), tokens, heads, d);
        for h in 0..heads {
            let entry = mask
                .entry(layer, h, q.frame_index())
                .ok_or_else(|| Error::Integrity(format!("no mask entry for head {h} frame {}", q.frame_index())))?;
            let mut key_rows: Vec<Vec<f32>> = Vec::new();
            let mut value_rows: Vec<&[f32]> = Vec::new();
            let mut keep: Vec<bool> = Vec::new();
            for (k, v) in keys.iter().zip(values) {
                let kept = entry.retained.contains(&k.frame_index());
                for t in 0..k.tokens() {
                    let mut kr = k.row(t, h).to_vec();
                    if let Some(r) = rope {
                        r.rotate_f32(&mut kr, k.frame_index() as i64);
                    }
                    key_rows.push(kr);
                    value_rows.push(v.row(t, h));
                    keep.push(kept);
                }
            }
            if let Some(&f) = entry.retained.iter().find(|f| layer_cache.key(**f).is_none()) {
                return Err(Error::Integrity(format!("mask retains uncached frame {f}")));
            }
            for t in 0..tokens {
                let mut qr = q.row(t, h).to_vec();
                if let Some(r) = rope {
                    r.rotate_f32(&mut qr, q.frame_index() as i64);
                }
                let logits: Vec<f32> = key_rows
                    .iter()
                    .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                let w = masked_softmax(&logits, &keep);
                let dst = o.row_mut(t, h);
                for (wi, vr) in w.iter().zip(&value_rows) {
                    for (x, vj) in dst.iter_mut().zip(vr.iter()) {
                        *x += wi * vj;
                    }
                }
            }
        }
        out.push(o);
    }
    Ok(out)
}

/// `max |a − b| / max |b|` over all frames (norm-wise relative error).
pub fn max_relative_error(a: &[FrameTensor], b: &[FrameTensor]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (fa, fb) in a.iter().zip(b) {
        for (&x, &y) in fa.data().iter().zip(fb.data()) {
            num = num.max((x as f64 - y as f64).abs());
            den = den.max((y as f64).abs());
        }
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
