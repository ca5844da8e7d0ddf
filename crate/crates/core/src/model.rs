//! Domain types shared by every stage of the engine and the seeded synthetic
//! latent stream that stands in for generated video latents.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{config_err, shape_err, Error, Result};

/// Model geometry. `tokens_per_frame` is the per-frame token count and
/// `chunk_frames` the number of query frames generated per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub head_dim: usize,
    pub tokens_per_frame: usize,
    pub chunk_frames: usize,
    pub dense_window: usize,
}

impl ModelShape {
    /// Geometry of the 1.3B-class backbone used for the analytical cost figures.
    pub const fn reference_backbone() -> Self {
        Self {
            num_layers: 30,
            heads_per_layer: 12,
            head_dim: 128,
            tokens_per_frame: 1560,
            chunk_frames: 3,
            dense_window: 21,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("head_dim", self.head_dim),
            ("tokens_per_frame", self.tokens_per_frame),
            ("chunk_frames", self.chunk_frames),
            ("dense_window", self.dense_window),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(config_err(format!("{name} must be >= 1")));
            }
        }
        if self.head_dim % 2 != 0 {
            return Err(config_err(format!(
                "head_dim must be even for rotary pairing, got {}",
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Hidden width of one token: heads × head_dim.
    pub fn width(&self) -> usize {
        self.heads_per_layer * self.head_dim
    }

    pub fn frame_len(&self) -> usize {
        self.tokens_per_frame * self.width()
    }
}

/// One frame of activations laid out as `[token][head][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    frame_index: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
    data: Vec<f32>,
}

impl FrameTensor {
    pub fn new(
        frame_index: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != tokens * heads * head_dim {
            return Err(shape_err(format!(
                "frame {frame_index}: expected {} elements ({tokens}x{heads}x{head_dim}), got {}",
                tokens * heads * head_dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "frame {frame_index}: non-finite entry at offset {pos}"
            )));
        }
        Ok(Self {
            frame_index,
            tokens,
            heads,
            head_dim,
            data,
        })
    }

    pub fn zeros(frame_index: usize, tokens: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            frame_index,
            tokens,
            heads,
            head_dim,
            data: vec![0.0; tokens * heads * head_dim],
        }
    }

    pub fn for_shape(frame_index: usize, shape: &ModelShape, data: Vec<f32>) -> Result<Self> {
        Self::new(
            frame_index,
            shape.tokens_per_frame,
            shape.heads_per_layer,
            shape.head_dim,
            data,
        )
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The `head_dim` vector of one token in one head.
    #[inline]
    pub fn row(&self, token: usize, head: usize) -> &[f32] {
        let start = (token * self.heads + head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    #[inline]
    pub fn row_mut(&mut self, token: usize, head: usize) -> &mut [f32] {
        let start = (token * self.heads + head) * self.head_dim;
        &mut self.data[start..start + self.head_dim]
    }

    /// All heads of one token, i.e. the token's full hidden vector.
    #[inline]
    pub fn token(&self, token: usize) -> &[f32] {
        let width = self.heads * self.head_dim;
        &self.data[token * width..(token + 1) * width]
    }

    pub fn same_layout(&self, other: &FrameTensor) -> bool {
        self.tokens == other.tokens && self.heads == other.heads && self.head_dim == other.head_dim
    }

    pub fn with_index(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }
}

/// Keys and values of one layer, ordered by strictly increasing frame index.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    keys: Vec<FrameTensor>,
    values: Vec<FrameTensor>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[FrameTensor] {
        &self.keys
    }

    pub fn values(&self) -> &[FrameTensor] {
        &self.values
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.keys.iter().map(FrameTensor::frame_index).collect()
    }

    pub fn position_of(&self, frame_index: usize) -> Option<usize> {
        self.keys
            .binary_search_by_key(&frame_index, FrameTensor::frame_index)
            .ok()
    }

    pub fn key(&self, frame_index: usize) -> Option<&FrameTensor> {
        self.position_of(frame_index).map(|p| &self.keys[p])
    }

    pub fn value(&self, frame_index: usize) -> Option<&FrameTensor> {
        self.position_of(frame_index).map(|p| &self.values[p])
    }

    fn push(&mut self, key: FrameTensor, value: FrameTensor) -> Result<()> {
        if key.frame_index() != value.frame_index() {
            return Err(Error::Integrity(format!(
                "key frame {} paired with value frame {}",
                key.frame_index(),
                value.frame_index()
            )));
        }
        if !key.same_layout(&value) {
            return Err(shape_err("key and value layouts differ"));
        }
        if let Some(last) = self.keys.last() {
            if key.frame_index() <= last.frame_index() {
                return Err(Error::Integrity(format!(
                    "frame {} appended after frame {}; indices must strictly increase",
                    key.frame_index(),
                    last.frame_index()
                )));
            }
            if !last.same_layout(&key) {
                return Err(shape_err("appended frame layout differs from cached frames"));
            }
        }
        self.keys.push(key);
        self.values.push(value);
        Ok(())
    }

    fn retain(&mut self, keep: impl Fn(usize) -> bool) {
        let mask: Vec<bool> = self.keys.iter().map(|k| keep(k.frame_index())).collect();
        let mut it = mask.iter();
        self.keys.retain(|_| *it.next().unwrap());
        let mut it = mask.iter();
        self.values.retain(|_| *it.next().unwrap());
    }
}

/// Per-layer KV cache with anchor and current-chunk bookkeeping.
///
/// Appends take `&mut self`, so a layer is never read while it is written.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    anchor_policy: BTreeSet<usize>,
    anchors: BTreeSet<usize>,
    generated: BTreeSet<usize>,
}

impl KvCache {
    /// `anchor_policy` lists frame indices that become anchors once stored.
    pub fn new(num_layers: usize, anchor_policy: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layers: vec![LayerCache::default(); num_layers],
            anchor_policy: anchor_policy.into_iter().collect(),
            anchors: BTreeSet::new(),
            generated: BTreeSet::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerCache> {
        self.layers
            .get(layer)
            .ok_or_else(|| config_err(format!("layer {layer} out of range")))
    }

    pub fn append(&mut self, layer: usize, key: FrameTensor, value: FrameTensor) -> Result<()> {
        let idx = key.frame_index();
        let slot = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| config_err(format!("layer {layer} out of range")))?;
        slot.push(key, value)?;
        if self.anchor_policy.contains(&idx) {
            self.anchors.insert(idx);
        }
        Ok(())
    }

    /// Marks the frames of the chunk currently being generated.
    pub fn begin_chunk(&mut self, generated: impl IntoIterator<Item = usize>) {
        self.generated = generated.into_iter().collect();
    }

    pub fn anchor_indices(&self) -> &BTreeSet<usize> {
        &self.anchors
    }

    pub fn generated_indices(&self) -> &BTreeSet<usize> {
        &self.generated
    }

    /// Stored frames excluding the current chunk, ascending.
    pub fn history_indices(&self, layer: usize) -> Result<Vec<usize>> {
        Ok(self
            .layer(layer)?
            .frame_indices()
            .into_iter()
            .filter(|f| !self.generated.contains(f))
            .collect())
    }

    /// Number of stored frames in layer 0 (all layers grow in lockstep).
    pub fn stored_frames(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    /// Keeps the newest `window` frames plus every index in `pinned`.
    pub fn evict_to_window(&mut self, window: usize, pinned: &BTreeSet<usize>) {
        for layer in &mut self.layers {
            let idx = layer.frame_indices();
            let unpinned: Vec<usize> = idx.iter().copied().filter(|f| !pinned.contains(f)).collect();
            let cut = unpinned.len().saturating_sub(window);
            let dropped: BTreeSet<usize> = unpinned[..cut].iter().copied().collect();
            layer.retain(|f| !dropped.contains(&f));
        }
        let stored: BTreeSet<usize> = self
            .layers
            .first()
            .map(|l| l.frame_indices().into_iter().collect())
            .unwrap_or_default();
        self.anchors.retain(|a| stored.contains(a));
        self.generated.retain(|g| stored.contains(g));
    }
}

/// A window of `K` consecutive latent frames, each flattened to `frame_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWindow {
    pub frames: Vec<f32>,
    pub frame_len: usize,
    pub prompt_id: u64,
    pub window_index: usize,
}

impl LatentWindow {
    pub fn new(frames: Vec<f32>, frame_len: usize, prompt_id: u64, window_index: usize) -> Result<Self> {
        if frame_len == 0 || frames.is_empty() || frames.len() % frame_len != 0 {
            return Err(shape_err(format!(
                "window of {} elements is not a positive multiple of frame length {frame_len}",
                frames.len()
            )));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("latent window has non-finite entries".into()));
        }
        Ok(Self {
            frames,
            frame_len,
            prompt_id,
            window_index,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.frame_len
    }
}

/// How the synthetic stream injects redundancy across frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum Redundancy {
    /// Every element independent.
    #[default]
    Iid,
    /// Odd frames repeat the preceding even frame exactly.
    Duplicate,
    /// The leading `static_fraction` of tokens is identical in every frame.
    StaticRegion { static_fraction: f64 },
}

/// SplitMix64 finaliser used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded standard-normal latents, `chunk_frames` frames per chunk, returned
/// chunk by chunk with contiguous frame indices starting at 0.
pub fn make_synthetic_stream(config: &RunConfig, num_chunks: usize) -> Result<Vec<Vec<FrameTensor>>> {
    config.validate()?;
    synthetic_stream(&config.shape, config.stream.redundancy, config.seed, num_chunks)
}

pub(crate) fn synthetic_stream(
    shape: &ModelShape,
    redundancy: Redundancy,
    seed: u64,
    num_chunks: usize,
) -> Result<Vec<Vec<FrameTensor>>> {
    if num_chunks == 0 {
        return Err(config_err("num_chunks must be >= 1"));
    }
    let frame_len = shape.frame_len();
    let width = shape.width();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED_57EA));
    let static_tokens = match redundancy {
        Redundancy::StaticRegion { static_fraction } => {
            if !(0.0..=1.0).contains(&static_fraction) {
                return Err(config_err("static_fraction must lie in [0, 1]"));
            }
            (static_fraction * shape.tokens_per_frame as f64).round() as usize
        }
        _ => 0,
    };
    let background: Vec<f32> = (0..static_tokens * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let total = num_chunks * shape.chunk_frames;
    let mut frames: Vec<Vec<f32>> = Vec::with_capacity(total);
    for f in 0..total {
        let data = match redundancy {
            Redundancy::Duplicate if f % 2 == 1 => frames[f - 1].clone(),
            _ => {
                let mut data: Vec<f32> = (0..frame_len).map(|_| StandardNormal.sample(&mut rng)).collect();
                data[..background.len()].copy_from_slice(&background);
                data
            }
        };
        frames.push(data);
    }

    let mut chunks = Vec::with_capacity(num_chunks);
    let mut iter = frames.into_iter().enumerate();
    for _ in 0..num_chunks {
        let chunk = iter
            .by_ref()
            .take(shape.chunk_frames)
            .map(|(idx, data)| FrameTensor::for_shape(idx, shape, data))
            .collect::<Result<Vec<_>>>()?;
        chunks.push(chunk);
    }
    Ok(chunks)
}
