//! Causal temporal rotary embedding.
//!
//! A head vector of dimension `d = 2m` is split into `m` two-dimensional
//! blocks; block `j` covers components `(2j, 2j + 1)` (0-based). Blocks in the
//! temporal set are rotated by `ω_j · t` for a token at frame `t`; the rest
//! are left untouched. Because `R(a)ᵀ R(b) = R(b − a)`, the temporal part of
//! the logit depends on the frame distance only:
//!
//! ```text
//! ℓ_T(Δt) = (1/√d) Σ_{j∈T} [A_j cos(ω_j Δt) + B_j sin(ω_j Δt)]
//! A_j = q_{2j} k_{2j} + q_{2j+1} k_{2j+1}
//! B_j = q_{2j+1} k_{2j} − q_{2j} k_{2j+1}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

/// Rotary layout for one head: dimension, temporal block set and frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeSpec {
    head_dim: usize,
    temporal_blocks: Vec<usize>,
    frequencies: Vec<f64>,
}

impl RopeSpec {
    /// `frequencies[i]` belongs to `temporal_blocks[i]`.
    pub fn new(head_dim: usize, temporal_blocks: Vec<usize>, frequencies: Vec<f64>) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(config_err(format!("rope head_dim must be even and positive, got {head_dim}")));
        }
        let m = head_dim / 2;
        if temporal_blocks.len() != frequencies.len() {
            return Err(config_err(format!(
                "{} temporal blocks but {} frequencies",
                temporal_blocks.len(),
                frequencies.len()
            )));
        }
        let mut sorted = temporal_blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != temporal_blocks.len() {
            return Err(config_err("temporal blocks must be distinct"));
        }
        if let Some(&j) = temporal_blocks.iter().find(|&&j| j >= m) {
            return Err(config_err(format!("temporal block {j} out of range for {m} blocks")));
        }
        if frequencies.iter().any(|w| !w.is_finite()) {
            return Err(config_err("rope frequencies must be finite"));
        }
        Ok(Self {
            head_dim,
            temporal_blocks,
            frequencies,
        })
    }

    /// Standard geometric schedule over the temporal blocks:
    /// the i-th temporal block gets `base^(−2i / d_T)` with `d_T = 2|T|`.
    pub fn with_base(head_dim: usize, temporal_blocks: Vec<usize>, base: f64) -> Result<Self> {
        if !(base.is_finite() && base > 0.0) {
            return Err(config_err("rope base must be positive"));
        }
        let d_t = 2.0 * temporal_blocks.len() as f64;
        let freqs = (0..temporal_blocks.len())
            .map(|i| base.powf(-2.0 * i as f64 / d_t))
            .collect();
        Self::new(head_dim, temporal_blocks, freqs)
    }

    /// Every block temporal, default base 10000.
    pub fn all_temporal(head_dim: usize) -> Result<Self> {
        Self::with_base(head_dim, (0..head_dim / 2).collect(), 10_000.0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn temporal_blocks(&self) -> &[usize] {
        &self.temporal_blocks
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.temporal_blocks.iter().copied().zip(self.frequencies.iter().copied())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.head_dim {
            return Err(shape_err(format!(
                "vector length {len} does not match rope head_dim {}",
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Rotates every temporal block of `v` by `ω_j · t`.
    pub fn apply(&self, v: &[f64], t: i64) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut out = v.to_vec();
        for (j, w) in self.blocks() {
            let (s, c) = (w * t as f64).sin_cos();
            let (x, y) = (v[2 * j], v[2 * j + 1]);
            out[2 * j] = c * x - s * y;
            out[2 * j + 1] = s * x + c * y;
        }
        Ok(out)
    }

    /// In-place f32 rotation; the angle is formed in double precision.
    pub fn rotate_f32(&self, v: &mut [f32], t: i64) {
        debug_assert_eq!(v.len(), self.head_dim);
        for (j, w) in self.blocks() {
            let (s, c) = (w * t as f64).sin_cos();
            let (x, y) = (v[2 * j] as f64, v[2 * j + 1] as f64);
            v[2 * j] = (c * x - s * y) as f32;
            v[2 * j + 1] = (s * x + c * y) as f32;
        }
    }

    /// `(A_j, B_j)` for each temporal block, in `temporal_blocks` order.
    pub fn block_coefficients(&self, q: &[f64], k: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.check_len(q.len())?;
        self.check_len(k.len())?;
        Ok(self
            .temporal_blocks
            .iter()
            .map(|&j| {
                let (q1, q2, k1, k2) = (q[2 * j], q[2 * j + 1], k[2 * j], k[2 * j + 1]);
                (q1 * k1 + q2 * k2, q2 * k1 - q1 * k2)
            })
            .collect())
    }

    /// Closed-form temporal logit `ℓ_T(Δt)` from the pre-rotation vectors.
    pub fn temporal_logit_closed_form(&self, q: &[f64], k: &[f64], delta_t: i64) -> Result<f64> {
        let coeffs = self.block_coefficients(q, k)?;
        let sum: f64 = coeffs
            .iter()
            .zip(&self.frequencies)
            .map(|(&(a, b), &w)| {
                let (s, c) = (w * delta_t as f64).sin_cos();
                a * c + b * s
            })
            .sum();
        Ok(sum / (self.head_dim as f64).sqrt())
    }

    /// Rotates `q` at `t_q` and `k` at `t_k`, then takes the scaled inner
    /// product restricted to the temporal blocks.
    pub fn temporal_logit_numeric(&self, q: &[f64], k: &[f64], t_q: i64, t_k: i64) -> Result<f64> {
        let q_rot = self.apply(q, t_q)?;
        let k_rot = self.apply(k, t_k)?;
        let dot: f64 = self
            .temporal_blocks
            .iter()
            .map(|&j| q_rot[2 * j] * k_rot[2 * j] + q_rot[2 * j + 1] * k_rot[2 * j + 1])
            .sum();
        Ok(dot / (self.head_dim as f64).sqrt())
    }

    /// `(Δt, ℓ_T(Δt))` over an inclusive range, for probing the temporal effect.
    pub fn logit_series(&self, q: &[f64], k: &[f64], from: i64, to: i64) -> Result<Vec<(i64, f64)>> {
        (from..=to)
            .map(|dt| Ok((dt, self.temporal_logit_closed_form(q, k, dt)?)))
            .collect()
    }
}
