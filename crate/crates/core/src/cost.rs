//! Frame-level attention cost and packing-memory estimates.
//!
//! One cost unit is a single (layer, head, query frame, key frame)
//! interaction. Packed cost is `QF · Σ b`, dense cost `L · H · QF · F_dense`.
//! Extra packing memory per layer is `M_Q + 2 · QF · S_ℓ · N · D · s` bytes,
//! where `S_ℓ` is the layer's budget sum.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::importance::HeadBudgetTable;
use crate::model::ModelShape;
use crate::scoring::SelectionMask;

pub const MIB: f64 = 1_048_576.0;

/// Rounds to two decimals, half away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn to_mib(bytes: u64) -> f64 {
    bytes as f64 / MIB
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameCost {
    pub c_pack: u64,
    pub c_dense: u64,
    pub ratio: f64,
}

impl FrameCost {
    pub fn speedup(&self) -> f64 {
        1.0 / self.ratio
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

/// Packed and dense frame-level cost of one chunk.
pub fn frame_cost(budgets: &HeadBudgetTable, shape: &ModelShape) -> Result<FrameCost> {
    budgets.check_shape(shape)?;
    let qf = shape.chunk_frames as u64;
    let c_pack = qf * budgets.total();
    let c_dense = (shape.num_layers * shape.heads_per_layer) as u64 * qf * shape.dense_window as u64;
    if c_dense == 0 {
        return Err(config_err("dense cost is zero"));
    }
    Ok(FrameCost {
        c_pack,
        c_dense,
        ratio: c_pack as f64 / c_dense as f64,
    })
}

/// Cost units implied by emitted masks: every retained frame that precedes
/// its query's chunk counts once. Frames of the chunk being generated are
/// attended to but are not history.
pub fn frame_cost_from_masks(mask: &SelectionMask, chunk_frames: usize) -> u64 {
    let qf = chunk_frames.max(1);
    mask.entries
        .iter()
        .map(|e| {
            let chunk_start = e.query_frame / qf * qf;
            e.retained.iter().filter(|&&f| f < chunk_start).count() as u64
        })
        .sum()
}

/// A byte count with its MiB value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFigure {
    pub bytes: u64,
    pub mib: f64,
}

impl MemoryFigure {
    fn of(bytes: u64) -> Self {
        Self { bytes, mib: to_mib(bytes) }
    }
}

/// Packing memory for one budget sum `S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackMemory {
    pub budget_sum: f64,
    /// `M_Q + M_KV`; fractional for a non-integer average sum.
    pub bytes: f64,
    pub mib: f64,
    /// `round2(M_Q) + round2(M_KV)` in MiB with `S` itself taken at two
    /// decimals, the way tables usually list it.
    pub tabulated_mib: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub c_pack: u64,
    pub c_dense: u64,
    pub ratio: f64,
    pub theoretical_speedup: f64,
    pub bytes_per_element: u64,
    /// One frame of one head, `N · D · s`.
    pub block: MemoryFigure,
    pub m_q: MemoryFigure,
    pub layer_sums: Vec<u64>,
    pub layer_kv_bytes: Vec<u64>,
    pub s_min: u64,
    pub s_avg: f64,
    pub s_max: u64,
    pub m_pack_min: PackMemory,
    pub m_pack_avg: PackMemory,
    pub m_pack_max: PackMemory,
    /// Frame-level cost × N² × D: a token-level multiply-accumulate count
    /// for `QKᵀ`, derived here rather than taken from any published figure.
    pub token_flops_pack: u128,
    pub token_flops_dense: u128,
}

/// Packing memory and full cost report for `budgets`.
pub fn memory_overhead(budgets: &HeadBudgetTable, shape: &ModelShape, bytes_per_element: u64) -> Result<CostReport> {
    if bytes_per_element == 0 {
        return Err(config_err("bytes_per_element must be >= 1"));
    }
    let fc = frame_cost(budgets, shape)?;
    let qf = shape.chunk_frames as u64;
    let block = shape.tokens_per_frame as u64 * shape.head_dim as u64 * bytes_per_element;
    let m_q = qf * shape.heads_per_layer as u64 * block;
    let kv_per_frame = 2 * qf * block;

    let layer_sums = budgets.layer_sums();
    if layer_sums.is_empty() {
        return Err(config_err("budget table has no layers"));
    }
    let layer_kv_bytes: Vec<u64> = layer_sums.iter().map(|s| kv_per_frame * s).collect();
    let s_min = *layer_sums.iter().min().unwrap_or(&0);
    let s_max = *layer_sums.iter().max().unwrap_or(&0);
    let s_avg = layer_sums.iter().sum::<u64>() as f64 / layer_sums.len() as f64;

    let pack = |s: f64| {
        let kv = kv_per_frame as f64 * s;
        let bytes = m_q as f64 + kv;
        PackMemory {
            budget_sum: s,
            bytes,
            mib: bytes / MIB,
            tabulated_mib: round2(to_mib(m_q)) + round2(kv_per_frame as f64 * round2(s) / MIB),
        }
    };
    let per_unit = (shape.tokens_per_frame as u128).pow(2) * shape.head_dim as u128;
    Ok(CostReport {
        c_pack: fc.c_pack,
        c_dense: fc.c_dense,
        ratio: fc.ratio,
        theoretical_speedup: fc.speedup(),
        bytes_per_element,
        block: MemoryFigure::of(block),
        m_q: MemoryFigure::of(m_q),
        layer_sums,
        layer_kv_bytes,
        s_min,
        s_avg,
        s_max,
        m_pack_min: pack(s_min as f64),
        m_pack_avg: pack(s_avg),
        m_pack_max: pack(s_max as f64),
        token_flops_pack: fc.c_pack as u128 * per_unit,
        token_flops_dense: fc.c_dense as u128 * per_unit,
    })
}

impl CostReport {
    /// Human-readable summary at two-decimal MiB and three-decimal ratio.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("c_pack".to_string(), self.c_pack.to_string()),
            ("c_dense".to_string(), self.c_dense.to_string()),
            ("ratio".to_string(), format!("{:.3}", self.ratio)),
            ("reduction".to_string(), format!("{:.1}%", 100.0 * (1.0 - self.ratio))),
            ("speedup".to_string(), format!("{:.2}x", self.theoretical_speedup)),
            ("block".to_string(), format!("{} B = {:.3} MiB", self.block.bytes, self.block.mib)),
            ("M_Q".to_string(), format!("{} B = {:.2} MiB", self.m_q.bytes, self.m_q.mib)),
            (
                "S min/avg/max".to_string(),
                format!("{} / {:.2} / {}", self.s_min, self.s_avg, self.s_max),
            ),
        ];
        for (name, m) in [("min", &self.m_pack_min), ("avg", &self.m_pack_avg), ("max", &self.m_pack_max)] {
            rows.push((
                format!("M_pack {name}"),
                format!("{:.2} MiB (exact {:.4})", m.tabulated_mib, m.mib),
            ));
        }
        rows.push(("token FLOPs pack (derived)".to_string(), self.token_flops_pack.to_string()));
        rows.push(("token FLOPs dense (derived)".to_string(), self.token_flops_dense.to_string()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}
