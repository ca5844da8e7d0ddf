//! Self-check suites run by the `verify` command.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::BudgetParams;
use crate::error::Result;
use crate::importance::map_budget;
use crate::model::{mix_seed, FrameTensor, KvCache};
use crate::packed::{dense_oracle, max_relative_error, pack, scatter, varlen_attention, OutputLayout};
use crate::rope::RopeSpec;
use crate::scoring::{standardize_slice, MaskEntry, SelectionMask};

pub const PACKED_TOLERANCE: f64 = 1e-5;
pub const ROPE_TOLERANCE: f64 = 1e-6;
pub const STANDARDIZE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64, extra_ok: bool) -> Self {
        Self {
            name: name.to_string(),
            cases,
            max_error,
            tolerance,
            passed: extra_ok && max_error <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<16} cases={:<6} max_err={:.3e} tol={:.0e} {}",
            self.name,
            self.cases,
            self.max_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn packed_error(&self) -> Option<f64> {
        self.suites.iter().find(|s| s.name == "packed_dense").map(|s| s.max_error)
    }

    pub fn render(&self) -> String {
        let mut out: String = self.suites.iter().map(|s| s.line() + "\n").collect();
        if let Some(e) = self.packed_error() {
            let rel = if e <= PACKED_TOLERANCE { "≤" } else { ">" };
            out.push_str(&format!("max relative error {rel} 1e-5 (observed {e:.3e})\n"));
        }
        out.push_str(if self.passed() { "verify: PASS\n" } else { "verify: FAIL\n" });
        out
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// One randomized packing problem: a single-layer cache, a chunk of query
/// frames and a mask with random retained sets.
#[derive(Debug, Clone)]
pub struct PackingInstance {
    pub cache: KvCache,
    pub queries: Vec<FrameTensor>,
    pub mask: SelectionMask,
    pub rope: Option<RopeSpec>,
}

impl PackingInstance {
    /// Up to 8 cached frames, 8 tokens, 4 heads and head dimension 8.
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let frames = rng.random_range(1..=8usize);
        let tokens = rng.random_range(1..=8usize);
        let heads = rng.random_range(1..=4usize);
        let d = 2 * rng.random_range(1..=4usize);
        let qf = rng.random_range(1..=frames.min(3));
        let mut cache = KvCache::new(1, []);
        let mut stored = Vec::new();
        for f in 0..frames {
            let k = FrameTensor::new(f, tokens, heads, d, normal_vec(rng, tokens * heads * d))?;
            let v = FrameTensor::new(f, tokens, heads, d, normal_vec(rng, tokens * heads * d))?;
            cache.append(0, k, v)?;
            stored.push(f);
        }
        let queries: Vec<FrameTensor> = (frames - qf..frames)
            .map(|f| FrameTensor::new(f, tokens, heads, d, normal_vec(rng, tokens * heads * d)))
            .collect::<Result<_>>()?;
        let mut entries = Vec::new();
        for q in &queries {
            for h in 0..heads {
                let budget = rng.random_range(0..=frames);
                let mut retained: Vec<usize> = stored.clone();
                for i in (1..retained.len()).rev() {
                    let j = rng.random_range(0..=i);
                    retained.swap(i, j);
                }
                retained.truncate(budget);
                retained.sort_unstable();
                entries.push(MaskEntry {
                    layer: 0,
                    head: h,
                    query_frame: q.frame_index(),
                    retained,
                    reserved: vec![],
                });
            }
        }
        let rope = if rng.random_bool(0.5) {
            Some(RopeSpec::with_base(d, (0..d / 2).filter(|_| rng.random_bool(0.7)).collect(), 10_000.0)?)
        } else {
            None
        };
        Ok(Self {
            cache,
            queries,
            mask: SelectionMask { entries },
            rope,
        })
    }

    /// Packed execution scattered back to per-frame outputs.
    pub fn run_packed(&self) -> Result<Vec<FrameTensor>> {
        let layer = self.cache.layer(0)?;
        let batch = pack(&self.mask, &self.queries, layer, 0, self.rope.as_ref())?;
        let o = varlen_attention(&batch)?;
        scatter(&o, &batch.segments, &OutputLayout::of(&self.queries))
    }

    pub fn run_dense(&self) -> Result<Vec<FrameTensor>> {
        dense_oracle(&self.queries, self.cache.layer(0)?, &self.mask, 0, self.rope.as_ref())
    }
}

pub fn packed_dense_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xFACC));
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let inst = PackingInstance::random(&mut rng)?;
        worst = worst.max(max_relative_error(&inst.run_packed()?, &inst.run_dense()?));
    }
    Ok(SuiteResult::new("packed_dense", cases, worst, PACKED_TOLERANCE, true))
}

pub fn rope_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x2095));
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..cases {
        let d = 2 * rng.random_range(1..=8usize);
        let blocks: Vec<usize> = (0..d / 2).filter(|_| rng.random_bool(0.6)).collect();
        let freqs: Vec<f64> = blocks.iter().map(|_| rng.random_range(0.0..PI)).collect();
        let spec = RopeSpec::new(d, blocks, freqs)?;
        let q: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let (tq, tk) = (rng.random_range(-50..50i64), rng.random_range(-50..50i64));
        let numeric = spec.temporal_logit_numeric(&q, &k, tq, tk)?;
        let closed = spec.temporal_logit_closed_form(&q, &k, tk - tq)?;
        worst = worst.max((numeric - closed).abs());
        // Δt = 0 leaves the temporal inner product unchanged.
        let dot: f64 = spec
            .temporal_blocks()
            .iter()
            .map(|&j| q[2 * j] * k[2 * j] + q[2 * j + 1] * k[2 * j + 1])
            .sum::<f64>()
            / (d as f64).sqrt();
        worst = worst.max((spec.temporal_logit_closed_form(&q, &k, 0)? - dot).abs());
        let mut qz = q.clone();
        for &j in spec.temporal_blocks() {
            qz[2 * j] = 0.0;
            qz[2 * j + 1] = 0.0;
        }
        ok &= spec.temporal_logit_closed_form(&qz, &k, tk - tq)? == 0.0;
    }
    Ok(SuiteResult::new("rope", cases, worst, ROPE_TOLERANCE, ok))
}

pub fn standardize_suite(seed: u64, cases: usize, epsilon: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x57D));
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..cases {
        let n = rng.random_range(2..=16usize);
        let xs: Vec<f64> = (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let z = standardize_slice(&xs, epsilon);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sigma = {
            let m = xs.iter().sum::<f64>() / n as f64;
            (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        let expected_std = sigma / (sigma + epsilon);
        worst = worst.max(mean.abs()).max((var.sqrt() - expected_std).abs());
        // Quarter-integers keep the mean exact, so a constant row maps to zeros.
        let c = rng.random_range(-20..20i32) as f64 / 4.0;
        ok &= standardize_slice(&vec![c; n], epsilon).iter().all(|v| *v == 0.0);
    }
    Ok(SuiteResult::new("standardize", cases, worst, STANDARDIZE_TOLERANCE, ok))
}

pub fn budget_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB0D6));
    let mut ok = map_budget(0.5, &BudgetParams::default()) == 6;
    for _ in 0..cases {
        let b_min = rng.random_range(0..32u32);
        let p = BudgetParams {
            b_min,
            b_max: b_min + rng.random_range(0..32u32),
            gamma: rng.random_range(0.1..4.0),
        };
        ok &= map_budget(0.0, &p) == p.b_min && map_budget(1.0, &p) == p.b_max;
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (bl, bh) = (map_budget(lo, &p), map_budget(hi, &p));
        ok &= bl <= bh && bl >= p.b_min && bh <= p.b_max;
    }
    Ok(SuiteResult::new("budget_mapping", cases, if ok { 0.0 } else { 1.0 }, 0.0, ok))
}

/// Runs every suite with `cases` random instances each.
pub fn run_all(seed: u64, cases: usize) -> Result<VerifyReport> {
    Ok(VerifyReport {
        seed,
        suites: vec![
            packed_dense_suite(seed, cases)?,
            rope_suite(seed, cases)?,
            standardize_suite(seed, cases, 1e-6)?,
            budget_suite(seed, cases)?,
        ],
    })
}
