//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use focused_kv::config::BudgetParams;
use focused_kv::cost::{frame_cost, frame_cost_from_masks, memory_overhead};
use focused_kv::importance::{
    estimate_importance, map_budget, masked_rollout, prompt_stream, HeadBudgetTable, ScoreModelSpec,
};
use focused_kv::model::{make_synthetic_stream, Redundancy};
use focused_kv::packed::{pack, scatter, varlen_attention, OutputLayout};
use focused_kv::rollout::{HeadId, Policy, RolloutEngine};
use focused_kv::scoring::{
    fuse_scores, select_with_reserved, standardize, MaskEntry, ReservedFrames, ScoreKind, ScoreTensor, SelectionMask,
};
use focused_kv::{FrameTensor, KvCache, ModelShape, RopeSpec, RunConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32, seed_byte: u8) -> TestRunner {
    let config = PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &[seed_byte; 32]))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// 1. Cost model

/// 30 layers of 12 heads; layer sums are one 61, one 72, five 66 and
/// twenty-three 65, for a total of 1958.
fn cost_table() -> HeadBudgetTable {
    let mut sums = vec![61u32, 72];
    sums.extend([66; 5]);
    sums.extend([65; 23]);
    let rows = sums
        .iter()
        .map(|&s| (0..12u32).map(|h| s / 12 + u32::from(h < s % 12)).collect())
        .collect();
    HeadBudgetTable::from_budgets(rows, 4, 12, 2.0).expect("valid table")
}

fn criterion_cost() -> Outcome {
    let shape = ModelShape::reference_backbone();
    let table = cost_table();
    let sums = table.layer_sums();
    ensure(table.total() == 1958, || format!("table total {}", table.total()))?;
    ensure(sums.iter().min() == Some(&61) && sums.iter().max() == Some(&72), || format!("{sums:?}"))?;

    let start = Instant::now();
    let fc = frame_cost(&table, &shape).map_err(|e| e.to_string())?;
    let r = memory_overhead(&table, &shape, 2).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    // Oracle: direct integer arithmetic on the constants.
    let (l, h, qf, f_dense, n, d, s) = (30u64, 12u64, 3u64, 21u64, 1560u64, 128u64, 2u64);
    let c_pack = qf * 1958;
    let c_dense = l * h * qf * f_dense;
    let m_q = qf * h * n * d * s;
    ensure(fc.c_pack == c_pack && c_pack == 5874, || format!("c_pack {}", fc.c_pack))?;
    ensure(fc.c_dense == c_dense && c_dense == 22680, || format!("c_dense {}", fc.c_dense))?;
    ensure(r.m_q.bytes == m_q && m_q == 14_376_960, || format!("M_Q {}", r.m_q.bytes))?;
    ensure(r.block.bytes == n * d * s && r.block.bytes == 399_360, || format!("block {}", r.block.bytes))?;

    let printed = [
        ("ratio", format!("{:.3}", r.ratio), "0.259"),
        ("speedup", format!("{:.2}", r.theoretical_speedup), "3.86"),
        ("reduction", format!("{:.1}", 100.0 * (1.0 - r.ratio)), "74.1"),
        ("block MiB", format!("{:.3}", r.block.mib), "0.381"),
        ("M_Q MiB", format!("{:.2}", r.m_q.mib), "13.71"),
        ("S_avg", format!("{:.2}", r.s_avg), "65.27"),
        ("M_pack min", format!("{:.2}", r.m_pack_min.tabulated_mib), "153.10"),
        ("M_pack avg", format!("{:.2}", r.m_pack_avg.tabulated_mib), "162.86"),
        ("M_pack max", format!("{:.2}", r.m_pack_max.tabulated_mib), "178.24"),
    ];
    for (name, got, want) in &printed {
        ensure(got == want, || format!("{name}: got {got}, expected {want}"))?;
    }
    let kv = |s: u64| 2 * qf * s * n * d * 2;
    ensure(r.layer_kv_bytes.iter().zip(&sums).all(|(&b, &s)| b == kv(s)), || "per-layer KV bytes".into())?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "c_pack={} c_dense={} ratio={:.3} speedup={:.2}x M_Q={:.2} M_pack={:.2}/{:.2}/{:.2} MiB",
        r.c_pack,
        r.c_dense,
        r.ratio,
        r.theoretical_speedup,
        r.m_q.mib,
        r.m_pack_min.tabulated_mib,
        r.m_pack_avg.tabulated_mib,
        r.m_pack_max.tabulated_mib
    ))
}

// ---------------------------------------------------------------------------
// 2. Packed / dense equivalence

struct Instance {
    cache: KvCache,
    queries: Vec<FrameTensor>,
    mask: SelectionMask,
    rope: Option<RopeSpec>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let frames = rng.random_range(1..=8usize);
    let tokens = rng.random_range(1..=8usize);
    let heads = rng.random_range(1..=4usize);
    let d = 2 * rng.random_range(1..=4usize);
    let qf = rng.random_range(1..=frames.min(3));
    let tensor = |f: usize, rng: &mut ChaCha8Rng| {
        let data = (0..tokens * heads * d).map(|_| normal(rng) as f32).collect();
        FrameTensor::new(f, tokens, heads, d, data).unwrap()
    };
    let mut cache = KvCache::new(1, []);
    for f in 0..frames {
        let (k, v) = (tensor(f, rng), tensor(f, rng));
        cache.append(0, k, v).unwrap();
    }
    let queries: Vec<FrameTensor> = (frames - qf..frames).map(|f| tensor(f, rng)).collect();
    let mut entries = Vec::new();
    for q in &queries {
        for h in 0..heads {
            let budget = rng.random_range(0..=frames);
            let mut all: Vec<usize> = (0..frames).collect();
            let mut retained = Vec::new();
            for _ in 0..budget {
                retained.push(all.swap_remove(rng.random_range(0..all.len())));
            }
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
    let rope = rng.random_bool(0.5).then(|| {
        let blocks: Vec<usize> = (0..d / 2).filter(|_| rng.random_bool(0.7)).collect();
        let freqs = blocks.iter().map(|_| rng.random_range(0.0..PI)).collect();
        RopeSpec::new(d, blocks, freqs).unwrap()
    });
    // Entries shuffled so packing order cannot lean on input order.
    for i in (1..entries.len()).rev() {
        entries.swap(i, rng.random_range(0..=i));
    }
    Instance {
        cache,
        queries,
        mask: SelectionMask { entries },
        rope,
    }
}

fn rotate(spec: Option<&RopeSpec>, v: &[f32], t: usize) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    if let Some(s) = spec {
        for (&j, &w) in s.temporal_blocks().iter().zip(s.frequencies()) {
            let a = w * t as f64;
            let (x, y) = (out[2 * j], out[2 * j + 1]);
            out[2 * j] = a.cos() * x - a.sin() * y;
            out[2 * j + 1] = a.sin() * x + a.cos() * y;
        }
    }
    out
}

/// Double-precision reference: softmax over exactly the retained tokens.
fn reference_attention(inst: &Instance) -> Vec<Vec<f64>> {
    let layer = inst.cache.layer(0).unwrap();
    inst.queries
        .iter()
        .map(|q| {
            let (tokens, heads, d) = (q.tokens(), q.heads(), q.head_dim());
            let mut out = vec![0.0f64; tokens * heads * d];
            for h in 0..heads {
                let e = inst.mask.entry(0, h, q.frame_index()).unwrap();
                let mut keys = Vec::new();
                let mut vals = Vec::new();
                for &f in &e.retained {
                    let (kf, vf) = (layer.key(f).unwrap(), layer.value(f).unwrap());
                    for t in 0..kf.tokens() {
                        keys.push(rotate(inst.rope.as_ref(), kf.row(t, h), f));
                        vals.push(vf.row(t, h).iter().map(|&x| x as f64).collect::<Vec<_>>());
                    }
                }
                if keys.is_empty() {
                    continue;
                }
                for t in 0..tokens {
                    let qr = rotate(inst.rope.as_ref(), q.row(t, h), q.frame_index());
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|k| qr.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = w.iter().sum();
                    let dst = &mut out[(t * heads + h) * d..(t * heads + h + 1) * d];
                    for (wi, v) in w.iter().zip(&vals) {
                        for (o, x) in dst.iter_mut().zip(v) {
                            *o += wi / z * x;
                        }
                    }
                }
            }
            out
        })
        .collect()
}

fn criterion_packed() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let cases = 1000;
    let (mut worst, mut empty_segments) = (0.0f64, 0usize);
    for i in 0..cases {
        let inst = random_instance(&mut rng);
        let layer = inst.cache.layer(0).unwrap();
        let batch = pack(&inst.mask, &inst.queries, layer, 0, inst.rope.as_ref()).map_err(|e| e.to_string())?;
        ensure(batch.cu_q.len() == batch.num_segments() + 1 && batch.cu_k.len() == batch.cu_q.len(), || {
            format!("case {i}: boundary arrays")
        })?;
        empty_segments += (0..batch.num_segments()).filter(|&s| batch.k_len(s) == 0).count();
        let o = varlen_attention(&batch).map_err(|e| e.to_string())?;
        let out = scatter(&o, &batch.segments, &OutputLayout::of(&inst.queries)).map_err(|e| e.to_string())?;
        let reference = reference_attention(&inst);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (f, r) in out.iter().zip(&reference) {
            for (&a, &b) in f.data().iter().zip(r) {
                num = num.max((a as f64 - b).abs());
                den = den.max(b.abs());
            }
        }
        let err = if den == 0.0 { num } else { num / den };
        ensure(err <= 1e-5, || format!("case {i}: relative error {err:.3e}"))?;
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{cases} instances, max relative error {worst:.3e}, {empty_segments} empty segments, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 3. Temporal rotary logits

fn criterion_rope() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let cases = 2000;
    for i in 0..cases {
        let d = 2 * rng.random_range(1..=16usize);
        let blocks: Vec<usize> = (0..d / 2).filter(|_| rng.random_bool(0.6)).collect();
        let spec = if rng.random_bool(0.5) {
            let freqs = blocks.iter().map(|_| rng.random_range(-PI..PI)).collect();
            RopeSpec::new(d, blocks, freqs)
        } else {
            RopeSpec::with_base(d, blocks, 10_000.0)
        }
        .map_err(|e| e.to_string())?;
        let q: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let k: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let (tq, tk) = (rng.random_range(-500..500i64), rng.random_range(-500..500i64));
        let num = spec.temporal_logit_numeric(&q, &k, tq, tk).map_err(|e| e.to_string())?;
        let closed = spec.temporal_logit_closed_form(&q, &k, tk - tq).map_err(|e| e.to_string())?;
        let err = (num - closed).abs();
        ensure(err <= 1e-6, || format!("case {i}: |numeric - closed| = {err:.3e}"))?;
        worst = worst.max(err);
    }

    let d = 8;
    let spec = RopeSpec::new(d, vec![0, 2, 3], vec![2.0 * PI / 6.0, 2.0 * PI * 2.0 / 6.0, 2.0 * PI / 3.0]).unwrap();
    let mut case_checks = 0;
    for _ in 0..200 {
        let q: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let k: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        // Δt = 0: the temporal inner product itself.
        let dot: f64 = [0usize, 2, 3]
            .iter()
            .map(|&j| q[2 * j] * k[2 * j] + q[2 * j + 1] * k[2 * j + 1])
            .sum::<f64>()
            / (d as f64).sqrt();
        let c0 = spec.temporal_logit_closed_form(&q, &k, 0).unwrap();
        ensure((c0 - dot).abs() <= 1e-12, || format!("Δt=0: {c0} vs {dot}"))?;
        let t = rng.random_range(-100..100i64);
        let n0 = spec.temporal_logit_numeric(&q, &k, t, t).unwrap();
        ensure((n0 - dot).abs() <= 1e-12, || format!("t_q=t_k: {n0} vs {dot}"))?;
        // Zero temporal components of q.
        let mut qz = q.clone();
        for j in [0usize, 2, 3] {
            qz[2 * j] = 0.0;
            qz[2 * j + 1] = 0.0;
        }
        let dt = rng.random_range(-40..40i64);
        ensure(spec.temporal_logit_closed_form(&qz, &k, dt).unwrap() == 0.0, || "zero q_T".into())?;
        ensure(spec.temporal_logit_numeric(&qz, &k, 3, 3 + dt).unwrap() == 0.0, || "zero q_T numeric".into())?;
        // Every ω_j · 6 is a multiple of 2π: period 6.
        let a = spec.temporal_logit_closed_form(&q, &k, dt).unwrap();
        let b = spec.temporal_logit_closed_form(&q, &k, dt + 6).unwrap();
        ensure((a - b).abs() <= 1e-9, || format!("periodic alignment {a} vs {b}"))?;
        // Non-degeneracy.
        for ((j, w), (aj, bj)) in [0usize, 2, 3]
            .iter()
            .zip(spec.frequencies())
            .zip(spec.block_coefficients(&q, &k).unwrap())
        {
            let qn = q[2 * j].powi(2) + q[2 * j + 1].powi(2);
            let kn = k[2 * j].powi(2) + k[2 * j + 1].powi(2);
            ensure((aj * aj + bj * bj - qn * kn).abs() <= 1e-9 * (1.0 + qn * kn), || {
                format!("A²+B² ≠ |q|²|k|² for block {j}")
            })?;
            let single = RopeSpec::new(d, vec![*j], vec![*w]).unwrap();
            let series: Vec<f64> = (0..6).map(|dt| single.temporal_logit_closed_form(&q, &k, dt).unwrap()).collect();
            let spread = series.iter().copied().fold(f64::MIN, f64::max) - series.iter().copied().fold(f64::MAX, f64::min);
            ensure(spread > 0.0, || format!("block {j} constant over a period"))?;
        }
        let series: Vec<f64> = (0..6).map(|dt| spec.temporal_logit_closed_form(&q, &k, dt).unwrap()).collect();
        let spread = series.iter().copied().fold(f64::MIN, f64::max) - series.iter().copied().fold(f64::MAX, f64::min);
        ensure(spread > 0.0, || "logit constant over a period".into())?;
        case_checks += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{cases} random specs, max |numeric - closed| {worst:.3e}; {case_checks} degenerate-case draws, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 4. Budget mapping

fn criterion_budget() -> Outcome {
    let p = BudgetParams {
        b_min: 4,
        b_max: 12,
        gamma: 2.0,
    };
    ensure(map_budget(0.0, &p) == 4, || "Î=0".into())?;
    ensure(map_budget(1.0, &p) == 12, || "Î=1".into())?;
    ensure(map_budget(0.5, &p) == 6, || format!("worked value {}", map_budget(0.5, &p)))?;
    let grid: Vec<u32> = (0..=1000).map(|i| map_budget(i as f64 / 1000.0, &p)).collect();
    ensure(grid.windows(2).all(|w| w[0] <= w[1]), || "not monotone on grid".into())?;

    let strategy = (0u32..64, 0u32..64, 0.05f64..8.0, 0.0f64..=1.0, 0.0f64..=1.0);
    runner(2000, 4)
        .run(&strategy, |(b_min, span, gamma, x, y)| {
            let p = BudgetParams {
                b_min,
                b_max: b_min + span,
                gamma,
            };
            let (bx, by) = (map_budget(x, &p), map_budget(y, &p));
            prop_assert!(bx >= p.b_min && bx <= p.b_max);
            prop_assert_eq!(map_budget(0.0, &p), p.b_min);
            prop_assert_eq!(map_budget(1.0, &p), p.b_max);
            if x <= y {
                prop_assert!(bx <= by);
            }
            let expected = (b_min as f64 + x.powf(gamma) * span as f64).round() as u32;
            prop_assert_eq!(bx, expected);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("endpoints 4/12, round(4 + 0.5²·8) = 6, 2000 random (b_min, b_max, γ)".into())
}

// ---------------------------------------------------------------------------
// 5. Selection invariants

struct SelectionCase {
    raw: ScoreTensor,
    diversity: ScoreTensor,
    budgets: Vec<u32>,
    reserved: ReservedFrames,
    lambda: f64,
}

fn standardize_rows(values: &[f64], n: usize) -> Vec<f64> {
    values
        .chunks(n)
        .flat_map(|row| {
            let m = row.iter().sum::<f64>() / n as f64;
            let s = (row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            row.iter().map(move |x| (x - m) / (s + 1e-6)).collect::<Vec<_>>()
        })
        .collect()
}

fn selection_case(seed: u64) -> SelectionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hist = rng.random_range(1..=12usize);
    let qf = rng.random_range(1..=3usize);
    let heads = rng.random_range(1..=4usize);
    let history: Vec<usize> = (0..n_hist).collect();
    let query: Vec<usize> = (n_hist..n_hist + qf).collect();
    let len = qf * heads * n_hist;
    let raw: Vec<f64> = (0..len).map(|_| 5.0 * normal(&mut rng)).collect();
    let div_raw: Vec<f64> = (0..len).map(|_| normal(&mut rng)).collect();
    let anchors: BTreeSet<usize> = history.iter().copied().filter(|_| rng.random_bool(0.2)).collect();
    SelectionCase {
        raw: ScoreTensor::new(ScoreKind::AttentionRaw, query.clone(), heads, history.clone(), raw).unwrap(),
        diversity: ScoreTensor::new(ScoreKind::DiversityStd, query.clone(), heads, history, standardize_rows(&div_raw, n_hist))
            .unwrap(),
        budgets: (0..heads).map(|_| rng.random_range(0..=n_hist as u32 + 1)).collect(),
        reserved: ReservedFrames {
            anchors,
            generated: query.into_iter().collect(),
        },
        lambda: rng.random_range(0.0..=1.0),
    }
}

fn select(c: &SelectionCase, raw: &ScoreTensor, lambda: f64) -> SelectionMask {
    let a = standardize(raw, 1e-6).unwrap();
    let fused = fuse_scores(&a, &c.diversity, lambda).unwrap();
    select_with_reserved(&fused, &c.budgets, 0, &c.reserved).unwrap()
}

/// Independent Top-K: sort (score desc, frame desc), skip reserved.
fn oracle_select(scores: &[f64], history: &[usize], budget: u32, reserved: &BTreeSet<usize>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = history
        .iter()
        .zip(scores)
        .filter(|(f, _)| !reserved.contains(f))
        .map(|(&f, &s)| (s, f))
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
    let mut keep: BTreeSet<usize> = order.iter().take(budget as usize).map(|p| p.1).collect();
    keep.extend(reserved.iter().copied());
    keep.into_iter().collect()
}

fn criterion_selection() -> Outcome {
    let cases = 600u32;
    fn failures<T: std::fmt::Debug>(name: &str, r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
        r.map_err(|e| format!("{name}: {e}"))
    }

    failures(
        "reserved ⊆ retained",
        runner(cases, 51).run(&any::<u64>(), |seed| {
            let c = selection_case(seed);
            let mask = select(&c, &c.raw, c.lambda);
            prop_assert!(mask.validate(None).is_ok());
            for e in &mask.entries {
                prop_assert!(e.reserved.iter().all(|r| e.retained.contains(r)));
                for f in c.reserved.anchors.iter().chain(&c.reserved.generated) {
                    prop_assert!(e.retained.contains(f));
                }
            }
            Ok(())
        }),
    )?;

    failures(
        "cardinality",
        runner(cases, 52).run(&any::<u64>(), |seed| {
            let c = selection_case(seed);
            let mask = select(&c, &c.raw, c.lambda);
            for e in &mask.entries {
                let b = c.budgets[e.head] as usize;
                prop_assert!(e.retained.len() <= b + e.reserved.len());
                let free = c.raw.history.len() - c.reserved.anchors.len();
                prop_assert_eq!(e.retained.len() - e.reserved.len(), b.min(free));
            }
            Ok(())
        }),
    )?;

    failures(
        "affine shift",
        runner(cases, 53).run(&(any::<u64>(), 0.5f64..2.0, -10.0f64..10.0), |(seed, a, shift)| {
            let c = selection_case(seed);
            let mut moved = c.raw.clone();
            moved.values.iter_mut().for_each(|v| *v = a * *v + shift);
            prop_assert_eq!(select(&c, &c.raw, c.lambda), select(&c, &moved, c.lambda));
            Ok(())
        }),
    )?;

    failures(
        "λ reductions",
        runner(cases, 54).run(&any::<u64>(), |seed| {
            let c = selection_case(seed);
            let a = standardize(&c.raw, 1e-6).unwrap();
            let n = c.raw.history.len();
            for (lambda, single) in [(1.0, &a), (0.0, &c.diversity)] {
                let mask = select(&c, &c.raw, lambda);
                for (qi, _) in c.raw.query_frames.iter().enumerate() {
                    for h in 0..c.raw.heads {
                        let e = &mask.entries[qi * c.raw.heads + h];
                        let slice = &single.values[(qi * c.raw.heads + h) * n..][..n];
                        let reserved: BTreeSet<usize> = c.reserved.anchors.clone();
                        let mut want = oracle_select(slice, &c.raw.history, c.budgets[h], &reserved);
                        want.extend(c.reserved.generated.iter().copied());
                        prop_assert_eq!(&e.retained, &want);
                    }
                }
            }
            Ok(())
        }),
    )?;

    failures(
        "recency ties",
        runner(cases, 55).run(&(any::<u64>(), -3.0f64..3.0), |(seed, level)| {
            let c = selection_case(seed);
            let flat = ScoreTensor {
                kind: ScoreKind::Fused,
                values: vec![level; c.raw.values.len()],
                ..c.raw.clone()
            };
            let mask = select_with_reserved(&flat, &c.budgets, 0, &c.reserved).unwrap();
            for e in &mask.entries {
                let free: Vec<usize> = c
                    .raw
                    .history
                    .iter()
                    .copied()
                    .filter(|f| !c.reserved.anchors.contains(f))
                    .collect();
                let b = (c.budgets[e.head] as usize).min(free.len());
                let newest: BTreeSet<usize> = free[free.len() - b..].iter().copied().collect();
                let picked: BTreeSet<usize> =
                    e.retained.iter().copied().filter(|f| !e.reserved.contains(f)).collect();
                prop_assert_eq!(picked, newest);
            }
            Ok(())
        }),
    )?;
    Ok(format!("5 properties × {cases} random configurations"))
}

// ---------------------------------------------------------------------------
// 6. Importance harness

fn signal_config(signal: HeadId, seed: u64) -> RunConfig {
    let mut c = RunConfig::desk_default();
    c.seed = seed;
    c.model.signal_head = Some(signal);
    c.score_model = ScoreModelSpec::Reference { blend: 0.2 };
    c.dm_loss.timesteps = vec![0.02, 0.05, 0.1];
    c
}

fn criterion_importance() -> Outcome {
    let shape = RunConfig::desk_default().shape;
    let mut margins = Vec::new();
    for (i, signal) in [HeadId::new(1, 2), HeadId::new(0, 0), HeadId::new(1, 3)].into_iter().enumerate() {
        let cfg = signal_config(signal, 100 + i as u64);
        let table = estimate_importance(&cfg.prompts, &cfg).map_err(|e| e.to_string())?;
        let s = table.scores[signal.layer][signal.head];
        let others: Vec<f64> = table
            .flat()
            .into_iter()
            .enumerate()
            .filter(|&(f, _)| f != signal.layer * shape.heads_per_layer + signal.head)
            .map(|(_, v)| v)
            .collect();
        let best_other = others.iter().copied().fold(f64::MIN, f64::max);
        ensure(s > best_other, || format!("{signal:?}: {s} not above {best_other}"))?;
        ensure(others.iter().all(|&v| v == others[0]), || format!("{signal:?}: dead heads differ"))?;
        let budgets = HeadBudgetTable::from_importance(&table, &cfg.budget, cfg.epsilon).map_err(|e| e.to_string())?;
        let b = budgets.budget(signal.layer, signal.head).unwrap();
        let rest = budgets
            .budgets
            .iter()
            .enumerate()
            .flat_map(|(l, r)| r.iter().enumerate().map(move |(h, &x)| (HeadId::new(l, h), x)))
            .filter(|(id, _)| *id != signal);
        for (id, x) in rest {
            ensure(b > x, || format!("{id:?} budget {x} not below signal budget {b}"))?;
        }
        margins.push(s / best_other);

        // A dead head's mask is a no-op.
        let engine = RolloutEngine::new(&cfg).map_err(|e| e.to_string())?;
        let stream = prompt_stream(&cfg, cfg.prompts[0]).map_err(|e| e.to_string())?;
        let base = masked_rollout(&engine, &stream, None).map_err(|e| e.to_string())?;
        let dead = HeadId::new(1 - signal.layer, 1);
        let masked = masked_rollout(&engine, &stream, Some(dead)).map_err(|e| e.to_string())?;
        ensure(base == masked, || format!("masking dead {dead:?} changed the trajectory"))?;
        let live = masked_rollout(&engine, &stream, Some(signal)).map_err(|e| e.to_string())?;
        ensure(base != live, || "masking the signal head changed nothing".into())?;
    }

    // Explicitly dead heads in an otherwise live model.
    let mut cfg = RunConfig::desk_default();
    cfg.model.dead_heads = vec![HeadId::new(0, 1), HeadId::new(1, 3)];
    let engine = RolloutEngine::new(&cfg).map_err(|e| e.to_string())?;
    let stream = make_synthetic_stream(&cfg, 2).map_err(|e| e.to_string())?;
    let base = masked_rollout(&engine, &stream, None).map_err(|e| e.to_string())?;
    for dead in cfg.model.dead_heads.clone() {
        let out = masked_rollout(&engine, &stream, Some(dead)).map_err(|e| e.to_string())?;
        ensure(out == base, || format!("dead {dead:?} not a no-op"))?;
    }
    Ok(format!(
        "signal head strictly first in 3 placements (score ratio over next {}), strictly largest budget; dead-head masks bitwise no-ops",
        margins.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join("/")
    ))
}

// ---------------------------------------------------------------------------
// 7. Rollout reduction, causality, determinism

fn chunk_rel_error(a: &[FrameTensor], b: &[FrameTensor]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            num = num.max((p as f64 - q as f64).abs());
            den = den.max((q as f64).abs());
        }
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn criterion_rollout() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..4u64 {
        let mut cfg = RunConfig::desk_default();
        cfg.seed = seed;
        cfg.lambda = [0.0, 0.3, 0.5, 1.0][seed as usize];
        let qf = cfg.shape.chunk_frames;
        let chunks = 3;
        let engine = RolloutEngine::new(&cfg).map_err(|e| e.to_string())?;
        let stream = make_synthetic_stream(&cfg, chunks).map_err(|e| e.to_string())?;
        let full = HeadBudgetTable::uniform(&cfg.shape, (chunks * qf) as u32).map_err(|e| e.to_string())?;
        let dense = engine
            .run(&stream, &Policy::DenseWindow { window: cfg.shape.dense_window }, None, None)
            .map_err(|e| e.to_string())?;
        for policy in [Policy::Focused, Policy::AttentionOnly, Policy::DiversityOnly] {
            let out = engine.run(&stream, &policy, Some(&full), None).map_err(|e| e.to_string())?;
            for c in 0..chunks {
                let err = chunk_rel_error(out.chunk_frames(c, qf), dense.chunk_frames(c, qf));
                ensure(err <= 1e-5, || format!("seed {seed} {} chunk {c}: {err:.3e}", policy.name()))?;
                worst = worst.max(err);
            }
        }

        // Causality: perturbing chunk 2 or truncating the stream leaves
        // earlier chunks untouched.
        let budgets = HeadBudgetTable::from_budgets(vec![vec![1, 2, 3, 2], vec![2, 1, 1, 3]], 1, 3, 1.0)
            .map_err(|e| e.to_string())?;
        for policy in [Policy::Focused, Policy::DenseWindow { window: 4 }, Policy::AttentionSink { window: 2, sinks: 1 }] {
            let out = engine.run(&stream, &policy, Some(&budgets), None).map_err(|e| e.to_string())?;
            let mut altered = stream.clone();
            for f in &mut altered[2] {
                f.data_mut().iter_mut().for_each(|x| *x = -3.0 * *x + 1.0);
            }
            let alt = engine.run(&altered, &policy, Some(&budgets), None).map_err(|e| e.to_string())?;
            let short = engine.run(&stream[..2], &policy, Some(&budgets), None).map_err(|e| e.to_string())?;
            ensure(out.trajectory[..2 * qf] == alt.trajectory[..2 * qf], || format!("{} not causal", policy.name()))?;
            ensure(out.trajectory[..2 * qf] == short.trajectory[..], || format!("{} truncation replay", policy.name()))?;
            ensure(out.chunk_masks[..2] == short.chunk_masks[..], || format!("{} masks differ", policy.name()))?;
            ensure(out.trajectory[2 * qf..] != alt.trajectory[2 * qf..], || "perturbation had no effect".into())?;

            // Determinism down to the serialized artefacts.
            let again = engine.run(&stream, &policy, Some(&budgets), None).map_err(|e| e.to_string())?;
            let fresh = RolloutEngine::new(&cfg)
                .and_then(|e| e.run(&make_synthetic_stream(&cfg, chunks)?, &policy, Some(&budgets), None))
                .map_err(|e| e.to_string())?;
            for other in [&again, &fresh] {
                ensure(other.trace.to_csv() == out.trace.to_csv(), || "trace differs".into())?;
                ensure(other.masks.to_json().unwrap() == out.masks.to_json().unwrap(), || "masks differ".into())?;
                ensure(other.trajectory == out.trajectory, || "trajectory differs".into())?;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "full-budget selection matches dense within {worst:.3e}; causal and deterministic over 3-chunk runs, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 8. Cross-module frame-cost consistency

fn count_history(mask: &SelectionMask, qf: usize) -> u64 {
    mask.entries
        .iter()
        .map(|e| {
            let chunk_start = e.query_frame - e.query_frame % qf;
            e.retained.iter().filter(|&&f| f < chunk_start).count() as u64
        })
        .sum()
}

fn criterion_cross_module() -> Outcome {
    let mut checked = 0usize;
    let mut total = 0u64;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let mut cfg = RunConfig::desk_default();
        cfg.seed = seed;
        cfg.shape.dense_window = rng.random_range(2..=6);
        cfg.anchors = if seed % 2 == 0 { vec![0] } else { vec![0, 4] };
        cfg.stream.redundancy = match seed % 3 {
            0 => Redundancy::Iid,
            1 => Redundancy::Duplicate,
            _ => Redundancy::StaticRegion { static_fraction: 0.5 },
        };
        let (l, h) = (cfg.shape.num_layers, cfg.shape.heads_per_layer);
        let rows: Vec<Vec<u32>> = (0..l).map(|_| (0..h).map(|_| rng.random_range(0..=6)).collect()).collect();
        let budgets = HeadBudgetTable::from_budgets(rows, 0, 6, 1.0).map_err(|e| e.to_string())?;
        let engine = RolloutEngine::new(&cfg).map_err(|e| e.to_string())?;
        let stream = make_synthetic_stream(&cfg, 5).map_err(|e| e.to_string())?;
        let policies = [
            Policy::DenseWindow { window: cfg.shape.dense_window },
            Policy::AttentionSink { window: cfg.shape.dense_window, sinks: 1 },
            Policy::AttentionOnly,
            Policy::DiversityOnly,
            Policy::Focused,
        ];
        for policy in &policies {
            let out = engine.run(&stream, policy, Some(&budgets), None).map_err(|e| e.to_string())?;
            out.masks.validate(policy.needs_budgets().then_some(&budgets)).map_err(|e| e.to_string())?;
            for (trace, mask) in out.trace.chunks.iter().zip(&out.chunk_masks) {
                let from_cost = frame_cost_from_masks(mask, cfg.shape.chunk_frames);
                let recount = count_history(mask, cfg.shape.chunk_frames);
                ensure(trace.frame_cost == from_cost && from_cost == recount, || {
                    format!(
                        "seed {seed} {} chunk {}: trace {} cost_model {} recount {}",
                        policy.name(),
                        trace.chunk,
                        trace.frame_cost,
                        from_cost,
                        recount
                    )
                })?;
                checked += 1;
                total += trace.frame_cost;
            }
            let all = frame_cost_from_masks(&out.masks, cfg.shape.chunk_frames);
            ensure(all == out.trace.total_frame_cost(), || "total frame cost".into())?;
        }
    }
    Ok(format!("{checked} chunk traces across 5 policies agree exactly ({total} cost units)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("cost-model exactness", criterion_cost),
        ("packed/dense equivalence", criterion_packed),
        ("temporal rotary logits", criterion_rope),
        ("budget mapping", criterion_budget),
        ("selection invariants", criterion_selection),
        ("importance harness", criterion_importance),
        ("rollout reduction", criterion_rollout),
        ("cross-module frame cost", criterion_cross_module),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
