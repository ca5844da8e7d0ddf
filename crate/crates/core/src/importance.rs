//! Head importance estimation and per-head KV budgets.
//!
//! Every (layer, head) pair is masked in turn during a synthetic rollout. The
//! resulting latent trajectory is cut into windows, each window is noised at
//! a sampled timestep and scored with the distribution-matching loss between
//! a fake-score and a (guided) real-score prediction. Averaged losses become
//! importance scores, which are min-max normalised and mapped to integer
//! budgets through `b = round(b_min + Î^γ (b_max − b_min))`.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BudgetParams, RunConfig};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{mix_seed, synthetic_stream, FrameTensor, LatentWindow, ModelShape};
use crate::rollout::{check_head, dense_baseline, HeadId, RolloutEngine};

/// Scalar function of the diffusion timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFn {
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
}

impl TimeFn {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFn::Constant { value } => value,
            TimeFn::Linear { intercept, slope } => intercept + slope * t,
        }
    }
}

fn one() -> TimeFn {
    TimeFn::Constant { value: 1.0 }
}

/// Settings of the distribution-matching probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmLossConfig {
    /// Timestep weight `w_t`.
    #[serde(default = "one")]
    pub weight: TimeFn,
    /// Signal scaling `α_t` applied to the score difference.
    #[serde(default = "one")]
    pub signal_scale: TimeFn,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    #[serde(default = "default_window_length")]
    pub window_length: usize,
    #[serde(default = "default_num_windows")]
    pub num_windows: usize,
    #[serde(default = "default_grad_epsilon")]
    pub grad_epsilon: f64,
    /// Divide the gradient by `mean|W − Ŵ_real| + ε` before taking the loss.
    #[serde(default = "default_true")]
    pub normalize_gradient: bool,
    /// Candidate timesteps in (0, 1); noising is `x_t = (1 − t)·x + t·ε`.
    #[serde(default = "default_timesteps")]
    pub timesteps: Vec<f64>,
}

fn default_cfg_scale() -> f64 {
    1.0
}
fn default_window_length() -> usize {
    3
}
fn default_num_windows() -> usize {
    2
}
fn default_grad_epsilon() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}
fn default_timesteps() -> Vec<f64> {
    vec![0.02, 0.05, 0.1]
}

impl Default for DmLossConfig {
    fn default() -> Self {
        Self {
            weight: one(),
            signal_scale: one(),
            cfg_scale: default_cfg_scale(),
            window_length: default_window_length(),
            num_windows: default_num_windows(),
            grad_epsilon: default_grad_epsilon(),
            normalize_gradient: true,
            timesteps: default_timesteps(),
        }
    }
}

impl DmLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_windows == 0 || self.window_length == 0 {
            return Err(config_err("num_windows and window_length must be >= 1"));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(config_err("cfg_scale must be >= 0"));
        }
        if !(self.grad_epsilon.is_finite() && self.grad_epsilon > 0.0) {
            return Err(config_err("grad_epsilon must be > 0"));
        }
        if self.timesteps.is_empty() || self.timesteps.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(config_err("timesteps must be a non-empty set inside (0, 1)"));
        }
        Ok(())
    }
}

/// `½‖g‖²` with `g = w_t α_t (fake − real)`, `real = cond + s (cond − uncond)`
/// and optional normalisation by `mean|W − real| + ε`.
///
/// The surrogate `½‖W − sg(W − g)‖²` has the same value.
pub fn dm_loss(
    window: &[f32],
    fake: &[f32],
    real_cond: &[f32],
    real_uncond: &[f32],
    t: f64,
    config: &DmLossConfig,
) -> Result<f64> {
    let n = window.len();
    if fake.len() != n || real_cond.len() != n || real_uncond.len() != n {
        return Err(shape_err("dm_loss inputs differ in length"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let s = config.cfg_scale;
    let scale = config.weight.eval(t) * config.signal_scale.eval(t);
    let real: Vec<f64> = real_cond
        .iter()
        .zip(real_uncond)
        .map(|(&c, &u)| c as f64 + s * (c as f64 - u as f64))
        .collect();
    let mut g: Vec<f64> = fake.iter().zip(&real).map(|(&f, r)| scale * (f as f64 - r)).collect();
    if config.normalize_gradient {
        let mean_abs = window.iter().zip(&real).map(|(&w, r)| (w as f64 - r).abs()).sum::<f64>() / n as f64;
        let inv = 1.0 / (mean_abs + config.grad_epsilon);
        g.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(0.5 * g.iter().map(|x| x * x).sum::<f64>())
}

/// Fake- and real-score denoisers. Both map a noisy window to a predicted
/// clean window of the same shape. `prompt = None` is the unconditional branch.
pub trait ScoreModel: Send + Sync {
    fn fake_score(&self, noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32>;
    fn real_score(&self, noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32>;
}

/// Selects and parameterises a [`ScoreModel`] stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreModelSpec {
    /// Real score `(I + real_noise·R) x_t / (1 − t)` plus a per-prompt shift
    /// on the conditional branch; fake score adds `perturbation·E x_t / (1 − t)`.
    Linear {
        real_noise: f64,
        perturbation: f64,
        prompt_shift: f64,
    },
    /// Both scores return `x_t / (1 − t)`: the loss is identically zero.
    Identity,
    /// Teacher stand-in built from the unmasked rollout of each prompt. The
    /// fake score is `x̂ = x_t / (1 − t)`; the conditional real score is
    /// `(1 − blend)·x̂ + blend·R` with `R` the unmasked window. The teacher
    /// has no separate unconditional mode, so guidance is neutral.
    Reference { blend: f64 },
}

impl Default for ScoreModelSpec {
    fn default() -> Self {
        ScoreModelSpec::Reference { blend: 0.2 }
    }
}

impl ScoreModelSpec {
    pub fn build(&self, width: usize, seed: u64) -> Result<Box<dyn ScoreModel>> {
        match *self {
            ScoreModelSpec::Identity => Ok(Box::new(IdentityScoreModel)),
            ScoreModelSpec::Reference { .. } => Err(config_err(
                "the reference score model is built from unmasked rollouts; use ReferenceScoreModel::new",
            )),
            ScoreModelSpec::Linear {
                real_noise,
                perturbation,
                prompt_shift,
            } => Ok(Box::new(LinearScoreModel::new(
                width,
                real_noise,
                perturbation,
                prompt_shift,
                seed,
            )?)),
        }
    }
}

pub struct IdentityScoreModel;

impl ScoreModel for IdentityScoreModel {
    fn fake_score(&self, noisy: &LatentWindow, _: Option<u64>, t: f64) -> Vec<f32> {
        let inv = (1.0 / (1.0 - t)) as f32;
        noisy.frames.iter().map(|x| x * inv).collect()
    }

    fn real_score(&self, noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32> {
        self.fake_score(noisy, prompt, t)
    }
}

/// Row-wise linear denoisers acting on each `width`-dimensional token.
pub struct LinearScoreModel {
    width: usize,
    real: Vec<f32>,
    fake: Vec<f32>,
    prompt_shift: f64,
    seed: u64,
}

impl LinearScoreModel {
    pub fn new(width: usize, real_noise: f64, perturbation: f64, prompt_shift: f64, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(config_err("score model width must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5C0E));
        let std = 1.0 / (width as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| config_err(e.to_string()))?;
        let mut real = vec![0.0f32; width * width];
        let mut fake = vec![0.0f32; width * width];
        for i in 0..width {
            for j in 0..width {
                let id = if i == j { 1.0 } else { 0.0 };
                let r = id + real_noise * normal.sample(&mut rng);
                real[i * width + j] = r as f32;
                fake[i * width + j] = (r + perturbation * normal.sample(&mut rng)) as f32;
            }
        }
        Ok(Self {
            width,
            real,
            fake,
            prompt_shift,
            seed,
        })
    }

    fn apply(&self, matrix: &[f32], noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32> {
        let w = self.width;
        let inv = (1.0 / (1.0 - t)) as f32;
        let shift: Vec<f32> = match prompt {
            Some(p) if self.prompt_shift != 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, p ^ 0x9A05));
                (0..w)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (self.prompt_shift * z) as f32
                    })
                    .collect()
            }
            _ => vec![0.0; w],
        };
        let mut out = vec![0.0f32; noisy.frames.len()];
        for (row, dst) in noisy.frames.chunks(w).zip(out.chunks_mut(w)) {
            for (i, &x) in row.iter().enumerate() {
                let m = &matrix[i * w..(i + 1) * w];
                for (o, &mij) in dst.iter_mut().zip(m) {
                    *o += x * mij;
                }
            }
            for (o, s) in dst.iter_mut().zip(&shift) {
                *o = *o * inv + s;
            }
        }
        out
    }
}

impl ScoreModel for LinearScoreModel {
    fn fake_score(&self, noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32> {
        self.apply(&self.fake, noisy, prompt, t)
    }

    fn real_score(&self, noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32> {
        self.apply(&self.real, noisy, prompt, t)
    }
}

/// Real score anchored on reference windows keyed by `(prompt, window)`.
pub struct ReferenceScoreModel {
    blend: f64,
    windows: HashMap<(u64, usize), Vec<f32>>,
}

impl ReferenceScoreModel {
    pub fn new(blend: f64, references: impl IntoIterator<Item = LatentWindow>) -> Result<Self> {
        if !(blend.is_finite() && (0.0..=1.0).contains(&blend)) {
            return Err(config_err("reference blend must lie in [0, 1]"));
        }
        let windows = references
            .into_iter()
            .map(|w| ((w.prompt_id, w.window_index), w.frames))
            .collect();
        Ok(Self { blend, windows })
    }
}

impl ScoreModel for ReferenceScoreModel {
    fn fake_score(&self, noisy: &LatentWindow, _: Option<u64>, t: f64) -> Vec<f32> {
        IdentityScoreModel.fake_score(noisy, None, t)
    }

    fn real_score(&self, noisy: &LatentWindow, prompt: Option<u64>, t: f64) -> Vec<f32> {
        let inv = 1.0 / (1.0 - t);
        let keep = 1.0 - self.blend;
        let reference = self.windows.get(&(prompt.unwrap_or(noisy.prompt_id), noisy.window_index));
        noisy
            .frames
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let r = reference.map_or(0.0, |r| r[i] as f64);
                (keep * x as f64 * inv + self.blend * r) as f32
            })
            .collect()
    }
}

/// Importance scores `[layer][head]`; higher means masking hurts more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub layers: usize,
    pub heads: usize,
    pub scores: Vec<Vec<f64>>,
    pub prompts: Vec<u64>,
    pub seeds: Vec<u64>,
    pub num_windows: usize,
}

impl ImportanceTable {
    pub fn flat(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }
}

/// Seed used for the rollouts and noise of one prompt.
pub fn prompt_seed(run_seed: u64, prompt: u64) -> u64 {
    mix_seed(run_seed, prompt.wrapping_add(0xA11CE))
}

/// Synthetic rollout with one head's attention output zeroed at every step.
pub fn masked_rollout(
    engine: &RolloutEngine,
    stream: &[Vec<FrameTensor>],
    masked: Option<HeadId>,
) -> Result<Vec<FrameTensor>> {
    let shape = &engine.config().shape;
    if let Some(m) = masked {
        check_head(m, shape)?;
    }
    Ok(engine.run(stream, &dense_baseline(shape), None, masked)?.trajectory)
}

/// Consecutive non-overlapping windows `[r·K, (r + 1)·K)` for `r < N_w`.
pub fn split_windows(
    trajectory: &[FrameTensor],
    window_length: usize,
    num_windows: usize,
    prompt_id: u64,
) -> Result<Vec<LatentWindow>> {
    if trajectory.len() < window_length * num_windows {
        return Err(config_err(format!(
            "trajectory of {} frames is shorter than {num_windows} windows of {window_length}",
            trajectory.len()
        )));
    }
    let frame_len = trajectory.first().map_or(0, |f| f.data().len());
    (0..num_windows)
        .map(|r| {
            let frames: Vec<f32> = trajectory[r * window_length..(r + 1) * window_length]
                .iter()
                .flat_map(|f| f.data().iter().copied())
                .collect();
            LatentWindow::new(frames, frame_len, prompt_id, r)
        })
        .collect()
}

/// Mean DM loss over the windows of one trajectory. Timesteps and noise are
/// drawn from `(seed, window index)` so every masked rollout of a prompt sees
/// identical noise.
pub fn trajectory_loss(
    trajectory: &[FrameTensor],
    prompt: u64,
    seed: u64,
    scorer: &dyn ScoreModel,
    config: &DmLossConfig,
) -> Result<f64> {
    let windows = split_windows(trajectory, config.window_length, config.num_windows, prompt)?;
    let mut sum = 0.0;
    for w in &windows {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, w.window_index as u64 + 0x7155));
        let t = config.timesteps[rng.random_range(0..config.timesteps.len())];
        let noisy: Vec<f32> = w
            .frames
            .iter()
            .map(|&x| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                ((1.0 - t) * x as f64 + t * eps) as f32
            })
            .collect();
        let noisy = LatentWindow {
            frames: noisy,
            ..w.clone()
        };
        let fake = scorer.fake_score(&noisy, Some(prompt), t);
        let cond = scorer.real_score(&noisy, Some(prompt), t);
        let uncond = scorer.real_score(&noisy, None, t);
        sum += dm_loss(&w.frames, &fake, &cond, &uncond, t, config)?;
    }
    Ok(sum / windows.len() as f64)
}

/// Masks every head for every prompt and averages the window losses.
pub fn estimate_importance(prompts: &[u64], config: &RunConfig) -> Result<ImportanceTable> {
    let scorer: Box<dyn ScoreModel> = match config.score_model {
        ScoreModelSpec::Reference { blend } => {
            let engine = RolloutEngine::new(config)?;
            let mut references = Vec::new();
            for &p in prompts {
                let stream = prompt_stream(config, p)?;
                let traj = masked_rollout(&engine, &stream, None)?;
                let dm = &config.dm_loss;
                references.extend(split_windows(&traj, dm.window_length, dm.num_windows, p)?);
            }
            Box::new(ReferenceScoreModel::new(blend, references)?)
        }
        spec => spec.build(config.shape.width(), config.seed)?,
    };
    estimate_importance_with(prompts, config, scorer.as_ref())
}

/// The latent stream rolled out for `prompt`.
pub fn prompt_stream(config: &RunConfig, prompt: u64) -> Result<Vec<Vec<FrameTensor>>> {
    synthetic_stream(
        &config.shape,
        config.stream.redundancy,
        prompt_seed(config.seed, prompt),
        config.importance_chunks,
    )
}

pub fn estimate_importance_with(
    prompts: &[u64],
    config: &RunConfig,
    scorer: &dyn ScoreModel,
) -> Result<ImportanceTable> {
    if prompts.is_empty() {
        return Err(config_err("at least one prompt is required"));
    }
    config.validate()?;
    let shape = &config.shape;
    let dm = &config.dm_loss;
    if config.importance_chunks * shape.chunk_frames < dm.window_length * dm.num_windows {
        return Err(config_err(format!(
            "{} chunks of {} frames cannot hold {} windows of {}",
            config.importance_chunks, shape.chunk_frames, dm.num_windows, dm.window_length
        )));
    }
    let engine = RolloutEngine::new(config)?;
    let n_heads = shape.num_layers * shape.heads_per_layer;

    let mut ordered: Vec<u64> = prompts.to_vec();
    ordered.sort_unstable();
    let seeds: Vec<u64> = ordered.iter().map(|&p| prompt_seed(config.seed, p)).collect();

    let mut total = vec![0.0f64; n_heads];
    for (&prompt, &seed) in ordered.iter().zip(&seeds) {
        let stream = prompt_stream(config, prompt)?;
        let per_head: Vec<f64> = (0..n_heads)
            .into_par_iter()
            .map(|flat| {
                let head = HeadId::from_flat(flat, shape.heads_per_layer);
                let traj = masked_rollout(&engine, &stream, Some(head))?;
                trajectory_loss(&traj, prompt, seed, scorer, dm)
            })
            .collect::<Result<_>>()?;
        for (acc, x) in total.iter_mut().zip(per_head) {
            *acc += x;
        }
    }
    let m = ordered.len() as f64;
    let scores = total
        .chunks(shape.heads_per_layer)
        .map(|row| row.iter().map(|x| x / m).collect())
        .collect();
    Ok(ImportanceTable {
        layers: shape.num_layers,
        heads: shape.heads_per_layer,
        scores,
        prompts: ordered,
        seeds,
        num_windows: dm.num_windows,
    })
}

/// `(I − I_min) / (I_max − I_min + ε)`.
pub fn normalize_importance(scores: &[f64], epsilon: f64) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().map(|s| (s - min) / (max - min + epsilon)).collect()
}

/// `round(b_min + Î^γ (b_max − b_min))`, rounding half away from zero.
pub fn map_budget(normalized: f64, params: &BudgetParams) -> u32 {
    let span = (params.b_max - params.b_min) as f64;
    let raw = params.b_min as f64 + normalized.max(0.0).powf(params.gamma) * span;
    (raw.round() as u32).clamp(params.b_min, params.b_max)
}

/// Frozen per-head budget table, serialised as the `budgets.json` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadBudgetTable {
    pub layers: usize,
    pub heads: usize,
    pub b_min: u32,
    pub b_max: u32,
    pub gamma: f64,
    pub importance: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    pub budgets: Vec<Vec<u32>>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub prompts: Vec<u64>,
}

impl HeadBudgetTable {
    pub fn params(&self) -> BudgetParams {
        BudgetParams {
            b_min: self.b_min,
            b_max: self.b_max,
            gamma: self.gamma,
        }
    }

    /// Maps normalised scores `[layer][head]` to budgets.
    pub fn map_budgets(importance: Vec<Vec<f64>>, normalized: Vec<Vec<f64>>, params: &BudgetParams) -> Result<Self> {
        params.validate()?;
        let budgets = normalized
            .iter()
            .map(|row| row.iter().map(|&n| map_budget(n, params)).collect())
            .collect();
        let table = Self {
            layers: normalized.len(),
            heads: normalized.first().map_or(0, Vec::len),
            b_min: params.b_min,
            b_max: params.b_max,
            gamma: params.gamma,
            importance,
            normalized,
            budgets,
            seeds: vec![],
            prompts: vec![],
        };
        table.validate()?;
        Ok(table)
    }

    /// Normalises an importance table and maps it to budgets.
    pub fn from_importance(table: &ImportanceTable, params: &BudgetParams, epsilon: f64) -> Result<Self> {
        let flat = normalize_importance(&table.flat(), epsilon);
        let normalized: Vec<Vec<f64>> = flat.chunks(table.heads.max(1)).map(<[f64]>::to_vec).collect();
        let mut out = Self::map_budgets(table.scores.clone(), normalized, params)?;
        out.seeds = table.seeds.clone();
        out.prompts = table.prompts.clone();
        Ok(out)
    }

    /// Builds a table from explicit budgets, back-filling normalised scores
    /// with the inverse mapping `Î = ((b − b_min)/(b_max − b_min))^(1/γ)`.
    pub fn from_budgets(budgets: Vec<Vec<u32>>, b_min: u32, b_max: u32, gamma: f64) -> Result<Self> {
        let params = BudgetParams { b_min, b_max, gamma };
        params.validate()?;
        let span = (b_max - b_min) as f64;
        let normalized: Vec<Vec<f64>> = budgets
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&b| {
                        if span == 0.0 {
                            0.0
                        } else {
                            ((b.saturating_sub(b_min)) as f64 / span).powf(1.0 / gamma)
                        }
                    })
                    .collect()
            })
            .collect();
        let table = Self {
            layers: budgets.len(),
            heads: budgets.first().map_or(0, Vec::len),
            b_min,
            b_max,
            gamma,
            importance: normalized.clone(),
            normalized,
            budgets,
            seeds: vec![],
            prompts: vec![],
        };
        table.validate()?;
        Ok(table)
    }

    /// Every head gets `budget` (with `b_min = b_max = budget`).
    pub fn uniform(shape: &ModelShape, budget: u32) -> Result<Self> {
        Self::from_budgets(
            vec![vec![budget; shape.heads_per_layer]; shape.num_layers],
            budget,
            budget,
            1.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        fn grid_ok<T>(rows: &[Vec<T>], layers: usize, heads: usize) -> bool {
            rows.len() == layers && rows.iter().all(|r| r.len() == heads)
        }
        if !grid_ok(&self.budgets, self.layers, self.heads)
            || !grid_ok(&self.normalized, self.layers, self.heads)
            || !grid_ok(&self.importance, self.layers, self.heads)
        {
            return Err(Error::Validation(format!(
                "budget table arrays must all be {}x{}",
                self.layers, self.heads
            )));
        }
        let params = self.params();
        params.validate().map_err(|e| Error::Validation(e.to_string()))?;
        for (l, (brow, nrow)) in self.budgets.iter().zip(&self.normalized).enumerate() {
            for (h, (&b, &n)) in brow.iter().zip(nrow).enumerate() {
                if b < self.b_min || b > self.b_max {
                    return Err(Error::Validation(format!(
                        "budget {b} at ({l}, {h}) outside [{}, {}]",
                        self.b_min, self.b_max
                    )));
                }
                if !n.is_finite() || map_budget(n, &params) != b {
                    return Err(Error::Validation(format!(
                        "budget {b} at ({l}, {h}) does not match its normalised score {n}"
                    )));
                }
            }
        }
        if self.importance.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Validation("importance scores must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn check_shape(&self, shape: &ModelShape) -> Result<()> {
        if self.layers != shape.num_layers || self.heads != shape.heads_per_layer {
            return Err(config_err(format!(
                "budget table is {}x{} but the model is {}x{}",
                self.layers, self.heads, shape.num_layers, shape.heads_per_layer
            )));
        }
        Ok(())
    }

    pub fn budget(&self, layer: usize, head: usize) -> Option<u32> {
        self.budgets.get(layer)?.get(head).copied()
    }

    pub fn layer_budgets(&self, layer: usize) -> Option<&[u32]> {
        self.budgets.get(layer).map(Vec::as_slice)
    }

    pub fn total(&self) -> u64 {
        self.budgets.iter().flatten().map(|&b| b as u64).sum()
    }

    pub fn layer_sums(&self) -> Vec<u64> {
        self.budgets.iter().map(|r| r.iter().map(|&b| b as u64).sum()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text).map_err(|e| Error::Validation(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for b in &self.bins {
            out.push_str(&format!("{:.9e},{:.9e},{}\n", b.bin_low, b.bin_high, b.count));
        }
        out.push_str(&format!("min,{:.9e}\nmedian,{:.9e}\nmax,{:.9e}\n", self.min, self.median, self.max));
        out
    }
}

/// Equal-width histogram over `[min, max]`; the top edge is inclusive.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() || bins == 0 {
        return Err(config_err("histogram needs values and at least one bin"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = if width > 0.0 {
            (((v - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_low: min + width * i as f64,
            bin_high: if i + 1 == bins { max } else { min + width * (i + 1) as f64 },
            count,
        })
        .collect();
    Ok(Histogram { bins, min, median, max })
}
