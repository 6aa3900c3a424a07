//! Pretraining objectives for the environment memory model and the
//! per-direction average-precision evaluation.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{derive_seed, with_workers, Dataset, DatasetError};
use crate::envmemory::{
    add_pose_noise, assemble_sample, sample_memory_frames, ContinuousPose, EnvMemoryModel, MemorySample, ModelError,
    NoiseParams, PoseMode, SampleMode,
};
use crate::localstate::{ABSENT, N_STATES};
use crate::numgrad::{adam_step, AdamConfig, AdamState, NumError, ParamStore, Tape, Tensor, Var};
use crate::observation::egocentric_features_at;

/// Directions scored by the evaluation, in report order.
pub const DIRECTIONS: [&str; 4] = ["forward", "right", "behind", "left"];
/// Memory-frame count thresholds for the rare-object statistic.
pub const RARE_THRESHOLDS: [usize; 4] = [1, 2, 4, 8];
/// Instances whose class shows up in fewer memory frames than this are rare.
pub const RARE_CUTOFF: usize = 4;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("dataset has no episodes")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "env_state")]
    EnvState,
    #[serde(rename = "ssl", alias = "ssl_masked")]
    SslMasked,
    #[serde(rename = "pano", alias = "pano_feat")]
    PanoFeat,
    #[serde(rename = "none", alias = "scratch")]
    None,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::EnvState => "env_state",
            Self::SslMasked => "ssl",
            Self::PanoFeat => "pano",
            Self::None => "none",
        }
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "env_state" => Ok(Self::EnvState),
            "ssl" | "ssl_masked" => Ok(Self::SslMasked),
            "pano" | "pano_feat" => Ok(Self::PanoFeat),
            "none" | "scratch" => Ok(Self::None),
            _ => Err(format!("unknown objective {s:?} (expected env_state, ssl, pano or none)")),
        }
    }
}

impl FromStr for PoseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relative" => Ok(Self::Relative),
            "global" => Ok(Self::Global),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown pose mode {s:?} (expected relative, global or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub pose_mode: PoseMode,
    pub noise: NoiseParams,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Memory frames per sample.
    pub memory_k: usize,
    /// Replace the query with a learned token in the masked-feature objective.
    pub ssl_mask: bool,
    /// Held-out query steps per validation episode.
    pub val_queries: usize,
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::EnvState,
            pose_mode: PoseMode::Relative,
            noise: NoiseParams::default(),
            epochs: 40,
            lr: 1e-4,
            weight_decay: 2e-5,
            batch_size: 32,
            seed: 0,
            memory_k: 16,
            ssl_mask: true,
            val_queries: 2,
            grad_clip: None,
        }
    }
}

impl PretrainConfig {
    /// Desk-scale preset: the higher learning rate suits 40 epochs over about
    /// a thousand walkthroughs.
    pub fn desk() -> Self {
        Self { lr: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.epochs == 0 {
            return Err(PretrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.memory_k == 0 {
            return Err(PretrainError::Config("batch_size and memory_k must be positive".into()));
        }
        if !(self.lr >= 0.0) || self.noise.pos < 0.0 || self.noise.heading < 0.0 {
            return Err(PretrainError::Config("lr and noise ranges must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: EnvMemoryModel,
    pub curve: Vec<EpochLoss>,
    /// Per-step training losses.
    pub steps: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// One prepared query: memory sample plus the targets every objective needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub episode: usize,
    pub step: usize,
    pub memory: Vec<usize>,
    pub sample: MemorySample,
    /// Local-state targets, one per class.
    pub labels: Vec<usize>,
}

/// Builds a sample; `rng` drives memory offsets and pose noise when present.
pub fn prepare(
    ds: &Dataset,
    episode: usize,
    step: usize,
    k: usize,
    mode: PoseMode,
    noise: Option<(&NoiseParams, &mut ChaCha8Rng)>,
) -> Result<Prepared, ModelError> {
    let ep = &ds.episodes[episode];
    let t = ep.len();
    let mut poses: Vec<ContinuousPose> = ep.poses().iter().map(ContinuousPose::from).collect();
    let memory = match noise {
        Some((params, rng)) => {
            let memory = sample_memory_frames(t, k, SampleMode::Train, rng)?;
            for &s in memory.iter().chain(std::iter::once(&step)) {
                poses[s] = add_pose_noise(ep.poses()[s].into(), rng, params);
            }
            memory
        }
        None => sample_memory_frames(t, k, SampleMode::Inference, &mut ChaCha8Rng::seed_from_u64(0))?,
    };
    let sample = assemble_sample(&ep.features, &poses, &memory, step, mode);
    let labels = ep.labels[step].entries().iter().map(|&l| l as usize).collect();
    Ok(Prepared { episode, step, memory, sample, labels })
}

/// Egocentric features at the query position for headings rotated by
/// 0°, 90°, 180° and 270°, concatenated (`4×F`).
pub fn pano_targets(ds: &Dataset, episode: usize, step: usize) -> Vec<f64> {
    let ep = &ds.episodes[episode];
    let env = ds.env_of(ep);
    let p = ep.poses()[step];
    (0..4)
        .flat_map(|i| {
            let theta = p.theta() + i as f64 * std::f64::consts::FRAC_PI_2;
            egocentric_features_at(env, p.x, p.z, theta, &ds.obs).into_iter().map(f64::from)
        })
        .collect()
}

/// Adds the objective-specific parameters under the `aux.` prefix.
pub fn add_aux_params(model: &mut EnvMemoryModel, objective: Objective, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA0]));
    let (f, d) = (model.config.feature_dim, model.config.d);
    let s = &mut model.params;
    match objective {
        Objective::SslMasked if s.id("aux.mask").is_none() => {
            s.add("aux.mask", Tensor::uniform_fan_in(vec![1, f], f, &mut rng));
            s.add("aux.reg.w", Tensor::uniform_fan_in(vec![f + d, f], f + d, &mut rng));
            s.add("aux.reg.b", Tensor::zeros(vec![f]));
        }
        Objective::PanoFeat if s.id("aux.pano.w").is_none() => {
            s.add("aux.pano.w", Tensor::uniform_fan_in(vec![d, 4 * f], d, &mut rng));
            s.add("aux.pano.b", Tensor::zeros(vec![4 * f]));
        }
        _ => {}
    }
}

/// Objective loss for a batch on a fresh tape.
pub fn batch_loss(model: &EnvMemoryModel, tape: &mut Tape, ds: &Dataset, items: &[Prepared], cfg: &PretrainConfig) -> Result<Var, PretrainError> {
    let samples: Vec<MemorySample> = items.iter().map(|p| p.sample.clone()).collect();
    let b = items.len();
    let (f, o) = (model.config.feature_dim, model.config.n_classes);
    match cfg.objective {
        Objective::EnvState | Objective::None => {
            let out = model.forward(tape, &samples)?;
            let logits = model.head(tape, out.query, out.h)?;
            let logits = tape.reshape(logits, b * o, N_STATES)?;
            let targets: Vec<usize> = items.iter().flat_map(|p| p.labels.iter().copied()).collect();
            Ok(tape.cross_entropy(logits, &targets)?)
        }
        Objective::SslMasked => {
            let (frames, poses, queries, k) = model.stack(&samples)?;
            let (fr, qu) = if cfg.ssl_mask {
                let mask = model.param(tape, "aux.mask")?;
                // slots holding the query frame are swapped for the mask token too
                let mut keep = frames.clone();
                let mut ind = vec![0.0; b * k];
                for (i, p) in items.iter().enumerate() {
                    for (j, &s) in p.memory.iter().enumerate() {
                        if s == p.step {
                            ind[i * k + j] = 1.0;
                            keep[(i * k + j) * f..(i * k + j + 1) * f].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
                let keep = tape.constant(b * k, f, keep);
                let ind = tape.constant(b * k, 1, ind);
                let masked = tape.matmul(ind, mask)?;
                let fr = tape.add(keep, masked)?;
                let ones = tape.constant(b, 1, vec![1.0; b]);
                (fr, tape.matmul(ones, mask)?)
            } else {
                (tape.constant(b * k, f, frames), tape.constant(b, f, queries.clone()))
            };
            let po = tape.constant(b * k, 4, poses);
            let out = model.forward_vars(tape, fr, po, qu, k)?;
            let cat = tape.hcat(&[out.query, out.h])?;
            let pred = model.linear(tape, cat, "aux.reg")?;
            Ok(tape.mse(pred, &queries)?)
        }
        Objective::PanoFeat => {
            let out = model.forward(tape, &samples)?;
            let pred = model.linear(tape, out.h, "aux.pano")?;
            let targets: Vec<f64> = items.iter().flat_map(|p| pano_targets(ds, p.episode, p.step)).collect();
            Ok(tape.mse(pred, &targets)?)
        }
    }
}

/// Backpropagates `loss`, optionally clips, and applies one Adam step.
pub fn apply_step(tape: &mut Tape, loss: Var, store: &mut ParamStore, adam: &mut AdamState, clip: Option<f64>) -> Result<f64, NumError> {
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(NumError::NonFinite("loss"));
    }
    tape.backward(loss)?;
    let mut grads = tape.param_grads(store.len());
    if let Some(c) = clip {
        let n = grads.global_norm();
        if n > c {
            grads.scale(c / n);
        }
    }
    grads.write_to(store);
    adam_step(store, adam)?;
    Ok(value)
}

/// Fixed `(episode, step)` pairs, `per_episode` distinct steps each.
pub fn fixed_queries(ds: &Dataset, per_episode: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in ds.episodes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE7, e as u64]));
        let n = per_episode.min(ep.len());
        let mut steps = rand::seq::index::sample(&mut rng, ep.len(), n).into_vec();
        steps.sort_unstable();
        out.extend(steps.into_iter().map(|s| (e, s)));
    }
    out
}

fn prepare_fixed(ds: &Dataset, queries: &[(usize, usize)], k: usize, mode: PoseMode) -> Result<Vec<Prepared>, ModelError> {
    queries.par_iter().map(|&(e, s)| prepare(ds, e, s, k, mode, None)).collect()
}

const EVAL_CHUNK: usize = 64;

/// Mean objective loss over fixed held-out queries, without noise.
pub fn held_out_loss(model: &EnvMemoryModel, ds: &Dataset, items: &[Prepared], cfg: &PretrainConfig) -> Result<f64, PretrainError> {
    let losses = items
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let l = batch_loss(model, &mut tape, ds, chunk, cfg)?;
            Ok(tape.scalar(l) * chunk.len() as f64)
        })
        .collect::<Result<Vec<f64>, PretrainError>>()?;
    Ok(losses.iter().sum::<f64>() / items.len().max(1) as f64)
}

/// Trains `model` on `train` under `cfg.objective`; `Objective::None` leaves
/// it untouched. When `val` is given, the epoch with the lowest held-out loss
/// is kept.
pub fn pretrain(train: &Dataset, val: Option<&Dataset>, cfg: &PretrainConfig, mut model: EnvMemoryModel, workers: usize) -> Result<PretrainOutcome, PretrainError> {
    cfg.validate()?;
    if train.episodes.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    if cfg.objective == Objective::None {
        return Ok(PretrainOutcome { model, curve: Vec::new(), steps: Vec::new(), best_epoch: None });
    }
    add_aux_params(&mut model, cfg.objective, cfg.seed);
    with_workers(workers, || train_loop(train, val, cfg, model))?
}

fn train_loop(train: &Dataset, val: Option<&Dataset>, cfg: &PretrainConfig, mut model: EnvMemoryModel) -> Result<PretrainOutcome, PretrainError> {
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() }, &model.params);
    let val_items = match val {
        Some(v) => Some(prepare_fixed(v, &fixed_queries(v, cfg.val_queries, cfg.seed), cfg.memory_k, cfg.pose_mode)?),
        None => None,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let n = train.episodes.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5E, epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &e)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, bi as u64, i as u64]));
                    let step = rng.gen_range(0..train.episodes[e].len());
                    prepare(train, e, step, cfg.memory_k, cfg.pose_mode, Some((&cfg.noise, &mut rng)))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            let mut tape = Tape::new();
            let loss = batch_loss(&model, &mut tape, train, &items, cfg)?;
            let v = apply_step(&mut tape, loss, &mut model.params, &mut adam, cfg.grad_clip)?;
            steps.push(v);
            total += v;
            batches += 1;
        }
        let val_loss = match (&val_items, val) {
            (Some(items), Some(v)) => Some(held_out_loss(&model, v, items, cfg)?),
            _ => None,
        };
        if let Some(l) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| l < *b) {
                best = Some((l, epoch, model.params.clone()));
            }
        }
        curve.push(EpochLoss { epoch, train: total / batches as f64, val: val_loss });
    }
    let best_epoch = best.map(|(_, e, p)| {
        model.params = p;
        e
    });
    Ok(PretrainOutcome { model, curve, steps, best_epoch })
}

pub fn pretrain_ssl(train: &Dataset, val: Option<&Dataset>, cfg: &PretrainConfig, model: EnvMemoryModel, workers: usize) -> Result<PretrainOutcome, PretrainError> {
    pretrain(train, val, &PretrainConfig { objective: Objective::SslMasked, ..*cfg }, model, workers)
}

pub fn pretrain_pano(train: &Dataset, val: Option<&Dataset>, cfg: &PretrainConfig, model: EnvMemoryModel, workers: usize) -> Result<PretrainOutcome, PretrainError> {
    pretrain(train, val, &PretrainConfig { objective: Objective::PanoFeat, ..*cfg }, model, workers)
}

/// Uninterpolated average precision: mean over positives of the precision at
/// the score of that positive. Tied scores share one rank, so a positive's
/// precision counts every item scoring at least as high. `None` without
/// positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut seen, mut hits, mut sum) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&x| positive[x]).count();
        seen += j - i;
        hits += group_pos;
        sum += group_pos as f64 * hits as f64 / seen as f64;
        i = j;
    }
    Some(sum / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareObjectStats {
    pub thresholds: Vec<usize>,
    /// Fraction of instances whose class appears in fewer than `k` memory frames.
    pub fractions: Vec<f64>,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per direction in [`DIRECTIONS`] order; `None` without positives.
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    /// mAP restricted to pairs whose class appears in fewer than
    /// [`RARE_CUTOFF`] memory frames.
    pub rare_map: Option<f64>,
    pub queries: usize,
    pub pairs: usize,
    pub rare: RareObjectStats,
}

fn mean_present(aps: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Number of memory frames whose feature shows class `c` on any ray.
pub fn class_frame_count(ds: &Dataset, p: &Prepared, class: usize) -> usize {
    let block = ds.obs.block(ds.n_classes());
    let ep = &ds.episodes[p.episode];
    p.memory.iter().filter(|&&s| ep.features[s].chunks(block).any(|b| b[2 + class] > 0.0)).count()
}

fn rare_stats_of(ds: &Dataset, items: &[Prepared]) -> RareObjectStats {
    let mut counts = Vec::new();
    for p in items {
        for (c, &l) in p.labels.iter().enumerate() {
            if l != ABSENT as usize {
                counts.push(class_frame_count(ds, p, c));
            }
        }
    }
    let n = counts.len();
    let fractions = RARE_THRESHOLDS
        .iter()
        .map(|&k| if n == 0 { 0.0 } else { counts.iter().filter(|&&c| c < k).count() as f64 / n as f64 })
        .collect();
    RareObjectStats { thresholds: RARE_THRESHOLDS.to_vec(), fractions, instances: n }
}

/// Fraction of labeled (present) instances whose class appears in fewer than
/// k memory frames, over fixed evaluation queries.
pub fn rare_object_stats(ds: &Dataset, per_episode: usize, k: usize, seed: u64) -> Result<RareObjectStats, PretrainError> {
    let items = prepare_fixed(ds, &fixed_queries(ds, per_episode, seed), k, PoseMode::None)?;
    Ok(rare_stats_of(ds, &items))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub memory_k: usize,
    pub pose_mode: PoseMode,
    pub queries_per_episode: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { memory_k: 16, pose_mode: PoseMode::Relative, queries_per_episode: 4, seed: 0 }
    }
}

/// Direction probabilities `|O|×5` per query.
pub fn predict_probs(model: &EnvMemoryModel, items: &[Prepared]) -> Result<Vec<Vec<f64>>, PretrainError> {
    let o = model.config.n_classes;
    let chunks = items
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let samples: Vec<MemorySample> = chunk.iter().map(|p| p.sample.clone()).collect();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &samples)?;
            let logits = model.head(&mut tape, out.query, out.h)?;
            let logits = tape.reshape(logits, chunk.len() * o, N_STATES)?;
            let probs = tape.softmax(logits)?;
            Ok(tape.value(probs).chunks(o * N_STATES).map(|c| c.to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, PretrainError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Per-direction AP over pooled (query, class) pairs on fixed held-out queries.
pub fn eval_ap(model: &EnvMemoryModel, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport, PretrainError> {
    if ds.episodes.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let items = prepare_fixed(ds, &fixed_queries(ds, opts.queries_per_episode, opts.seed), opts.memory_k, opts.pose_mode)?;
    let probs = predict_probs(model, &items)?;
    let o = model.config.n_classes;
    let mut scores = vec![Vec::new(); 4];
    let mut pos = vec![Vec::new(); 4];
    let mut rare_scores = vec![Vec::new(); 4];
    let mut rare_pos = vec![Vec::new(); 4];
    for (p, pr) in items.iter().zip(&probs) {
        for c in 0..o {
            let rare = class_frame_count(ds, p, c) < RARE_CUTOFF;
            for d in 0..4 {
                let s = pr[c * N_STATES + d + 1];
                let y = p.labels[c] == d + 1;
                scores[d].push(s);
                pos[d].push(y);
                if rare {
                    rare_scores[d].push(s);
                    rare_pos[d].push(y);
                }
            }
        }
    }
    let ap: Vec<Option<f64>> = (0..4).map(|d| average_precision(&scores[d], &pos[d])).collect();
    let rare_ap: Vec<Option<f64>> = (0..4).map(|d| average_precision(&rare_scores[d], &rare_pos[d])).collect();
    Ok(EvalReport {
        map: mean_present(&ap),
        ap,
        rare_map: mean_present(&rare_ap),
        queries: items.len(),
        pairs: items.len() * o,
        rare: rare_stats_of(ds, &items),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};
    use crate::envmemory::ModelConfig;

    fn small_ds(n_envs: usize, walks: usize, steps: usize) -> Dataset {
        build_dataset(&DatasetConfig { steps, ..DatasetConfig::desk(500, n_envs, walks, 3) }, 1).unwrap()
    }

    fn small_model(ds: &Dataset) -> EnvMemoryModel {
        let cfg = ModelConfig { d: 32, heads: 4, feature_dim: ds.feature_dim(), n_classes: ds.n_classes(), ..ModelConfig::default() };
        EnvMemoryModel::new(cfg, 1).unwrap()
    }

    /// Precision at each positive counts every item with score >= its own.
    fn ap_reference(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            return None;
        }
        let mut sum = 0.0;
        for i in 0..scores.len() {
            if positive[i] {
                let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
                sum += above.iter().filter(|&&j| positive[j]).count() as f64 / above.len() as f64;
            }
        }
        Some(sum / n_pos as f64)
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.8, 0.2], &[true, false, true, false]), Some(1.0));
        // ranks 1..6 with positives at ranks 1, 3, 6: (1 + 2/3 + 3/6) / 3
        let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let y = [true, false, true, false, false, true];
        assert!((average_precision(&s, &y).unwrap() - (1.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
        // all tied: every positive sees precision = prevalence = 2/6
        let eq = [0.5; 6];
        let y = [false, true, false, false, true, false];
        assert_eq!(average_precision(&eq, &y), Some(2.0 / 6.0));
        assert_eq!(average_precision(&eq, &[false; 6]), None);
    }

    #[test]
    fn ap_matches_quadratic_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let n = rng.gen_range(1..=200);
            // coarse scores force ties
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            match (average_precision(&s, &y), ap_reference(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn random_scorer_ap_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let prev = y.iter().filter(|&&v| v).count() as f64 / n as f64;
        assert!((average_precision(&s, &y).unwrap() - prev).abs() < 0.05);
    }

    #[test]
    fn objective_and_pose_parse() {
        assert_eq!("env_state".parse::<Objective>().unwrap(), Objective::EnvState);
        assert_eq!("ssl".parse::<Objective>().unwrap(), Objective::SslMasked);
        assert_eq!("pano".parse::<Objective>().unwrap(), Objective::PanoFeat);
        assert_eq!("none".parse::<Objective>().unwrap(), Objective::None);
        assert!("mae".parse::<Objective>().is_err());
        assert_eq!("global".parse::<PoseMode>().unwrap(), PoseMode::Global);
        assert_eq!(serde_json::to_string(&Objective::SslMasked).unwrap(), "\"ssl\"");
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let ds = small_ds(1, 4, 24);
        let model = small_model(&ds);
        let cfg = PretrainConfig { lr: 0.0, weight_decay: 0.0, epochs: 2, batch_size: 2, memory_k: 8, ..PretrainConfig::default() };
        let out = pretrain(&ds, None, &cfg, model.clone(), 1).unwrap();
        let values = |s: &ParamStore| s.iter().map(|(_, _, t)| t.values().to_vec()).collect::<Vec<_>>();
        assert_eq!(values(&out.model.params), values(&model.params));
        assert_eq!(out.steps.len(), 4);
    }

    #[test]
    fn pretraining_is_deterministic_across_workers() {
        let ds = small_ds(1, 4, 24);
        let cfg = PretrainConfig { lr: 1e-3, epochs: 2, batch_size: 2, memory_k: 8, ..PretrainConfig::default() };
        let a = pretrain(&ds, Some(&ds), &cfg, small_model(&ds), 1).unwrap();
        let b = pretrain(&ds, Some(&ds), &cfg, small_model(&ds), 4).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.best_epoch.is_some());
    }

    #[test]
    fn scratch_objective_is_a_no_op() {
        let ds = small_ds(1, 2, 24);
        let model = small_model(&ds);
        let cfg = PretrainConfig { objective: Objective::None, ..PretrainConfig::default() };
        let out = pretrain(&ds, None, &cfg, model.clone(), 1).unwrap();
        assert_eq!(out.model, model);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn env_state_overfits_small_set() {
        let ds = small_ds(2, 5, 16);
        let cfg = PretrainConfig { lr: 2e-3, weight_decay: 0.0, noise: NoiseParams { enabled: false, ..NoiseParams::default() }, batch_size: 10, memory_k: 16, epochs: 500, ..PretrainConfig::default() };
        let out = pretrain(&ds, None, &cfg, small_model(&ds), 1).unwrap();
        let first = out.steps[0];
        assert!(out.steps.len() == 500);
        let tail = out.steps[490..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.1 * first, "initial {first}, final {tail}");
    }

    #[test]
    fn ssl_copy_model_has_zero_loss() {
        let ds = small_ds(1, 2, 16);
        let mut model = small_model(&ds);
        add_aux_params(&mut model, Objective::SslMasked, 0);
        let f = model.config.feature_dim;
        let id = model.params.id("aux.reg.w").unwrap();
        let w = model.params.get_mut(id).values_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..f {
            w[i * f + i] = 1.0;
        }
        let cfg = PretrainConfig { objective: Objective::SslMasked, ssl_mask: false, ..PretrainConfig::default() };
        let items: Vec<Prepared> = (0..4).map(|s| prepare(&ds, 0, s * 3, 8, PoseMode::Relative, None).unwrap()).collect();
        let mut tape = Tape::new();
        let l = batch_loss(&model, &mut tape, &ds, &items, &cfg).unwrap();
        assert!(tape.scalar(l) < 1e-20);
        let masked = PretrainConfig { ssl_mask: true, ..cfg };
        let mut tape = Tape::new();
        let l = batch_loss(&model, &mut tape, &ds, &items, &masked).unwrap();
        assert!(tape.scalar(l) > 0.0);
    }

    #[test]
    fn ssl_smoothed_loss_decreases_on_overfit_set() {
        let ds = small_ds(1, 4, 16);
        let cfg = PretrainConfig {
            objective: Objective::SslMasked,
            lr: 1e-3,
            noise: NoiseParams { enabled: false, ..NoiseParams::default() },
            batch_size: 4,
            memory_k: 16,
            epochs: 300,
            ..PretrainConfig::default()
        };
        let out = pretrain(&ds, None, &cfg, small_model(&ds), 1).unwrap();
        assert!(out.steps.iter().all(|&l| l >= 0.0));
        let smooth: Vec<f64> = out.steps.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
    }

    #[test]
    fn pano_targets_shape_and_identity_direction() {
        let ds = small_ds(1, 1, 16);
        let t = pano_targets(&ds, 0, 5);
        let f = ds.feature_dim();
        assert_eq!(t.len(), 4 * f);
        let own: Vec<f64> = ds.episodes[0].features[5].iter().map(|&v| v as f64).collect();
        assert_eq!(&t[..f], &own[..]);
    }

    #[test]
    fn pano_overfits_small_set() {
        let ds = small_ds(1, 2, 16);
        let cfg = PretrainConfig {
            objective: Objective::PanoFeat,
            lr: 2e-3,
            weight_decay: 0.0,
            noise: NoiseParams { enabled: false, ..NoiseParams::default() },
            batch_size: 2,
            memory_k: 16,
            epochs: 1000,
            ..PretrainConfig::default()
        };
        let out = pretrain(&ds, None, &cfg, small_model(&ds), 1).unwrap();
        let first = out.steps[0];
        let tail = out.steps[990..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.1 * first, "initial {first}, final {tail}");
    }

    #[test]
    fn rare_stats_monotone_and_bounded() {
        let ds = small_ds(2, 3, 32);
        let r = rare_object_stats(&ds, 4, 8, 0).unwrap();
        assert_eq!(r.thresholds, vec![1, 2, 4, 8]);
        assert!(r.fractions.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.fractions.iter().all(|&f| (0.0..=1.0).contains(&f)));
        assert!(r.instances > 0);
    }

    #[test]
    fn class_counts_at_extremes() {
        let ds = small_ds(1, 1, 16);
        let mut p = prepare(&ds, 0, 0, 4, PoseMode::Relative, None).unwrap();
        let block = ds.obs.block(ds.n_classes());
        let mut ds2 = ds.clone();
        // class 0 on one ray of every memory frame, class 1 on none
        for &s in &p.memory {
            let f = &mut ds2.episodes[0].features[s];
            f[2] = 1.0;
            f.chunks_mut(block).for_each(|b| b[2 + 1] = 0.0);
        }
        assert_eq!(class_frame_count(&ds2, &p, 0), 4);
        assert_eq!(class_frame_count(&ds2, &p, 1), 0);
        p.labels = vec![0; ds.n_classes()];
        p.labels[0] = 1;
        p.labels[1] = 2;
        let r = rare_stats_of(&ds2, &[p]);
        assert_eq!(r.instances, 2);
        // class 1 never visible: counted at every k; class 0 (count 4) only at k=8
        assert_eq!(r.fractions, vec![0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn perfect_scorer_gets_unit_ap() {
        let ds = small_ds(1, 2, 32);
        let items = prepare_fixed(&ds, &fixed_queries(&ds, 4, 0), 8, PoseMode::Relative).unwrap();
        let mut scores = vec![Vec::new(); 4];
        let mut pos = vec![Vec::new(); 4];
        for p in &items {
            for &l in &p.labels {
                for d in 0..4 {
                    scores[d].push(if l == d + 1 { 1.0 } else { 0.0 });
                    pos[d].push(l == d + 1);
                }
            }
        }
        let aps: Vec<f64> = (0..4).filter_map(|d| average_precision(&scores[d], &pos[d])).collect();
        assert!(!aps.is_empty());
        assert!(aps.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn eval_report_is_bounded() {
        let ds = small_ds(1, 2, 32);
        let report = eval_ap(&small_model(&ds), &ds, &EvalOptions { memory_k: 8, ..EvalOptions::default() }).unwrap();
        assert_eq!(report.ap.len(), 4);
        assert_eq!(report.queries, 8);
        assert_eq!(report.pairs, 8 * ds.n_classes());
        assert!(report.ap.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
    }
}
