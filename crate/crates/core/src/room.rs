//! Room prediction downstream task: windowed frame features fused with the
//! environment feature, max-pooled and classified.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{derive_seed, with_workers, Dataset, DatasetError};
use crate::envmemory::{EnvMemoryModel, MemorySample, ModelError, NoiseParams, PoseMode};
use crate::numgrad::{AdamConfig, AdamState, NumError, Tape, Tensor, Var};
use crate::pretrain::{apply_step, prepare};
use crate::worldgen::ROOM_CLASSES;

#[derive(Debug, Error)]
pub enum RoomError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("no room instances to train on")]
    EmptyDataset,
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("invalid room config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomMode {
    /// Frame features fused with the environment feature.
    Fused,
    /// Frame features only.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// Fuse `h` into every window frame, then max-pool.
    FuseThenPool,
    /// Max-pool the window, then fuse once.
    PoolThenFuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomConfig {
    pub mode: RoomMode,
    pub order: FusionOrder,
    /// Keep the environment memory model fixed.
    pub freeze: bool,
    pub window: usize,
    pub fused_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub memory_k: usize,
    pub pose_mode: PoseMode,
    pub noise: NoiseParams,
    pub seed: u64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            mode: RoomMode::Fused,
            order: FusionOrder::FuseThenPool,
            freeze: false,
            window: 8,
            fused_dim: 128,
            hidden: 128,
            epochs: 30,
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 32,
            memory_k: 16,
            pose_mode: PoseMode::Relative,
            noise: NoiseParams::default(),
            seed: 0,
        }
    }
}

impl RoomConfig {
    pub fn validate(&self) -> Result<(), RoomError> {
        let bad = |m: &str| Err(RoomError::Config(m.to_string()));
        if self.window == 0 || self.fused_dim == 0 || self.hidden == 0 {
            return bad("window, fused_dim and hidden must be positive");
        }
        if self.batch_size == 0 || self.memory_k == 0 {
            return bad("batch_size and memory_k must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }

    /// Whether the backbone receives gradient updates.
    pub fn finetunes(&self) -> bool {
        self.mode == RoomMode::Fused && !self.freeze
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomInstance {
    pub episode: usize,
    pub step: usize,
    /// Window steps, boundary frames repeated at the sequence ends.
    pub window: Vec<usize>,
    pub room: usize,
}

/// `n` steps covering `t - n/2 .. t + n/2 - 1`, clamped to `[0, len)`.
pub fn window_steps(t: usize, len: usize, n: usize) -> Vec<usize> {
    let half = (n / 2) as isize;
    (0..n as isize).map(|i| (t as isize - half + i).clamp(0, len as isize - 1) as usize).collect()
}

/// Up to `per_episode` labeled query steps per episode, sorted, drawn from
/// the steps whose room is known.
pub fn room_instances(ds: &Dataset, per_episode: usize, window: usize, seed: u64) -> Vec<RoomInstance> {
    let mut out = Vec::new();
    for (e, ep) in ds.episodes.iter().enumerate() {
        let labeled: Vec<usize> = (0..ep.len()).filter(|&s| ep.rooms[s].is_some()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x50, e as u64]));
        let mut steps: Vec<usize> = labeled.choose_multiple(&mut rng, per_episode.min(labeled.len())).copied().collect();
        steps.sort_unstable();
        out.extend(steps.into_iter().map(|s| RoomInstance {
            episode: e,
            step: s,
            window: window_steps(s, ep.len(), window),
            room: ep.rooms[s].expect("filtered to labeled steps"),
        }));
    }
    out
}

/// Plain-data fusion layer `g' = W^T [g; h] + b` with `W` stored
/// `(G+d)×G'` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub g_dim: usize,
    pub h_dim: usize,
}

impl FusionHead {
    pub fn new(w: Vec<f64>, b: Vec<f64>, g_dim: usize, h_dim: usize) -> Result<Self, RoomError> {
        let out = b.len();
        if w.len() != (g_dim + h_dim) * out {
            return Err(RoomError::Shape { what: "fusion weight", expected: (g_dim + h_dim) * out, got: w.len() });
        }
        Ok(Self { w, b, g_dim, h_dim })
    }

    /// Reads `room.fuse` from a classifier's parameters.
    pub fn from_model(model: &EnvMemoryModel, g_dim: usize) -> Result<Self, RoomError> {
        let get = |n: &str| {
            model.params.id(n).map(|id| model.params.get(id).values().to_vec()).ok_or_else(|| NumError::UnknownParam(n.to_string()))
        };
        let (w, b) = (get("room.fuse.w")?, get("room.fuse.b")?);
        let h_dim = (w.len() / b.len().max(1)).saturating_sub(g_dim);
        Self::new(w, b, g_dim, h_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.b.len()
    }

    pub fn fuse(&self, g: &[f64], h: &[f64]) -> Result<Vec<f64>, RoomError> {
        if g.len() != self.g_dim {
            return Err(RoomError::Shape { what: "clip feature", expected: self.g_dim, got: g.len() });
        }
        if h.len() != self.h_dim {
            return Err(RoomError::Shape { what: "environment feature", expected: self.h_dim, got: h.len() });
        }
        let out = self.out_dim();
        let mut y = self.b.clone();
        for (i, &x) in g.iter().chain(h).enumerate() {
            let row = &self.w[i * out..(i + 1) * out];
            y.iter_mut().zip(row).for_each(|(y, w)| *y += x * w);
        }
        Ok(y)
    }
}

/// Free-function form of [`FusionHead::fuse`].
pub fn fuse(head: &FusionHead, g: &[f64], h: &[f64]) -> Result<Vec<f64>, RoomError> {
    head.fuse(g, h)
}

fn lin(model: &mut EnvMemoryModel, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Result<(), RoomError> {
    let s = &mut model.params;
    match s.id(&format!("{name}.w")) {
        Some(id) if s.get(id).shape() != [i, o] => {
            Err(RoomError::Config(format!("existing {name} has shape {:?}, need [{i}, {o}]", s.get(id).shape())))
        }
        Some(_) => Ok(()),
        None => {
            s.add(format!("{name}.w"), Tensor::uniform_fan_in(vec![i, o], i, rng));
            s.add(format!("{name}.b"), Tensor::zeros(vec![o]));
            Ok(())
        }
    }
}

/// Adds the `room.` parameters for `cfg` to `model`, keeping any that
/// already exist with the right shape.
pub fn add_room_params(model: &mut EnvMemoryModel, cfg: &RoomConfig, g_dim: usize) -> Result<(), RoomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x400]));
    let d = model.config.d;
    let cls_in = match cfg.mode {
        RoomMode::Fused => {
            lin(model, "room.fuse", g_dim + d, cfg.fused_dim, &mut rng)?;
            cfg.fused_dim
        }
        RoomMode::Baseline => g_dim,
    };
    lin(model, "room.cls1", cls_in, cfg.hidden, &mut rng)?;
    lin(model, "room.cls2", cfg.hidden, ROOM_CLASSES.len(), &mut rng)
}

/// Trained classifier: the (possibly fine-tuned) memory model carrying the
/// `room.` head.
#[derive(Debug, Clone)]
pub struct RoomClassifier {
    pub model: EnvMemoryModel,
    pub config: RoomConfig,
}

fn window_features(ds: &Dataset, batch: &[&RoomInstance]) -> Vec<f64> {
    batch
        .iter()
        .flat_map(|inst| inst.window.iter().flat_map(move |&s| ds.episodes[inst.episode].features[s].iter().map(|&v| v as f64)))
        .collect()
}

/// Room logits `B×6` for a batch; `h` is `B×d` and required in fused mode.
pub fn room_logits(
    model: &EnvMemoryModel,
    cfg: &RoomConfig,
    tape: &mut Tape,
    ds: &Dataset,
    batch: &[&RoomInstance],
    h: Option<Var>,
) -> Result<Var, RoomError> {
    let (b, n, f) = (batch.len(), cfg.window, ds.feature_dim());
    if let Some(inst) = batch.iter().find(|i| i.window.len() != n) {
        return Err(RoomError::Shape { what: "window", expected: n, got: inst.window.len() });
    }
    let g = tape.constant(b * n, f, window_features(ds, batch));
    let pooled = match cfg.mode {
        RoomMode::Baseline => tape.max_pool_rows(g, n)?,
        RoomMode::Fused => {
            let h = h.ok_or_else(|| RoomError::Config("fused mode needs an environment feature".into()))?;
            match cfg.order {
                FusionOrder::FuseThenPool => {
                    let mut ind = vec![0.0; b * n * b];
                    for r in 0..b * n {
                        ind[r * b + r / n] = 1.0;
                    }
                    let ind = tape.constant(b * n, b, ind);
                    let hb = tape.matmul(ind, h)?;
                    let cat = tape.hcat(&[g, hb])?;
                    let fused = model.linear(tape, cat, "room.fuse")?;
                    tape.max_pool_rows(fused, n)?
                }
                FusionOrder::PoolThenFuse => {
                    let p = tape.max_pool_rows(g, n)?;
                    let cat = tape.hcat(&[p, h])?;
                    model.linear(tape, cat, "room.fuse")?
                }
            }
        }
    };
    let z = model.linear(tape, pooled, "room.cls1")?;
    let z = tape.relu(z);
    Ok(model.linear(tape, z, "room.cls2")?)
}

fn inference_samples(ds: &Dataset, batch: &[&RoomInstance], cfg: &RoomConfig) -> Result<Vec<MemorySample>, ModelError> {
    batch.iter().map(|i| prepare(ds, i.episode, i.step, cfg.memory_k, cfg.pose_mode, None).map(|p| p.sample)).collect()
}

const EVAL_CHUNK: usize = 64;

/// Environment features `h` for each instance, inference sampling.
pub fn instance_env_features(model: &EnvMemoryModel, ds: &Dataset, instances: &[RoomInstance], cfg: &RoomConfig) -> Result<Vec<Vec<f64>>, RoomError> {
    let d = model.config.d;
    let chunks = instances
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let refs: Vec<&RoomInstance> = chunk.iter().collect();
            let samples = inference_samples(ds, &refs, cfg)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &samples)?;
            Ok(tape.value(out.h).chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, RoomError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct RoomOutcome {
    pub classifier: RoomClassifier,
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
}

/// Trains the room head (and, unless frozen, the memory model) on
/// `instances` of `train`.
pub fn train_room(
    train: &Dataset,
    instances: &[RoomInstance],
    cfg: &RoomConfig,
    mut model: EnvMemoryModel,
    workers: usize,
) -> Result<RoomOutcome, RoomError> {
    cfg.validate()?;
    if instances.is_empty() || train.episodes.is_empty() {
        return Err(RoomError::EmptyDataset);
    }
    add_room_params(&mut model, cfg, train.feature_dim())?;
    model.params.set_trainable_prefix("", cfg.finetunes());
    model.params.set_trainable_prefix("aux.", false);
    model.params.set_trainable_prefix("room.", true);
    with_workers(workers, || room_loop(train, instances, cfg, model))?
}

fn room_loop(train: &Dataset, instances: &[RoomInstance], cfg: &RoomConfig, mut model: EnvMemoryModel) -> Result<RoomOutcome, RoomError> {
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() }, &model.params);
    let d = model.config.d;
    // a frozen backbone gives the same h every epoch
    let fixed_h = match cfg.mode {
        RoomMode::Fused if cfg.freeze => Some(instance_env_features(&model, train, instances, cfg)?),
        _ => None,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x52, epoch as u64])));
        let (mut total, mut batches) = (0.0, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&RoomInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let mut tape = Tape::new();
            let h = match (cfg.mode, &fixed_h) {
                (RoomMode::Baseline, _) => None,
                (RoomMode::Fused, Some(all)) => {
                    Some(tape.constant(chunk.len(), d, chunk.iter().flat_map(|&i| all[i].iter().copied()).collect()))
                }
                (RoomMode::Fused, None) => {
                    let samples = chunk
                        .par_iter()
                        .enumerate()
                        .map(|(j, &i)| {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x53, epoch as u64, bi as u64, j as u64]));
                            let inst = &instances[i];
                            prepare(train, inst.episode, inst.step, cfg.memory_k, cfg.pose_mode, Some((&cfg.noise, &mut rng))).map(|p| p.sample)
                        })
                        .collect::<Result<Vec<_>, ModelError>>()?;
                    Some(model.forward(&mut tape, &samples)?.h)
                }
            };
            let logits = room_logits(&model, cfg, &mut tape, train, &batch, h)?;
            let targets: Vec<usize> = batch.iter().map(|i| i.room).collect();
            let loss = tape.cross_entropy(logits, &targets)?;
            total += apply_step(&mut tape, loss, &mut model.params, &mut adam, None)?;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(RoomOutcome { classifier: RoomClassifier { model, config: *cfg }, curve })
}

impl RoomClassifier {
    /// Class probabilities per instance.
    pub fn predict_probs(&self, ds: &Dataset, instances: &[RoomInstance]) -> Result<Vec<Vec<f64>>, RoomError> {
        let cfg = &self.config;
        let chunks = instances
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let batch: Vec<&RoomInstance> = chunk.iter().collect();
                let mut tape = Tape::new();
                let h = match cfg.mode {
                    RoomMode::Fused => {
                        let samples = inference_samples(ds, &batch, cfg)?;
                        Some(self.model.forward(&mut tape, &samples)?.h)
                    }
                    RoomMode::Baseline => None,
                };
                let logits = room_logits(&self.model, cfg, &mut tape, ds, &batch, h)?;
                let probs = tape.softmax(logits)?;
                Ok(tape.value(probs).chunks(ROOM_CLASSES.len()).map(|c| c.to_vec()).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, RoomError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn predict(&self, ds: &Dataset, instances: &[RoomInstance]) -> Result<Vec<usize>, RoomError> {
        Ok(self.predict_probs(ds, instances)?.iter().map(|p| argmax(p)).collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntropySplit {
    /// Instance indices, ascending.
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Easy,
    Hard,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown split `{other}` (expected all, easy or hard)")),
        }
    }
}

/// The `round(hard_fraction·n)` highest-entropy predictions are hard; equal
/// entropies keep input order.
pub fn entropy_split_probs(probs: &[Vec<f64>], hard_fraction: f64) -> EntropySplit {
    let n = probs.len();
    let n_hard = ((hard_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let ent: Vec<f64> = probs.iter().map(|p| entropy(p)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ent[b].total_cmp(&ent[a]));
    let mut hard = order[..n_hard].to_vec();
    let mut easy = order[n_hard..].to_vec();
    hard.sort_unstable();
    easy.sort_unstable();
    EntropySplit { easy, hard }
}

/// Splits `instances` by the entropy of `baseline`'s predictions.
pub fn entropy_split(baseline: &RoomClassifier, ds: &Dataset, instances: &[RoomInstance], hard_fraction: f64) -> Result<EntropySplit, RoomError> {
    Ok(entropy_split_probs(&baseline.predict_probs(ds, instances)?, hard_fraction))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomAccuracy {
    pub all: Option<f64>,
    pub easy: Option<f64>,
    pub hard: Option<f64>,
    pub n_all: usize,
    pub n_easy: usize,
    pub n_hard: usize,
}

impl RoomAccuracy {
    pub fn get(&self, split: Split) -> Option<f64> {
        match split {
            Split::All => self.all,
            Split::Easy => self.easy,
            Split::Hard => self.hard,
        }
    }
}

fn accuracy(pred: &[usize], labels: &[usize], idx: impl Iterator<Item = usize>) -> (Option<f64>, usize) {
    let (mut hit, mut n) = (0usize, 0usize);
    for i in idx {
        n += 1;
        hit += usize::from(pred[i] == labels[i]);
    }
    ((n > 0).then(|| hit as f64 / n as f64), n)
}

/// Top-1 accuracy on every split; empty splits have no value.
pub fn split_accuracy(pred: &[usize], labels: &[usize], split: &EntropySplit) -> Result<RoomAccuracy, RoomError> {
    if pred.len() != labels.len() {
        return Err(RoomError::Shape { what: "predictions", expected: labels.len(), got: pred.len() });
    }
    if let Some(&i) = split.easy.iter().chain(&split.hard).find(|&&i| i >= labels.len()) {
        return Err(RoomError::Shape { what: "split index", expected: labels.len(), got: i });
    }
    let (all, n_all) = accuracy(pred, labels, 0..labels.len());
    let (easy, n_easy) = accuracy(pred, labels, split.easy.iter().copied());
    let (hard, n_hard) = accuracy(pred, labels, split.hard.iter().copied());
    Ok(RoomAccuracy { all, easy, hard, n_all, n_easy, n_hard })
}

pub fn eval_room(classifier: &RoomClassifier, ds: &Dataset, instances: &[RoomInstance], split: &EntropySplit) -> Result<RoomAccuracy, RoomError> {
    let pred = classifier.predict(ds, instances)?;
    let labels: Vec<usize> = instances.iter().map(|i| i.room).collect();
    split_accuracy(&pred, &labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};
    use crate::envmemory::ModelConfig;

    fn small_model(ds: &Dataset, seed: u64) -> EnvMemoryModel {
        let mc = ModelConfig { d: 16, heads: 2, layers_enc: 1, layers_dec: 1, pose_embed: 8, feature_dim: ds.feature_dim(), n_classes: ds.n_classes(), ..ModelConfig::default() };
        EnvMemoryModel::new(mc, seed).unwrap()
    }

    fn small_ds() -> Dataset {
        build_dataset(&DatasetConfig { steps: 40, ..DatasetConfig::desk(300, 2, 2, 5) }, 1).unwrap()
    }

    #[test]
    fn window_repeats_boundary_frames() {
        assert_eq!(window_steps(0, 10, 8), vec![0, 0, 0, 0, 0, 1, 2, 3]);
        assert_eq!(window_steps(5, 10, 8), vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(window_steps(9, 10, 8), vec![5, 6, 7, 8, 9, 9, 9, 9]);
        assert_eq!(window_steps(0, 1, 8), vec![0; 8]);
    }

    #[test]
    fn identity_fusion_returns_clip_feature() {
        let (g_dim, h_dim) = (3, 2);
        let mut w = vec![0.0; (g_dim + h_dim) * g_dim];
        for i in 0..g_dim {
            w[i * g_dim + i] = 1.0;
        }
        let head = FusionHead::new(w, vec![0.0; g_dim], g_dim, h_dim).unwrap();
        let g = [0.3, -1.2, 4.5];
        assert_eq!(fuse(&head, &g, &[7.0, -8.0]).unwrap(), g.to_vec());
        assert!(matches!(fuse(&head, &g, &[1.0]), Err(RoomError::Shape { .. })));
        assert!(matches!(fuse(&head, &[1.0], &[1.0, 2.0]), Err(RoomError::Shape { .. })));
    }

    #[test]
    fn fusion_output_has_configured_width_and_matches_tape() {
        let ds = small_ds();
        let mut model = small_model(&ds, 1);
        let cfg = RoomConfig { fused_dim: 5, ..RoomConfig::default() };
        add_room_params(&mut model, &cfg, 240).unwrap();
        let head = FusionHead::from_model(&model, 240).unwrap();
        assert_eq!(head.out_dim(), 5);
        let g: Vec<f64> = (0..240).map(|i| (i as f64 * 0.37).sin()).collect();
        let h: Vec<f64> = (0..16).map(|i| (i as f64 * 0.91).cos()).collect();
        let pure = head.fuse(&g, &h).unwrap();
        let mut tape = Tape::new();
        let gv = tape.constant(1, 240, g.clone());
        let hv = tape.constant(1, 16, h.clone());
        let cat = tape.hcat(&[gv, hv]).unwrap();
        let y = model.linear(&mut tape, cat, "room.fuse").unwrap();
        for (a, b) in pure.iter().zip(tape.value(y)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn inert_environment_path_matches_baseline_bitwise() {
        let ds = small_ds();
        let inst = room_instances(&ds, 5, 8, 3);
        assert!(!inst.is_empty());
        let g_dim = ds.feature_dim();
        let base_cfg = RoomConfig { mode: RoomMode::Baseline, ..RoomConfig::default() };
        let mut base = small_model(&ds, 2);
        add_room_params(&mut base, &base_cfg, g_dim).unwrap();

        let fused_cfg = RoomConfig { fused_dim: g_dim, ..RoomConfig::default() };
        let mut fused = small_model(&ds, 2);
        add_room_params(&mut fused, &fused_cfg, g_dim).unwrap();
        let d = fused.config.d;
        let id = fused.params.id("room.fuse.w").unwrap();
        let w = fused.params.get_mut(id).values_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..g_dim {
            w[i * g_dim + i] = 1.0;
        }
        for name in ["room.cls1.w", "room.cls1.b", "room.cls2.w", "room.cls2.b"] {
            let src = base.params.get(base.params.id(name).unwrap()).values().to_vec();
            let id = fused.params.id(name).unwrap();
            fused.params.get_mut(id).values_mut().copy_from_slice(&src);
        }
        let batch: Vec<&RoomInstance> = inst.iter().collect();
        let mut t1 = Tape::new();
        let l1 = room_logits(&base, &base_cfg, &mut t1, &ds, &batch, None).unwrap();
        let mut t2 = Tape::new();
        let h = t2.constant(batch.len(), d, vec![0.0; batch.len() * d]);
        let l2 = room_logits(&fused, &fused_cfg, &mut t2, &ds, &batch, Some(h)).unwrap();
        assert_eq!(t1.value(l1), t2.value(l2));
    }

    #[test]
    fn baseline_ignores_backbone() {
        let ds = small_ds();
        let inst = room_instances(&ds, 4, 8, 1);
        let cfg = RoomConfig { mode: RoomMode::Baseline, epochs: 1, lr: 1e-3, ..RoomConfig::default() };
        let a = train_room(&ds, &inst, &cfg, small_model(&ds, 1), 1).unwrap();
        let b = train_room(&ds, &inst, &cfg, small_model(&ds, 9), 1).unwrap();
        assert_eq!(a.classifier.predict_probs(&ds, &inst).unwrap(), b.classifier.predict_probs(&ds, &inst).unwrap());
    }

    #[test]
    fn overfits_fifty_instances() {
        let ds = build_dataset(&DatasetConfig { steps: 64, ..DatasetConfig::desk(310, 4, 2, 5) }, 1).unwrap();
        let inst: Vec<RoomInstance> = room_instances(&ds, 7, 8, 2).into_iter().take(50).collect();
        assert_eq!(inst.len(), 50);
        let cfg = RoomConfig { epochs: 60, lr: 3e-3, batch_size: 10, ..RoomConfig::default() };
        let out = train_room(&ds, &inst, &cfg, small_model(&ds, 4), 1).unwrap();
        let pred = out.classifier.predict(&ds, &inst).unwrap();
        let acc = pred.iter().zip(&inst).filter(|(p, i)| **p == i.room).count() as f64 / 50.0;
        assert!(acc > 0.95, "train accuracy {acc}");
        assert!(out.curve.last().unwrap() < &out.curve[0]);
    }

    #[test]
    fn training_is_deterministic_across_workers() {
        let ds = small_ds();
        let inst = room_instances(&ds, 4, 8, 1);
        let cfg = RoomConfig { epochs: 2, lr: 1e-3, ..RoomConfig::default() };
        let a = train_room(&ds, &inst, &cfg, small_model(&ds, 1), 1).unwrap();
        let b = train_room(&ds, &inst, &cfg, small_model(&ds, 1), 4).unwrap();
        for ((_, _, x), (_, _, y)) in a.classifier.model.params.iter().zip(b.classifier.model.params.iter()) {
            assert_eq!(x.values(), y.values());
        }
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn frozen_training_leaves_backbone_untouched() {
        let ds = small_ds();
        let inst = room_instances(&ds, 4, 8, 1);
        let model = small_model(&ds, 1);
        let cfg = RoomConfig { freeze: true, epochs: 1, lr: 1e-2, ..RoomConfig::default() };
        let out = train_room(&ds, &inst, &cfg, model.clone(), 1).unwrap();
        for (_, name, t) in model.params.iter() {
            let after = out.classifier.model.params.get(out.classifier.model.params.id(name).unwrap());
            assert_eq!(t.values(), after.values(), "{name}");
        }
        let fused = out.classifier.model.params.get(out.classifier.model.params.id("room.fuse.w").unwrap());
        let mut fresh = model.clone();
        add_room_params(&mut fresh, &cfg, ds.feature_dim()).unwrap();
        assert_ne!(fused.values(), fresh.params.get(fresh.params.id("room.fuse.w").unwrap()).values());
    }

    #[test]
    fn empty_instances_are_rejected() {
        let ds = small_ds();
        let r = train_room(&ds, &[], &RoomConfig::default(), small_model(&ds, 0), 1);
        assert!(matches!(r, Err(RoomError::EmptyDataset)));
    }

    #[test]
    fn entropy_split_fixtures() {
        let uniform = vec![1.0 / 6.0; 6];
        assert!((entropy(&uniform) - 6f64.ln()).abs() < 1e-12);
        assert!((entropy(&uniform) - 1.7918).abs() < 1e-4);
        let sharp = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mid = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let probs = vec![sharp.clone(), uniform.clone(), mid.clone(), sharp.clone(), mid.clone(), sharp.clone(), sharp, mid, uniform.clone(), uniform];
        let s = entropy_split_probs(&probs, 0.3);
        assert_eq!(s.hard, vec![1, 8, 9]);
        assert_eq!(s.easy, vec![0, 2, 3, 4, 5, 6, 7]);
        let s = entropy_split_probs(&probs, 0.0);
        assert!(s.hard.is_empty());
        assert_eq!(s.easy.len(), 10);
        // ties broken by input order
        let s = entropy_split_probs(&probs[..5], 0.4);
        assert_eq!(s.hard, vec![1, 2]);
        assert_eq!(entropy_split_probs(&probs[..7], 0.3).hard.len(), 2);
    }

    #[test]
    fn split_accuracy_accounting() {
        let labels = vec![0, 1, 2, 2, 2, 3, 2];
        let split = EntropySplit { easy: vec![0, 2, 4, 6], hard: vec![1, 3, 5] };
        let perfect = split_accuracy(&labels, &labels, &split).unwrap();
        assert_eq!((perfect.all, perfect.easy, perfect.hard), (Some(1.0), Some(1.0), Some(1.0)));
        let majority = vec![2; labels.len()];
        let acc = split_accuracy(&majority, &labels, &split).unwrap();
        let prevalence = labels.iter().filter(|&&l| l == 2).count() as f64 / labels.len() as f64;
        assert_eq!(acc.all, Some(prevalence));
        let weighted = (acc.easy.unwrap() * acc.n_easy as f64 + acc.hard.unwrap() * acc.n_hard as f64) / acc.n_all as f64;
        assert!((weighted - acc.all.unwrap()).abs() < 1e-12);
        let empty = split_accuracy(&majority, &labels, &EntropySplit { easy: (0..7).collect(), hard: vec![] }).unwrap();
        assert_eq!(empty.hard, None);
        assert!(split_accuracy(&majority[..3], &labels, &split).is_err());
    }
}
