//! Episodic memory retrieval: templated moment queries generated from
//! simulator state, a window-proposal localizer and Rank-n@m metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Pose;
use crate::dataset::{derive_seed, with_workers, Dataset, DatasetError};
use crate::envmemory::{EnvMemoryModel, MemorySample, ModelError, NoiseParams, PoseMode};
use crate::numgrad::{AdamConfig, AdamState, NumError, Tape, Tensor, Var};
use crate::observation::{cast_rays, is_visited, seen_fraction_from_hits, ObservationParams, VisitTarget, SEEN_THRESHOLD};
use crate::pretrain::{apply_step, prepare};
use crate::worldgen::{room_at, EnvironmentSpec};

/// Largest gap in steps between the two parts of a sequence query.
pub const THEN_GAP: usize = 16;
/// Rank-1 IoU thresholds reported by default.
pub const IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Error)]
pub enum EpmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("no queries to train on")]
    EmptyDataset,
    #[error("slot {slot:?} out of range for {n_objects} objects and {n_rooms} rooms")]
    Slot { slot: Slot, n_objects: usize, n_rooms: usize },
    #[error("walkthrough {0} is not in the dataset")]
    Walkthrough(usize),
    #[error("invalid localizer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    SeeO,
    SeeOInR,
    SeeOThenO,
    VisitRThenR,
    VisitOr,
    VisitOThenO,
    VisitOInR,
}

impl Template {
    pub const ALL: [Template; 7] = [
        Template::SeeO,
        Template::SeeOInR,
        Template::SeeOThenO,
        Template::VisitRThenR,
        Template::VisitOr,
        Template::VisitOThenO,
        Template::VisitOInR,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::SeeO => "see_o",
            Template::SeeOInR => "see_o_in_r",
            Template::SeeOThenO => "see_o_then_o",
            Template::VisitRThenR => "visit_r_then_r",
            Template::VisitOr => "visit_or",
            Template::VisitOThenO => "visit_o_then_o",
            Template::VisitOInR => "visit_o_in_r",
        }
    }

    /// "see" or "visit".
    pub fn group(self) -> &'static str {
        match self {
            Template::SeeO | Template::SeeOInR | Template::SeeOThenO => "see",
            _ => "visit",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Template::SeeO | Template::VisitOr => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// Object class index.
    Object(usize),
    /// Room label.
    Room(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualifier {
    First,
    Last,
    None,
}

impl Qualifier {
    fn index(self) -> usize {
        match self {
            Qualifier::First => 0,
            Qualifier::Last => 1,
            Qualifier::None => 2,
        }
    }
}

/// One templated query with its ground-truth inclusive step interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentQuery {
    pub walkthrough_id: usize,
    pub template: Template,
    pub slot1: Option<Slot>,
    pub slot2: Option<Slot>,
    pub qualifier: Qualifier,
    pub t_s: usize,
    pub t_e: usize,
}

/// Per-step ground-truth predicates, indexed `[class][t]`,
/// `[class][room][t]` or `[room][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPredicates {
    pub seen_object: Vec<Vec<bool>>,
    pub seen_object_in_room: Vec<Vec<Vec<bool>>>,
    pub visit_object: Vec<Vec<bool>>,
    pub visit_object_in_room: Vec<Vec<Vec<bool>>>,
    pub visit_room: Vec<Vec<bool>>,
}

pub fn step_predicates(env: &EnvironmentSpec, poses: &[Pose], obs: &ObservationParams) -> StepPredicates {
    let (n_o, n_r, t) = (env.n_object_classes(), env.n_room_classes(), poses.len());
    let object_room: Vec<Option<usize>> = env.objects.iter().map(|o| room_at(env, o.position).ok().flatten()).collect();
    let mut p = StepPredicates {
        seen_object: vec![vec![false; t]; n_o],
        seen_object_in_room: vec![vec![vec![false; t]; n_r]; n_o],
        visit_object: vec![vec![false; t]; n_o],
        visit_object_in_room: vec![vec![vec![false; t]; n_r]; n_o],
        visit_room: vec![vec![false; t]; n_r],
    };
    for (s, pose) in poses.iter().enumerate() {
        let hits = cast_rays(env, pose, obs);
        for (i, o) in env.objects.iter().enumerate() {
            let c = o.class_id;
            if seen_fraction_from_hits(&hits, i) >= SEEN_THRESHOLD {
                p.seen_object[c][s] = true;
                if let Some(r) = object_room[i] {
                    p.seen_object_in_room[c][r][s] = true;
                }
            }
            if is_visited(env, pose.position(), VisitTarget::Object(i)) {
                p.visit_object[c][s] = true;
                if let Some(r) = object_room[i] {
                    p.visit_object_in_room[c][r][s] = true;
                }
            }
        }
        if let Some(r) = room_at(env, pose.position()).ok().flatten() {
            p.visit_room[r][s] = true;
        }
    }
    p
}

/// Maximal runs of `true` as inclusive `(start, end)` pairs.
pub fn true_runs(bits: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &b) in bits.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, bits.len() - 1));
    }
    out
}

/// "a then b": a run of `a` followed by a run of `b` that starts no later
/// than `gap` steps after it ends, overlap allowed. Moment is end of the
/// `a` run to end of the `b` run.
pub fn then_moments(a: &[bool], b: &[bool], gap: usize) -> Vec<(usize, usize)> {
    let (ra, rb) = (true_runs(a), true_runs(b));
    let mut out = Vec::new();
    for &(a0, a1) in &ra {
        for &(b0, b1) in &rb {
            if a0 <= b0 && a1 < b1 && b0 <= a1 + gap {
                out.push((a1, b1));
            }
        }
    }
    out
}

/// Room transitions: leaving room `a` at the end of one of its runs and
/// entering room `b` as the next labeled room within `gap` steps. Moment is
/// last step in `a` to first step in `b`.
pub fn transition_moments(a: &[bool], b: &[bool], any_room: &[bool], gap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &(_, a1) in &true_runs(a) {
        let next = (a1 + 1..any_room.len()).find(|&s| any_room[s]);
        if let Some(n) = next {
            if b[n] && n - a1 <= gap {
                out.push((a1, n));
            }
        }
    }
    out
}

fn emit(out: &mut Vec<MomentQuery>, id: usize, template: Template, s1: Slot, s2: Option<Slot>, mut moments: Vec<(usize, usize)>) {
    moments.sort_unstable();
    moments.dedup();
    let q = |qualifier, (t_s, t_e): (usize, usize)| MomentQuery { walkthrough_id: id, template, slot1: Some(s1), slot2: s2, qualifier, t_s, t_e };
    match moments.len() {
        0 => {}
        1 => out.push(q(Qualifier::None, moments[0])),
        n => {
            out.push(q(Qualifier::First, moments[0]));
            out.push(q(Qualifier::Last, moments[n - 1]));
        }
    }
}

/// Every template instance whose predicate pattern occurs in the walkthrough.
/// Repeated occurrences yield a "first" and a "last" query so each answer is
/// unique.
pub fn generate_queries(env: &EnvironmentSpec, poses: &[Pose], obs: &ObservationParams, walkthrough_id: usize) -> Vec<MomentQuery> {
    let p = step_predicates(env, poses, obs);
    let (n_o, n_r) = (env.n_object_classes(), env.n_room_classes());
    let mut out = Vec::new();
    let id = walkthrough_id;
    for c in 0..n_o {
        emit(&mut out, id, Template::SeeO, Slot::Object(c), None, true_runs(&p.seen_object[c]));
        emit(&mut out, id, Template::VisitOr, Slot::Object(c), None, true_runs(&p.visit_object[c]));
        for r in 0..n_r {
            emit(&mut out, id, Template::SeeOInR, Slot::Object(c), Some(Slot::Room(r)), true_runs(&p.seen_object_in_room[c][r]));
            emit(&mut out, id, Template::VisitOInR, Slot::Object(c), Some(Slot::Room(r)), true_runs(&p.visit_object_in_room[c][r]));
        }
        for c2 in (0..n_o).filter(|&c2| c2 != c) {
            emit(&mut out, id, Template::SeeOThenO, Slot::Object(c), Some(Slot::Object(c2)), then_moments(&p.seen_object[c], &p.seen_object[c2], THEN_GAP));
            emit(&mut out, id, Template::VisitOThenO, Slot::Object(c), Some(Slot::Object(c2)), then_moments(&p.visit_object[c], &p.visit_object[c2], THEN_GAP));
        }
    }
    let any_room: Vec<bool> = (0..poses.len()).map(|s| p.visit_room.iter().any(|r| r[s])).collect();
    for r in 0..n_r {
        emit(&mut out, id, Template::VisitOr, Slot::Room(r), None, true_runs(&p.visit_room[r]));
        for r2 in (0..n_r).filter(|&r2| r2 != r) {
            let m = transition_moments(&p.visit_room[r], &p.visit_room[r2], &any_room, THEN_GAP);
            emit(&mut out, id, Template::VisitRThenR, Slot::Room(r), Some(Slot::Room(r2)), m);
        }
    }
    out
}

/// Queries for every episode; `walkthrough_id` is the episode index.
pub fn dataset_queries(ds: &Dataset) -> Vec<MomentQuery> {
    ds.episodes
        .par_iter()
        .enumerate()
        .map(|(e, ep)| generate_queries(ds.env_of(ep), ep.poses(), &ds.obs, e))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Raw encoding length: template, two slots over objects and rooms, qualifier.
pub fn raw_query_len(n_objects: usize, n_rooms: usize) -> usize {
    Template::ALL.len() + 2 * (n_objects + n_rooms) + 3
}

/// One-hot raw encoding of a query before the learned projection.
pub fn encode_query(q: &MomentQuery, n_objects: usize, n_rooms: usize) -> Result<Vec<f64>, EpmError> {
    let slots = n_objects + n_rooms;
    let mut v = vec![0.0; raw_query_len(n_objects, n_rooms)];
    v[q.template.index()] = 1.0;
    for (k, slot) in [q.slot1, q.slot2].into_iter().enumerate() {
        if let Some(s) = slot {
            let i = match s {
                Slot::Object(c) if c < n_objects => c,
                Slot::Room(r) if r < n_rooms => n_objects + r,
                _ => return Err(EpmError::Slot { slot: s, n_objects, n_rooms }),
            };
            v[Template::ALL.len() + k * slots + i] = 1.0;
        }
    }
    v[Template::ALL.len() + 2 * slots + q.qualifier.index()] = 1.0;
    Ok(v)
}

/// Inclusive step-interval IoU.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = (a.1.min(b.1) + 1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// Whether any of the first `n` ranked intervals overlaps `gt` with IoU > m.
pub fn rank_at(ranked: &[(usize, usize)], gt: (usize, usize), n: usize, m: f64) -> bool {
    ranked.iter().take(n).any(|&w| iou(w, gt) > m)
}

/// Fraction of queries for which [`rank_at`] holds.
pub fn recall_at(ranked: &[Vec<(usize, usize)>], gts: &[(usize, usize)], n: usize, m: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let hits = ranked.iter().zip(gts).filter(|(r, &g)| rank_at(r, g, n, m)).count();
    Some(hits as f64 / gts.len() as f64)
}

/// Step range `[start, end]` of each of `n_clips` clips over `len` steps.
pub fn clip_bounds(len: usize, n_clips: usize) -> Vec<(usize, usize)> {
    let n = n_clips.min(len).max(1);
    (0..n).map(|c| (c * len / n, (c + 1) * len / n - 1)).collect()
}

/// Candidate windows `(i, j)` over clips with `j - i < max_span`, ordered by
/// start then end.
pub fn candidate_windows(n_clips: usize, max_span: usize) -> Vec<(usize, usize)> {
    (0..n_clips).flat_map(|i| (i..n_clips.min(i + max_span)).map(move |j| (i, j))).collect()
}

/// Candidate indices by descending score; ties keep the candidate order,
/// so earlier starts come first.
pub fn rank_windows(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Supervision target from window IoU, linear between `lo` and `hi`.
pub fn iou_target(iou: f64, lo: f64, hi: f64) -> f64 {
    ((iou - lo) / (hi - lo)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    /// Fuse environment features into the clip features.
    pub env_feat: bool,
    pub freeze: bool,
    pub n_clips: usize,
    pub max_span: usize,
    pub fused_dim: usize,
    pub query_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Walkthroughs per optimizer step.
    pub batch_walks: usize,
    /// Queries sampled per walkthrough per epoch.
    pub queries_per_walk: usize,
    pub memory_k: usize,
    pub pose_mode: PoseMode,
    pub noise: NoiseParams,
    pub iou_lo: f64,
    pub iou_hi: f64,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            env_feat: true,
            freeze: false,
            n_clips: 32,
            max_span: 16,
            fused_dim: 128,
            query_dim: 32,
            hidden: 128,
            epochs: 60,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_walks: 8,
            queries_per_walk: 8,
            memory_k: 16,
            pose_mode: PoseMode::Relative,
            noise: NoiseParams::default(),
            iou_lo: 0.3,
            iou_hi: 0.7,
            seed: 0,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<(), EpmError> {
        let bad = |m: &str| Err(EpmError::Config(m.to_string()));
        if self.n_clips == 0 || self.max_span == 0 || self.fused_dim == 0 || self.query_dim == 0 || self.hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.batch_walks == 0 || self.queries_per_walk == 0 || self.memory_k == 0 {
            return bad("batch_walks, queries_per_walk and memory_k must be positive");
        }
        if !(self.iou_lo < self.iou_hi) {
            return bad("iou_lo must be below iou_hi");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }

    fn finetunes(&self) -> bool {
        self.env_feat && !self.freeze
    }
}

/// Why queries were left out of a localization set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// Moment spans `max_span` clips or more.
    pub too_long: usize,
    /// No candidate window reaches IoU above `iou_lo`.
    pub unreachable: usize,
}

/// Keeps queries that some candidate window can localize.
pub fn localizable_queries(ds: &Dataset, queries: &[MomentQuery], cfg: &LocalizerConfig) -> Result<(Vec<MomentQuery>, DropCounts), EpmError> {
    let mut kept = Vec::new();
    let mut drops = DropCounts::default();
    for q in queries {
        let ep = ds.episodes.get(q.walkthrough_id).ok_or(EpmError::Walkthrough(q.walkthrough_id))?;
        let clips = clip_bounds(ep.len(), cfg.n_clips);
        let clip_of = |t: usize| clips.iter().position(|&(_, e)| t <= e).unwrap_or(clips.len() - 1);
        if clip_of(q.t_e) - clip_of(q.t_s) >= cfg.max_span {
            drops.too_long += 1;
            continue;
        }
        let best = candidate_windows(clips.len(), cfg.max_span)
            .iter()
            .map(|&(i, j)| iou((clips[i].0, clips[j].1), (q.t_s, q.t_e)))
            .fold(0.0, f64::max);
        if best <= cfg.iou_lo {
            drops.unreachable += 1;
            continue;
        }
        kept.push(q.clone());
    }
    Ok((kept, drops))
}

/// Window localizer. Its parameters live under `epm.` in the memory model's
/// store.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub model: EnvMemoryModel,
    pub config: LocalizerConfig,
    pub n_objects: usize,
    pub n_rooms: usize,
}

fn lin(model: &mut EnvMemoryModel, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) {
    if model.params.id(&format!("{name}.w")).is_none() {
        model.params.add(format!("{name}.w"), Tensor::uniform_fan_in(vec![i, o], i, rng));
        model.params.add(format!("{name}.b"), Tensor::zeros(vec![o]));
    }
}

impl Localizer {
    pub fn new(mut model: EnvMemoryModel, config: LocalizerConfig, n_objects: usize, n_rooms: usize) -> Result<Self, EpmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xE9]));
        let (f, d) = (model.config.feature_dim, model.config.d);
        let g = if config.env_feat {
            lin(&mut model, "epm.fuse", f + d, config.fused_dim, &mut rng);
            config.fused_dim
        } else {
            f
        };
        lin(&mut model, "epm.q", raw_query_len(n_objects, n_rooms), config.query_dim, &mut rng);
        lin(&mut model, "epm.mlp1", g + config.query_dim, config.hidden, &mut rng);
        lin(&mut model, "epm.mlp2", config.hidden, 1, &mut rng);
        let w = model.params.get(model.params.id("epm.mlp1.w").expect("added")).shape().to_vec();
        if w != [g + config.query_dim, config.hidden] {
            return Err(EpmError::Config(format!("existing epm.mlp1 has shape {w:?}")));
        }
        Ok(Self { model, config, n_objects, n_rooms })
    }

    fn clip_dim(&self) -> usize {
        if self.config.env_feat {
            self.config.fused_dim
        } else {
            self.model.config.feature_dim
        }
    }

    /// Environment-memory samples at each clip's center step.
    fn clip_samples(&self, ds: &Dataset, episode: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<MemorySample>, ModelError> {
        let clips = clip_bounds(ds.episodes[episode].len(), self.config.n_clips);
        let c = &self.config;
        match rng {
            Some(rng) => clips
                .iter()
                .map(|&(s, e)| prepare(ds, episode, (s + e) / 2, c.memory_k, c.pose_mode, Some((&c.noise, &mut *rng))).map(|p| p.sample))
                .collect(),
            None => clips.iter().map(|&(s, e)| prepare(ds, episode, (s + e) / 2, c.memory_k, c.pose_mode, None).map(|p| p.sample)).collect(),
        }
    }

    /// Environment features `n_clips×d` at the clip centers, inference sampling.
    pub fn clip_env_features(&self, ds: &Dataset, episode: usize) -> Result<Vec<f64>, EpmError> {
        let samples = self.clip_samples(ds, episode, None)?;
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &samples)?;
        Ok(tape.value(out.h).to_vec())
    }

    /// Window logits `(|queries|·W)×1` for one walkthrough, query-major.
    /// `h` is the clip environment features, required when `env_feat` is on.
    pub fn video_logits(&self, tape: &mut Tape, ds: &Dataset, episode: usize, h: Option<Var>, queries: &[&MomentQuery]) -> Result<Var, EpmError> {
        let ep = ds.episodes.get(episode).ok_or(EpmError::Walkthrough(episode))?;
        let f = ds.feature_dim();
        let clips = clip_bounds(ep.len(), self.config.n_clips);
        let means: Vec<f64> = clips
            .iter()
            .flat_map(|&(s, e)| {
                let n = (e - s + 1) as f64;
                (0..f).map(move |k| (s..=e).map(|t| ep.features[t][k] as f64).sum::<f64>() / n)
            })
            .collect();
        let g = tape.constant(clips.len(), f, means);
        let g = if self.config.env_feat {
            let h = h.ok_or_else(|| EpmError::Config("env_feat needs clip environment features".into()))?;
            let cat = tape.hcat(&[g, h])?;
            self.model.linear(tape, cat, "epm.fuse")?
        } else {
            g
        };
        let windows = candidate_windows(clips.len(), self.config.max_span);
        let pooled = tape.max_rows_ranges(g, &windows)?;
        let gd = self.clip_dim();
        let w1 = self.model.param(tape, "epm.mlp1.w")?;
        let b1 = self.model.param(tape, "epm.mlp1.b")?;
        let w1a = tape.slice_rows(w1, 0, gd)?;
        let w1b = tape.slice_rows(w1, gd, self.config.query_dim)?;
        let a = tape.matmul(pooled, w1a)?;
        let raw = queries
            .iter()
            .map(|q| encode_query(q, self.n_objects, self.n_rooms))
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let raw = tape.constant(queries.len(), raw_query_len(self.n_objects, self.n_rooms), raw);
        let qe = self.model.linear(tape, raw, "epm.q")?;
        let qb = tape.matmul(qe, w1b)?;
        let qb = tape.add_row(qb, b1)?;
        let mut parts = Vec::with_capacity(queries.len());
        for k in 0..queries.len() {
            let row = tape.slice_rows(qb, k, 1)?;
            let z = tape.add_row(a, row)?;
            let z = tape.relu(z);
            parts.push(self.model.linear(tape, z, "epm.mlp2")?);
        }
        Ok(tape.vcat(&parts)?)
    }

    /// Candidate windows as step intervals, ranked by score, for each query
    /// of one walkthrough.
    pub fn localize(&self, ds: &Dataset, episode: usize, queries: &[&MomentQuery]) -> Result<Vec<Vec<RankedWindow>>, EpmError> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let ep = ds.episodes.get(episode).ok_or(EpmError::Walkthrough(episode))?;
        let mut tape = Tape::new();
        let h = if self.config.env_feat {
            let samples = self.clip_samples(ds, episode, None)?;
            Some(self.model.forward(&mut tape, &samples)?.h)
        } else {
            None
        };
        let logits = self.video_logits(&mut tape, ds, episode, h, queries)?;
        let scores = tape.sigmoid(logits);
        let clips = clip_bounds(ep.len(), self.config.n_clips);
        let windows = candidate_windows(clips.len(), self.config.max_span);
        Ok(tape
            .value(scores)
            .chunks(windows.len())
            .map(|s| {
                rank_windows(s)
                    .into_iter()
                    .map(|w| {
                        let (i, j) = windows[w];
                        RankedWindow { clips: (i, j), steps: (clips[i].0, clips[j].1), score: s[w] }
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedWindow {
    pub clips: (usize, usize),
    pub steps: (usize, usize),
    pub score: f64,
}

fn by_walkthrough(queries: &[MomentQuery]) -> BTreeMap<usize, Vec<&MomentQuery>> {
    let mut m: BTreeMap<usize, Vec<&MomentQuery>> = BTreeMap::new();
    for q in queries {
        m.entry(q.walkthrough_id).or_default().push(q);
    }
    m
}

#[derive(Debug, Clone)]
pub struct LocalizerOutcome {
    pub localizer: Localizer,
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
}

/// Trains a localizer on `queries` (already filtered to localizable ones).
pub fn train_localizer(
    train: &Dataset,
    queries: &[MomentQuery],
    cfg: &LocalizerConfig,
    model: EnvMemoryModel,
    workers: usize,
) -> Result<LocalizerOutcome, EpmError> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(EpmError::EmptyDataset);
    }
    let (n_o, n_r) = train.envs.first().map(|e| (e.n_object_classes(), e.n_room_classes())).ok_or(EpmError::EmptyDataset)?;
    let mut loc = Localizer::new(model, *cfg, n_o, n_r)?;
    let p = &mut loc.model.params;
    p.set_trainable_prefix("", cfg.finetunes());
    p.set_trainable_prefix("aux.", false);
    p.set_trainable_prefix("room.", false);
    p.set_trainable_prefix("epm.", true);
    with_workers(workers, || epm_loop(train, queries, loc))?
}

fn epm_loop(train: &Dataset, queries: &[MomentQuery], mut loc: Localizer) -> Result<LocalizerOutcome, EpmError> {
    let cfg = loc.config;
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() }, &loc.model.params);
    let groups = by_walkthrough(queries);
    let walks: Vec<usize> = groups.keys().copied().collect();
    let d = loc.model.config.d;
    // frozen memory model: clip features are the same every epoch
    let fixed_h: Option<BTreeMap<usize, Vec<f64>>> = if cfg.env_feat && cfg.freeze {
        Some(walks.par_iter().map(|&w| Ok((w, loc.clip_env_features(train, w)?))).collect::<Result<_, EpmError>>()?)
    } else {
        None
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = walks.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xE1, epoch as u64])));
        let (mut total, mut batches) = (0.0, 0);
        for (bi, chunk) in order.chunks(cfg.batch_walks).enumerate() {
            let mut tape = Tape::new();
            let mut logits = Vec::new();
            let mut targets = Vec::new();
            for (wi, &w) in chunk.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xE2, epoch as u64, bi as u64, wi as u64]));
                let picked: Vec<&MomentQuery> = groups[&w].choose_multiple(&mut rng, cfg.queries_per_walk).copied().collect();
                let n_clips = clip_bounds(train.episodes[w].len(), cfg.n_clips).len();
                let h = match &fixed_h {
                    Some(all) => Some(tape.constant(n_clips, d, all[&w].clone())),
                    None if cfg.env_feat => {
                        let samples = loc.clip_samples(train, w, Some(&mut rng))?;
                        Some(loc.model.forward(&mut tape, &samples)?.h)
                    }
                    None => None,
                };
                logits.push(loc.video_logits(&mut tape, train, w, h, &picked)?);
                targets.extend(window_targets(train.episodes[w].len(), &picked, &cfg));
            }
            let all = tape.vcat(&logits)?;
            let loss = tape.bce_with_logits(all, &targets)?;
            total += apply_step(&mut tape, loss, &mut loc.model.params, &mut adam, None)?;
            batches += 1;
        }
        curve.push(total / batches as f64);
    }
    Ok(LocalizerOutcome { localizer: loc, curve })
}

/// IoU-scaled targets for every candidate window of every query, query-major.
pub fn window_targets(len: usize, queries: &[&MomentQuery], cfg: &LocalizerConfig) -> Vec<f64> {
    let clips = clip_bounds(len, cfg.n_clips);
    let windows = candidate_windows(clips.len(), cfg.max_span);
    let (clips, windows) = (&clips, &windows);
    queries
        .iter()
        .flat_map(|q| windows.iter().map(move |&(i, j)| iou_target(iou((clips[i].0, clips[j].1), (q.t_s, q.t_e)), cfg.iou_lo, cfg.iou_hi)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpmReport {
    pub thresholds: Vec<f64>,
    pub n_queries: usize,
    /// Rank-1 recall per threshold.
    pub all: Vec<Option<f64>>,
    pub see: Vec<Option<f64>>,
    pub visit: Vec<Option<f64>>,
    pub per_template: BTreeMap<String, Vec<Option<f64>>>,
    pub counts: BTreeMap<String, usize>,
}

impl EpmReport {
    /// Rank-1 recall of `group` ("all", "see", "visit" or a template name)
    /// at `threshold`.
    pub fn r1(&self, group: &str, threshold: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|&t| t == threshold)?;
        match group {
            "all" => self.all[i],
            "see" => self.see[i],
            "visit" => self.visit[i],
            t => self.per_template.get(t)?[i],
        }
    }
}

/// Rank-1 recall from ranked step intervals, overall, by group and by template.
pub fn summarize(queries: &[MomentQuery], ranked: &[Vec<(usize, usize)>], thresholds: &[f64]) -> EpmReport {
    let subset = |keep: &dyn Fn(&MomentQuery) -> bool| {
        let idx: Vec<usize> = (0..queries.len()).filter(|&i| keep(&queries[i])).collect();
        let r: Vec<Vec<(usize, usize)>> = idx.iter().map(|&i| ranked[i].clone()).collect();
        let g: Vec<(usize, usize)> = idx.iter().map(|&i| (queries[i].t_s, queries[i].t_e)).collect();
        (thresholds.iter().map(|&m| recall_at(&r, &g, 1, m)).collect::<Vec<_>>(), idx.len())
    };
    let mut per_template = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for t in Template::ALL {
        let (r, n) = subset(&|q| q.template == t);
        per_template.insert(t.name().to_string(), r);
        counts.insert(t.name().to_string(), n);
    }
    EpmReport {
        thresholds: thresholds.to_vec(),
        n_queries: queries.len(),
        all: subset(&|_| true).0,
        see: subset(&|q| q.template.group() == "see").0,
        visit: subset(&|q| q.template.group() == "visit").0,
        per_template,
        counts,
    }
}

pub fn eval_epm(loc: &Localizer, ds: &Dataset, queries: &[MomentQuery], thresholds: &[f64]) -> Result<EpmReport, EpmError> {
    let groups = by_walkthrough(queries);
    let per_walk = groups
        .par_iter()
        .map(|(&w, qs)| Ok(qs.iter().map(|q| (*q).clone()).zip(loc.localize(ds, w, qs)?).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, EpmError>>()?;
    let (qs, ranked): (Vec<MomentQuery>, Vec<Vec<(usize, usize)>>) =
        per_walk.into_iter().flatten().map(|(q, r)| (q, r.into_iter().map(|w| w.steps).collect())).unzip();
    Ok(summarize(&qs, &ranked, thresholds))
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

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou((3, 7), (3, 7)), 1.0);
        assert_eq!(iou((0, 9), (5, 14)), 1.0 / 3.0);
        assert_eq!(iou((0, 4), (5, 9)), 0.0);
        assert_eq!(iou((2, 2), (0, 3)), 0.25);
        assert_eq!(iou((5, 14), (0, 9)), iou((0, 9), (5, 14)));
    }

    #[test]
    fn rank_at_fixtures() {
        let gt = (10, 19);
        assert!(IOU_THRESHOLDS.iter().all(|&m| rank_at(&[gt], gt, 1, m)));
        // three queries: top-1 IoUs 1.0, 1/3 and 0
        let ranked = vec![vec![(0, 9), (20, 29)], vec![(5, 14), (0, 9)], vec![(30, 39), (0, 9)]];
        let gts = vec![(0, 9), (0, 9), (0, 9)];
        assert_eq!(recall_at(&ranked, &gts, 1, 0.3), Some(2.0 / 3.0));
        assert_eq!(recall_at(&ranked, &gts, 1, 0.5), Some(1.0 / 3.0));
        assert_eq!(recall_at(&ranked, &gts, 2, 0.5), Some(1.0));
        assert_eq!(recall_at(&[], &[], 1, 0.3), None);
    }

    #[test]
    fn targets_scale_linearly() {
        assert_eq!(iou_target(1.0, 0.3, 0.7), 1.0);
        assert_eq!(iou_target(0.0, 0.3, 0.7), 0.0);
        assert!((iou_target(0.5, 0.3, 0.7) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn runs_and_sequences() {
        let a = [false, true, true, false, true, false, false];
        assert_eq!(true_runs(&a), vec![(1, 2), (4, 4)]);
        assert_eq!(true_runs(&[true, true]), vec![(0, 1)]);
        assert!(true_runs(&[]).is_empty());
        let b = [false, false, true, true, false, false, true];
        // a(1,2) then b(2,3) overlaps; a(4,4) then b(6,6) after a gap of 2
        assert_eq!(then_moments(&a, &b, 16), vec![(2, 3), (2, 6), (4, 6)]);
        assert_eq!(then_moments(&a, &b, 1), vec![(2, 3)]);
        let any = [true, true, true, false, true, true, true];
        let r1 = [true, true, true, false, false, false, false];
        let r2 = [false, false, false, false, true, true, true];
        assert_eq!(transition_moments(&r1, &r2, &any, 16), vec![(2, 4)]);
        assert!(transition_moments(&r1, &r2, &any, 1).is_empty());
    }

    #[test]
    fn query_encoding() {
        let q = MomentQuery { walkthrough_id: 0, template: Template::SeeO, slot1: Some(Slot::Object(2)), slot2: None, qualifier: Qualifier::First, t_s: 0, t_e: 1 };
        let v = encode_query(&q, 8, 6).unwrap();
        assert_eq!(v.len(), 7 + 2 * 14 + 3);
        assert_eq!(v.iter().sum::<f64>(), 3.0);
        let q2 = MomentQuery { template: Template::VisitOr, ..q.clone() };
        assert_ne!(encode_query(&q2, 8, 6).unwrap(), v);
        assert_eq!(encode_query(&q, 8, 6).unwrap(), v);
        let bad = MomentQuery { slot2: Some(Slot::Room(6)), ..q };
        assert!(matches!(encode_query(&bad, 8, 6), Err(EpmError::Slot { .. })));
    }

    #[test]
    fn windows_and_ranking() {
        assert_eq!(candidate_windows(1, 16), vec![(0, 0)]);
        assert_eq!(candidate_windows(32, 16).len(), 32 * 16 - 15 * 16 / 2);
        assert!(candidate_windows(32, 16).iter().all(|&(i, j)| i <= j && j < 32 && j - i < 16));
        assert_eq!(clip_bounds(128, 32)[1], (4, 7));
        assert_eq!(clip_bounds(3, 32).len(), 3);
        let order = rank_windows(&[0.2, 0.9, 0.2, 0.9]);
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn oracle_scorer_ranks_ground_truth_first() {
        let ds = build_dataset(&DatasetConfig { steps: 64, ..DatasetConfig::desk(320, 2, 2, 3) }, 1).unwrap();
        let cfg = LocalizerConfig { n_clips: 16, max_span: 8, ..LocalizerConfig::default() };
        let (qs, _) = localizable_queries(&ds, &dataset_queries(&ds), &cfg).unwrap();
        assert!(!qs.is_empty());
        let ranked: Vec<Vec<(usize, usize)>> = qs
            .iter()
            .map(|q| {
                let clips = clip_bounds(ds.episodes[q.walkthrough_id].len(), cfg.n_clips);
                let w: Vec<(usize, usize)> = candidate_windows(clips.len(), cfg.max_span).iter().map(|&(i, j)| (clips[i].0, clips[j].1)).collect();
                let scores: Vec<f64> = w.iter().map(|&x| iou(x, (q.t_s, q.t_e))).collect();
                rank_windows(&scores).into_iter().map(|i| w[i]).collect()
            })
            .collect();
        let report = summarize(&qs, &ranked, &IOU_THRESHOLDS);
        assert_eq!(report.r1("all", 0.3), Some(1.0));
        for w in report.all.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn localizer_trains_and_ranks_every_window() {
        let ds = build_dataset(&DatasetConfig { steps: 48, ..DatasetConfig::desk(330, 2, 2, 3) }, 1).unwrap();
        let cfg = LocalizerConfig { n_clips: 12, max_span: 6, epochs: 2, batch_walks: 2, queries_per_walk: 3, ..LocalizerConfig::default() };
        let (qs, _) = localizable_queries(&ds, &dataset_queries(&ds), &cfg).unwrap();
        let a = train_localizer(&ds, &qs, &cfg, small_model(&ds, 1), 1).unwrap();
        let b = train_localizer(&ds, &qs, &cfg, small_model(&ds, 1), 3).unwrap();
        assert_eq!(a.curve, b.curve);
        let q: Vec<&MomentQuery> = qs.iter().filter(|q| q.walkthrough_id == 0).take(2).collect();
        let ranked = a.localizer.localize(&ds, 0, &q).unwrap();
        let n = candidate_windows(12, 6).len();
        for r in &ranked {
            assert_eq!(r.len(), n);
            assert!(r.iter().all(|w| (0.0..=1.0).contains(&w.score)));
            assert!(r.windows(2).all(|p| p[0].score >= p[1].score));
            let mut seen: Vec<(usize, usize)> = r.iter().map(|w| w.clips).collect();
            seen.sort_unstable();
            assert_eq!(seen, candidate_windows(12, 6));
        }
        let rep = eval_epm(&a.localizer, &ds, &qs, &IOU_THRESHOLDS).unwrap();
        assert_eq!(rep.n_queries, qs.len());
    }

    #[test]
    fn inert_environment_path_matches_frame_only() {
        let ds = build_dataset(&DatasetConfig { steps: 48, ..DatasetConfig::desk(330, 1, 1, 3) }, 1).unwrap();
        let qs = dataset_queries(&ds);
        let q: Vec<&MomentQuery> = qs.iter().take(3).collect();
        let f = ds.feature_dim();
        let base_cfg = LocalizerConfig { env_feat: false, n_clips: 12, max_span: 6, ..LocalizerConfig::default() };
        let base = Localizer::new(small_model(&ds, 1), base_cfg, 8, 6).unwrap();
        let fused_cfg = LocalizerConfig { env_feat: true, fused_dim: f, ..base_cfg };
        let mut fused = Localizer::new(small_model(&ds, 1), fused_cfg, 8, 6).unwrap();
        let p = &mut fused.model.params;
        let id = p.id("epm.fuse.w").unwrap();
        let w = p.get_mut(id).values_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..f {
            w[i * f + i] = 1.0;
        }
        for name in ["epm.q.w", "epm.q.b", "epm.mlp1.w", "epm.mlp1.b", "epm.mlp2.w", "epm.mlp2.b"] {
            let src = base.model.params.get(base.model.params.id(name).unwrap()).values().to_vec();
            let id = p.id(name).unwrap();
            p.get_mut(id).values_mut().copy_from_slice(&src);
        }
        let mut t1 = Tape::new();
        let l1 = base.video_logits(&mut t1, &ds, 0, None, &q).unwrap();
        let mut t2 = Tape::new();
        let d = fused.model.config.d;
        let h = t2.constant(12, d, vec![0.0; 12 * d]);
        let l2 = fused.video_logits(&mut t2, &ds, 0, Some(h), &q).unwrap();
        assert_eq!(t1.value(l1), t2.value(l2));
    }

    #[test]
    fn empty_queries_are_rejected() {
        let ds = build_dataset(&DatasetConfig { steps: 16, ..DatasetConfig::desk(330, 1, 1, 3) }, 1).unwrap();
        let r = train_localizer(&ds, &[], &LocalizerConfig::default(), small_model(&ds, 0), 1);
        assert!(matches!(r, Err(EpmError::EmptyDataset)));
    }
}
