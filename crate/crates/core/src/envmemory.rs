//! Pose-conditioned transformer encoder-decoder over sampled walkthrough
//! frames. Observations are projected jointly with their pose relative to a
//! query frame, contextualized by self-attention into an environment memory,
//! and read out by a decoder that cross-attends from the query frame.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Pose;
use crate::localstate::N_STATES;
use crate::numgrad::checkpoint::{self, CheckpointError};
use crate::numgrad::{NumError, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("cannot sample {k} memory frames from {t} steps")]
    FrameCount { k: usize, t: usize },
    #[error("bad model config: {0}")]
    Config(String),
}

/// Pose with a continuous heading (radians, clockwise from +z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPose {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

impl From<&Pose> for ContinuousPose {
    fn from(p: &Pose) -> Self {
        Self { x: p.x, z: p.z, theta: p.theta() }
    }
}

impl From<Pose> for ContinuousPose {
    fn from(p: Pose) -> Self {
        (&p).into()
    }
}

/// An observation pose in the query frame: `dz` forward, `dx` to the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub dx: f64,
    pub dz: f64,
    pub sin: f64,
    pub cos: f64,
}

impl RelativePose {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dz, self.sin, self.cos]
    }
}

/// Translates by −p_q, then rotates by −θ_q.
pub fn relative_pose(p_t: &ContinuousPose, p_q: &ContinuousPose) -> RelativePose {
    let (vx, vz) = (p_t.x - p_q.x, p_t.z - p_q.z);
    let (s, c) = p_q.theta.sin_cos();
    let dth = p_t.theta - p_q.theta;
    RelativePose { dx: vx * c - vz * s, dz: vx * s + vz * c, sin: dth.sin(), cos: dth.cos() }
}

/// Maps a relative pose back to world coordinates given the query pose.
pub fn compose_pose(rel: &RelativePose, p_q: &ContinuousPose) -> ContinuousPose {
    let (s, c) = p_q.theta.sin_cos();
    ContinuousPose {
        x: p_q.x + rel.dx * c + rel.dz * s,
        z: p_q.z - rel.dx * s + rel.dz * c,
        theta: p_q.theta + rel.sin.atan2(rel.cos),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub enabled: bool,
    /// Half-width of the uniform position noise in meters.
    pub pos: f64,
    /// Half-width of the uniform heading noise in radians.
    pub heading: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { enabled: true, pos: 0.0125, heading: 0.157 }
    }
}

pub fn add_pose_noise<R: Rng>(pose: ContinuousPose, rng: &mut R, params: &NoiseParams) -> ContinuousPose {
    if !params.enabled {
        return pose;
    }
    let u = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    ContinuousPose { x: pose.x + u(rng, params.pos), z: pose.z + u(rng, params.pos), theta: pose.theta + u(rng, params.heading) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    Relative,
    Global,
    None,
}

/// The 4-vector fed to the pose embedding under each mode.
pub fn pose_vector(mode: PoseMode, p_t: &ContinuousPose, p_q: &ContinuousPose) -> [f64; 4] {
    match mode {
        PoseMode::Relative => relative_pose(p_t, p_q).to_array(),
        PoseMode::Global => [p_t.x, p_t.z, p_t.theta.sin(), p_t.theta.cos()],
        PoseMode::None => [0.0; 4],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Inference,
}

/// `k` sorted step indices on a uniform grid over `[0, t)`; training adds a
/// random offset shared by the whole grid.
pub fn sample_memory_frames<R: Rng>(t: usize, k: usize, mode: SampleMode, rng: &mut R) -> Result<Vec<usize>, ModelError> {
    if k == 0 || k > t {
        return Err(ModelError::FrameCount { k, t });
    }
    let stride = t as f64 / k as f64;
    let offset = match mode {
        SampleMode::Train => rng.gen_range(0.0..stride),
        SampleMode::Inference => 0.0,
    };
    Ok((0..k).map(|i| ((offset + i as f64 * stride).floor() as usize).min(t - 1)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub ff_mult: usize,
    pub pose_embed: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 64, heads: 4, layers_enc: 2, layers_dec: 2, ff_mult: 4, pose_embed: 16, feature_dim: 240, n_classes: 8 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(NumError::Heads { dim: self.d, heads: self.heads }.into());
        }
        if self.feature_dim == 0 || self.n_classes == 0 || self.pose_embed == 0 || self.ff_mult == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of memory slot indices, `k×d` row-major.
pub fn positional_encoding(k: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; k * d];
    for pos in 0..k {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

/// Inputs for `b` queries, each with `k` memory slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySample {
    /// `k×F` memory frame features.
    pub frames: Vec<f64>,
    /// `k×4` pose vectors.
    pub poses: Vec<f64>,
    /// Query frame feature, length F.
    pub query: Vec<f64>,
}

/// Decoder cross-attention weights: `[layer][head][slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderAttention {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl DecoderAttention {
    /// Head-averaged weights of the last decoder layer.
    pub fn last_layer_mean(&self) -> Vec<f64> {
        let last = self.layers.last().expect("decoder has layers");
        let k = last[0].len();
        let mut out = vec![0.0; k];
        for h in last {
            out.iter_mut().zip(h).for_each(|(o, w)| *o += w);
        }
        out.iter_mut().for_each(|o| *o /= last.len() as f64);
        out
    }
}

/// Handles of a batched forward pass.
pub struct ForwardVars {
    /// `b×d` environment features.
    pub h: Var,
    /// `b×F` query features as fed to the decoder.
    pub query: Var,
    /// Encoder self-attention weights per layer (block, head, row, key).
    pub self_attention: Vec<Vec<f64>>,
    /// Decoder cross-attention weights per layer (block, head, key).
    pub cross_attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvMemoryModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Adds slot positional encodings to memory tokens when set.
    pub positional: bool,
}

impl EnvMemoryModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ModelConfig { d, pose_embed: pe, feature_dim: f, n_classes: o, ff_mult, .. } = config;
        let ff = d * ff_mult;
        let lin = |s: &mut ParamStore, name: &str, i: usize, j: usize, rng: &mut ChaCha8Rng| {
            s.add(format!("{name}.w"), Tensor::uniform_fan_in(vec![i, j], i, rng));
            s.add(format!("{name}.b"), Tensor::zeros(vec![j]));
        };
        let ln = |s: &mut ParamStore, name: &str| {
            s.add(format!("{name}.g"), Tensor::filled(vec![d], 1.0));
            s.add(format!("{name}.b"), Tensor::zeros(vec![d]));
        };
        lin(&mut s, "enc.vis", f, d, &mut rng);
        lin(&mut s, "enc.pose", 4, pe, &mut rng);
        lin(&mut s, "enc.mp", d + pe, d, &mut rng);
        for l in 0..config.layers_enc {
            let p = format!("enc.l{l}");
            ln(&mut s, &format!("{p}.ln1"));
            for m in ["q", "k", "v", "o"] {
                lin(&mut s, &format!("{p}.attn.{m}"), d, d, &mut rng);
            }
            ln(&mut s, &format!("{p}.ln2"));
            lin(&mut s, &format!("{p}.ff1"), d, ff, &mut rng);
            lin(&mut s, &format!("{p}.ff2"), ff, d, &mut rng);
        }
        ln(&mut s, "enc.ln");
        lin(&mut s, "dec.query", f, d, &mut rng);
        for l in 0..config.layers_dec {
            let p = format!("dec.l{l}");
            ln(&mut s, &format!("{p}.ln1"));
            for m in ["q", "k", "v", "o"] {
                lin(&mut s, &format!("{p}.self.{m}"), d, d, &mut rng);
            }
            ln(&mut s, &format!("{p}.ln2"));
            for m in ["q", "k", "v", "o"] {
                lin(&mut s, &format!("{p}.cross.{m}"), d, d, &mut rng);
            }
            ln(&mut s, &format!("{p}.ln3"));
            lin(&mut s, &format!("{p}.ff1"), d, ff, &mut rng);
            lin(&mut s, &format!("{p}.ff2"), ff, d, &mut rng);
        }
        ln(&mut s, "dec.ln");
        lin(&mut s, "head", f + d, o * N_STATES, &mut rng);
        Ok(Self { config, params: s, positional: true })
    }

    pub fn param(&self, tape: &mut Tape, name: &str) -> Result<Var, NumError> {
        let id = self.params.id(name).ok_or_else(|| NumError::UnknownParam(name.to_string()))?;
        Ok(tape.param(&self.params, id))
    }

    pub fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var, NumError> {
        let w = self.param(tape, &format!("{name}.w"))?;
        let b = self.param(tape, &format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var, NumError> {
        let g = self.param(tape, &format!("{name}.g"))?;
        let b = self.param(tape, &format!("{name}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention(&self, tape: &mut Tape, xq: Var, xkv: Var, blocks: usize, name: &str) -> Result<(Var, Vec<f64>), NumError> {
        let q = self.linear(tape, xq, &format!("{name}.q"))?;
        let k = self.linear(tape, xkv, &format!("{name}.k"))?;
        let v = self.linear(tape, xkv, &format!("{name}.v"))?;
        let (o, w) = tape.block_attention(q, k, v, blocks, self.config.heads)?;
        Ok((self.linear(tape, o, &format!("{name}.o"))?, w))
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var, NumError> {
        let h = self.linear(tape, x, &format!("{name}.ff1"))?;
        let h = tape.gelu(h);
        self.linear(tape, h, &format!("{name}.ff2"))
    }

    /// Memory tokens `(b·k)×d` from frames `(b·k)×F` and pose vectors `(b·k)×4`.
    pub fn embed_tokens(&self, tape: &mut Tape, frames: Var, poses: Var, k: usize) -> Result<Var, NumError> {
        let v = self.linear(tape, frames, "enc.vis")?;
        let p = self.linear(tape, poses, "enc.pose")?;
        let cat = tape.hcat(&[v, p])?;
        let x = self.linear(tape, cat, "enc.mp")?;
        if !self.positional {
            return Ok(x);
        }
        let (rows, d) = tape.dims(x);
        let pe = positional_encoding(k, d);
        let tiled: Vec<f64> = (0..rows).flat_map(|r| pe[(r % k) * d..(r % k + 1) * d].to_vec()).collect();
        let pe = tape.constant(rows, d, tiled);
        tape.add(x, pe)
    }

    /// Encoder over `blocks` independent memories; returns the normalized
    /// memory and the self-attention weights of each layer.
    pub fn encode(&self, tape: &mut Tape, tokens: Var, blocks: usize) -> Result<(Var, Vec<Vec<f64>>), NumError> {
        let mut x = tokens;
        let mut weights = Vec::with_capacity(self.config.layers_enc);
        for l in 0..self.config.layers_enc {
            let p = format!("enc.l{l}");
            let a = self.norm(tape, x, &format!("{p}.ln1"))?;
            let (att, w) = self.attention(tape, a, a, blocks, &format!("{p}.attn"))?;
            weights.push(w);
            x = tape.add(x, att)?;
            let a = self.norm(tape, x, &format!("{p}.ln2"))?;
            let f = self.feed_forward(tape, a, &p)?;
            x = tape.add(x, f)?;
        }
        Ok((self.norm(tape, x, "enc.ln")?, weights))
    }

    /// Decoder from query features `b×F` over memory `(b·k)×d`.
    pub fn decode(&self, tape: &mut Tape, query: Var, memory: Var) -> Result<(Var, Vec<Vec<f64>>), NumError> {
        let blocks = tape.dims(query).0;
        let mut q = self.linear(tape, query, "dec.query")?;
        let mut cross = Vec::with_capacity(self.config.layers_dec);
        for l in 0..self.config.layers_dec {
            let p = format!("dec.l{l}");
            let a = self.norm(tape, q, &format!("{p}.ln1"))?;
            let (sa, _) = self.attention(tape, a, a, blocks, &format!("{p}.self"))?;
            q = tape.add(q, sa)?;
            let a = self.norm(tape, q, &format!("{p}.ln2"))?;
            let (ca, w) = self.attention(tape, a, memory, blocks, &format!("{p}.cross"))?;
            cross.push(w);
            q = tape.add(q, ca)?;
            let a = self.norm(tape, q, &format!("{p}.ln3"))?;
            let f = self.feed_forward(tape, a, &p)?;
            q = tape.add(q, f)?;
        }
        Ok((self.norm(tape, q, "dec.ln")?, cross))
    }

    /// Local-state logits `b×(|O|·5)` from `[f_q ; h_q]`.
    pub fn head(&self, tape: &mut Tape, query: Var, h: Var) -> Result<Var, NumError> {
        let cat = tape.hcat(&[query, h])?;
        self.linear(tape, cat, "head")
    }

    /// Full pipeline for already-built frame, pose and query variables.
    pub fn forward_vars(&self, tape: &mut Tape, frames: Var, poses: Var, query: Var, k: usize) -> Result<ForwardVars, NumError> {
        let blocks = tape.dims(query).0;
        let tokens = self.embed_tokens(tape, frames, poses, k)?;
        let (memory, self_attention) = self.encode(tape, tokens, blocks)?;
        let (h, cross_attention) = self.decode(tape, query, memory)?;
        Ok(ForwardVars { h, query, self_attention, cross_attention })
    }

    /// Batched forward over samples that all use `k` memory slots.
    pub fn forward(&self, tape: &mut Tape, samples: &[MemorySample]) -> Result<ForwardVars, ModelError> {
        let (frames, poses, query, k) = self.stack(samples)?;
        let b = samples.len();
        let f = self.config.feature_dim;
        let fr = tape.constant(b * k, f, frames);
        let po = tape.constant(b * k, 4, poses);
        let qu = tape.constant(b, f, query);
        Ok(self.forward_vars(tape, fr, po, qu, k)?)
    }

    /// Concatenates samples into row-major blocks, checking shapes.
    pub fn stack(&self, samples: &[MemorySample]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize), ModelError> {
        let f = self.config.feature_dim;
        let first = samples.first().ok_or(ModelError::Shape { what: "batch size", expected: 1, got: 0 })?;
        let k = first.poses.len() / 4;
        let mut frames = Vec::with_capacity(samples.len() * k * f);
        let mut poses = Vec::with_capacity(samples.len() * k * 4);
        let mut query = Vec::with_capacity(samples.len() * f);
        for s in samples {
            if s.frames.len() != k * f {
                return Err(ModelError::Shape { what: "memory frames", expected: k * f, got: s.frames.len() });
            }
            if s.poses.len() != k * 4 {
                return Err(ModelError::Shape { what: "memory poses", expected: k * 4, got: s.poses.len() });
            }
            if s.query.len() != f {
                return Err(ModelError::Shape { what: "query feature", expected: f, got: s.query.len() });
            }
            frames.extend_from_slice(&s.frames);
            poses.extend_from_slice(&s.poses);
            query.extend_from_slice(&s.query);
        }
        if k == 0 {
            return Err(ModelError::Shape { what: "memory slots", expected: 1, got: 0 });
        }
        Ok((frames, poses, query, k))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        let hyper = serde_json::json!({ "model": self.config, "positional": self.positional, "extra": extra });
        checkpoint::save(path, &self.params, &hyper)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let (params, hyper) = checkpoint::load(path)?;
        let config: ModelConfig =
            serde_json::from_value(hyper["model"].clone()).map_err(|e| ModelError::Checkpoint(CheckpointError::Sidecar(e)))?;
        config.validate()?;
        let positional = hyper["positional"].as_bool().unwrap_or(true);
        let reference = Self::new(config, 0)?;
        for (_, name, t) in reference.params.iter() {
            let got = params.id(name).map(|id| params.get(id).shape().to_vec());
            if got.as_deref() != Some(t.shape()) {
                return Err(ModelError::Config(format!("checkpoint parameter {name} missing or misshapen")));
            }
        }
        Ok((Self { config, params, positional }, hyper["extra"].clone()))
    }
}

fn f32_to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Single observation token `x_t` for memory slot `slot`.
pub fn encode_observation(model: &EnvMemoryModel, f_t: &[f32], rel: &RelativePose, slot: usize) -> Result<Vec<f64>, ModelError> {
    let f = model.config.feature_dim;
    if f_t.len() != f {
        return Err(ModelError::Shape { what: "frame feature", expected: f, got: f_t.len() });
    }
    let mut tape = Tape::new();
    let fr = tape.constant(1, f, f32_to_f64(f_t));
    let po = tape.constant(1, 4, rel.to_array().to_vec());
    let v = model.linear(&mut tape, fr, "enc.vis")?;
    let p = model.linear(&mut tape, po, "enc.pose")?;
    let cat = tape.hcat(&[v, p])?;
    let x = model.linear(&mut tape, cat, "enc.mp")?;
    let mut out = tape.value(x).to_vec();
    if model.positional {
        let d = model.config.d;
        let pe = positional_encoding(slot + 1, d);
        out.iter_mut().zip(&pe[slot * d..]).for_each(|(o, p)| *o += p);
    }
    Ok(out)
}

/// Encoder output for one memory, one `d`-vector per slot.
pub fn build_memory(model: &EnvMemoryModel, frames: &[Vec<f32>], rel_poses: &[RelativePose]) -> Result<Vec<Vec<f64>>, ModelError> {
    if frames.len() != rel_poses.len() || frames.is_empty() {
        return Err(ModelError::Shape { what: "memory poses", expected: frames.len(), got: rel_poses.len() });
    }
    let k = frames.len();
    let f = model.config.feature_dim;
    let mut tape = Tape::new();
    let flat: Vec<f64> = frames.iter().flat_map(|x| f32_to_f64(x)).collect();
    if flat.len() != k * f {
        return Err(ModelError::Shape { what: "memory frames", expected: k * f, got: flat.len() });
    }
    let fr = tape.constant(k, f, flat);
    let po = tape.constant(k, 4, rel_poses.iter().flat_map(|r| r.to_array()).collect());
    let tokens = model.embed_tokens(&mut tape, fr, po, k)?;
    let (mem, _) = model.encode(&mut tape, tokens, 1)?;
    Ok(tape.value(mem).chunks(model.config.d).map(|c| c.to_vec()).collect())
}

fn split_cross(weights: &[Vec<f64>], heads: usize, k: usize) -> DecoderAttention {
    DecoderAttention { layers: weights.iter().map(|w| (0..heads).map(|h| w[h * k..(h + 1) * k].to_vec()).collect()).collect() }
}

/// Decodes the environment feature `h_q` for one query over a built memory.
pub fn decode_query(model: &EnvMemoryModel, memory: &[Vec<f64>], f_q: &[f32]) -> Result<(Vec<f64>, DecoderAttention), ModelError> {
    let d = model.config.d;
    let f = model.config.feature_dim;
    if memory.is_empty() {
        return Err(ModelError::Shape { what: "memory slots", expected: 1, got: 0 });
    }
    if f_q.len() != f {
        return Err(ModelError::Shape { what: "query feature", expected: f, got: f_q.len() });
    }
    let mut tape = Tape::new();
    let mem = tape.constant(memory.len(), d, memory.concat());
    let q = tape.constant(1, f, f32_to_f64(f_q));
    let (h, cross) = model.decode(&mut tape, q, mem)?;
    Ok((tape.value(h).to_vec(), split_cross(&cross, model.config.heads, memory.len())))
}

/// Local-state logits, `|O|` rows of 5.
pub fn predict_local_state(model: &EnvMemoryModel, h_q: &[f64], f_q: &[f32]) -> Result<Vec<Vec<f64>>, ModelError> {
    let (d, f) = (model.config.d, model.config.feature_dim);
    if h_q.len() != d {
        return Err(ModelError::Shape { what: "environment feature", expected: d, got: h_q.len() });
    }
    let mut tape = Tape::new();
    let q = tape.constant(1, f, f32_to_f64(f_q));
    let h = tape.constant(1, d, h_q.to_vec());
    let logits = model.head(&mut tape, q, h)?;
    Ok(tape.value(logits).chunks(N_STATES).map(|c| c.to_vec()).collect())
}

/// Builds one memory sample for `query_step` from per-step features and poses.
pub fn assemble_sample(
    features: &[Vec<f32>],
    poses: &[ContinuousPose],
    steps: &[usize],
    query_step: usize,
    mode: PoseMode,
) -> MemorySample {
    let pq = poses[query_step];
    MemorySample {
        frames: steps.iter().flat_map(|&s| f32_to_f64(&features[s])).collect(),
        poses: steps.iter().flat_map(|&s| pose_vector(mode, &poses[s], &pq)).collect(),
        query: f32_to_f64(&features[query_step]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvFeature {
    pub h: Vec<f64>,
    pub memory_steps: Vec<usize>,
    pub attention: DecoderAttention,
}

/// Inference-mode environment feature for one query step of a walkthrough.
pub fn environment_feature(
    model: &EnvMemoryModel,
    features: &[Vec<f32>],
    poses: &[Pose],
    query_step: usize,
    k: usize,
    mode: PoseMode,
) -> Result<EnvFeature, ModelError> {
    let t = features.len();
    if poses.len() != t {
        return Err(ModelError::Shape { what: "poses", expected: t, got: poses.len() });
    }
    if query_step >= t {
        return Err(ModelError::Shape { what: "query step bound", expected: t, got: query_step });
    }
    let steps = sample_memory_frames(t, k, SampleMode::Inference, &mut ChaCha8Rng::seed_from_u64(0))?;
    let cp: Vec<ContinuousPose> = poses.iter().map(ContinuousPose::from).collect();
    let sample = assemble_sample(features, &cp, &steps, query_step, mode);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, std::slice::from_ref(&sample))?;
    let h = tape.value(out.h).to_vec();
    Ok(EnvFeature { h, attention: split_cross(&out.cross_attention, model.config.heads, steps.len()), memory_steps: steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::ParamId;

    fn tiny() -> ModelConfig {
        ModelConfig { d: 8, heads: 2, layers_enc: 2, layers_dec: 2, ff_mult: 2, pose_embed: 4, feature_dim: 6, n_classes: 2 }
    }

    fn cp(x: f64, z: f64, theta: f64) -> ContinuousPose {
        ContinuousPose { x, z, theta }
    }

    fn feat(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.0..1.0f32)).collect()
    }

    #[test]
    fn relative_pose_cases() {
        let p = cp(1.5, -2.0, 0.7);
        assert_eq!(relative_pose(&p, &p).to_array(), [0.0, 0.0, 0.0, 1.0]);
        let q = cp(2.0, 3.0, 0.0);
        let ahead = cp(2.0, 4.0, 0.0);
        let r = relative_pose(&ahead, &q).to_array();
        assert!(r[0].abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12 && r[2] == 0.0 && r[3] == 1.0);
        // facing +x, a point at +x is ahead; a point at -z is to the right
        let q = cp(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let r = relative_pose(&cp(2.0, 0.0, 0.0), &q);
        assert!(r.dx.abs() < 1e-12 && (r.dz - 2.0).abs() < 1e-12);
        let r = relative_pose(&cp(0.0, -1.0, 0.0), &q);
        assert!((r.dx - 1.0).abs() < 1e-12 && r.dz.abs() < 1e-12);
    }

    #[test]
    fn relative_pose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let pt = cp(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-3.0..3.0));
            let pq = cp(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-3.0..3.0));
            let r = relative_pose(&pt, &pq);
            assert!((r.sin * r.sin + r.cos * r.cos - 1.0).abs() < 1e-9);
            let back = compose_pose(&r, &pq);
            assert!((back.x - pt.x).abs() < 1e-9 && (back.z - pt.z).abs() < 1e-9);
            let dth = (back.theta - pt.theta).rem_euclid(std::f64::consts::TAU);
            assert!(dth < 1e-9 || std::f64::consts::TAU - dth < 1e-9);
        }
    }

    #[test]
    fn pose_noise_bounds_and_mean() {
        let params = NoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = cp(1.0, 2.0, 0.5);
        assert_eq!(add_pose_noise(p, &mut rng, &NoiseParams { enabled: false, ..params }), p);
        let n = 100_000;
        let (mut sx, mut sz, mut sh) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let q = add_pose_noise(p, &mut rng, &params);
            let (ex, ez, eh) = (q.x - p.x, q.z - p.z, q.theta - p.theta);
            assert!(ex.abs() <= params.pos + 1e-15 && ez.abs() <= params.pos + 1e-15 && eh.abs() <= params.heading + 1e-15);
            sx += ex;
            sz += ez;
            sh += eh;
        }
        // uniform on [-a, a] has sigma a/sqrt(3)
        let bound = |a: f64| 3.0 * a / 3f64.sqrt() / (n as f64).sqrt();
        assert!((sx / n as f64).abs() < bound(params.pos));
        assert!((sz / n as f64).abs() < bound(params.pos));
        assert!((sh / n as f64).abs() < bound(params.heading));
    }

    #[test]
    fn memory_sampling_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_memory_frames(16, 16, SampleMode::Train, &mut rng).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(sample_memory_frames(128, 16, SampleMode::Inference, &mut rng).unwrap(), (0..16).map(|i| i * 8).collect::<Vec<_>>());
        for _ in 0..1000 {
            let t = rng.gen_range(1..300);
            let k = rng.gen_range(1..=t);
            let s = sample_memory_frames(t, k, SampleMode::Train, &mut rng).unwrap();
            assert_eq!(s.len(), k);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(*s.last().unwrap() < t);
        }
        assert!(matches!(sample_memory_frames(4, 5, SampleMode::Inference, &mut rng), Err(ModelError::FrameCount { .. })));
    }

    #[test]
    fn encode_observation_zero_input_golden() {
        let model = EnvMemoryModel::new(tiny(), 42).unwrap();
        let ident = RelativePose { dx: 0.0, dz: 0.0, sin: 0.0, cos: 1.0 };
        let x = encode_observation(&model, &[0.0; 6], &ident, 0).unwrap();
        // zero feature leaves only the visual bias (zero), the pose embedding
        // of (0,0,0,1) and the slot-0 encoding (sin 0 = 0, cos 0 = 1)
        let s = &model.params;
        let get = |n: &str| s.get(s.id(n).unwrap()).values().to_vec();
        let wp = get("enc.pose.w");
        let pose_emb: Vec<f64> = (0..4).map(|j| wp[3 * 4 + j]).collect();
        let wm = get("enc.mp.w");
        for j in 0..8 {
            let mut want = if j % 2 == 0 { 0.0 } else { 1.0 };
            for (i, pe) in pose_emb.iter().enumerate() {
                want += pe * wm[(8 + i) * 8 + j];
            }
            assert!((x[j] - want).abs() < 1e-12);
        }
        let golden = [-0.029400537565297147, 0.9485908824605824, 0.025901705410292117];
        for (a, b) in x.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_observation_matches_loop_oracle() {
        let model = EnvMemoryModel::new(tiny(), 7).unwrap();
        let f = feat(1, 6);
        let rel = relative_pose(&cp(1.0, 2.0, 0.3), &cp(-0.5, 0.2, 1.1));
        let x = encode_observation(&model, &f, &rel, 3).unwrap();
        let s = &model.params;
        let get = |n: &str| s.get(s.id(n).unwrap()).values().to_vec();
        let (wv, bv, wp, bp, wm, bm) =
            (get("enc.vis.w"), get("enc.vis.b"), get("enc.pose.w"), get("enc.pose.b"), get("enc.mp.w"), get("enc.mp.b"));
        let mut cat = [0.0; 12];
        for j in 0..8 {
            cat[j] = bv[j] + (0..6).map(|i| f[i] as f64 * wv[i * 8 + j]).sum::<f64>();
        }
        let r = rel.to_array();
        for j in 0..4 {
            cat[8 + j] = bp[j] + (0..4).map(|i| r[i] * wp[i * 4 + j]).sum::<f64>();
        }
        let pe = positional_encoding(4, 8);
        for j in 0..8 {
            let want = bm[j] + (0..12).map(|i| cat[i] * wm[i * 8 + j]).sum::<f64>() + pe[3 * 8 + j];
            assert!((x[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn single_slot_memory_and_decoder() {
        let model = EnvMemoryModel::new(tiny(), 3).unwrap();
        let f = feat(2, 6);
        let ident = RelativePose { dx: 0.0, dz: 0.0, sin: 0.0, cos: 1.0 };
        let mem = build_memory(&model, std::slice::from_ref(&f), &[ident]).unwrap();
        assert_eq!(mem.len(), 1);
        let (h, att) = decode_query(&model, &mem, &f).unwrap();
        assert_eq!(h.len(), 8);
        for layer in &att.layers {
            for head in layer {
                assert_eq!(head, &vec![1.0]);
            }
        }
        assert_eq!(decode_query(&model, &mem, &f).unwrap().0, h);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut model = EnvMemoryModel::new(tiny(), 4).unwrap();
        model.positional = false;
        let frames: Vec<Vec<f32>> = (0..4).map(|i| feat(10 + i, 6)).collect();
        let poses: Vec<RelativePose> =
            (0..4).map(|i| relative_pose(&cp(i as f64, 0.5 * i as f64, 0.2 * i as f64), &cp(0.0, 0.0, 0.0))).collect();
        let a = build_memory(&model, &frames, &poses).unwrap();
        let perm = [2, 0, 3, 1];
        let pf: Vec<Vec<f32>> = perm.iter().map(|&i| frames[i].clone()).collect();
        let pp: Vec<RelativePose> = perm.iter().map(|&i| poses[i]).collect();
        let b = build_memory(&model, &pf, &pp).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for (x, y) in a[i].iter().zip(&b[j]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// With sharpened attention, a slot that no other slot and no decoder
    /// head attends to (weight < 1e-6) can change without moving `h`.
    #[test]
    fn unattended_frame_does_not_move_h() {
        let k = 6;
        let run = |model: &EnvMemoryModel, frames: &[f64], poses: &[f64], query: &[f64]| {
            let mut tape = Tape::new();
            let fr = tape.constant(k, 6, frames.to_vec());
            let po = tape.constant(k, 4, poses.to_vec());
            let qu = tape.constant(1, 6, query.to_vec());
            let out = model.forward_vars(&mut tape, fr, po, qu, k).unwrap();
            (tape.value(out.h).to_vec(), out.self_attention, out.cross_attention)
        };
        let incoming = |slot: usize, enc: &[Vec<f64>], dec: &[Vec<f64>]| {
            let mut m: f64 = 0.0;
            for layer in enc {
                for (idx, &w) in layer.iter().enumerate() {
                    let (row, key) = ((idx / k) % k, idx % k);
                    if key == slot && row != slot {
                        m = m.max(w);
                    }
                }
            }
            for layer in dec {
                m = layer.iter().skip(slot).step_by(k).fold(m, |a, &w| a.max(w));
            }
            m
        };
        let mut checked = 0;
        for seed in 0..40 {
            let cfg = ModelConfig { heads: 1, layers_enc: 1, layers_dec: 1, ..tiny() };
            let mut model = EnvMemoryModel::new(cfg, seed).unwrap();
            let ids: Vec<ParamId> = model.params.iter().filter(|(_, n, _)| n.ends_with("attn.q.w") || n.ends_with("cross.q.w")).map(|(id, _, _)| id).collect();
            for id in ids {
                model.params.get_mut(id).values_mut().iter_mut().for_each(|v| *v *= 200.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let frames: Vec<f64> = (0..k * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let poses: Vec<f64> = (0..k).flat_map(|i| relative_pose(&cp(i as f64, -(i as f64), 0.3 * i as f64), &cp(0.0, 0.0, 0.0)).to_array()).collect();
            let query: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (h, enc, dec) = run(&model, &frames, &poses, &query);
            for slot in 0..k {
                if incoming(slot, &enc, &dec) >= 1e-6 {
                    continue;
                }
                let mut changed = frames.clone();
                changed[slot * 6..(slot + 1) * 6].iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
                let (h2, enc2, dec2) = run(&model, &changed, &poses, &query);
                if incoming(slot, &enc2, &dec2) >= 1e-6 {
                    continue;
                }
                let diff = h.iter().zip(&h2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-4, "seed {seed} slot {slot}: h moved by {diff}");
                checked += 1;
            }
        }
        assert!(checked > 0, "no unattended slot found");
    }

    /// Scalar-loop decoder over a 2-slot memory for a 1-layer model.
    #[test]
    fn decoder_matches_loop_oracle() {
        let cfg = ModelConfig { layers_dec: 1, ..tiny() };
        let model = EnvMemoryModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mem: Vec<Vec<f64>> = (0..2).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let fq = feat(7, 6);
        let (h, att) = decode_query(&model, &mem, &fq).unwrap();

        let s = &model.params;
        let get = |n: &str| s.get(s.id(n).unwrap()).values().to_vec();
        let lin = |x: &[f64], name: &str, i: usize, o: usize| -> Vec<f64> {
            let w = get(&format!("{name}.w"));
            let b = get(&format!("{name}.b"));
            (0..o).map(|j| b[j] + (0..i).map(|k| x[k] * w[k * o + j]).sum::<f64>()).collect()
        };
        let ln = |x: &[f64], name: &str| -> Vec<f64> {
            let g = get(&format!("{name}.g"));
            let b = get(&format!("{name}.b"));
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            x.iter().enumerate().map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * g[i] + b[i]).collect()
        };
        let attend = |xq: &[f64], kv: &[Vec<f64>], name: &str| -> (Vec<f64>, Vec<Vec<f64>>) {
            let q = lin(xq, &format!("{name}.q"), 8, 8);
            let ks: Vec<Vec<f64>> = kv.iter().map(|m| lin(m, &format!("{name}.k"), 8, 8)).collect();
            let vs: Vec<Vec<f64>> = kv.iter().map(|m| lin(m, &format!("{name}.v"), 8, 8)).collect();
            let mut cat = vec![0.0; 8];
            let mut ws = Vec::new();
            for hd in 0..2 {
                let sc: Vec<f64> = ks.iter().map(|k| (0..4).map(|c| q[hd * 4 + c] * k[hd * 4 + c]).sum::<f64>() / 2.0).collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                let w: Vec<f64> = sc.iter().map(|s| (s - mx).exp() / z).collect();
                for (j, wj) in w.iter().enumerate() {
                    for c in 0..4 {
                        cat[hd * 4 + c] += wj * vs[j][hd * 4 + c];
                    }
                }
                ws.push(w);
            }
            (lin(&cat, &format!("{name}.o"), 8, 8), ws)
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        let fq64: Vec<f64> = fq.iter().map(|&v| v as f64).collect();
        let mut q = lin(&fq64, "dec.query", 6, 8);
        let a = ln(&q, "dec.l0.ln1");
        let (sa, _) = attend(&a, std::slice::from_ref(&a), "dec.l0.self");
        q.iter_mut().zip(&sa).for_each(|(x, y)| *x += y);
        let a = ln(&q, "dec.l0.ln2");
        let (ca, ws) = attend(&a, &mem, "dec.l0.cross");
        q.iter_mut().zip(&ca).for_each(|(x, y)| *x += y);
        let a = ln(&q, "dec.l0.ln3");
        let f1: Vec<f64> = lin(&a, "dec.l0.ff1", 8, 16).into_iter().map(gelu).collect();
        let f2 = lin(&f1, "dec.l0.ff2", 16, 8);
        q.iter_mut().zip(&f2).for_each(|(x, y)| *x += y);
        let want = ln(&q, "dec.ln");
        for (a, b) in h.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        for (hd, w) in ws.iter().enumerate() {
            for (a, b) in att.layers[0][hd].iter().zip(w) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((att.layers[0][hd].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_cases() {
        let mut model = EnvMemoryModel::new(tiny(), 8).unwrap();
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let fq = feat(9, 6);
        let logits = predict_local_state(&model, &h, &fq).unwrap();
        assert_eq!(logits.len(), 2);
        let s = &model.params;
        let w = s.get(s.id("head.w").unwrap()).values().to_vec();
        let b = s.get(s.id("head.b").unwrap()).values().to_vec();
        let x: Vec<f64> = fq.iter().map(|&v| v as f64).chain(h.iter().cloned()).collect();
        for c in 0..2 {
            for st in 0..5 {
                let j = c * 5 + st;
                let want = b[j] + (0..14).map(|i| x[i] * w[i * 10 + j]).sum::<f64>();
                assert!((logits[c][st] - want).abs() < 1e-10);
            }
        }
        for name in ["head.w", "head.b"] {
            let id = model.params.id(name).unwrap();
            model.params.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for row in predict_local_state(&model, &h, &fq).unwrap() {
            let p = crate::numgrad::Tensor::new(vec![5], row).unwrap();
            assert!(p.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = EnvMemoryModel::new(tiny(), 11).unwrap();
        let sample = MemorySample {
            frames: feat(20, 12).iter().map(|&v| v as f64).collect(),
            poses: vec![0.3, -0.2, 0.5, 0.866, -1.0, 0.7, -0.6, 0.8],
            query: feat(21, 6).iter().map(|&v| v as f64).collect(),
        };
        let targets = [1usize, 3];
        let loss_of = |m: &EnvMemoryModel| -> (f64, Option<crate::numgrad::Gradients>) {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, std::slice::from_ref(&sample)).unwrap();
            let logits = m.head(&mut tape, out.query, out.h).unwrap();
            let logits = tape.reshape(logits, 2, 5).unwrap();
            let loss = tape.cross_entropy(logits, &targets).unwrap();
            let v = tape.scalar(loss);
            tape.backward(loss).unwrap();
            (v, Some(tape.param_grads(m.params.len())))
        };
        let (_, grads) = loss_of(&model);
        let grads = grads.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in model.params.ids() {
            let n = model.params.get(id).len();
            let g = grads.get(id).expect("every parameter reaches the loss");
            for i in 0..n {
                let mut plus = model.clone();
                plus.params.get_mut(id).values_mut()[i] += h;
                let mut minus = model.clone();
                minus.params.get_mut(id).values_mut()[i] -= h;
                let num = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let denom = num.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max((num - g[i]).abs() / denom);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn environment_feature_composes_ops() {
        let model = EnvMemoryModel::new(tiny(), 12).unwrap();
        let t = 8;
        let feats: Vec<Vec<f32>> = (0..t).map(|i| feat(30 + i as u64, 6)).collect();
        let poses: Vec<Pose> = (0..t).map(|i| Pose::new(1.0 + 0.25 * i as f64, 2.0, (i % 12) as u8)).collect();
        let ef = environment_feature(&model, &feats, &poses, 5, 4, PoseMode::Relative).unwrap();
        assert_eq!(ef.memory_steps, vec![0, 2, 4, 6]);
        let pq = ContinuousPose::from(&poses[5]);
        let frames: Vec<Vec<f32>> = ef.memory_steps.iter().map(|&s| feats[s].clone()).collect();
        let rels: Vec<RelativePose> = ef.memory_steps.iter().map(|&s| relative_pose(&(&poses[s]).into(), &pq)).collect();
        let mem = build_memory(&model, &frames, &rels).unwrap();
        let (h, att) = decode_query(&model, &mem, &feats[5]).unwrap();
        for (a, b) in ef.h.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(att.layers.len(), ef.attention.layers.len());
        let again = environment_feature(&model, &feats, &poses, 5, 4, PoseMode::Relative).unwrap();
        assert_eq!(again, ef);
    }

    #[test]
    fn checkpoint_round_trip_forward_identical() {
        let model = EnvMemoryModel::new(tiny(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.egmm");
        model.save(&path, serde_json::json!({"objective": "env_state"})).unwrap();
        let (back, extra) = EnvMemoryModel::load(&path).unwrap();
        assert_eq!(extra["objective"], "env_state");
        let f = feat(40, 6);
        let ident = RelativePose { dx: 0.0, dz: 0.0, sin: 0.0, cos: 1.0 };
        let a = build_memory(&model, &[f.clone(), f.clone()], &[ident, ident]).unwrap();
        let b = build_memory(&back, &[f.clone(), f.clone()], &[ident, ident]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors_are_reported() {
        let model = EnvMemoryModel::new(tiny(), 1).unwrap();
        let ident = RelativePose { dx: 0.0, dz: 0.0, sin: 0.0, cos: 1.0 };
        assert!(matches!(encode_observation(&model, &[0.0; 5], &ident, 0), Err(ModelError::Shape { .. })));
        assert!(matches!(EnvMemoryModel::new(ModelConfig { heads: 3, ..tiny() }, 0), Err(ModelError::Num(NumError::Heads { .. }))));
    }
}
