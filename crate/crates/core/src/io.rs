//! On-disk artifacts: environment and walkthrough files, dataset directories,
//! query files, run manifests and dataset validation.
//!
//! A dataset directory holds `dataset.json` (metadata), `envs.jsonl`,
//! `walkthroughs.jsonl`, `labels.jsonl` and `features.bin`. JSON-lines files
//! other than environment files open with a schema header line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{replay_check, Navigator, Walkthrough};
use crate::dataset::{Dataset, Episode};
use crate::epm::MomentQuery;
use crate::localstate::{local_state_label, oracle_local_state, DirectionParams, LocalStateLabel};
use crate::observation::{egocentric_features, ObservationParams};
use crate::worldgen::{room_at, EnvironmentSpec};

pub const WALKTHROUGH_SCHEMA: &str = "egomem.walkthroughs";
pub const LABEL_SCHEMA: &str = "egomem.labels";
pub const QUERY_SCHEMA: &str = "egomem.queries";
pub const DATASET_SCHEMA: &str = "egomem.dataset";
pub const MANIFEST_SCHEMA: &str = "egomem.manifest";
pub const FORMAT_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"EGFC";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, line {line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("{path}: expected schema {expected} v{version}, found {found}")]
    Schema { path: PathBuf, expected: &'static str, version: u32, found: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

impl IoError {
    /// Whether the failure is in the content rather than the file system.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Self::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn invalid(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Invalid { path: path.to_path_buf(), msg: msg.into() }
}

fn record(path: &Path, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Record { path: path.to_path_buf(), line, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn header_line(schema: &str) -> String {
    serde_json::to_string(&Header { schema: schema.to_string(), version: FORMAT_VERSION }).expect("header serializes")
}

/// Creates parent directories and writes `text` atomically enough for a CLI:
/// a temporary sibling renamed into place.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_lines(path: &Path) -> Result<Vec<String>, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        out.push(line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => invalid(path, format!("line {}: not UTF-8", out.len() + 1)),
            _ => IoError::Io { path: path.to_path_buf(), source: e },
        })?);
    }
    Ok(out)
}

/// Body lines of a headered JSON-lines file with their 1-based line numbers.
fn read_headered(path: &Path, schema: &'static str) -> Result<Vec<(usize, String)>, IoError> {
    let lines = read_lines(path)?;
    let first = lines.first().ok_or_else(|| invalid(path, "empty file"))?;
    let found = match serde_json::from_str::<Header>(first) {
        Ok(h) if h.schema == schema && h.version == FORMAT_VERSION => None,
        Ok(h) => Some(format!("{} v{}", h.schema, h.version)),
        Err(_) => Some("no header".to_string()),
    };
    if let Some(found) = found {
        return Err(IoError::Schema { path: path.to_path_buf(), expected: schema, version: FORMAT_VERSION, found });
    }
    Ok(lines.into_iter().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)).collect())
}

fn write_headered(path: &Path, schema: &str, body: impl IntoIterator<Item = String>) -> Result<(), IoError> {
    let mut text = header_line(schema);
    text.push('\n');
    for line in body {
        text.push_str(&line);
        text.push('\n');
    }
    write_text(path, &text)
}

/// One environment per line.
pub fn write_envs(path: &Path, envs: &[EnvironmentSpec]) -> Result<(), IoError> {
    let text: String = envs.iter().map(|e| e.to_json() + "\n").collect();
    write_text(path, &text)
}

pub fn read_envs(path: &Path) -> Result<Vec<EnvironmentSpec>, IoError> {
    let mut envs = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        envs.push(EnvironmentSpec::from_json(line).map_err(|e| record(path, i + 1, e.to_string()))?);
    }
    if envs.is_empty() {
        return Err(invalid(path, "no environments"));
    }
    Ok(envs)
}

pub fn write_walkthroughs(path: &Path, walks: &[Walkthrough]) -> Result<(), IoError> {
    write_headered(path, WALKTHROUGH_SCHEMA, walks.iter().map(Walkthrough::to_json_line))
}

pub fn read_walkthroughs(path: &Path) -> Result<Vec<Walkthrough>, IoError> {
    read_headered(path, WALKTHROUGH_SCHEMA)?
        .into_iter()
        .map(|(n, l)| Walkthrough::from_json_line(&l).map_err(|e| record(path, n, e)))
        .collect()
}

pub fn write_queries(path: &Path, queries: &[MomentQuery]) -> Result<(), IoError> {
    write_headered(path, QUERY_SCHEMA, queries.iter().map(|q| serde_json::to_string(q).expect("query serializes")))
}

pub fn read_queries(path: &Path) -> Result<Vec<MomentQuery>, IoError> {
    read_headered(path, QUERY_SCHEMA)?
        .into_iter()
        .map(|(n, l)| serde_json::from_str(&l).map_err(|e| record(path, n, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    episode: usize,
    env: usize,
    labels: Vec<Vec<u8>>,
    rooms: Vec<Option<usize>>,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: String,
    pub version: u32,
    pub episodes: usize,
    pub feature_dim: usize,
    pub obs: ObservationParams,
    pub direction: DirectionParams,
    /// Hex sha256 of `features.bin`.
    pub features_sha256: String,
}

pub const DATASET_FILES: [&str; 5] = ["dataset.json", "envs.jsonl", "walkthroughs.jsonl", "labels.jsonl", "features.bin"];

fn encode_features(episodes: &[Episode], dim: usize) -> Vec<u8> {
    let total: usize = episodes.iter().map(|e| e.features.len() * dim).sum();
    let mut buf = Vec::with_capacity(16 + 4 * episodes.len() + 4 * total);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for e in episodes {
        buf.extend_from_slice(&(e.features.len() as u32).to_le_bytes());
        for f in &e.features {
            for v in f {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, path: &Path, n: usize) -> Result<&'a [u8], IoError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| invalid(path, format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, path: &Path) -> Result<usize, IoError> {
        Ok(u32::from_le_bytes(self.take(path, 4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn decode_features(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<Vec<f32>>>, IoError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(path, 4)? != FEATURE_MAGIC {
        return Err(IoError::Schema { path: path.to_path_buf(), expected: "EGFC", version: FORMAT_VERSION, found: "bad magic".into() });
    }
    let version = c.u32(path)?;
    if version != FORMAT_VERSION as usize {
        return Err(IoError::Schema { path: path.to_path_buf(), expected: "EGFC", version: FORMAT_VERSION, found: format!("EGFC v{version}") });
    }
    let n = c.u32(path)?;
    let dim = c.u32(path)?;
    if dim == 0 {
        return Err(invalid(path, "zero feature width"));
    }
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let steps = c.u32(path)?;
        let raw = c.take(path, steps * dim * 4)?;
        let flat: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push(flat.chunks(dim).map(|r| r.to_vec()).collect());
    }
    if c.pos != bytes.len() {
        return Err(invalid(path, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `ds` as a dataset directory; returns the written file paths.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dim = ds.feature_dim();
    let features = encode_features(&ds.episodes, dim);
    let meta = DatasetMeta {
        schema: DATASET_SCHEMA.to_string(),
        version: FORMAT_VERSION,
        episodes: ds.episodes.len(),
        feature_dim: dim,
        obs: ds.obs,
        direction: ds.direction,
        features_sha256: sha256_hex(&features),
    };
    let paths: Vec<PathBuf> = DATASET_FILES.iter().map(|f| dir.join(f)).collect();
    write_text(&paths[0], &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"))?;
    write_envs(&paths[1], &ds.envs)?;
    let walks: Vec<Walkthrough> = ds.episodes.iter().map(|e| e.walkthrough.clone()).collect();
    write_walkthroughs(&paths[2], &walks)?;
    let labels = ds.episodes.iter().enumerate().map(|(i, e)| {
        let rec = LabelRecord { episode: i, env: e.env, labels: e.labels.iter().map(|l| l.0.clone()).collect(), rooms: e.rooms.clone() };
        serde_json::to_string(&rec).expect("labels serialize")
    });
    write_headered(&paths[3], LABEL_SCHEMA, labels)?;
    write_bytes(&paths[4], &features)?;
    Ok(paths)
}

fn read_meta(dir: &Path) -> Result<DatasetMeta, IoError> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| invalid(&path, e.to_string()))?;
    let (schema, version) = (v["schema"].as_str().unwrap_or(""), v["version"].as_u64().unwrap_or(0));
    if schema != DATASET_SCHEMA || version != FORMAT_VERSION as u64 {
        return Err(IoError::Schema { path, expected: DATASET_SCHEMA, version: FORMAT_VERSION, found: format!("{schema} v{version}") });
    }
    serde_json::from_value(v).map_err(|e| invalid(&path, e.to_string()))
}

/// Reads a dataset directory, checking record structure and cross-file
/// consistency (not the derived values; see [`validate_dataset`]).
pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let meta = read_meta(dir)?;
    let envs_path = dir.join("envs.jsonl");
    let envs = read_envs(&envs_path)?;
    let index: HashMap<&str, usize> = envs.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let walks_path = dir.join("walkthroughs.jsonl");
    let walks = read_walkthroughs(&walks_path)?;
    let labels_path = dir.join("labels.jsonl");
    let label_lines = read_headered(&labels_path, LABEL_SCHEMA)?;
    let feat_path = dir.join("features.bin");
    let bytes = fs::read(&feat_path).map_err(io_err(&feat_path))?;
    if sha256_hex(&bytes) != meta.features_sha256 {
        return Err(invalid(&feat_path, "sha256 does not match dataset.json"));
    }
    let features = decode_features(&feat_path, &bytes)?;
    if walks.len() != meta.episodes || label_lines.len() != meta.episodes || features.len() != meta.episodes {
        return Err(invalid(
            dir,
            format!("episode counts differ: meta {}, walkthroughs {}, labels {}, features {}", meta.episodes, walks.len(), label_lines.len(), features.len()),
        ));
    }
    let n_classes = envs[0].n_object_classes();
    let mut episodes = Vec::with_capacity(walks.len());
    for (i, ((walk, (line, text)), feats)) in walks.into_iter().zip(label_lines).zip(features).enumerate() {
        let walk_line = i + 2;
        let env = *index.get(walk.env_id.as_str()).ok_or_else(|| record(&walks_path, walk_line, format!("unknown environment {:?}", walk.env_id)))?;
        let rec: LabelRecord = serde_json::from_str(&text).map_err(|e| record(&labels_path, line, e.to_string()))?;
        if rec.episode != i || rec.env != env {
            return Err(record(&labels_path, line, format!("record is for episode {} env {}, expected {i} env {env}", rec.episode, rec.env)));
        }
        let len = walk.poses.len();
        if rec.labels.len() != len || rec.rooms.len() != len || feats.len() != len {
            return Err(record(&labels_path, line, format!("{len} poses but {} labels, {} rooms, {} feature rows", rec.labels.len(), rec.rooms.len(), feats.len())));
        }
        if feats.iter().any(|f| f.len() != meta.feature_dim) {
            return Err(invalid(&feat_path, format!("episode {i}: feature width differs from {}", meta.feature_dim)));
        }
        let labels = rec
            .labels
            .into_iter()
            .map(|l| {
                if l.len() != n_classes {
                    return Err(format!("label has {} entries, expected {n_classes}", l.len()));
                }
                LocalStateLabel::new(l).map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| record(&labels_path, line, e))?;
        episodes.push(Episode { env, walkthrough: walk, features: feats, labels, rooms: rec.rooms });
    }
    Ok(Dataset { envs, episodes, obs: meta.obs, direction: meta.direction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub envs: usize,
    pub episodes: usize,
    pub steps: usize,
    /// Walkthroughs regenerated from their seeds and replayed.
    pub replayed: usize,
    /// Steps whose stored label was compared against the slow oracle.
    pub oracle_checked: usize,
    /// Steps whose stored features were recomputed.
    pub features_checked: usize,
}

/// Schema check, pose replay, full label and room recomputation, and an
/// oracle and feature spot check on a seeded 1% sample of steps.
pub fn validate_dataset(dir: &Path) -> Result<ValidationReport, IoError> {
    if !dir.is_dir() {
        return Err(IoError::Io { path: dir.to_path_buf(), source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a dataset directory") });
    }
    let ds = read_dataset(dir)?;
    let walks_path = dir.join("walkthroughs.jsonl");
    let labels_path = dir.join("labels.jsonl");
    let mut navs: BTreeMap<usize, Navigator> = BTreeMap::new();
    for (i, ep) in ds.episodes.iter().enumerate() {
        let env = &ds.envs[ep.env];
        let line = i + 2;
        replay_check(env, &ep.walkthrough).map_err(|e| record(&walks_path, line, format!("pose replay failed: {e}")))?;
        if let std::collections::btree_map::Entry::Vacant(e) = navs.entry(ep.env) {
            e.insert(Navigator::new(env).map_err(|e| invalid(&walks_path, e.to_string()))?);
        }
        let regen = navs[&ep.env].walkthrough(ep.walkthrough.seed, ep.len()).map_err(|e| record(&walks_path, line, e.to_string()))?;
        if regen != ep.walkthrough {
            return Err(record(&walks_path, line, "walkthrough differs from the one its seed generates"));
        }
        for (t, p) in ep.poses().iter().enumerate() {
            if local_state_label(env, p, &ds.direction) != ep.labels[t] {
                return Err(record(&labels_path, line, format!("step {t}: label differs from recomputation")));
            }
            if room_at(env, p.position()).ok().flatten() != ep.rooms[t] {
                return Err(record(&labels_path, line, format!("step {t}: room differs from recomputation")));
            }
        }
    }
    let steps: Vec<(usize, usize)> = ds.episodes.iter().enumerate().flat_map(|(i, e)| (0..e.len()).map(move |t| (i, t))).collect();
    let n_sample = steps.len().div_ceil(100).min(steps.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0x0DA7A);
    let picked = sample(&mut rng, steps.len(), n_sample).into_vec();
    for &k in &picked {
        let (i, t) = steps[k];
        let ep = &ds.episodes[i];
        let env = &ds.envs[ep.env];
        let pose = &ep.poses()[t];
        if oracle_local_state(env, pose, &ds.direction) != ep.labels[t] {
            return Err(record(&labels_path, i + 2, format!("step {t}: label disagrees with the oracle")));
        }
        if egocentric_features(env, pose, &ds.obs) != ep.features[t] {
            return Err(invalid(&dir.join("features.bin"), format!("episode {i} step {t}: features differ from recomputation")));
        }
    }
    Ok(ValidationReport {
        envs: ds.envs.len(),
        episodes: ds.episodes.len(),
        steps: steps.len(),
        replayed: ds.episodes.len(),
        oracle_checked: picked.len(),
        features_checked: picked.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    /// Hash of `path`, recorded relative to `base` when it lies below it and
    /// absolute otherwise.
    pub fn of(path: &Path, base: &Path) -> Result<Self, IoError> {
        let abs = absolute(path)?;
        let shown = abs.strip_prefix(absolute(base)?).map(Path::to_path_buf).unwrap_or_else(|_| abs.clone());
        Ok(Self { path: shown.to_string_lossy().into_owned(), sha256: sha256_file(path)? })
    }
}

fn absolute(p: &Path) -> Result<PathBuf, IoError> {
    std::path::absolute(p).map_err(io_err(p))
}

/// Expands directories into their files, sorted. Paths are recorded relative
/// to `base` (the manifest's directory) where possible.
pub fn hash_paths(paths: &[PathBuf], base: &Path) -> Result<Vec<FileHash>, IoError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> =
                fs::read_dir(p).map_err(io_err(p))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|f| f.is_file()).collect();
            files.retain(|f| f.file_name().is_some_and(|n| n != "manifest.json"));
            files.sort();
            for f in files {
                out.push(FileHash::of(&f, base)?);
            }
        } else {
            out.push(FileHash::of(p, base)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
    pub code_version: String,
}

/// Where the manifest for `output` lives: `DIR/manifest.json` for a
/// directory, `FILE.manifest.json` otherwise.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

pub fn write_manifest(path: &Path, m: &RunManifest) -> Result<(), IoError> {
    write_text(path, &(serde_json::to_string_pretty(m).expect("manifest serializes") + "\n"))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| invalid(path, e.to_string()))?;
    if m.schema != MANIFEST_SCHEMA || m.version != FORMAT_VERSION {
        return Err(IoError::Schema { path: path.to_path_buf(), expected: MANIFEST_SCHEMA, version: FORMAT_VERSION, found: format!("{} v{}", m.schema, m.version) });
    }
    Ok(m)
}

/// Checks that every file a manifest references exists with its recorded hash.
pub fn validate_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for f in m.inputs.iter().chain(&m.outputs) {
        let p = base.join(&f.path);
        if !p.exists() {
            return Err(invalid(path, format!("{} is missing", f.path)));
        }
        if sha256_file(&p)? != f.sha256 {
            return Err(invalid(path, format!("{} changed since the run", f.path)));
        }
    }
    Ok(m)
}

/// Buffered CSV of a loss curve; `None` cells stay empty.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Option<f64>>]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let line = |w: &mut BufWriter<fs::File>, s: String| writeln!(w, "{s}").map_err(io_err(path));
    line(&mut w, header.join(","))?;
    for r in rows {
        line(&mut w, r.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()).collect::<Vec<_>>().join(","))?;
    }
    w.flush().map_err(io_err(path))
}
