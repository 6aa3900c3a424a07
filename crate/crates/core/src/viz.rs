//! SVG figures: top-down trajectory maps and decoder-attention overlays.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Pose, Walkthrough};
use crate::envmemory::{
    build_memory, decode_query, relative_pose, sample_memory_frames, ContinuousPose, EnvMemoryModel, ModelError, RelativePose, SampleMode,
};
use crate::observation::{egocentric_features, ObservationParams};
use crate::worldgen::{Cell, EnvironmentSpec};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("walkthrough was recorded in `{walkthrough}`, not `{env}`")]
    EnvMismatch { env: String, walkthrough: String },
    #[error("query step {step} outside walkthrough of length {len}")]
    Step { step: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

const ROOM_COLORS: [&str; 6] = ["#f6c85f", "#9dd866", "#6fb7e0", "#ca472f", "#b9b9b9", "#8c6bb1"];
const OBJECT_COLORS: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#222222"];
const ATTENTION_COLORS: [&str; 3] = ["#e41a1c", "#ff7f00", "#984ea3"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Pixels per meter.
    pub scale: f64,
    /// Margin around the floor in pixels.
    pub margin: f64,
    pub obs: ObservationParams,
    /// Memory size used for attention overlays.
    pub memory_k: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { scale: 40.0, margin: 10.0, obs: ObservationParams::default(), memory_k: 16 }
    }
}

/// World-to-pixel map `px = scale·x + offset`, `py = scale·z + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub scale: f64,
    pub offset: f64,
}

impl Transform {
    pub fn to_pixel(&self, x: f64, z: f64) -> [f64; 2] {
        [self.scale * x + self.offset, self.scale * z + self.offset]
    }
}

/// One attended memory view, weight as returned by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMark {
    pub step: usize,
    pub weight: f64,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    pub svg: String,
    pub transform: Transform,
    pub width: f64,
    pub height: f64,
    pub trajectory: Vec<[f64; 2]>,
    pub query_step: Option<usize>,
    /// Memory steps sampled for the query, in slot order.
    pub memory_steps: Vec<usize>,
    /// Top attended views, highest weight first.
    pub attention: Vec<AttentionMark>,
}

/// Pixel bounding box `[x0, y0, x1, y1]` of the free cells.
pub fn free_space_bbox(env: &EnvironmentSpec, t: &Transform) -> [f64; 4] {
    let r = env.grid_resolution;
    let (mut c0, mut r0, mut c1, mut r1) = (usize::MAX, usize::MAX, 0, 0);
    for c in env.occupancy.free_cells() {
        c0 = c0.min(c.col);
        r0 = r0.min(c.row);
        c1 = c1.max(c.col + 1);
        r1 = r1.max(c.row + 1);
    }
    let a = t.to_pixel(c0 as f64 * r, r0 as f64 * r);
    let b = t.to_pixel(c1 as f64 * r, r1 as f64 * r);
    [a[0], a[1], b[0], b[1]]
}

fn gradient(i: usize, n: usize) -> String {
    let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
    let c = (255.0 * (1.0 - f)).round() as u8;
    format!("#{c:02x}{c:02x}ff")
}

fn header(env: &EnvironmentSpec, opts: &RenderOptions) -> (String, Transform, f64, f64) {
    let t = Transform { scale: opts.scale, offset: opts.margin };
    let w = env.width_m() * opts.scale + 2.0 * opts.margin;
    let h = env.height_m() * opts.scale + 2.0 * opts.margin;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#);
    let _ = writeln!(
        s,
        r#"<metadata>{{"env":"{}","transform":{{"px":"{:.4}*x+{:.4}","py":"{:.4}*z+{:.4}"}}}}</metadata>"#,
        env.id, t.scale, t.offset, t.scale, t.offset
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="#f4f4f4"/>"##);
    // obstacles as horizontal runs per row
    let r = env.grid_resolution;
    let _ = writeln!(s, r##"<g id="occupancy" fill="#333333">"##);
    for row in 0..env.occupancy.height() {
        let mut col = 0;
        while col < env.occupancy.width() {
            if !env.occupancy.is_obstacle(Cell::new(col, row)) {
                col += 1;
                continue;
            }
            let start = col;
            while col < env.occupancy.width() && env.occupancy.is_obstacle(Cell::new(col, row)) {
                col += 1;
            }
            let p = t.to_pixel(start as f64 * r, row as f64 * r);
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#, p[0], p[1], (col - start) as f64 * r * t.scale, r * t.scale);
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="rooms" fill-opacity="0.25" font-family="sans-serif" font-size="11">"#);
    for room in &env.rooms {
        let b = &room.bounds;
        let p = t.to_pixel(b.x0, b.z0);
        let color = ROOM_COLORS[room.label % ROOM_COLORS.len()];
        let name = env.room_taxonomy.get(room.label).map_or("?", String::as_str);
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#, p[0], p[1], (b.x1 - b.x0) * t.scale, (b.z1 - b.z0) * t.scale);
        let c = t.to_pixel(b.center()[0], b.center()[1]);
        let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" fill="#000000" fill-opacity="0.7" text-anchor="middle">{name}</text>"##, c[0], c[1]);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="objects">"#);
    for o in &env.objects {
        let p = t.to_pixel(o.position[0], o.position[1]);
        let name = env.object_taxonomy.get(o.class_id).map_or("?", String::as_str);
        let color = OBJECT_COLORS[o.class_id % OBJECT_COLORS.len()];
        let _ = writeln!(
            s,
            r##"<circle class="object" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{color}" stroke="#000000" stroke-width="0.5"><title>{name}</title></circle>"##,
            p[0],
            p[1],
            (o.footprint_radius * t.scale).max(3.0)
        );
    }
    let _ = writeln!(s, "</g>");
    (s, t, w, h)
}

fn trajectory(s: &mut String, poses: &[Pose], t: &Transform) -> Vec<[f64; 2]> {
    let pts: Vec<[f64; 2]> = poses.iter().map(|p| t.to_pixel(p.x, p.z)).collect();
    let _ = writeln!(s, r#"<g id="trajectory" stroke-width="2.5" stroke-linecap="round">"#);
    for (i, w) in pts.windows(2).enumerate() {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}"/>"#,
            w[0][0],
            w[0][1],
            w[1][0],
            w[1][1],
            gradient(i + 1, pts.len())
        );
    }
    if let Some(p) = pts.first() {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#ffffff" stroke="#0000ff"/>"##, p[0], p[1]);
    }
    let _ = writeln!(s, "</g>");
    pts
}

fn check_env(env: &EnvironmentSpec, walk: &Walkthrough) -> Result<(), VizError> {
    if walk.env_id != env.id {
        return Err(VizError::EnvMismatch { env: env.id.clone(), walkthrough: walk.env_id.clone() });
    }
    Ok(())
}

/// Top-down map with the trajectory drawn white to blue.
pub fn render_topdown(env: &EnvironmentSpec, walk: &Walkthrough, opts: &RenderOptions) -> Result<SceneRender, VizError> {
    check_env(env, walk)?;
    let (mut svg, transform, width, height) = header(env, opts);
    let pts = trajectory(&mut svg, &walk.poses, &transform);
    svg.push_str("</svg>\n");
    Ok(SceneRender { svg, transform, width, height, trajectory: pts, query_step: None, memory_steps: Vec::new(), attention: Vec::new() })
}

/// Top-`k` memory views by head-averaged last-layer decoder attention for
/// the query at `query_step`, overlaid on the top-down map. `k` is clipped
/// to the memory size.
pub fn render_attention(
    env: &EnvironmentSpec,
    walk: &Walkthrough,
    model: &EnvMemoryModel,
    query_step: usize,
    k: usize,
    opts: &RenderOptions,
) -> Result<SceneRender, VizError> {
    check_env(env, walk)?;
    let len = walk.poses.len();
    if query_step >= len {
        return Err(VizError::Step { step: query_step, len });
    }
    let steps = sample_memory_frames(len, opts.memory_k, SampleMode::Inference, &mut ChaCha8Rng::seed_from_u64(0))?;
    let pq = ContinuousPose::from(&walk.poses[query_step]);
    let frames: Vec<Vec<f32>> = steps.iter().map(|&s| egocentric_features(env, &walk.poses[s], &opts.obs)).collect();
    let rels: Vec<RelativePose> = steps.iter().map(|&s| relative_pose(&ContinuousPose::from(&walk.poses[s]), &pq)).collect();
    let memory = build_memory(model, &frames, &rels)?;
    let fq = egocentric_features(env, &walk.poses[query_step], &opts.obs);
    let (_, att) = decode_query(model, &memory, &fq)?;
    let weights = att.last_layer_mean();
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));

    let (mut svg, transform, width, height) = header(env, opts);
    let pts = trajectory(&mut svg, &walk.poses, &transform);
    let mut marks = Vec::new();
    let _ = writeln!(svg, r#"<g id="attention" font-family="sans-serif" font-size="11" fill="none" stroke-width="2">"#);
    for (rank, &slot) in order.iter().take(k.min(steps.len())).enumerate() {
        let step = steps[slot];
        let p = pts[step];
        let color = ATTENTION_COLORS[rank % ATTENTION_COLORS.len()];
        let _ = writeln!(svg, r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" stroke="{color}"/>"#, p[0] - 6.0, p[1] - 6.0);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" fill="{color}" stroke="none">{:.2}</text>"#, p[0] + 8.0, p[1] - 8.0, weights[slot]);
        marks.push(AttentionMark { step, weight: weights[slot], pixel: p });
    }
    let _ = writeln!(svg, "</g>");
    let q = pts[query_step];
    let th = walk.poses[query_step].theta();
    let tip = [q[0] + 14.0 * th.sin(), q[1] + 14.0 * th.cos()];
    let _ = writeln!(
        svg,
        r##"<g id="query"><circle cx="{:.2}" cy="{:.2}" r="5" fill="#00c000" stroke="#000000"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#00c000" stroke-width="2"/></g>"##,
        q[0],
        q[1],
        q[0],
        q[1],
        tip[0],
        tip[1]
    );
    svg.push_str("</svg>\n");
    Ok(SceneRender { svg, transform, width, height, trajectory: pts, query_step: Some(query_step), memory_steps: steps, attention: marks })
}
