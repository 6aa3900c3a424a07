//! Egocentric ray-cast frame features and the see/visit predicates.

use serde::{Deserialize, Serialize};

use crate::agent::Pose;
use crate::worldgen::EnvironmentSpec;

/// Fraction of rays an object must cover to count as seen.
pub const SEEN_THRESHOLD: f64 = 0.05;
pub const VISIT_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationParams {
    pub rays: usize,
    pub fov: f64,
    pub d_max: f64,
}

impl Default for ObservationParams {
    fn default() -> Self {
        Self { rays: 24, fov: std::f64::consts::FRAC_PI_2, d_max: 5.0 }
    }
}

impl ObservationParams {
    /// Feature length `R·(|O|+2)`.
    pub fn feature_dim(&self, n_classes: usize) -> usize {
        self.rays * self.block(n_classes)
    }

    pub fn block(&self, n_classes: usize) -> usize {
        n_classes + 2
    }

    /// Offset of ray `i` from the heading, clockwise positive.
    pub fn ray_offset(&self, i: usize) -> f64 {
        -self.fov / 2.0 + self.fov * (i as f64 + 0.5) / self.rays as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HitKind {
    Wall,
    /// Index into `EnvironmentSpec::objects`.
    Object(usize),
    Nothing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub kind: HitKind,
}

/// Distance along the unit direction `(dx, dz)` to the first obstacle cell,
/// by exact grid traversal. Returns `None` beyond `max_t`.
pub fn first_wall(env: &EnvironmentSpec, x: f64, z: f64, dx: f64, dz: f64, max_t: f64) -> Option<f64> {
    let res = env.grid_resolution;
    let g = &env.occupancy;
    let (ux, uz) = (x / res, z / res);
    let mut col = ux.floor() as i64;
    let mut row = uz.floor() as i64;
    if g.is_obstacle_i(col, row) {
        return Some(0.0);
    }
    let step_c: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_r: i64 = if dz > 0.0 { 1 } else { -1 };
    // t is in grid units until the end
    let t_delta_c = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_r = if dz != 0.0 { 1.0 / dz.abs() } else { f64::INFINITY };
    let mut t_max_c = if dx > 0.0 {
        (col as f64 + 1.0 - ux) * t_delta_c
    } else if dx < 0.0 {
        (ux - col as f64) * t_delta_c
    } else {
        f64::INFINITY
    };
    let mut t_max_r = if dz > 0.0 {
        (row as f64 + 1.0 - uz) * t_delta_r
    } else if dz < 0.0 {
        (uz - row as f64) * t_delta_r
    } else {
        f64::INFINITY
    };
    let limit = max_t / res;
    loop {
        let t = if t_max_c < t_max_r {
            col += step_c;
            let t = t_max_c;
            t_max_c += t_delta_c;
            t
        } else {
            row += step_r;
            let t = t_max_r;
            t_max_r += t_delta_r;
            t
        };
        if t > limit {
            return None;
        }
        if g.is_obstacle_i(col, row) {
            return Some(t * res);
        }
    }
}

/// Smallest `t ≥ 0` where the ray meets the disc, 0 when starting inside.
pub fn ray_circle(x: f64, z: f64, dx: f64, dz: f64, cx: f64, cz: f64, r: f64) -> Option<f64> {
    let (ox, oz) = (x - cx, z - cz);
    let c = ox * ox + oz * oz - r * r;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = ox * dx + oz * dz;
    if b >= 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

/// Casts one ray at absolute angle `phi` (clockwise from +z).
pub fn cast_ray(env: &EnvironmentSpec, x: f64, z: f64, phi: f64, d_max: f64) -> RayHit {
    let (dx, dz) = (phi.sin(), phi.cos());
    let wall = first_wall(env, x, z, dx, dz, d_max);
    let mut best: Option<(f64, usize)> = None;
    for (i, o) in env.objects.iter().enumerate() {
        if let Some(t) = ray_circle(x, z, dx, dz, o.position[0], o.position[1], o.footprint_radius) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    match (wall, best) {
        (_, Some((t, i))) if t <= d_max && wall.is_none_or(|w| t <= w) => RayHit { distance: t, kind: HitKind::Object(i) },
        (Some(w), _) => RayHit { distance: w, kind: HitKind::Wall },
        _ => RayHit { distance: d_max, kind: HitKind::Nothing },
    }
}

pub fn cast_rays(env: &EnvironmentSpec, pose: &Pose, params: &ObservationParams) -> Vec<RayHit> {
    cast_rays_at(env, pose.x, pose.z, pose.theta(), params)
}

pub fn cast_rays_at(env: &EnvironmentSpec, x: f64, z: f64, theta: f64, params: &ObservationParams) -> Vec<RayHit> {
    (0..params.rays).map(|i| cast_ray(env, x, z, theta + params.ray_offset(i), params.d_max)).collect()
}

/// Encodes ray hits as `[depth, wall, class_0 .. class_{|O|-1}, nothing]` per ray.
pub fn encode_hits(env: &EnvironmentSpec, hits: &[RayHit], params: &ObservationParams) -> Vec<f32> {
    let n = env.n_object_classes();
    let block = params.block(n);
    let mut f = vec![0.0f32; hits.len() * block];
    for (r, h) in hits.iter().enumerate() {
        let b = &mut f[r * block..(r + 1) * block];
        b[0] = (h.distance / params.d_max).clamp(0.0, 1.0) as f32;
        let slot = match h.kind {
            HitKind::Wall => 1,
            HitKind::Object(i) => 2 + env.objects[i].class_id,
            HitKind::Nothing => n + 1,
        };
        b[slot] = 1.0;
    }
    f
}

/// Frame feature of length `R·(|O|+2)`.
pub fn egocentric_features(env: &EnvironmentSpec, pose: &Pose, params: &ObservationParams) -> Vec<f32> {
    encode_hits(env, &cast_rays(env, pose, params), params)
}

pub fn egocentric_features_at(env: &EnvironmentSpec, x: f64, z: f64, theta: f64, params: &ObservationParams) -> Vec<f32> {
    encode_hits(env, &cast_rays_at(env, x, z, theta, params), params)
}

/// Whether the segment between two points crosses no obstacle cell.
pub fn segment_clear(env: &EnvironmentSpec, a: [f64; 2], b: [f64; 2]) -> bool {
    let (vx, vz) = (b[0] - a[0], b[1] - a[1]);
    let len = (vx * vx + vz * vz).sqrt();
    if len == 0.0 {
        return env.is_free_at(a[0], a[1]);
    }
    first_wall(env, a[0], a[1], vx / len, vz / len, len).is_none()
}

/// Center plus eight boundary points of an object's footprint.
pub fn footprint_samples(center: [f64; 2], radius: f64) -> [[f64; 2]; 9] {
    let mut s = [center; 9];
    for (k, p) in s.iter_mut().skip(1).enumerate() {
        let a = k as f64 * std::f64::consts::FRAC_PI_4;
        *p = [center[0] + radius * a.sin(), center[1] + radius * a.cos()];
    }
    s
}

/// True when some footprint sample has a clear line of sight from `position`.
pub fn is_visible_any_angle(env: &EnvironmentSpec, position: [f64; 2], object: usize) -> bool {
    let o = &env.objects[object];
    footprint_samples(o.position, o.footprint_radius).iter().any(|&p| segment_clear(env, position, p))
}

/// Fraction of FOV rays whose first hit is the given object instance.
pub fn seen_fraction(env: &EnvironmentSpec, pose: &Pose, object: usize, params: &ObservationParams) -> f64 {
    seen_fraction_from_hits(&cast_rays(env, pose, params), object)
}

pub fn seen_fraction_from_hits(hits: &[RayHit], object: usize) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|h| h.kind == HitKind::Object(object)).count() as f64 / hits.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VisitTarget {
    Object(usize),
    /// Room label.
    Room(usize),
}

pub fn is_visited(env: &EnvironmentSpec, position: [f64; 2], target: VisitTarget) -> bool {
    match target {
        VisitTarget::Object(i) => {
            let p = env.objects[i].position;
            ((position[0] - p[0]).powi(2) + (position[1] - p[1]).powi(2)).sqrt() < VISIT_RADIUS
        }
        VisitTarget::Room(label) => crate::worldgen::room_at(env, position).ok().flatten() == Some(label),
    }
}
