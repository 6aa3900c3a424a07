//! Local environment state labels: for each object class, the direction of
//! the nearest instance when it is close and visible from somewhere.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Pose;
use crate::observation::is_visible_any_angle;
use crate::worldgen::EnvironmentSpec;

pub const ABSENT: u8 = 0;
pub const FORWARD: u8 = 1;
pub const RIGHT: u8 = 2;
pub const BEHIND: u8 = 3;
pub const LEFT: u8 = 4;
pub const N_STATES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("target coincides with the agent position")]
    Coincident,
    #[error("label entry {0} out of range")]
    Range(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionParams {
    /// Proximity radius in meters (strict `<`).
    pub delta: f64,
}

impl Default for DirectionParams {
    fn default() -> Self {
        Self { delta: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalStateLabel(pub Vec<u8>);

impl LocalStateLabel {
    pub fn new(entries: Vec<u8>) -> Result<Self, LabelError> {
        if let Some(&e) = entries.iter().find(|&&e| e as usize >= N_STATES) {
            return Err(LabelError::Range(e));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[u8] {
        &self.0
    }
}

/// Clockwise angle in `[0, 2π)` from the heading to the agent→target vector.
pub fn relative_angle(pose: &Pose, target: [f64; 2]) -> Result<f64, LabelError> {
    let (vx, vz) = (target[0] - pose.x, target[1] - pose.z);
    if vx == 0.0 && vz == 0.0 {
        return Err(LabelError::Coincident);
    }
    let a = (vx.atan2(vz) - pose.theta()).rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π
    Ok(if a >= TAU { 0.0 } else { a })
}

/// Half-open bins centered on the four cardinal directions.
pub fn discretize_direction(angle: f64) -> u8 {
    let a = angle.rem_euclid(TAU);
    if !(FRAC_PI_4..7.0 * FRAC_PI_4).contains(&a) {
        FORWARD
    } else if a < 3.0 * FRAC_PI_4 {
        RIGHT
    } else if a < 5.0 * FRAC_PI_4 {
        BEHIND
    } else {
        LEFT
    }
}

/// Nearest instance index per class; ties go to the lower index.
fn nearest_per_class(env: &EnvironmentSpec, p: [f64; 2]) -> Vec<Option<(usize, f64)>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; env.n_object_classes()];
    for (i, o) in env.objects.iter().enumerate() {
        let d = (o.position[0] - p[0]).hypot(o.position[1] - p[1]);
        let slot = &mut best[o.class_id];
        if slot.is_none_or(|(_, bd)| d < bd) {
            *slot = Some((i, d));
        }
    }
    best
}

pub fn local_state_label(env: &EnvironmentSpec, pose: &Pose, params: &DirectionParams) -> LocalStateLabel {
    let p = pose.position();
    let y = nearest_per_class(env, p)
        .into_iter()
        .map(|slot| match slot {
            Some((i, d)) if d < params.delta && is_visible_any_angle(env, p, i) => {
                // an agent standing on the center counts as facing it
                relative_angle(pose, env.objects[i].position).map(discretize_direction).unwrap_or(FORWARD)
            }
            _ => ABSENT,
        })
        .collect();
    LocalStateLabel(y)
}

/// Exhaustive reference labeler. Distances are sorted per class, visibility
/// is a slab test of each sight line against every obstacle cell in its
/// bounding box, and bearings come from forward/right projections.
pub fn oracle_local_state(env: &EnvironmentSpec, pose: &Pose, params: &DirectionParams) -> LocalStateLabel {
    let n = env.object_taxonomy.len();
    let mut y = vec![0u8; n];
    for (class, slot) in y.iter_mut().enumerate() {
        let mut cands: Vec<(f64, usize)> = env
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.class_id == class)
            .map(|(i, o)| {
                let dx = o.position[0] - pose.x;
                let dz = o.position[1] - pose.z;
                ((dx * dx + dz * dz).sqrt(), i)
            })
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some(&(dist, idx)) = cands.first() else { continue };
        if dist >= params.delta {
            continue;
        }
        let o = &env.objects[idx];
        let mut targets = vec![o.position];
        for k in 0..8 {
            let a = (k as f64 * 45.0).to_radians();
            targets.push([o.position[0] + o.footprint_radius * a.sin(), o.position[1] + o.footprint_radius * a.cos()]);
        }
        if !targets.iter().any(|&t| oracle_line_of_sight(env, [pose.x, pose.z], t)) {
            continue;
        }
        let (vx, vz) = (o.position[0] - pose.x, o.position[1] - pose.z);
        let th = pose.heading as f64 * (PI / 6.0);
        let fwd = vx * th.sin() + vz * th.cos();
        let right = vx * th.cos() - vz * th.sin();
        if fwd == 0.0 && right == 0.0 {
            *slot = FORWARD;
            continue;
        }
        let deg = right.atan2(fwd).to_degrees().rem_euclid(360.0);
        *slot = match deg {
            d if !(45.0..315.0).contains(&d) => 1,
            d if d < 135.0 => 2,
            d if d < 225.0 => 3,
            _ => 4,
        };
    }
    LocalStateLabel(y)
}

/// Liang-Barsky clip of segment `a→b` against every obstacle cell box.
fn oracle_line_of_sight(env: &EnvironmentSpec, a: [f64; 2], b: [f64; 2]) -> bool {
    let res = env.grid_resolution;
    let (w, h) = (env.occupancy.width() as i64, env.occupancy.height() as i64);
    let lo_c = ((a[0].min(b[0]) / res).floor() as i64 - 1).max(0);
    let hi_c = ((a[0].max(b[0]) / res).floor() as i64 + 1).min(w - 1);
    let lo_r = ((a[1].min(b[1]) / res).floor() as i64 - 1).max(0);
    let hi_r = ((a[1].max(b[1]) / res).floor() as i64 + 1).min(h - 1);
    for r in lo_r..=hi_r {
        for c in lo_c..=hi_c {
            if !env.occupancy.is_obstacle_i(c, r) {
                continue;
            }
            let (x0, x1) = (c as f64 * res, (c + 1) as f64 * res);
            let (z0, z1) = (r as f64 * res, (r + 1) as f64 * res);
            if segment_hits_box(a, b, x0, x1, z0, z1) {
                return false;
            }
        }
    }
    true
}

fn segment_hits_box(a: [f64; 2], b: [f64; 2], x0: f64, x1: f64, z0: f64, z1: f64) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d[0], a[0] - x0), (d[0], x1 - a[0]), (-d[1], a[1] - z0), (d[1], z1 - a[1])] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    // touching a box face from outside over zero length is not a crossing
    t1 > t0
}
