//! Procedural indoor environments: guillotine-split floorplans on an
//! occupancy grid, doors that keep the free space connected, and labeled
//! object instances drawn from per-room placement priors.

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const OBJECT_CLASSES: [&str; 8] = ["chair", "table", "couch", "bed", "sink", "toilet", "tv", "plant"];
pub const ROOM_CLASSES: [&str; 6] = ["kitchen", "bedroom", "bathroom", "living_room", "hallway", "office"];

const HALLWAY: usize = 4;

/// Relative frequency of each object class (columns, `OBJECT_CLASSES` order)
/// given the room label (rows, `ROOM_CLASSES` order).
pub const PLACEMENT_PRIOR: [[f64; 8]; 6] = [
    // chair table couch bed  sink toilet tv  plant
    [3.0, 3.0, 0.0, 0.0, 4.0, 0.0, 0.0, 1.0], // kitchen
    [1.0, 0.0, 0.0, 5.0, 0.0, 0.0, 2.0, 1.0], // bedroom
    [0.0, 0.0, 0.0, 0.0, 4.0, 5.0, 0.0, 0.5], // bathroom
    [1.0, 2.0, 5.0, 0.0, 0.0, 0.0, 3.0, 2.0], // living room
    [1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0], // hallway
    [4.0, 4.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0], // office
];

pub const DEFAULT_RESOLUTION: f64 = 0.125;
pub const DEFAULT_FOOTPRINT: f64 = 0.2;
/// Door width in cells (1 m at the default resolution).
const DOOR_CELLS: usize = 8;
const EXTRA_DOOR_PROB: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("infeasible layout: {0}")]
    Infeasible(String),
    #[error("position ({x:.3}, {z:.3}) is outside the grid")]
    OutOfBounds { x: f64, z: f64 },
    #[error("schema version {found} unsupported (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("invalid environment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl Cell {
    pub fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

/// Axis-aligned rectangle in meters, half-open on the high side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub z0: f64,
    pub x1: f64,
    pub z1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        x >= self.x0 && x < self.x1 && z >= self.z0 && z < self.z1
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.z0 + self.z1) / 2.0]
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.z1 - self.z0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub label: usize,
    pub bounds: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Door {
    /// Indices into `EnvironmentSpec::rooms`.
    pub rooms: [usize; 2],
    pub cells: Vec<Cell>,
}

impl Door {
    /// Center of the door opening in meters.
    pub fn center(&self, resolution: f64) -> [f64; 2] {
        let n = self.cells.len() as f64;
        let cx = self.cells.iter().map(|c| c.col as f64 + 0.5).sum::<f64>() / n;
        let cz = self.cells.iter().map(|c| c.row as f64 + 0.5).sum::<f64>() / n;
        [cx * resolution, cz * resolution]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class_id: usize,
    /// (x, z) in meters.
    pub position: [f64; 2],
    pub footprint_radius: f64,
}

/// Boolean obstacle grid, `true` = obstacle. Serialized as a row-major
/// base64 bitset (bit `i` of the stream is cell `i`, LSB first per byte).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RawGrid", try_from = "RawGrid")]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    width: usize,
    height: usize,
    bits: String,
}

impl From<OccupancyGrid> for RawGrid {
    fn from(g: OccupancyGrid) -> Self {
        let mut bytes = vec![0u8; g.cells.len().div_ceil(8)];
        for (i, &c) in g.cells.iter().enumerate() {
            if c {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        RawGrid { width: g.width, height: g.height, bits: base64::engine::general_purpose::STANDARD.encode(bytes) }
    }
}

impl TryFrom<RawGrid> for OccupancyGrid {
    type Error = String;

    fn try_from(r: RawGrid) -> Result<Self, String> {
        let bytes = base64::engine::general_purpose::STANDARD.decode(r.bits.as_bytes()).map_err(|e| e.to_string())?;
        let n = r.width * r.height;
        if bytes.len() != n.div_ceil(8) {
            return Err(format!("bitset holds {} bytes, expected {}", bytes.len(), n.div_ceil(8)));
        }
        let cells = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(OccupancyGrid { width: r.width, height: r.height, cells })
    }
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        Self { width, height, cells: vec![fill; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.cells[c.row * self.width + c.col]
    }

    /// Out-of-grid cells count as obstacles.
    pub fn is_obstacle_i(&self, col: i64, row: i64) -> bool {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            return true;
        }
        self.cells[row as usize * self.width + col as usize]
    }

    pub fn set(&mut self, c: Cell, obstacle: bool) {
        self.cells[c.row * self.width + c.col] = obstacle;
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| Cell::new(c, r))).filter(|&c| !self.is_obstacle(c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub schema_version: u32,
    pub id: String,
    pub seed: u64,
    pub grid_resolution: f64,
    pub occupancy: OccupancyGrid,
    pub rooms: Vec<Room>,
    pub doors: Vec<Door>,
    pub objects: Vec<ObjectInstance>,
    pub object_taxonomy: Vec<String>,
    pub room_taxonomy: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_rooms: usize,
    /// Side length of the square floor in meters.
    pub grid_size: f64,
    pub objects_per_room: usize,
    pub min_room_side: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { n_rooms: 5, grid_size: 12.0, objects_per_room: 3, min_room_side: 2.5 }
    }
}

impl EnvironmentSpec {
    pub fn n_object_classes(&self) -> usize {
        self.object_taxonomy.len()
    }

    pub fn n_room_classes(&self) -> usize {
        self.room_taxonomy.len()
    }

    pub fn width_m(&self) -> f64 {
        self.occupancy.width() as f64 * self.grid_resolution
    }

    pub fn height_m(&self) -> f64 {
        self.occupancy.height() as f64 * self.grid_resolution
    }

    pub fn cell_of(&self, x: f64, z: f64) -> Option<Cell> {
        if !(x >= 0.0 && z >= 0.0) {
            return None;
        }
        let col = (x / self.grid_resolution).floor() as usize;
        let row = (z / self.grid_resolution).floor() as usize;
        (col < self.occupancy.width() && row < self.occupancy.height()).then_some(Cell::new(col, row))
    }

    pub fn cell_center(&self, c: Cell) -> [f64; 2] {
        [(c.col as f64 + 0.5) * self.grid_resolution, (c.row as f64 + 0.5) * self.grid_resolution]
    }

    pub fn is_free_at(&self, x: f64, z: f64) -> bool {
        self.cell_of(x, z).is_some_and(|c| !self.occupancy.is_obstacle(c))
    }

    /// Index of the room whose rectangle contains the point.
    pub fn room_index_at(&self, x: f64, z: f64) -> Result<Option<usize>, WorldError> {
        if self.cell_of(x, z).is_none() {
            return Err(WorldError::OutOfBounds { x, z });
        }
        Ok(self.rooms.iter().position(|r| r.bounds.contains(x, z)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("environment serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WorldError> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| WorldError::Invalid(e.to_string()))?;
        let found = v.get("schema_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(WorldError::Schema { found });
        }
        serde_json::from_value(v).map_err(|e| WorldError::Invalid(e.to_string()))
    }
}

/// Label of the room containing `position`, `None` for door cells, walls and
/// anything outside every room rectangle.
pub fn room_at(env: &EnvironmentSpec, position: [f64; 2]) -> Result<Option<usize>, WorldError> {
    Ok(env.room_index_at(position[0], position[1])?.map(|i| env.rooms[i].label))
}

/// Cells with agent clearance: free, and every 8-neighbor is in-grid and free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NavMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl NavMask {
    pub fn new(env: &EnvironmentSpec) -> Self {
        let g = &env.occupancy;
        let (w, h) = (g.width(), g.height());
        let mut mask = vec![false; w * h];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let clear = (-1..=1).all(|dr| (-1..=1).all(|dc| !g.is_obstacle_i(c + dc, r + dr)));
                mask[r as usize * w + c as usize] = clear;
            }
        }
        Self { width: w, height: h, mask }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.col < self.width && c.row < self.height && self.mask[c.row * self.width + c.col]
    }

    pub fn contains_point(&self, resolution: f64, x: f64, z: f64) -> bool {
        if !(x >= 0.0 && z >= 0.0) {
            return false;
        }
        let c = Cell::new((x / resolution).floor() as usize, (z / resolution).floor() as usize);
        self.contains(c)
    }

    pub fn cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Cell::new(c, r)))
            .filter(|&c| self.mask[c.row * self.width + c.col])
            .collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn navigable_cells(env: &EnvironmentSpec) -> Vec<Cell> {
    NavMask::new(env).cells()
}

/// Rectangle of free cells: columns `[c0, c1)`, rows `[r0, r1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellRect {
    c0: usize,
    r0: usize,
    c1: usize,
    r1: usize,
}

impl CellRect {
    fn w(&self) -> usize {
        self.c1 - self.c0
    }
    fn h(&self) -> usize {
        self.r1 - self.r0
    }
}

struct Adjacency {
    a: usize,
    b: usize,
    /// Wall cells where a door may be carved, in order along the wall.
    candidates: Vec<Cell>,
}

fn adjacency(rects: &[CellRect]) -> Vec<Adjacency> {
    let mut out = Vec::new();
    for a in 0..rects.len() {
        for b in 0..rects.len() {
            if a == b {
                continue;
            }
            let (ra, rb) = (rects[a], rects[b]);
            // b to the right of a, one wall column in between
            if ra.c1 + 1 == rb.c0 {
                let lo = ra.r0.max(rb.r0);
                let hi = ra.r1.min(rb.r1);
                if hi > lo {
                    let cells = (lo..hi).map(|r| Cell::new(ra.c1, r)).collect();
                    out.push(Adjacency { a, b, candidates: cells });
                }
            }
            // b below a (larger z), one wall row in between
            if ra.r1 + 1 == rb.r0 {
                let lo = ra.c0.max(rb.c0);
                let hi = ra.c1.min(rb.c1);
                if hi > lo {
                    let cells = (lo..hi).map(|c| Cell::new(c, ra.r1)).collect();
                    out.push(Adjacency { a, b, candidates: cells });
                }
            }
        }
    }
    out
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates a floorplan. Pure function of `(seed, params)`.
pub fn generate_environment(seed: u64, params: &GenParams) -> Result<EnvironmentSpec, WorldError> {
    if params.n_rooms < 2 {
        return Err(WorldError::Infeasible(format!("need at least 2 rooms, got {}", params.n_rooms)));
    }
    if params.grid_size < 8.0 {
        return Err(WorldError::Infeasible(format!("grid must be at least 8 m, got {}", params.grid_size)));
    }
    if params.objects_per_room == 0 {
        return Err(WorldError::Infeasible("objects_per_room must be at least 1".into()));
    }
    let res = DEFAULT_RESOLUTION;
    let n = (params.grid_size / res).round() as usize;
    let min_side = ((params.min_room_side / res).ceil() as usize).max(DOOR_CELLS + 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Recursive guillotine split of the interior, one wall line per cut.
    let mut rects = vec![CellRect { c0: 1, r0: 1, c1: n - 1, r1: n - 1 }];
    while rects.len() < params.n_rooms {
        let mut order: Vec<usize> = (0..rects.len()).collect();
        order.sort_by(|&i, &j| (rects[j].w() * rects[j].h()).cmp(&(rects[i].w() * rects[i].h())).then(i.cmp(&j)));
        let pick = order.into_iter().find(|&i| rects[i].w().max(rects[i].h()) > 2 * min_side);
        let Some(i) = pick else {
            return Err(WorldError::Infeasible(format!(
                "{} rooms of side >= {} m do not fit in {} m",
                params.n_rooms, params.min_room_side, params.grid_size
            )));
        };
        let r = rects.swap_remove(i);
        let vertical = if r.w() == r.h() { rng.gen_bool(0.5) } else { r.w() > r.h() };
        let start = if vertical { r.c0 } else { r.r0 };
        let span = if vertical { r.w() } else { r.h() };
        if span < 2 * min_side + 1 {
            // the longer side is too short; try the other axis next round
            return Err(WorldError::Infeasible("no splittable axis".into()));
        }
        let wall = start + rng.gen_range(min_side..=span - min_side - 1);
        let (a, b) = if vertical {
            (CellRect { c1: wall, ..r }, CellRect { c0: wall + 1, ..r })
        } else {
            (CellRect { r1: wall, ..r }, CellRect { r0: wall + 1, ..r })
        };
        rects.push(a);
        rects.push(b);
    }
    // Stable room order: by row then column of the top-left corner.
    rects.sort_by_key(|r| (r.r0, r.c0));

    let mut occupancy = OccupancyGrid::new(n, n, true);
    for r in &rects {
        for row in r.r0..r.r1 {
            for col in r.c0..r.c1 {
                occupancy.set(Cell::new(col, row), false);
            }
        }
    }

    // Doors: random spanning tree over adjacencies, plus extras.
    let mut adj: Vec<Adjacency> = adjacency(&rects).into_iter().filter(|a| a.candidates.len() >= DOOR_CELLS).collect();
    adj.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..rects.len()).collect();
    let mut doors = Vec::new();
    for e in &adj {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        let tree_edge = ra != rb;
        if tree_edge {
            parent[ra] = rb;
        }
        let extra = !tree_edge && rng.gen_bool(EXTRA_DOOR_PROB);
        if tree_edge || extra {
            let s = rng.gen_range(0..=e.candidates.len() - DOOR_CELLS);
            let cells: Vec<Cell> = e.candidates[s..s + DOOR_CELLS].to_vec();
            for &c in &cells {
                occupancy.set(c, false);
            }
            let mut rooms = [e.a, e.b];
            rooms.sort();
            doors.push(Door { rooms, cells });
        }
    }
    let root = find(&mut parent, 0);
    if (0..rects.len()).any(|i| find(&mut parent, i) != root) {
        return Err(WorldError::Infeasible("rooms cannot be connected by 1 m doors".into()));
    }

    // Labels: elongated narrow rooms are hallways, the rest draw from a bag.
    let mut bag: Vec<usize> = Vec::new();
    let mut rooms = Vec::with_capacity(rects.len());
    for r in &rects {
        let (w, h) = (r.w() as f64 * res, r.h() as f64 * res);
        let aspect = w.max(h) / w.min(h);
        let label = if aspect >= 2.2 && w.min(h) < 3.5 {
            HALLWAY
        } else {
            if bag.is_empty() {
                bag = (0..ROOM_CLASSES.len()).filter(|&l| l != HALLWAY).collect();
                bag.shuffle(&mut rng);
            }
            bag.pop().unwrap()
        };
        let bounds = Rect { x0: r.c0 as f64 * res, z0: r.r0 as f64 * res, x1: r.c1 as f64 * res, z1: r.r1 as f64 * res };
        rooms.push(Room { label, bounds });
    }

    let margin = DEFAULT_FOOTPRINT + 0.3;
    let mut objects = Vec::new();
    for room in &rooms {
        let count = rng.gen_range(1..=params.objects_per_room);
        for _ in 0..count {
            let class_id = weighted_pick(&mut rng, &PLACEMENT_PRIOR[room.label]);
            let b = room.bounds;
            let x = rng.gen_range(b.x0 + margin..b.x1 - margin);
            let z = rng.gen_range(b.z0 + margin..b.z1 - margin);
            objects.push(ObjectInstance { class_id, position: [x, z], footprint_radius: DEFAULT_FOOTPRINT });
        }
    }

    Ok(EnvironmentSpec {
        schema_version: SCHEMA_VERSION,
        id: format!("env-{seed}"),
        seed,
        grid_resolution: res,
        occupancy,
        rooms,
        doors,
        objects,
        object_taxonomy: OBJECT_CLASSES.iter().map(|s| s.to_string()).collect(),
        room_taxonomy: ROOM_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Number of free cells reachable from `start` through 4-connected free cells.
pub fn flood_fill_free(env: &EnvironmentSpec, start: Cell) -> usize {
    let g = &env.occupancy;
    let mut seen = vec![false; g.width() * g.height()];
    let mut stack = vec![start];
    let mut count = 0;
    while let Some(c) = stack.pop() {
        let i = c.row * g.width() + c.col;
        if seen[i] || g.is_obstacle(c) {
            continue;
        }
        seen[i] = true;
        count += 1;
        let (col, row) = (c.col as i64, c.row as i64);
        for (dc, dr) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            if !g.is_obstacle_i(col + dc, row + dr) {
                stack.push(Cell::new((col + dc) as usize, (row + dr) as usize));
            }
        }
    }
    count
}

/// Checks every structural invariant of an environment.
pub fn check_invariants(env: &EnvironmentSpec) -> Result<(), WorldError> {
    let bad = |m: String| Err(WorldError::Invalid(m));
    if env.schema_version != SCHEMA_VERSION {
        return Err(WorldError::Schema { found: env.schema_version });
    }
    for (i, r) in env.rooms.iter().enumerate() {
        if r.bounds.area() <= 0.0 {
            return bad(format!("room {i} has no area"));
        }
        if r.label >= env.room_taxonomy.len() {
            return bad(format!("room {i} label {} out of range", r.label));
        }
        for (j, s) in env.rooms.iter().enumerate().skip(i + 1) {
            let overlap = r.bounds.x0 < s.bounds.x1
                && s.bounds.x0 < r.bounds.x1
                && r.bounds.z0 < s.bounds.z1
                && s.bounds.z0 < r.bounds.z1;
            if overlap {
                return bad(format!("rooms {i} and {j} overlap"));
            }
        }
    }
    for (k, o) in env.objects.iter().enumerate() {
        if o.class_id >= env.object_taxonomy.len() {
            return bad(format!("object {k} class {} out of range", o.class_id));
        }
        let [x, z] = o.position;
        if !env.is_free_at(x, z) {
            return bad(format!("object {k} is not in free space"));
        }
        let inside = env.rooms.iter().filter(|r| r.bounds.contains(x, z)).count();
        if inside != 1 {
            return bad(format!("object {k} lies in {inside} rooms"));
        }
    }
    let res = env.grid_resolution;
    for (k, d) in env.doors.iter().enumerate() {
        for &c in &d.cells {
            if env.occupancy.is_obstacle(c) {
                return bad(format!("door {k} cell {c:?} is blocked"));
            }
            let [x, z] = env.cell_center(c);
            if env.rooms.iter().any(|r| r.bounds.contains(x, z)) {
                return bad(format!("door {k} cell {c:?} lies inside a room"));
            }
            let touching: Vec<usize> = env
                .rooms
                .iter()
                .enumerate()
                .filter(|(_, r)| {
                    [(res, 0.0), (-res, 0.0), (0.0, res), (0.0, -res)].iter().any(|(dx, dz)| r.bounds.contains(x + dx, z + dz))
                })
                .map(|(i, _)| i)
                .collect();
            if touching.len() != 2 || touching != d.rooms.to_vec() {
                return bad(format!("door {k} cell {c:?} touches rooms {touching:?}"));
            }
        }
    }
    let free: Vec<Cell> = env.occupancy.free_cells().collect();
    if let Some(&first) = free.first() {
        let reached = flood_fill_free(env, first);
        if reached != free.len() {
            return bad(format!("free space is disconnected: {reached} of {} cells reachable", free.len()));
        }
    }
    Ok(())
}
