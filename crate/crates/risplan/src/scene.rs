//! Urban scene representation: extruded-polygon buildings over a ground plane,
//! material table, tile grid, and the geometric queries used by the ray tracer.
//!
//! A scene is immutable once loaded; every query here is read-only and safe to
//! call from many threads at once.

use crate::geometry::{
    dist_point_polygon, dist_point_segment, dist_segment_segment, is_simple_polygon, point_in_polygon,
    signed_area, Vec2, Vec3,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Tolerance for grazing contacts: a sight line passing within this distance
/// of geometry counts as blocked.
pub const GRAZE_TOL: f64 = 1e-6;

/// Electromagnetic surface material.
///
/// `scatter_s` is the fraction of reflected energy diverted from the specular
/// direction into diffuse scattering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub id: String,
    pub eps_r: f64,
    pub sigma: f64,
    pub scatter_s: f64,
}

impl Material {
    pub fn new(id: &str, eps_r: f64, sigma: f64, scatter_s: f64) -> Self {
        Material { id: id.to_string(), eps_r, sigma, scatter_s }
    }
}

/// Building as a 2.5D extrusion: counterclockwise footprint plus height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub id: String,
    pub footprint: Vec<Vec2>,
    pub height: f64,
    pub material_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

/// Axis-aligned 2D scene bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds2 {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds2 {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scene JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("material '{0}': {1}")]
    BadMaterial(String, String),
    #[error("building '{0}': {1}")]
    BadBuilding(String, String),
    #[error("unknown material id '{0}' referenced by '{1}'")]
    UnknownMaterial(String, String),
    #[error("no facade within {tol} m of point ({x:.3}, {y:.3}, {z:.3})")]
    NoFacadeNearby { x: f64, y: f64, z: f64, tol: f64 },
}

/// Identifies the surface a ray interaction occurred on.
///
/// The derived ordering makes interaction sequences usable as deterministic
/// sort/deduplication keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SurfaceRef {
    /// Ground plane z = 0.
    Ground,
    /// Vertical wall: building index and footprint edge index.
    Wall { building: usize, edge: usize },
    /// Horizontal roof polygon at the building's height.
    Roof { building: usize },
}

/// Nearest-surface intersection result.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Distance from the ray origin, in meters.
    pub t: f64,
    pub point: Vec3,
    /// Unit normal oriented toward the ray origin (dot(normal, dir) < 0).
    pub normal: Vec3,
    /// Index into the scene material table.
    pub material: usize,
    pub surface: SurfaceRef,
}

/// Facade anchor returned by [`Scene::snap_to_facade`].
#[derive(Debug, Clone, Copy)]
pub struct FacadeAnchor {
    /// Point exactly on the wall face.
    pub center: Vec3,
    /// Horizontal unit normal pointing away from the building interior.
    pub outward_normal: Vec3,
    pub building: usize,
}

/// Precomputed vertical wall face.
#[derive(Debug, Clone)]
struct Wall {
    a: Vec2,
    b: Vec2,
    edge_dir: Vec2,
    edge_len: f64,
    /// Horizontal outward normal (unit).
    outward: Vec2,
    height: f64,
    building: usize,
    edge: usize,
    material: usize,
}

#[derive(Debug, Clone)]
struct Roof {
    building: usize,
    height: f64,
    material: usize,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn union(self, o: Aabb) -> Aabb {
        Aabb {
            min: Vec3::new(self.min.x.min(o.min.x), self.min.y.min(o.min.y), self.min.z.min(o.min.z)),
            max: Vec3::new(self.max.x.max(o.max.x), self.max.y.max(o.max.y), self.max.z.max(o.max.z)),
        }
    }

    fn centroid(self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    fn inflate(self, r: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::new(r, r, r),
            max: self.max + Vec3::new(r, r, r),
        }
    }

    /// Slab test; returns entry distance if the ray hits within [0, t_max].
    fn ray_enter(&self, origin: Vec3, inv_dir: Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0_f64;
        let mut t1 = t_max;
        for (o, inv, lo, hi) in [
            (origin.x, inv_dir.x, self.min.x, self.max.x),
            (origin.y, inv_dir.y, self.min.y, self.max.y),
            (origin.z, inv_dir.z, self.min.z, self.max.z),
        ] {
            if inv.is_infinite() && (o < lo || o > hi) {
                return None;
            }
            let mut near = (lo - o) * inv;
            let mut far = (hi - o) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// Face identifier inside the BVH: walls first, then roofs.
#[derive(Debug, Clone, Copy)]
enum FaceIdx {
    Wall(usize),
    Roof(usize),
}

#[derive(Debug)]
struct BvhNode {
    aabb: Aabb,
    /// Leaf: range into `items`. Internal: children indices.
    kind: BvhKind,
}

#[derive(Debug)]
enum BvhKind {
    Leaf { start: usize, len: usize },
    Internal { left: usize, right: usize },
}

#[derive(Debug)]
struct Bvh {
    nodes: Vec<BvhNode>,
    items: Vec<FaceIdx>,
}

const BVH_LEAF_SIZE: usize = 4;

impl Bvh {
    fn build(boxes: &[Aabb]) -> Bvh {
        let mut items: Vec<usize> = (0..boxes.len()).collect();
        let mut nodes = Vec::new();
        if boxes.is_empty() {
            nodes.push(BvhNode {
                aabb: Aabb { min: Vec3::ZERO, max: Vec3::ZERO },
                kind: BvhKind::Leaf { start: 0, len: 0 },
            });
            return Bvh { nodes, items: Vec::new() };
        }
        let root = Self::build_node(boxes, &mut items, 0, boxes.len(), &mut nodes);
        debug_assert_eq!(root, 0);
        Bvh { nodes, items: items.into_iter().map(FaceIdx::Wall).collect() }
    }

    fn build_node(
        boxes: &[Aabb],
        items: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> usize {
        let mut aabb = boxes[items[start]];
        for &i in &items[start + 1..end] {
            aabb = aabb.union(boxes[i]);
        }
        let idx = nodes.len();
        nodes.push(BvhNode { aabb, kind: BvhKind::Leaf { start, len: end - start } });
        if end - start <= BVH_LEAF_SIZE {
            return idx;
        }
        // Median split along the widest centroid axis.
        let ext = aabb.max - aabb.min;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let key = |i: usize| -> f64 {
            let c = boxes[i].centroid();
            match axis {
                0 => c.x,
                1 => c.y,
                _ => c.z,
            }
        };
        items[start..end].sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        let mid = (start + end) / 2;
        let left = Self::build_node(boxes, items, start, mid, nodes);
        let right = Self::build_node(boxes, items, mid, end, nodes);
        nodes[idx].kind = BvhKind::Internal { left, right };
        idx
    }
}

/// Complete urban scene with a prebuilt spatial index.
#[derive(Debug)]
pub struct Scene {
    materials: Vec<Material>,
    buildings: Vec<Building>,
    bounds: Bounds2,
    ground_material_id: String,
    ground_material: usize,
    walls: Vec<Wall>,
    roofs: Vec<Roof>,
    bvh: Bvh,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    materials: Vec<Material>,
    buildings: Vec<Building>,
    bounds: Bounds2,
    ground_material_id: String,
}

/// Load and validate a scene from the JSON format described in the README.
pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let file: SceneFile = serde_json::from_str(&text)?;
    Scene::new(file.materials, file.buildings, file.bounds, file.ground_material_id)
}

/// Serialize a scene back to its JSON file format.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    let file = SceneFile {
        materials: scene.materials.clone(),
        buildings: scene.buildings.clone(),
        bounds: scene.bounds,
        ground_material_id: scene.ground_material_id.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(SceneError::Parse)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

impl Scene {
    /// Validate inputs and build the spatial index.
    pub fn new(
        materials: Vec<Material>,
        buildings: Vec<Building>,
        bounds: Bounds2,
        ground_material_id: String,
    ) -> Result<Scene, SceneError> {
        for m in &materials {
            if !(m.eps_r.is_finite() && m.sigma.is_finite() && m.scatter_s.is_finite()) {
                return Err(SceneError::BadMaterial(m.id.clone(), "non-finite parameter".into()));
            }
            if m.eps_r < 1.0 {
                return Err(SceneError::BadMaterial(m.id.clone(), format!("eps_r {} < 1", m.eps_r)));
            }
            if m.sigma < 0.0 {
                return Err(SceneError::BadMaterial(m.id.clone(), format!("sigma {} < 0", m.sigma)));
            }
            if !(0.0..=1.0).contains(&m.scatter_s) {
                return Err(SceneError::BadMaterial(
                    m.id.clone(),
                    format!("scatter_s {} outside [0, 1]", m.scatter_s),
                ));
            }
        }
        let mat_index = |id: &str, owner: &str| -> Result<usize, SceneError> {
            materials
                .iter()
                .position(|m| m.id == id)
                .ok_or_else(|| SceneError::UnknownMaterial(id.to_string(), owner.to_string()))
        };
        let ground_material = mat_index(&ground_material_id, "ground")?;

        let mut walls = Vec::new();
        let mut roofs = Vec::new();
        for (bi, b) in buildings.iter().enumerate() {
            if b.footprint.len() < 3 {
                return Err(SceneError::BadBuilding(b.id.clone(), "footprint has fewer than 3 vertices".into()));
            }
            if b.footprint.iter().any(|v| !v.is_finite()) {
                return Err(SceneError::BadBuilding(b.id.clone(), "non-finite footprint vertex".into()));
            }
            if b.height <= 0.0 || !b.height.is_finite() {
                return Err(SceneError::BadBuilding(b.id.clone(), format!("height {} must be > 0", b.height)));
            }
            if !is_simple_polygon(&b.footprint) {
                return Err(SceneError::BadBuilding(b.id.clone(), "footprint is self-intersecting".into()));
            }
            if signed_area(&b.footprint) <= 0.0 {
                return Err(SceneError::BadBuilding(b.id.clone(), "footprint must be counterclockwise".into()));
            }
            if b.footprint.iter().any(|v| !bounds.contains(*v)) {
                return Err(SceneError::BadBuilding(b.id.clone(), "footprint outside scene bounds".into()));
            }
            let material = mat_index(&b.material_id, &b.id)?;
            let n = b.footprint.len();
            for e in 0..n {
                let a = b.footprint[e];
                let bb = b.footprint[(e + 1) % n];
                let d = bb - a;
                let len = d.norm();
                if len < 1e-9 {
                    return Err(SceneError::BadBuilding(b.id.clone(), format!("degenerate edge {e}")));
                }
                let dir = Vec2::new(d.x / len, d.y / len);
                // CCW footprint: interior lies left of each directed edge,
                // so the outward normal is the right-hand perpendicular.
                let outward = Vec2::new(dir.y, -dir.x);
                walls.push(Wall {
                    a,
                    b: bb,
                    edge_dir: dir,
                    edge_len: len,
                    outward,
                    height: b.height,
                    building: bi,
                    edge: e,
                    material,
                });
            }
            roofs.push(Roof { building: bi, height: b.height, material });
        }

        let mut face_boxes = Vec::with_capacity(walls.len() + roofs.len());
        for w in &walls {
            face_boxes.push(Aabb {
                min: Vec3::new(w.a.x.min(w.b.x), w.a.y.min(w.b.y), 0.0),
                max: Vec3::new(w.a.x.max(w.b.x), w.a.y.max(w.b.y), w.height),
            });
        }
        for r in &roofs {
            let fp = &buildings[r.building].footprint;
            let (mut lo, mut hi) = (fp[0], fp[0]);
            for v in fp {
                lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
                hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
            }
            face_boxes.push(Aabb { min: lo.at_height(r.height), max: hi.at_height(r.height) });
        }

        let mut bvh = Bvh::build(&face_boxes);
        // Rewrite the generic item indices into wall/roof references.
        let n_walls = walls.len();
        for item in &mut bvh.items {
            if let FaceIdx::Wall(i) = *item {
                if i >= n_walls {
                    *item = FaceIdx::Roof(i - n_walls);
                }
            }
        }

        Ok(Scene {
            materials,
            buildings,
            bounds,
            ground_material_id,
            ground_material,
            walls,
            roofs,
            bvh,
        })
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }

    pub fn bounds(&self) -> Bounds2 {
        self.bounds
    }

    pub fn ground_material(&self) -> usize {
        self.ground_material
    }

    pub fn ground_material_id(&self) -> &str {
        &self.ground_material_id
    }

    /// Rebuild the scene with a replacement material table of identical layout.
    pub fn with_materials(&self, materials: Vec<Material>) -> Result<Scene, SceneError> {
        Scene::new(materials, self.buildings.clone(), self.bounds, self.ground_material_id.clone())
    }

    /// True when the point lies inside (or on the surface of) any building.
    pub fn inside_building(&self, p: Vec3) -> bool {
        self.buildings.iter().any(|b| p.z <= b.height && p.z >= 0.0 && point_in_polygon(p.xy(), &b.footprint))
    }

    /// Valid endpoint for tracing: above ground and outside every building.
    pub fn is_clear_endpoint(&self, p: Vec3) -> bool {
        p.z >= 0.0 && !self.inside_building(p)
    }

    fn wall_hit(&self, w: &Wall, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<(f64, Vec3, Vec3)> {
        let n = Vec3::new(w.outward.x, w.outward.y, 0.0);
        let denom = dir.dot(n);
        if denom.abs() < 1e-15 {
            return None;
        }
        let anchor = w.a.at_height(0.0);
        let t = (anchor - origin).dot(n) / denom;
        if t <= t_min || t > t_max {
            return None;
        }
        let p = origin + dir * t;
        if p.z < 0.0 || p.z > w.height {
            return None;
        }
        let s = (p.xy() - w.a).dot(w.edge_dir);
        if s < 0.0 || s > w.edge_len {
            return None;
        }
        let normal = if denom < 0.0 { n } else { -n };
        Some((t, p, normal))
    }

    fn roof_hit(&self, r: &Roof, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<(f64, Vec3, Vec3)> {
        if dir.z.abs() < 1e-15 {
            return None;
        }
        let t = (r.height - origin.z) / dir.z;
        if t <= t_min || t > t_max {
            return None;
        }
        let p = origin + dir * t;
        if !point_in_polygon(p.xy(), &self.buildings[r.building].footprint) {
            return None;
        }
        let normal = if dir.z < 0.0 { Vec3::Z } else { -Vec3::Z };
        Some((t, p, normal))
    }

    /// Nearest surface hit along a ray, or `None` when nothing is crossed.
    ///
    /// Faces are two-sided; the returned normal always faces the ray origin.
    /// Results are deterministic: exact distance ties resolve to the smallest
    /// surface key.
    pub fn intersect_first(&self, origin: Vec3, dir: Vec3, max_range: f64) -> Option<Hit> {
        debug_assert!((dir.norm() - 1.0).abs() < 1e-9, "direction must be unit length");
        let mut best: Option<Hit> = None;
        let mut t_best = max_range;

        // Ground plane z = 0 (infinite).
        if dir.z.abs() > 1e-15 {
            let t = -origin.z / dir.z;
            if t > 1e-9 && t <= t_best {
                let p = origin + dir * t;
                let normal = if origin.z >= 0.0 { Vec3::Z } else { -Vec3::Z };
                best = Some(Hit { t, point: p, normal, material: self.ground_material, surface: SurfaceRef::Ground });
                t_best = t;
            }
        }

        let inv_dir = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0usize];
        while let Some(node_idx) = stack.pop() {
            let node = &self.bvh.nodes[node_idx];
            if node.aabb.ray_enter(origin, inv_dir, t_best).is_none() {
                continue;
            }
            match node.kind {
                BvhKind::Internal { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
                BvhKind::Leaf { start, len } => {
                    for item in &self.bvh.items[start..start + len] {
                        let (hit, surface, material) = match *item {
                            FaceIdx::Wall(i) => {
                                let w = &self.walls[i];
                                (
                                    self.wall_hit(w, origin, dir, 1e-9, t_best),
                                    SurfaceRef::Wall { building: w.building, edge: w.edge },
                                    w.material,
                                )
                            }
                            FaceIdx::Roof(i) => {
                                let r = &self.roofs[i];
                                (
                                    self.roof_hit(r, origin, dir, 1e-9, t_best),
                                    SurfaceRef::Roof { building: r.building },
                                    r.material,
                                )
                            }
                        };
                        if let Some((t, point, normal)) = hit {
                            let replace = match &best {
                                None => true,
                                Some(b) => t < b.t || (t == b.t && surface < b.surface),
                            };
                            if replace {
                                best = Some(Hit { t, point, normal, material, surface });
                                t_best = t;
                            }
                        }
                    }
                }
            }
        }
        best
    }

    /// Line-of-sight test over the open segment (a, b).
    ///
    /// Conservative: any contact within [`GRAZE_TOL`] of geometry blocks the
    /// segment, except contacts at the endpoints themselves (so a point sitting
    /// exactly on a facade can still see outward).
    pub fn los_visible(&self, a: Vec3, b: Vec3) -> bool {
        if a.z < 0.0 || b.z < 0.0 {
            return false;
        }
        let len = a.distance(b);
        if len < 1e-12 {
            return true;
        }
        let seg_box = Aabb {
            min: Vec3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
            max: Vec3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
        }
        .inflate(GRAZE_TOL);

        let mut stack = vec![0usize];
        while let Some(node_idx) = stack.pop() {
            let node = &self.bvh.nodes[node_idx];
            if !boxes_overlap(node.aabb.inflate(GRAZE_TOL), seg_box) {
                continue;
            }
            match node.kind {
                BvhKind::Internal { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
                BvhKind::Leaf { start, len: n } => {
                    for item in &self.bvh.items[start..start + n] {
                        let (d, contact_t) = match *item {
                            FaceIdx::Wall(i) => self.segment_wall_distance(a, b, &self.walls[i]),
                            FaceIdx::Roof(i) => self.segment_roof_distance(a, b, &self.roofs[i]),
                        };
                        if d < GRAZE_TOL {
                            // Exempt contacts at the segment endpoints.
                            let at_end = contact_t * len < GRAZE_TOL || (1.0 - contact_t) * len < GRAZE_TOL;
                            if !at_end {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        true
    }

    /// Distance from segment to a wall rectangle, with the segment parameter
    /// of the closest approach.
    fn segment_wall_distance(&self, a: Vec3, b: Vec3, w: &Wall) -> (f64, f64) {
        let n = Vec3::new(w.outward.x, w.outward.y, 0.0);
        let dir = b - a;
        let len = dir.norm();
        let d_unit = dir / len;
        let denom = d_unit.dot(n);
        let anchor = w.a.at_height(0.0);
        if denom.abs() > 1e-15 {
            let t = (anchor - a).dot(n) / (denom * len);
            if (0.0..=1.0).contains(&t) {
                let p = a + dir * t;
                let s = (p.xy() - w.a).dot(w.edge_dir);
                if s >= 0.0 && s <= w.edge_len && p.z >= 0.0 && p.z <= w.height {
                    return (0.0, t);
                }
            }
        }
        // No proper crossing: closest approach to the rectangle border.
        let corners = [
            w.a.at_height(0.0),
            w.b.at_height(0.0),
            w.b.at_height(w.height),
            w.a.at_height(w.height),
        ];
        let mut best = f64::INFINITY;
        let mut best_t = 0.0;
        for i in 0..4 {
            let (p, q) = (corners[i], corners[(i + 1) % 4]);
            let d = dist_segment_segment(a, b, p, q);
            if d < best {
                best = d;
                best_t = closest_param(a, b, p, q);
            }
        }
        // Also the face interior for endpoints projecting onto it.
        for (pt, t) in [(a, 0.0), (b, 1.0)] {
            let off = (pt - anchor).dot(n);
            let proj = pt - n * off;
            let s = (proj.xy() - w.a).dot(w.edge_dir);
            if s >= 0.0 && s <= w.edge_len && proj.z >= 0.0 && proj.z <= w.height {
                let d = off.abs();
                if d < best {
                    best = d;
                    best_t = t;
                }
            }
        }
        (best, best_t)
    }

    fn segment_roof_distance(&self, a: Vec3, b: Vec3, r: &Roof) -> (f64, f64) {
        let fp = &self.buildings[r.building].footprint;
        let dz = b.z - a.z;
        if dz.abs() > 1e-15 {
            let t = (r.height - a.z) / dz;
            if (0.0..=1.0).contains(&t) {
                let p = a + (b - a) * t;
                if point_in_polygon(p.xy(), fp) {
                    return (0.0, t);
                }
            }
        }
        // Closest approach to the roof outline at roof height.
        let mut best = f64::INFINITY;
        let mut best_t = 0.0;
        let n = fp.len();
        for i in 0..n {
            let p = fp[i].at_height(r.height);
            let q = fp[(i + 1) % n].at_height(r.height);
            let d = dist_segment_segment(a, b, p, q);
            if d < best {
                best = d;
                best_t = closest_param(a, b, p, q);
            }
        }
        // Endpoint directly above/below the roof interior.
        for (pt, t) in [(a, 0.0), (b, 1.0)] {
            if point_in_polygon(pt.xy(), fp) {
                let d = (pt.z - r.height).abs();
                if d < best {
                    best = d;
                    best_t = t;
                }
            }
        }
        (best, best_t)
    }

    /// Project a point onto the nearest wall face within `tol` meters.
    pub fn snap_to_facade(&self, point: Vec3) -> Result<FacadeAnchor, SceneError> {
        self.snap_to_facade_tol(point, 0.5)
    }

    pub fn snap_to_facade_tol(&self, point: Vec3, tol: f64) -> Result<FacadeAnchor, SceneError> {
        let mut best: Option<(f64, usize)> = None;
        for (i, w) in self.walls.iter().enumerate() {
            let n = Vec3::new(w.outward.x, w.outward.y, 0.0);
            let off = (point - w.a.at_height(0.0)).dot(n);
            let proj = point - n * off;
            let s = (proj.xy() - w.a).dot(w.edge_dir).clamp(0.0, w.edge_len);
            let z = proj.z.clamp(0.0, w.height);
            let on_face = (w.a + w.edge_dir * s).at_height(z);
            let d = point.distance(on_face);
            let better = match best {
                None => d < tol,
                Some((bd, bi)) => {
                    d < tol && (d < bd || (d == bd && (w.building, w.edge) < (self.walls[bi].building, self.walls[bi].edge)))
                }
            };
            if better {
                best = Some((d, i));
            }
        }
        match best {
            Some((_, i)) => {
                let w = &self.walls[i];
                let n = Vec3::new(w.outward.x, w.outward.y, 0.0);
                let off = (point - w.a.at_height(0.0)).dot(n);
                let proj = point - n * off;
                let s = (proj.xy() - w.a).dot(w.edge_dir).clamp(0.0, w.edge_len);
                let z = proj.z.clamp(0.0, w.height);
                Ok(FacadeAnchor {
                    center: (w.a + w.edge_dir * s).at_height(z),
                    outward_normal: n,
                    building: w.building,
                })
            }
            None => Err(SceneError::NoFacadeNearby { x: point.x, y: point.y, z: point.z, tol }),
        }
    }

    /// Minimum distance from a 2D point to a building footprint (0 if inside).
    pub fn distance_to_building(&self, p: Vec2, building: usize) -> f64 {
        dist_point_polygon(p, &self.buildings[building].footprint)
    }

    /// Distance from a point to the closest wall edge of a building, ignoring height.
    pub fn distance_to_footprint_edge(&self, p: Vec2, building: usize) -> f64 {
        let fp = &self.buildings[building].footprint;
        let n = fp.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            best = best.min(dist_point_segment(p, fp[i], fp[(i + 1) % n]));
        }
        best
    }
}

fn boxes_overlap(a: Aabb, b: Aabb) -> bool {
    a.min.x <= b.max.x
        && a.max.x >= b.min.x
        && a.min.y <= b.max.y
        && a.max.y >= b.min.y
        && a.min.z <= b.max.z
        && a.max.z >= b.min.z
}

/// Segment parameter on (a, b) of the closest approach to segment (p, q).
fn closest_param(a: Vec3, b: Vec3, p: Vec3, q: Vec3) -> f64 {
    // Coarse search is sufficient: only used to decide endpoint exemption.
    let mut best = f64::INFINITY;
    let mut best_t = 0.0;
    const STEPS: usize = 16;
    for i in 0..=STEPS {
        let t = i as f64 / STEPS as f64;
        let pt = a + (b - a) * t;
        let d = dist_point_segment_3d(pt, p, q);
        if d < best {
            best = d;
            best_t = t;
        }
    }
    best_t
}

fn dist_point_segment_3d(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len_sq = ab.dot(ab);
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Regular UE grid covering the scene bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub origin: Vec3,
    pub tile_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub ue_height: f64,
}

impl TileGrid {
    pub const DEFAULT_TILE_SIZE: f64 = 2.0;
    pub const DEFAULT_UE_HEIGHT: f64 = 1.5;

    /// Grid of `tile_size` squares covering `bounds`.
    pub fn covering(bounds: Bounds2, tile_size: f64, ue_height: f64) -> TileGrid {
        assert!(tile_size > 0.0, "tile_size must be positive");
        let cols = (bounds.width() / tile_size).ceil().max(1.0) as usize;
        let rows = (bounds.height() / tile_size).ceil().max(1.0) as usize;
        TileGrid {
            origin: Vec3::new(bounds.min.x, bounds.min.y, 0.0),
            tile_size,
            rows,
            cols,
            ue_height,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn tile_center(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            self.origin.x + (col as f64 + 0.5) * self.tile_size,
            self.origin.y + (row as f64 + 0.5) * self.tile_size,
            self.ue_height,
        )
    }

    pub fn center_of(&self, index: usize) -> Vec3 {
        let (r, c) = self.row_col(index);
        self.tile_center(r, c)
    }

    /// Tile containing a 2D point, if within the grid.
    pub fn tile_at(&self, p: Vec2) -> Option<(usize, usize)> {
        let c = (p.x - self.origin.x) / self.tile_size;
        let r = (p.y - self.origin.y) / self.tile_size;
        if c < 0.0 || r < 0.0 {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        if r >= self.rows || c >= self.cols {
            return None;
        }
        Some((r, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn box_scene(x0: f64, y0: f64, x1: f64, y1: f64, height: f64) -> Scene {
        Scene::new(
            vec![Material::new("concrete", 5.31, 0.139, 0.2)],
            vec![Building {
                id: "b0".into(),
                footprint: vec![
                    Vec2::new(x0, y0),
                    Vec2::new(x1, y0),
                    Vec2::new(x1, y1),
                    Vec2::new(x0, y1),
                ],
                height,
                material_id: "concrete".into(),
                group_id: None,
            }],
            Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(200.0, 200.0) },
            "concrete".into(),
        )
        .unwrap()
    }

    #[test]
    fn single_box_scene_loads() {
        let s = box_scene(50.0, 50.0, 70.0, 70.0, 20.0);
        assert_eq!(s.buildings().len(), 1);
        assert_eq!(s.materials().len(), 1);
    }

    #[test]
    fn negative_height_names_building() {
        let err = Scene::new(
            vec![Material::new("concrete", 5.31, 0.139, 0.2)],
            vec![Building {
                id: "tower-3".into(),
                footprint: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0)],
                height: -5.0,
                material_id: "concrete".into(),
                group_id: None,
            }],
            Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(10.0, 10.0) },
            "concrete".into(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tower-3"), "error should name the building: {msg}");
    }

    #[test]
    fn canyon_fixture_round_trips() {
        let scene = synthetic::canyon_scene();
        assert_eq!(scene.buildings().len(), 4);
        let b = scene.bounds();
        assert_eq!(b.width(), 200.0);
        assert_eq!(b.height(), 200.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("canyon.json");
        save_scene(&scene, &path).unwrap();
        let reloaded = load_scene(&path).unwrap();
        assert_eq!(reloaded.buildings(), scene.buildings());
        assert_eq!(reloaded.materials(), scene.materials());
    }

    #[test]
    fn perpendicular_wall_hit_at_ten_meters() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let origin = Vec3::new(50.0, 100.0, 5.0);
        let dir = Vec3::new(1.0, 0.0, 0.0);
        let hit = s.intersect_first(origin, dir, 1e4).expect("wall hit");
        assert!((hit.t - 10.0).abs() < 1e-9);
        assert!((hit.normal - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(hit.normal.dot(dir) < 0.0);
    }

    #[test]
    fn parallel_ray_misses_everything() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let hit = s.intersect_first(Vec3::new(10.0, 20.0, 5.0), Vec3::new(0.0, 1.0, 0.0), 1e4);
        assert!(hit.is_none());
    }

    #[test]
    fn ray_from_inside_hits_interior_face() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let origin = Vec3::new(70.0, 100.0, 5.0);
        let hit = s.intersect_first(origin, Vec3::new(1.0, 0.0, 0.0), 1e4).expect("interior hit");
        assert!((hit.t - 10.0).abs() < 1e-9);
        // Normal faces back toward the interior origin.
        assert!((hit.normal - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn hit_normals_always_face_origin() {
        let s = synthetic::canyon_scene();
        let mut seed = 0x9e3779b97f4a7c15_u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let origin = Vec3::new(next() * 200.0, next() * 200.0, next() * 40.0 + 0.1);
            let theta = next() * std::f64::consts::PI;
            let phi = next() * std::f64::consts::TAU;
            let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            if let Some(hit) = s.intersect_first(origin, dir, 1e4) {
                assert!(hit.normal.dot(dir) < 0.0, "normal must oppose the ray");
                assert!((hit.normal.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn intersect_is_deterministic() {
        let s = synthetic::canyon_scene();
        let origin = Vec3::new(10.0, 10.0, 3.0);
        let dir = Vec3::new(0.7, 0.5, 0.1).normalized();
        let a = s.intersect_first(origin, dir, 1e4).unwrap();
        let b = s.intersect_first(origin, dir, 1e4).unwrap();
        assert_eq!(a.t.to_bits(), b.t.to_bits());
        assert_eq!(a.point.x.to_bits(), b.point.x.to_bits());
        assert_eq!(a.surface, b.surface);
    }

    #[test]
    fn los_blocked_by_building_and_symmetric() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let a = Vec3::new(40.0, 100.0, 2.0);
        let b = Vec3::new(100.0, 100.0, 2.0);
        assert!(!s.los_visible(a, b));
        assert!(!s.los_visible(b, a));

        let c = Vec3::new(40.0, 101.0, 2.0);
        assert!(s.los_visible(a, c));
        assert!(s.los_visible(c, a));
    }

    #[test]
    fn los_over_roof_is_clear() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let a = Vec3::new(40.0, 100.0, 45.0);
        let b = Vec3::new(100.0, 100.0, 45.0);
        assert!(s.los_visible(a, b));
    }

    #[test]
    fn grazing_corner_counts_as_blocked() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        // Segment passing within 1e-7 m of the vertical corner edge at (60, 40).
        let a = Vec3::new(40.0, 40.0 - 1e-7, 5.0);
        let b = Vec3::new(80.0, 40.0 - 1e-7, 5.0);
        assert!(!s.los_visible(a, b), "corner graze must block");
        // Well clear of the corner: visible.
        let c = Vec3::new(40.0, 39.9, 5.0);
        let d = Vec3::new(80.0, 39.9, 5.0);
        assert!(s.los_visible(c, d));
    }

    #[test]
    fn snap_on_face_is_identity() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let p = Vec3::new(60.0, 100.0, 10.0);
        let a = s.snap_to_facade(p).unwrap();
        assert!(a.center.distance(p) < 1e-12);
        assert!((a.outward_normal - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn snap_projects_drifted_point() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let drifted = Vec3::new(59.7, 100.0, 10.0);
        let a = s.snap_to_facade(drifted).unwrap();
        assert!(a.center.distance(Vec3::new(60.0, 100.0, 10.0)) < 1e-9);
        // Stepping 1 cm outward must leave the footprint.
        let outside = a.center + a.outward_normal * 0.01;
        assert!(!s.inside_building(outside));
    }

    #[test]
    fn snap_far_from_walls_is_invalid() {
        let s = box_scene(60.0, 40.0, 80.0, 160.0, 30.0);
        let err = s.snap_to_facade(Vec3::new(10.0, 10.0, 2.0)).unwrap_err();
        assert!(matches!(err, SceneError::NoFacadeNearby { .. }));
    }

    #[test]
    fn grid_covers_bounds() {
        let g = TileGrid::covering(
            Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(200.0, 100.0) },
            2.0,
            1.5,
        );
        assert_eq!(g.cols, 100);
        assert_eq!(g.rows, 50);
        let c = g.tile_center(0, 0);
        assert_eq!((c.x, c.y, c.z), (1.0, 1.0, 1.5));
        assert_eq!(g.tile_at(Vec2::new(199.9, 99.9)), Some((49, 99)));
        assert_eq!(g.tile_at(Vec2::new(-0.1, 5.0)), None);
    }
}
