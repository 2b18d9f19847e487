//! Shoot-and-bounce ray tracing with image-method refinement.
//!
//! Discovery launches a Fibonacci lattice of rays from the transmitter and
//! records the surface sequence of every bounce chain that passes a reception
//! sphere. Each unique sequence is then refined to the geometrically exact
//! specular path by mirroring the transmitter across the recorded planes, so
//! the final geometry carries no capture-radius bias. Amplitudes follow the
//! Friis field convention: |amplitude|^2 is the isotropic-to-isotropic power
//! gain of the path.

use crate::geometry::Vec3;
use crate::scene::{Hit, Material, Scene, SurfaceRef};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Ray tracer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Number of launch directions per transmitter.
    pub ray_count: usize,
    /// Maximum specular bounces per ray.
    pub max_bounces: usize,
    /// Carrier frequency in Hz.
    pub frequency: f64,
    /// Floor on the reception-sphere radius in meters.
    pub rx_capture_radius: f64,
    /// Multiplier on the path-length-proportional capture radius.
    pub capture_scale: f64,
}

impl TraceConfig {
    pub fn new(frequency: f64) -> Self {
        TraceConfig {
            ray_count: 100_000,
            max_bounces: 4,
            frequency,
            rx_capture_radius: 0.0,
            capture_scale: 1.0,
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency
    }

    /// Covering-cone full angle of the launch lattice: wide enough that any
    /// direction lies within half of it of some lattice point.
    pub fn angular_spacing(&self) -> f64 {
        1.5 * (4.0 * PI / self.ray_count as f64).sqrt()
    }

    /// Reception-sphere radius for a capture at path length `l`. Generous
    /// capture costs nothing: duplicates collapse in deduplication and the
    /// image-method refinement removes the radius from the final geometry.
    pub fn capture_radius(&self, l: f64) -> f64 {
        (self.capture_scale * l * self.angular_spacing() * 0.5).max(self.rx_capture_radius)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("transmitter is inside a building or below ground")]
    TxInsideGeometry,
    #[error("receiver is inside a building or below ground")]
    RxInsideGeometry,
    #[error("interaction references material index {0} outside the table")]
    UnknownMaterial(usize),
}

/// Interaction kind along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionKind {
    Launch,
    SpecularReflection,
    DiffuseScatter,
    Arrival,
}

/// One vertex of a ray path. Reflections and scatter points carry the surface
/// normal (oriented toward the incident side) and the material index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interaction {
    pub kind: InteractionKind,
    pub point: Vec3,
    pub normal: Option<Vec3>,
    pub material: Option<usize>,
    pub surface: Option<SurfaceRef>,
}

/// A propagation path from transmitter to receiver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RayPath {
    /// Launch first, Arrival last.
    pub interactions: Vec<Interaction>,
    pub departure_dir: Vec3,
    pub arrival_dir: Vec3,
    /// Friis-normalized complex field transfer.
    pub amplitude: Complex64,
    /// Total geometric length in meters.
    pub length: f64,
    /// Surface sequence; empty for the line-of-sight path. Dedup/sort key.
    pub surface_key: Vec<SurfaceRef>,
    /// Monte-Carlo weight: 1 for specular paths, 1/sqrt(launch count) for
    /// diffuse scatter samples.
    pub mc_weight: f64,
}

impl RayPath {
    pub fn bounce_count(&self) -> usize {
        self.interactions.len().saturating_sub(2)
    }

    pub fn is_los(&self) -> bool {
        self.surface_key.is_empty()
    }

    /// Reflection points in path order (specular interactions only).
    pub fn reflection_points(&self) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter().filter(|i| i.kind == InteractionKind::SpecularReflection)
    }
}

/// Near-uniform deterministic directions on the unit sphere (Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    assert!(n >= 1);
    let golden_angle = PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Mirror reflection of an incident direction about a surface normal.
pub fn reflect_dir(incident: Vec3, normal: Vec3) -> Vec3 {
    debug_assert!(incident.dot(normal) < 0.0, "incident must oppose the normal");
    (incident - normal * (2.0 * incident.dot(normal))).normalized()
}

/// Field polarization relative to the plane of incidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarization {
    Te,
    Tm,
}

/// Complex Fresnel reflection coefficient.
///
/// Uses the engineering complex-permittivity convention
/// eps_c = eps_r - j sigma / (2 pi f eps0), per ITU-R P.2040.
pub fn fresnel_coefficient(
    material: &Material,
    frequency: f64,
    cos_incidence: f64,
    polarization: Polarization,
) -> Complex64 {
    debug_assert!(cos_incidence > 0.0 && cos_incidence <= 1.0 + 1e-12);
    let cos_i = cos_incidence.min(1.0);
    let eps_c = Complex64::new(
        material.eps_r,
        -material.sigma / (2.0 * PI * frequency * VACUUM_PERMITTIVITY),
    );
    let sin2 = 1.0 - cos_i * cos_i;
    let root = (eps_c - Complex64::new(sin2, 0.0)).sqrt();
    match polarization {
        Polarization::Te => (cos_i - root) / (cos_i + root),
        Polarization::Tm => (eps_c * cos_i - root) / (eps_c * cos_i + root),
    }
}

/// Polarization selected per surface orientation for a vertically polarized
/// field: TE on (vertical) walls, TM on horizontal faces.
fn polarization_for(normal: Vec3) -> Polarization {
    if normal.z.abs() > 0.5 {
        Polarization::Tm
    } else {
        Polarization::Te
    }
}

/// Recompute a path's complex amplitude for a given material table.
///
/// amplitude = (lambda / 4 pi L) e^{-j 2 pi L / lambda} \prod coefficients,
/// where specular interactions contribute Gamma sqrt(1 - S) and diffuse
/// interactions the Lambertian Monte-Carlo factor scaled by sqrt(S).
pub fn path_amplitude(
    path: &RayPath,
    frequency: f64,
    materials: &[Material],
) -> Result<Complex64, TraceError> {
    let lambda = SPEED_OF_LIGHT / frequency;
    let l = path.length;
    let phase = -2.0 * PI * l / lambda;
    let mut amp = Complex64::from_polar(lambda / (4.0 * PI * l), phase);
    for (idx, inter) in path.interactions.iter().enumerate() {
        match inter.kind {
            InteractionKind::Launch | InteractionKind::Arrival => {}
            InteractionKind::SpecularReflection | InteractionKind::DiffuseScatter => {
                let normal = inter.normal.expect("reflection carries a normal");
                let mat_idx = inter.material.expect("reflection carries a material");
                let material =
                    materials.get(mat_idx).ok_or(TraceError::UnknownMaterial(mat_idx))?;
                let prev = path.interactions[idx - 1].point;
                let next = path.interactions[idx + 1].point;
                let d_in = (inter.point - prev).normalized();
                let cos_i = (-d_in.dot(normal)).clamp(1e-9, 1.0);
                let gamma =
                    fresnel_coefficient(material, frequency, cos_i, polarization_for(normal));
                if inter.kind == InteractionKind::SpecularReflection {
                    amp *= gamma * (1.0 - material.scatter_s).sqrt();
                } else {
                    // Lambertian lobe: each launch ray carries 1/n of the
                    // transmit power to its surface patch; the scattered field
                    // spreads as cos(theta_s)/(pi d2^2). Folding the Friis
                    // prefactor in leaves the factor below.
                    let d_out = (next - inter.point).normalized();
                    let cos_s = d_out.dot(normal).max(0.0);
                    let d2 = next.distance(inter.point);
                    let factor = material.scatter_s.sqrt()
                        * gamma.norm()
                        * cos_s.sqrt()
                        * (2.0 * l / d2)
                        * path.mc_weight;
                    amp *= factor;
                }
            }
        }
    }
    Ok(amp)
}

/// Construct the line-of-sight path between two visible endpoints.
fn los_path(tx: Vec3, rx: Vec3, frequency: f64, materials: &[Material]) -> RayPath {
    let dir = (rx - tx).normalized();
    let mut p = RayPath {
        interactions: vec![
            Interaction { kind: InteractionKind::Launch, point: tx, normal: None, material: None, surface: None },
            Interaction { kind: InteractionKind::Arrival, point: rx, normal: None, material: None, surface: None },
        ],
        departure_dir: dir,
        arrival_dir: dir,
        amplitude: Complex64::new(0.0, 0.0),
        length: tx.distance(rx),
        surface_key: Vec::new(),
        mc_weight: 1.0,
    };
    p.amplitude = path_amplitude(&p, frequency, materials).expect("LoS has no materials");
    p
}

/// Exact specular path for a recorded surface sequence, or None when the
/// sequence has no valid geometric realization.
fn refine_specular(scene: &Scene, tx: Vec3, rx: Vec3, seq: &[SurfaceRef], frequency: f64) -> Option<RayPath> {
    // Plane for each surface: (anchor point, unit normal).
    let planes: Vec<(Vec3, Vec3)> = seq
        .iter()
        .map(|s| match *s {
            SurfaceRef::Ground => (Vec3::ZERO, Vec3::Z),
            SurfaceRef::Wall { building, edge } => {
                let b = &scene.buildings()[building];
                let n = b.footprint.len();
                let a = b.footprint[edge];
                let bb = b.footprint[(edge + 1) % n];
                let d = (bb - a).normalized();
                (a.at_height(0.0), Vec3::new(d.y, -d.x, 0.0))
            }
            SurfaceRef::Roof { building } => {
                let b = &scene.buildings()[building];
                (Vec3::new(0.0, 0.0, b.height), Vec3::Z)
            }
        })
        .collect();

    // Mirror the transmitter across the planes in order.
    let mut images = Vec::with_capacity(seq.len() + 1);
    images.push(tx);
    for &(anchor, normal) in &planes {
        let prev = *images.last().unwrap();
        let off = (prev - anchor).dot(normal);
        images.push(prev - normal * (2.0 * off));
    }

    // Back-trace from the receiver to find each reflection point.
    let mut points = vec![Vec3::ZERO; seq.len()];
    let mut target = rx;
    for j in (0..seq.len()).rev() {
        let (anchor, normal) = planes[j];
        let image = images[j]; // transmitter image before plane j
        let image_refl = images[j + 1];
        let seg = target - image_refl;
        let denom = seg.dot(normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (anchor - image_refl).dot(normal) / denom;
        if !(1e-9..=1.0 - 1e-9).contains(&t) {
            return None;
        }
        let p = image_refl + seg * t;
        if !point_on_surface(scene, seq[j], p) {
            return None;
        }
        let _ = image;
        points[j] = p;
        target = p;
    }

    // Validate visibility of every leg against the full scene.
    let mut vertices = Vec::with_capacity(seq.len() + 2);
    vertices.push(tx);
    vertices.extend_from_slice(&points);
    vertices.push(rx);
    for j in 0..vertices.len() - 1 {
        let a = vertices[j];
        let b = vertices[j + 1];
        let len = a.distance(b);
        if len < 1e-9 {
            return None;
        }
        let dir = (b - a) / len;
        // Step off the reflecting surface to avoid self-hits.
        let origin = a + dir * 1e-7;
        match scene.intersect_first(origin, dir, len + 1e-6) {
            Some(hit) => {
                if j == vertices.len() - 2 {
                    // Final leg must be clear all the way to the receiver.
                    if hit.t < len - 1e-6 {
                        return None;
                    }
                } else if hit.surface != seq[j] || (hit.t - (len - 1e-7)).abs() > 1e-5 {
                    return None;
                }
            }
            None => {
                if j != vertices.len() - 2 {
                    return None;
                }
            }
        }
    }

    // Assemble interactions with incident-side normals.
    let mut interactions = Vec::with_capacity(seq.len() + 2);
    interactions.push(Interaction {
        kind: InteractionKind::Launch,
        point: tx,
        normal: None,
        material: None,
        surface: None,
    });
    let mut length = 0.0;
    for j in 0..seq.len() {
        let prev = *interactions.last().map(|i: &Interaction| &i.point).unwrap();
        length += prev.distance(points[j]);
        let d_in = (points[j] - prev).normalized();
        let (_, mut normal) = planes[j];
        if normal.dot(d_in) > 0.0 {
            normal = -normal;
        }
        interactions.push(Interaction {
            kind: InteractionKind::SpecularReflection,
            point: points[j],
            normal: Some(normal),
            material: Some(surface_material(scene, seq[j])),
            surface: Some(seq[j]),
        });
    }
    let last = interactions.last().unwrap().point;
    length += last.distance(rx);
    interactions.push(Interaction {
        kind: InteractionKind::Arrival,
        point: rx,
        normal: None,
        material: None,
        surface: None,
    });

    let departure_dir = (points[0] - tx).normalized();
    let arrival_dir = (rx - *points.last().unwrap()).normalized();
    let mut path = RayPath {
        interactions,
        departure_dir,
        arrival_dir,
        amplitude: Complex64::new(0.0, 0.0),
        length,
        surface_key: seq.to_vec(),
        mc_weight: 1.0,
    };
    path.amplitude = path_amplitude(&path, frequency, scene.materials()).ok()?;
    // Fully scattering or index-matched surfaces leave no coherent energy.
    if path.amplitude.norm() == 0.0 {
        return None;
    }
    Some(path)
}

fn point_on_surface(scene: &Scene, surface: SurfaceRef, p: Vec3) -> bool {
    const TOL: f64 = 1e-6;
    match surface {
        SurfaceRef::Ground => p.z.abs() < 1e-3,
        SurfaceRef::Wall { building, edge } => {
            let b = &scene.buildings()[building];
            let n = b.footprint.len();
            let a = b.footprint[edge];
            let bb = b.footprint[(edge + 1) % n];
            let dir = (bb - a).normalized();
            let len = a.distance(bb);
            let s = (p.xy() - a).dot(dir);
            s >= -TOL && s <= len + TOL && p.z >= -TOL && p.z <= b.height + TOL
        }
        SurfaceRef::Roof { building } => {
            let b = &scene.buildings()[building];
            (p.z - b.height).abs() < 1e-3 && crate::geometry::point_in_polygon(p.xy(), &b.footprint)
        }
    }
}

fn surface_material(scene: &Scene, surface: SurfaceRef) -> usize {
    match surface {
        SurfaceRef::Ground => scene.ground_material(),
        SurfaceRef::Wall { building, .. } | SurfaceRef::Roof { building } => scene
            .materials()
            .iter()
            .position(|m| m.id == scene.buildings()[building].material_id)
            .expect("validated at load"),
    }
}

/// Spatial hash over receiver positions for segment capture queries.
struct RxIndex<'a> {
    receivers: &'a [Vec3],
    cell: f64,
    min_x: f64,
    min_y: f64,
    cols: i64,
    rows: i64,
    cells: std::collections::HashMap<(i64, i64), Vec<u32>>,
}

impl<'a> RxIndex<'a> {
    fn new(receivers: &'a [Vec3], cell: f64) -> Self {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for r in receivers {
            min_x = min_x.min(r.x);
            min_y = min_y.min(r.y);
            max_x = max_x.max(r.x);
            max_y = max_y.max(r.y);
        }
        if receivers.is_empty() {
            min_x = 0.0;
            min_y = 0.0;
            max_x = 0.0;
            max_y = 0.0;
        }
        let cols = ((max_x - min_x) / cell).floor() as i64 + 1;
        let rows = ((max_y - min_y) / cell).floor() as i64 + 1;
        let mut cells: std::collections::HashMap<(i64, i64), Vec<u32>> = Default::default();
        for (i, r) in receivers.iter().enumerate() {
            let cx = ((r.x - min_x) / cell).floor() as i64;
            let cy = ((r.y - min_y) / cell).floor() as i64;
            cells.entry((cx, cy)).or_default().push(i as u32);
        }
        RxIndex { receivers, cell, min_x, min_y, cols, rows, cells }
    }

    /// Receivers within `radius` of the segment's xy-projection, tested exactly
    /// against the 3D segment by the caller.
    fn candidates_along(&self, a: Vec3, b: Vec3, radius: f64, out: &mut Vec<u32>) {
        out.clear();
        let lo_x = (((a.x.min(b.x) - radius) - self.min_x) / self.cell).floor() as i64;
        let hi_x = (((a.x.max(b.x) + radius) - self.min_x) / self.cell).floor() as i64;
        let lo_y = (((a.y.min(b.y) - radius) - self.min_y) / self.cell).floor() as i64;
        let hi_y = (((a.y.max(b.y) + radius) - self.min_y) / self.cell).floor() as i64;
        let lo_x = lo_x.max(0);
        let lo_y = lo_y.max(0);
        let hi_x = hi_x.min(self.cols - 1);
        let hi_y = hi_y.min(self.rows - 1);
        // Walk only cells near the 2D segment corridor.
        let ab = (b - a).xy();
        let len = ab.norm();
        for cy in lo_y..=hi_y {
            for cx in lo_x..=hi_x {
                if len > 1e-9 {
                    let center = crate::geometry::Vec2::new(
                        self.min_x + (cx as f64 + 0.5) * self.cell,
                        self.min_y + (cy as f64 + 0.5) * self.cell,
                    );
                    let d = crate::geometry::dist_point_segment(center, a.xy(), b.xy());
                    if d > radius + self.cell {
                        continue;
                    }
                }
                if let Some(list) = self.cells.get(&(cx, cy)) {
                    out.extend_from_slice(list);
                }
            }
        }
    }
}

/// Capture event discovered during shooting: receiver index plus the bounce
/// sequence accumulated so far.
type Capture = (u32, Vec<SurfaceRef>);

fn shoot_and_collect(
    scene: &Scene,
    tx: Vec3,
    rx_index: &RxIndex,
    cfg: &TraceConfig,
    dirs: &[Vec3],
    dir_offset: usize,
) -> Vec<Capture> {
    let bounds = scene.bounds();
    let reach = bounds.diagonal() * (cfg.max_bounces as f64 + 1.0) + 1000.0;
    let mut captures = Vec::new();
    let mut candidates = Vec::new();
    for (di, &dir0) in dirs.iter().enumerate() {
        let _ = di + dir_offset;
        let mut origin = tx;
        let mut dir = dir0;
        let mut seq: Vec<SurfaceRef> = Vec::new();
        let mut traveled = 0.0;
        for _bounce in 0..=cfg.max_bounces {
            let hit = scene.intersect_first(origin, dir, reach);
            let seg_len = hit.as_ref().map_or(reach, |h| h.t);
            // Capture test along this segment.
            let seg_end = origin + dir * seg_len;
            let r_max = cfg.capture_radius(traveled + seg_len);
            rx_index.candidates_along(origin, seg_end, r_max, &mut candidates);
            for &ri in &candidates {
                let rx = rx_index.receivers[ri as usize];
                let w = rx - origin;
                let t = w.dot(dir).clamp(0.0, seg_len);
                let closest = origin + dir * t;
                let d = rx.distance(closest);
                if d <= cfg.capture_radius(traveled + t) && !seq.is_empty() {
                    captures.push((ri, seq.clone()));
                }
            }
            match hit {
                Some(Hit { t, point, normal, surface, .. }) => {
                    if seq.len() >= cfg.max_bounces {
                        break;
                    }
                    traveled += t;
                    seq.push(surface);
                    dir = reflect_dir(dir, normal);
                    origin = point + dir * 1e-9;
                }
                None => break,
            }
        }
    }
    captures
}

/// Trace specular multipath (plus line of sight) from one transmitter to a
/// set of receivers. Returns one path list per receiver, deterministically
/// ordered by surface sequence.
pub fn trace_to_receivers(
    scene: &Scene,
    tx: Vec3,
    receivers: &[Vec3],
    cfg: &TraceConfig,
) -> Result<Vec<Vec<RayPath>>, TraceError> {
    if !scene.is_clear_endpoint(tx) {
        return Err(TraceError::TxInsideGeometry);
    }
    for &rx in receivers {
        if !scene.is_clear_endpoint(rx) {
            return Err(TraceError::RxInsideGeometry);
        }
    }
    let dirs = fibonacci_directions(cfg.ray_count);
    let cell = (scene.bounds().diagonal() * cfg.angular_spacing()).max(2.0);
    let rx_index = RxIndex::new(receivers, cell);

    // Parallel discovery over direction chunks; captures are merged in launch
    // order so the result is schedule-independent.
    let chunk = (cfg.ray_count / (rayon::current_num_threads() * 4).max(1)).max(1024);
    let mut all_captures: Vec<Capture> = dirs
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, slice)| shoot_and_collect(scene, tx, &rx_index, cfg, slice, ci * chunk))
        .reduce(Vec::new, |mut a, mut b| {
            a.append(&mut b);
            a
        });
    all_captures.sort();
    all_captures.dedup();

    // Group sequences per receiver.
    let mut per_rx: Vec<BTreeSet<Vec<SurfaceRef>>> = vec![BTreeSet::new(); receivers.len()];
    for (ri, seq) in all_captures {
        per_rx[ri as usize].insert(seq);
    }

    let materials = scene.materials();
    let out: Vec<Vec<RayPath>> = receivers
        .par_iter()
        .zip(per_rx.into_par_iter())
        .map(|(&rx, seqs)| {
            let mut paths = Vec::new();
            if scene.los_visible(tx, rx) {
                paths.push(los_path(tx, rx, cfg.frequency, materials));
            }
            for seq in seqs {
                if let Some(p) = refine_specular(scene, tx, rx, &seq, cfg.frequency) {
                    paths.push(p);
                }
            }
            paths.sort_by(|a, b| a.surface_key.cmp(&b.surface_key));
            paths
        })
        .collect();
    Ok(out)
}

/// Point-to-point specular trace: LoS (when visible) plus shoot-and-bounce
/// discoveries refined by the image method.
pub fn trace_paths(scene: &Scene, tx: Vec3, rx: Vec3, cfg: &TraceConfig) -> Result<Vec<RayPath>, TraceError> {
    Ok(trace_to_receivers(scene, tx, &[rx], cfg)?.pop().unwrap())
}

/// Single-bounce diffuse scattering paths: launch rays, scatter at the first
/// hit when the material scatters, keep the sample if the scatter point sees
/// the receiver.
pub fn trace_scatter_single(
    scene: &Scene,
    tx: Vec3,
    rx: Vec3,
    cfg: &TraceConfig,
) -> Result<Vec<RayPath>, TraceError> {
    if !scene.is_clear_endpoint(tx) {
        return Err(TraceError::TxInsideGeometry);
    }
    if !scene.is_clear_endpoint(rx) {
        return Err(TraceError::RxInsideGeometry);
    }
    let dirs = fibonacci_directions(cfg.ray_count);
    let reach = scene.bounds().diagonal() * 2.0 + 1000.0;
    let materials = scene.materials();
    let weight = 1.0 / (cfg.ray_count as f64).sqrt();

    let chunk = (cfg.ray_count / (rayon::current_num_threads() * 4).max(1)).max(1024);
    let paths: Vec<RayPath> = dirs
        .par_chunks(chunk)
        .map(|slice| {
            let mut local = Vec::new();
            for &dir in slice {
                let Some(hit) = scene.intersect_first(tx, dir, reach) else { continue };
                let mat = &materials[hit.material];
                if mat.scatter_s <= 0.0 {
                    continue;
                }
                let out_vec = rx - hit.point;
                if out_vec.dot(hit.normal) <= 0.0 {
                    continue;
                }
                let off = hit.point + hit.normal * 1e-6;
                if !scene.los_visible(off, rx) {
                    continue;
                }
                let mut p = RayPath {
                    interactions: vec![
                        Interaction { kind: InteractionKind::Launch, point: tx, normal: None, material: None, surface: None },
                        Interaction {
                            kind: InteractionKind::DiffuseScatter,
                            point: hit.point,
                            normal: Some(hit.normal),
                            material: Some(hit.material),
                            surface: Some(hit.surface),
                        },
                        Interaction { kind: InteractionKind::Arrival, point: rx, normal: None, material: None, surface: None },
                    ],
                    departure_dir: dir,
                    arrival_dir: out_vec.normalized(),
                    amplitude: Complex64::new(0.0, 0.0),
                    length: tx.distance(hit.point) + hit.point.distance(rx),
                    surface_key: vec![hit.surface],
                    mc_weight: weight,
                };
                p.amplitude = path_amplitude(&p, cfg.frequency, materials).expect("materials resolved");
                if p.amplitude.norm() == 0.0 {
                    continue;
                }
                local.push(p);
            }
            local
        })
        .reduce(Vec::new, |mut a, mut b| {
            a.append(&mut b);
            a
        });
    Ok(paths)
}

/// Diffuse scatter points visible from both the transmitter and a receiver,
/// deduplicated on a half-meter lattice. Used for RIS candidate generation
/// where only the geometry matters.
pub fn scatter_points_to(
    scene: &Scene,
    tx: Vec3,
    rx: Vec3,
    cfg: &TraceConfig,
) -> Result<Vec<Vec3>, TraceError> {
    let paths = trace_scatter_single(scene, tx, rx, cfg)?;
    let mut seen = std::collections::HashMap::new();
    for p in &paths {
        let pt = p.interactions[1].point;
        let key = ((pt.x * 2.0).round() as i64, (pt.y * 2.0).round() as i64, (pt.z * 2.0).round() as i64);
        let d = pt.distance(rx);
        let entry = seen.entry(key).or_insert((d, pt));
        if d < entry.0 {
            *entry = (d, pt);
        }
    }
    let mut pts: Vec<(f64, Vec3)> = seen.into_values().collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.x.total_cmp(&b.1.x)).then(a.1.y.total_cmp(&b.1.y)));
    Ok(pts.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Bounds2, Building};
    use crate::synthetic;
    use crate::geometry::Vec2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fibonacci_single_direction_is_unit() {
        let d = fibonacci_directions(1);
        assert_eq!(d.len(), 1);
        assert!(close(d[0].norm(), 1.0, 1e-12));
    }

    #[test]
    fn fibonacci_lattice_is_balanced() {
        let dirs = fibonacci_directions(1000);
        let mut mean = Vec3::ZERO;
        for d in &dirs {
            assert!(close(d.norm(), 1.0, 1e-12));
            mean = mean + *d;
        }
        mean = mean / 1000.0;
        assert!(mean.norm() < 0.05, "mean direction magnitude {}", mean.norm());
    }

    #[test]
    fn fibonacci_four_point_neighbor_spacing_is_even() {
        let dirs = fibonacci_directions(4);
        // Nearest-neighbor angular separation per lattice point.
        let mut nn = Vec::new();
        for i in 0..4 {
            let mut best = f64::INFINITY;
            for j in 0..4 {
                if i != j {
                    best = best.min(dirs[i].dot(dirs[j]).clamp(-1.0, 1.0).acos());
                }
            }
            nn.push(best);
        }
        let lo = nn.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = nn.iter().cloned().fold(0.0_f64, f64::max);
        assert!(hi / lo < 1.2, "neighbor spacings {lo:.4}..{hi:.4} differ by more than 20%");
    }

    #[test]
    fn reflect_normal_incidence() {
        let r = reflect_dir(Vec3::new(0.0, 0.0, -1.0), Vec3::Z);
        assert!((r - Vec3::Z).norm() < 1e-12);
    }

    #[test]
    fn reflect_45_degrees() {
        let inc = Vec3::new(1.0, 0.0, -1.0).normalized();
        let r = reflect_dir(inc, Vec3::Z);
        let expect = Vec3::new(1.0, 0.0, 1.0).normalized();
        assert!((r - expect).norm() < 1e-12);
    }

    #[test]
    fn reflection_angles_match() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..200 {
            let n = Vec3::new(next(), next(), next()).normalized();
            let mut d = Vec3::new(next(), next(), next()).normalized();
            if d.dot(n) > 0.0 {
                d = -d;
            }
            if d.dot(n) > -1e-6 {
                continue;
            }
            let r = reflect_dir(d, n);
            assert!(close(r.norm(), 1.0, 1e-12));
            assert!(close(-d.dot(n), r.dot(n), 1e-12), "incidence equals reflection");
        }
    }

    #[test]
    fn fresnel_pec_limit() {
        let m = Material::new("pec", 1e9, 0.0, 0.0);
        for &cos_i in &[1.0, 0.7, 0.2] {
            let te = fresnel_coefficient(&m, 3.5e9, cos_i, Polarization::Te);
            let tm = fresnel_coefficient(&m, 3.5e9, cos_i, Polarization::Tm);
            assert!(close(te.norm(), 1.0, 1e-3));
            assert!(close(tm.norm(), 1.0, 1e-3));
        }
    }

    #[test]
    fn fresnel_free_space_is_zero() {
        let m = Material::new("air", 1.0, 0.0, 0.0);
        for &cos_i in &[1.0, 0.5, 0.1] {
            let te = fresnel_coefficient(&m, 2.0e9, cos_i, Polarization::Te);
            let tm = fresnel_coefficient(&m, 2.0e9, cos_i, Polarization::Tm);
            assert!(te.norm() < 1e-12);
            assert!(tm.norm() < 1e-12);
        }
    }

    #[test]
    fn fresnel_concrete_normal_incidence_matches_formula() {
        let m = Material::new("concrete", 5.31, 0.139, 0.0);
        let f = 3.5e9;
        let got = fresnel_coefficient(&m, f, 1.0, Polarization::Te);
        let eps_c = Complex64::new(5.31, -0.139 / (2.0 * PI * f * VACUUM_PERMITTIVITY));
        let expect = (Complex64::new(1.0, 0.0) - eps_c.sqrt()) / (Complex64::new(1.0, 0.0) + eps_c.sqrt());
        assert!((got - expect).norm() < 1e-9, "got {got}, expected {expect}");
        assert!(got.norm() <= 1.0);
    }

    /// Open scene, 100 m apart: exactly one LoS path at the Friis level.
    #[test]
    fn open_space_friis() {
        let scene = synthetic::open_scene(400.0);
        let cfg = TraceConfig { ray_count: 5000, ..TraceConfig::new(2.0e9) };
        let tx = Vec3::new(100.0, 200.0, 10.0);
        let rx = Vec3::new(200.0, 200.0, 10.0);
        let paths = trace_paths(&scene, tx, rx, &cfg).unwrap();
        assert_eq!(paths.len(), 1, "only the LoS path");
        let lambda = cfg.wavelength();
        let expect = (lambda / (4.0 * PI * 100.0)).powi(2);
        let got = paths[0].amplitude.norm_sqr();
        assert!(close(10.0 * (got / expect).log10(), 0.0, 1e-9));
    }

    /// Single infinite-ish wall: LoS plus one single-bounce path at the
    /// image-method reflection point.
    #[test]
    fn single_wall_image_method() {
        let scene = synthetic::single_wall_scene();
        let cfg = TraceConfig { ray_count: 100_000, ..TraceConfig::new(3.5e9) };
        let tx = synthetic::SINGLE_WALL_TX;
        let rx = synthetic::SINGLE_WALL_RX;
        let paths = trace_paths(&scene, tx, rx, &cfg).unwrap();
        let los: Vec<_> = paths.iter().filter(|p| p.is_los()).collect();
        assert_eq!(los.len(), 1);
        let bounce: Vec<_> = paths.iter().filter(|p| p.bounce_count() == 1).collect();
        assert!(!bounce.is_empty(), "wall bounce must be discovered");

        let (oracle_point, oracle_len) = synthetic::single_wall_image_oracle();
        let wall_path = bounce
            .iter()
            .find(|p| matches!(p.surface_key[0], SurfaceRef::Wall { .. }))
            .expect("wall reflection");
        let refl = wall_path.reflection_points().next().unwrap();
        assert!(refl.point.distance(oracle_point) < 0.1, "reflection point {:?} vs {:?}", refl.point, oracle_point);
        assert!(close(wall_path.length, oracle_len, 1e-6));
    }

    #[test]
    fn rx_inside_building_rejected() {
        let scene = synthetic::single_wall_scene();
        let cfg = TraceConfig { ray_count: 100, ..TraceConfig::new(3.5e9) };
        let inside = Vec3::new(155.0, 100.0, 5.0);
        let err = trace_paths(&scene, synthetic::SINGLE_WALL_TX, inside, &cfg).unwrap_err();
        assert!(matches!(err, TraceError::RxInsideGeometry));
    }

    #[test]
    fn path_amplitude_pec_bounce_equals_friis() {
        // 1-bounce off a perfect reflector with no scattering: same magnitude
        // as a free-space path of equal length.
        let materials = vec![Material::new("pec", 1e9, 0.0, 0.0)];
        let p = RayPath {
            interactions: vec![
                Interaction { kind: InteractionKind::Launch, point: Vec3::new(0.0, 0.0, 5.0), normal: None, material: None, surface: None },
                Interaction {
                    kind: InteractionKind::SpecularReflection,
                    point: Vec3::new(50.0, 0.0, 5.0),
                    normal: Some(Vec3::new(-1.0, 0.0, 0.0)),
                    material: Some(0),
                    surface: Some(SurfaceRef::Wall { building: 0, edge: 0 }),
                },
                Interaction { kind: InteractionKind::Arrival, point: Vec3::new(0.0, 30.0, 5.0), normal: None, material: None, surface: None },
            ],
            departure_dir: Vec3::new(1.0, 0.0, 0.0),
            arrival_dir: Vec3::new(-50.0, 30.0, 0.0).normalized(),
            amplitude: Complex64::new(0.0, 0.0),
            length: 50.0 + (50.0_f64.powi(2) + 30.0_f64.powi(2)).sqrt(),
            surface_key: vec![SurfaceRef::Wall { building: 0, edge: 0 }],
            mc_weight: 1.0,
        };
        let amp = path_amplitude(&p, 2.0e9, &materials).unwrap();
        let lambda = SPEED_OF_LIGHT / 2.0e9;
        let friis = lambda / (4.0 * PI * p.length);
        assert!(close(amp.norm() / friis, 1.0, 1e-4));
    }

    #[test]
    fn full_scatter_kills_specular_amplitude() {
        let materials = vec![Material::new("soft", 5.0, 0.1, 1.0)];
        let p = RayPath {
            interactions: vec![
                Interaction { kind: InteractionKind::Launch, point: Vec3::ZERO, normal: None, material: None, surface: None },
                Interaction {
                    kind: InteractionKind::SpecularReflection,
                    point: Vec3::new(10.0, 0.0, 0.0),
                    normal: Some(Vec3::new(-1.0, 0.0, 0.0)),
                    material: Some(0),
                    surface: Some(SurfaceRef::Wall { building: 0, edge: 0 }),
                },
                Interaction { kind: InteractionKind::Arrival, point: Vec3::new(0.0, 10.0, 0.0), normal: None, material: None, surface: None },
            ],
            departure_dir: Vec3::new(1.0, 0.0, 0.0),
            arrival_dir: Vec3::new(-1.0, 1.0, 0.0).normalized(),
            amplitude: Complex64::new(0.0, 0.0),
            length: 10.0 + 200.0_f64.sqrt(),
            surface_key: vec![SurfaceRef::Wall { building: 0, edge: 0 }],
            mc_weight: 1.0,
        };
        let amp = path_amplitude(&p, 2.0e9, &materials).unwrap();
        assert_eq!(amp.norm(), 0.0);
    }

    #[test]
    fn reciprocity_on_single_wall() {
        let scene = synthetic::single_wall_scene();
        let cfg = TraceConfig { ray_count: 20_000, ..TraceConfig::new(3.5e9) };
        let tx = synthetic::SINGLE_WALL_TX;
        let rx = synthetic::SINGLE_WALL_RX;
        let fwd = trace_paths(&scene, tx, rx, &cfg).unwrap();
        let rev = trace_paths(&scene, rx, tx, &cfg).unwrap();
        assert_eq!(fwd.len(), rev.len());
        // A backward path visits the same surfaces in reverse order.
        for a in &fwd {
            let mut key = a.surface_key.clone();
            key.reverse();
            let b = rev
                .iter()
                .find(|p| p.surface_key == key)
                .unwrap_or_else(|| panic!("no reverse match for {:?}", a.surface_key));
            let rel = (a.amplitude.norm() - b.amplitude.norm()).abs() / a.amplitude.norm();
            assert!(rel < 1e-6, "reciprocity violated: {} vs {}", a.amplitude.norm(), b.amplitude.norm());
        }
    }

    #[test]
    fn amplitudes_never_exceed_friis_bound() {
        let scene = synthetic::canyon_scene();
        let cfg = TraceConfig { ray_count: 30_000, ..TraceConfig::new(3.5e9) };
        let tx = Vec3::new(20.0, 100.0, 20.0);
        let rx = Vec3::new(180.0, 100.0, 1.5);
        let paths = trace_paths(&scene, tx, rx, &cfg).unwrap();
        assert!(!paths.is_empty());
        let lambda = cfg.wavelength();
        for p in &paths {
            let bound = lambda / (4.0 * PI * p.length);
            assert!(p.amplitude.norm() <= bound * (1.0 + 1e-9), "path exceeds free-space bound");
        }
    }

    #[test]
    fn trace_is_deterministic() {
        let scene = synthetic::canyon_scene();
        let cfg = TraceConfig { ray_count: 20_000, ..TraceConfig::new(3.5e9) };
        let tx = Vec3::new(20.0, 100.0, 20.0);
        let rx = Vec3::new(180.0, 100.0, 1.5);
        let a = trace_paths(&scene, tx, rx, &cfg).unwrap();
        let b = trace_paths(&scene, tx, rx, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.surface_key, q.surface_key);
            assert_eq!(p.amplitude.re.to_bits(), q.amplitude.re.to_bits());
            assert_eq!(p.amplitude.im.to_bits(), q.amplitude.im.to_bits());
        }
    }

    /// Convergence: the single-wall bounce gain stays within 0.5 dB of the
    /// image-method oracle at both desk-scale ray counts.
    #[test]
    fn single_wall_convergence() {
        let scene = synthetic::single_wall_scene();
        let tx = synthetic::SINGLE_WALL_TX;
        let rx = synthetic::SINGLE_WALL_RX;
        let oracle = synthetic::single_wall_bounce_gain(3.5e9);
        for &n in &[10_000usize, 100_000] {
            let cfg = TraceConfig { ray_count: n, ..TraceConfig::new(3.5e9) };
            let paths = trace_paths(&scene, tx, rx, &cfg).unwrap();
            let got: f64 = paths
                .iter()
                .filter(|p| p.bounce_count() == 1 && matches!(p.surface_key[0], SurfaceRef::Wall { .. }))
                .map(|p| p.amplitude.norm_sqr())
                .sum();
            assert!(got > 0.0, "bounce not found at n={n}");
            let db = 10.0 * (got / oracle).log10();
            assert!(db.abs() < 0.5, "ray_count {n}: {db:.3} dB off the image oracle");
        }
    }

    #[test]
    fn scatter_paths_empty_when_material_does_not_scatter() {
        let mut materials = vec![Material::new("mirror", 5.0, 0.05, 0.0)];
        materials.push(Material::new("ground", 5.0, 0.05, 0.0));
        let scene = Scene::new(
            materials,
            vec![Building {
                id: "w".into(),
                footprint: vec![
                    Vec2::new(80.0, 40.0),
                    Vec2::new(90.0, 40.0),
                    Vec2::new(90.0, 160.0),
                    Vec2::new(80.0, 160.0),
                ],
                height: 30.0,
                material_id: "mirror".into(),
                group_id: None,
            }],
            Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(200.0, 200.0) },
            "ground".into(),
        )
        .unwrap();
        let cfg = TraceConfig { ray_count: 20_000, ..TraceConfig::new(3.5e9) };
        let paths =
            trace_scatter_single(&scene, Vec3::new(40.0, 100.0, 10.0), Vec3::new(60.0, 60.0, 1.5), &cfg).unwrap();
        assert!(paths.is_empty());
    }

    #[test]
    fn scatter_paths_found_on_jointly_visible_wall() {
        let scene = synthetic::single_wall_scene();
        let cfg = TraceConfig { ray_count: 30_000, ..TraceConfig::new(3.5e9) };
        let paths =
            trace_scatter_single(&scene, synthetic::SINGLE_WALL_TX, synthetic::SINGLE_WALL_RX, &cfg).unwrap();
        let on_wall = paths
            .iter()
            .filter(|p| matches!(p.surface_key[0], SurfaceRef::Wall { .. }))
            .count();
        assert!(on_wall > 0, "wall visible from both endpoints must scatter");
    }

    #[test]
    fn scatter_respects_receiver_occlusion() {
        // Receiver tucked behind the wall: no scatter path may reach it.
        let scene = synthetic::single_wall_scene();
        let cfg = TraceConfig { ray_count: 20_000, ..TraceConfig::new(3.5e9) };
        let hidden = Vec3::new(175.0, 100.0, 1.5);
        let paths = trace_scatter_single(&scene, synthetic::SINGLE_WALL_TX, hidden, &cfg).unwrap();
        let on_wall = paths
            .iter()
            .filter(|p| match p.surface_key[0] {
                SurfaceRef::Wall { building, .. } => building == 0,
                _ => false,
            })
            .count();
        assert_eq!(on_wall, 0, "occluded receiver must get no wall scatter");
    }
}
