//! Synthetic scenes and networks used by the examples, the CLI quickstart,
//! and the test suite.
//!
//! The oracle helpers at the bottom compute expected values through direct
//! closed-form algebra, independent of the tracing pipeline they are used to
//! check.

use crate::arrays::{BaseStation, SectorGeometry};
use crate::geometry::{Vec2, Vec3};
use crate::scene::{Bounds2, Building, Material, Scene};
use num_complex::Complex64;
use std::f64::consts::PI;

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Vec2> {
    vec![Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)]
}

/// CCW footprint of a wall strip: the reflecting edge runs e0 -> e1 with its
/// outward normal to the right of the edge direction; the body extends
/// `thickness` meters behind it.
fn strip(e0: Vec2, e1: Vec2, thickness: f64) -> Vec<Vec2> {
    let d = (e1 - e0).normalized();
    let n = Vec2::new(d.y, -d.x);
    vec![e0, e1, e1 - n * thickness, e0 - n * thickness]
}

fn concrete() -> Material {
    Material::new("concrete", 5.31, 0.139, 0.3)
}

fn ground() -> Material {
    Material::new("ground", 5.0, 0.1, 0.9)
}

/// Empty scene with a fully diffuse ground, so line of sight is the only
/// coherent path. Bounds are `extent` x `extent` meters.
pub fn open_scene(extent: f64) -> Scene {
    Scene::new(
        vec![Material::new("ground", 5.0, 0.1, 1.0)],
        Vec::new(),
        Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(extent, extent) },
        "ground".into(),
    )
    .expect("valid open scene")
}

pub const SINGLE_WALL_TX: Vec3 = Vec3 { x: 50.0, y: 100.0, z: 10.0 };
pub const SINGLE_WALL_RX: Vec3 = Vec3 { x: 80.0, y: 60.0, z: 1.5 };
/// x-plane of the reflecting (west) face of the single-wall fixture.
pub const SINGLE_WALL_PLANE_X: f64 = 150.0;

/// One tall slab east of both endpoints: LoS plus a single wall bounce
/// (plus a weak ground bounce).
pub fn single_wall_scene() -> Scene {
    Scene::new(
        vec![concrete(), Material::new("ground", 5.0, 0.1, 0.5)],
        vec![Building {
            id: "slab".into(),
            footprint: rect(SINGLE_WALL_PLANE_X, 20.0, 170.0, 180.0),
            height: 40.0,
            material_id: "concrete".into(),
            group_id: None,
        }],
        Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(200.0, 200.0) },
        "ground".into(),
    )
    .expect("valid single-wall scene")
}

/// Four-building street canyon on a 200 m x 200 m tile.
pub fn canyon_scene() -> Scene {
    let blocks = [
        (rect(40.0, 40.0, 90.0, 90.0), 25.0),
        (rect(110.0, 40.0, 160.0, 90.0), 30.0),
        (rect(40.0, 110.0, 90.0, 160.0), 20.0),
        (rect(110.0, 110.0, 160.0, 160.0), 35.0),
    ];
    Scene::new(
        vec![concrete(), ground()],
        blocks
            .into_iter()
            .enumerate()
            .map(|(i, (footprint, height))| Building {
                id: format!("block-{i}"),
                footprint,
                height,
                material_id: "concrete".into(),
                group_id: None,
            })
            .collect(),
        Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(200.0, 200.0) },
        "ground".into(),
    )
    .expect("valid canyon scene")
}

pub const ZIGZAG_TX: Vec3 = Vec3 { x: 20.0, y: 30.0, z: 8.0 };
pub const ZIGZAG_RX: Vec3 = Vec3 { x: 180.0, y: 130.0, z: 1.5 };
/// Expected 2D bounce points of the two-bounce periscope path, in path order.
pub const ZIGZAG_BOUNCE_1: Vec2 = Vec2 { x: 110.0, y: 30.0 };
pub const ZIGZAG_BOUNCE_2: Vec2 = Vec2 { x: 110.0, y: 130.0 };

/// Periscope fixture: direct and single-bounce routes are blocked, so the
/// strongest path makes exactly two mirror bounces off the diagonal walls.
pub fn zigzag_scene() -> Scene {
    let buildings = vec![
        Building {
            id: "mirror-lo".into(),
            footprint: strip(Vec2::new(135.0, 55.0), Vec2::new(95.0, 15.0), 15.0),
            height: 30.0,
            material_id: "concrete".into(),
            group_id: None,
        },
        Building {
            id: "mirror-hi".into(),
            footprint: strip(Vec2::new(90.0, 110.0), Vec2::new(130.0, 150.0), 15.0),
            height: 30.0,
            material_id: "concrete".into(),
            group_id: None,
        },
        Building {
            id: "blocker".into(),
            footprint: rect(140.0, 60.0, 160.0, 120.0),
            height: 40.0,
            material_id: "concrete".into(),
            group_id: None,
        },
    ];
    Scene::new(
        vec![concrete(), ground()],
        buildings,
        Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(200.0, 200.0) },
        "ground".into(),
    )
    .expect("valid zigzag scene")
}

/// Base station of the blocked-courtyard fixture.
pub const COURTYARD_BS: Vec3 = Vec3 { x: 40.0, y: 200.0, z: 30.0 };
/// A tile center in the heart of the shadowed courtyard.
pub const COURTYARD_SHADOW_PROBE: Vec3 = Vec3 { x: 301.0, y: 201.0, z: 1.5 };
/// Outage tile reachable only through an already-deployed unit nearby.
pub const COURTYARD_ORPHAN: Vec2 = Vec2 { x: 291.0, y: 111.0 };

/// Blocked-courtyard scene: a slab shadows a courtyard east of it, a weakly
/// reflective angled facade south of the courtyard carries the only specular
/// route in, and a second blocker carves a ray-starved pocket whose tiles can
/// only be rescued by a unit already standing on the facade.
pub fn courtyard_scene() -> Scene {
    let weak = Material::new("weak_facade", 1.26, 0.0, 0.99);
    let buildings = vec![
        Building {
            id: "slab".into(),
            footprint: rect(200.0, 180.0, 240.0, 220.0),
            height: 35.0,
            material_id: "concrete".into(),
            group_id: None,
        },
        Building {
            id: "facade".into(),
            footprint: strip(Vec2::new(352.0, 102.0), Vec2::new(240.0, 60.0), 20.0),
            height: 25.0,
            material_id: "weak_facade".into(),
            group_id: Some("facade-group".into()),
        },
        Building {
            id: "pocket-blocker".into(),
            footprint: rect(180.0, 120.0, 210.0, 150.0),
            height: 30.0,
            material_id: "concrete".into(),
            group_id: None,
        },
        Building {
            id: "north-block".into(),
            footprint: rect(300.0, 360.0, 360.0, 400.0),
            height: 20.0,
            material_id: "concrete".into(),
            group_id: None,
        },
    ];
    Scene::new(
        vec![concrete(), weak, ground()],
        buildings,
        Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(400.0, 400.0) },
        "ground".into(),
    )
    .expect("valid courtyard scene")
}

/// Single east-facing sector serving the courtyard scene.
pub fn courtyard_network() -> Vec<BaseStation> {
    vec![BaseStation {
        position: COURTYARD_BS,
        sectors: vec![SectorGeometry { bearing_deg: 0.0, tilt_deg: 5.0 }],
    }]
}

/// Calibration playground: a blocker shadows a strip of tiles that are lit
/// only by two angled facades whose materials belong to learnable groups.
pub fn calibration_scene(facade: Material) -> Scene {
    let mut south = facade.clone();
    south.id = "facade_s".into();
    let mut north = facade;
    north.id = "facade_n".into();
    let buildings = vec![
        Building {
            id: "blocker".into(),
            footprint: rect(150.0, 135.0, 180.0, 165.0),
            height: 30.0,
            material_id: "concrete".into(),
            group_id: None,
        },
        Building {
            id: "south-facade".into(),
            footprint: strip(Vec2::new(270.0, 80.0), Vec2::new(180.0, 45.0), 20.0),
            height: 25.0,
            material_id: "facade_s".into(),
            group_id: Some("gs".into()),
        },
        Building {
            id: "north-facade".into(),
            footprint: strip(Vec2::new(180.0, 255.0), Vec2::new(270.0, 220.0), 20.0),
            height: 25.0,
            material_id: "facade_n".into(),
            group_id: Some("gn".into()),
        },
    ];
    Scene::new(
        vec![concrete(), south, north, ground()],
        buildings,
        Bounds2 { min: Vec2::new(0.0, 0.0), max: Vec2::new(300.0, 300.0) },
        "ground".into(),
    )
    .expect("valid calibration scene")
}

/// Ground-truth facade material for the calibration experiment.
pub fn calibration_truth_material() -> Material {
    Material::new("facade", 1.8, 0.0, 0.85)
}

pub const CALIBRATION_BS: Vec3 = Vec3 { x: 30.0, y: 150.0, z: 25.0 };

pub fn calibration_network() -> Vec<BaseStation> {
    vec![BaseStation {
        position: CALIBRATION_BS,
        sectors: vec![SectorGeometry { bearing_deg: 0.0, tilt_deg: 5.0 }],
    }]
}

// ---------------------------------------------------------------------------
// Closed-form oracles.

/// Image-method solution for the single-wall fixture: exact reflection point
/// and total path length for TX -> wall -> RX.
pub fn single_wall_image_oracle() -> (Vec3, f64) {
    let tx = SINGLE_WALL_TX;
    let rx = SINGLE_WALL_RX;
    let mirrored = Vec3::new(2.0 * SINGLE_WALL_PLANE_X - tx.x, tx.y, tx.z);
    let t = (SINGLE_WALL_PLANE_X - mirrored.x) / (rx.x - mirrored.x);
    let point = mirrored + (rx - mirrored) * t;
    let length = mirrored.distance(rx);
    (point, length)
}

/// Analytic power gain of the single-wall bounce: Fresnel TE reflection with
/// the diffuse energy split, times the Friis factor of the image path.
pub fn single_wall_bounce_gain(frequency: f64) -> f64 {
    let (point, length) = single_wall_image_oracle();
    let tx = SINGLE_WALL_TX;
    let d_in = (point - tx).normalized();
    let cos_i = d_in.x; // wall normal is -x
    let m = concrete();
    let eps_c = Complex64::new(m.eps_r, -m.sigma / (2.0 * PI * frequency * 8.854_187_812_8e-12));
    let root = (eps_c - Complex64::new(1.0 - cos_i * cos_i, 0.0)).sqrt();
    let gamma = (Complex64::new(cos_i, 0.0) - root) / (Complex64::new(cos_i, 0.0) + root);
    let lambda = 299_792_458.0 / frequency;
    let friis = lambda / (4.0 * PI * length);
    friis * friis * gamma.norm_sqr() * (1.0 - m.scatter_s)
}
