//! Write the bundled synthetic scenes, a matching network file, a synthetic
//! measurement campaign, and a ready-to-run configuration into ./demo so the
//! `risplan` binary has something to chew on.
//!
//! Run with: cargo run --release -p risplan --example export_fixtures

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use risplan::arrays::{SystemConfig, SystemPreset};
use risplan::calibration::{build_target_regions, explode_group_materials, CalSim, MeasurementSample};
use risplan::cli::save_network;
use risplan::raytrace::TraceConfig;
use risplan::scene::{save_scene, TileGrid};
use risplan::synthetic;
use risplan::Vec2;
use std::path::Path;

fn main() {
    let demo = Path::new("demo");
    std::fs::create_dir_all(demo).unwrap();

    save_scene(&synthetic::courtyard_scene(), &demo.join("courtyard.json")).unwrap();
    save_network(&synthetic::courtyard_network(), &demo.join("courtyard_network.json")).unwrap();
    save_scene(&synthetic::canyon_scene(), &demo.join("canyon.json")).unwrap();

    let cal_scene = synthetic::calibration_scene(synthetic::calibration_truth_material());
    save_scene(&cal_scene, &demo.join("calibration.json")).unwrap();
    save_network(&synthetic::calibration_network(), &demo.join("calibration_network.json")).unwrap();

    // Synthetic measurement campaign for the calibration scene, stored as
    // lat/lon about the scene origin.
    let system = SystemConfig::preset(SystemPreset::FourG);
    let cfg = TraceConfig { ray_count: 60_000, ..TraceConfig::new(system.frequency) };
    let grid = TileGrid::covering(cal_scene.bounds(), 2.0, 1.5);
    let network = synthetic::calibration_network();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut positions: Vec<Vec2> = Vec::new();
    for ry in [140.0, 150.0] {
        for rxi in 0..8 {
            let rx = 210.0 + 10.0 * rxi as f64;
            for k in 0..24 {
                positions.push(Vec2::new(
                    rx + 1.0 + (k % 5) as f64 * 1.9 + rng.gen_range(0.0..0.9),
                    ry + 1.0 + (k / 5) as f64 * 1.8 + rng.gen_range(0.0..0.7),
                ));
            }
        }
    }
    let (truth_cal, _) = explode_group_materials(&cal_scene).unwrap();
    let probes: Vec<MeasurementSample> = positions
        .iter()
        .map(|p| MeasurementSample { x: p.x, y: p.y, rsrp_dbm: 0.0, outdoor: true })
        .collect();
    let regions = build_target_regions(&probes, &truth_cal, 20, 10.0);
    let sim = CalSim::new(&truth_cal, &network, &system, &grid, &cfg, &regions).unwrap();
    let mats = truth_cal.materials().to_vec();
    let meters_per_degree = std::f64::consts::PI / 180.0 * 6_371_000.0;
    let mut csv = String::from("lat,lon,rsrp_dbm,sinr_db,indoor\n");
    for (ri, r) in regions.iter().enumerate() {
        let avg = sim.region_avg_dbm(ri, &mats).unwrap();
        for &si in &r.sample_indices {
            let u1: f64 = rng.gen_range(1e-12..1.0_f64);
            let u2: f64 = rng.gen_range(0.0..1.0_f64);
            let noise = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * 2.0;
            csv.push_str(&format!(
                "{:.9},{:.9},{:.2},,0\n",
                positions[si].y / meters_per_degree,
                positions[si].x / meters_per_degree,
                avg + noise
            ));
        }
    }
    std::fs::write(demo.join("measurements.csv"), csv).unwrap();

    std::fs::write(
        demo.join("courtyard.toml"),
        "scene_path = \"demo/courtyard.json\"\n\
         network_path = \"demo/courtyard_network.json\"\n\
         system = \"4G\"\n\
         output_dir = \"demo/out\"\n\n\
         [trace]\n\
         ray_count = 100000\n\n\
         [pipeline]\n\
         ris_width = 6.0\n\
         ris_height = 6.0\n",
    )
    .unwrap();
    std::fs::write(
        demo.join("calibration.toml"),
        "scene_path = \"demo/calibration.json\"\n\
         network_path = \"demo/calibration_network.json\"\n\
         system = \"4G\"\n\
         output_dir = \"demo/out-cal\"\n\n\
         [trace]\n\
         ray_count = 60000\n\n\
         [calibration]\n\
         measurements_path = \"demo/measurements.csv\"\n\
         seed = 42\n",
    )
    .unwrap();

    println!("wrote demo fixtures:");
    for entry in std::fs::read_dir(demo).unwrap() {
        println!("  {}", entry.unwrap().path().display());
    }
    println!("\ntry:");
    println!("  cargo run --release -p risplan --bin risplan -- place --config demo/courtyard.toml");
    println!("  cargo run --release -p risplan --bin risplan -- calibrate --config demo/calibration.toml");
}
