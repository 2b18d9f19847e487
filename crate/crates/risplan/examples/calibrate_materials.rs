//! Material calibration against synthetic measurements: the fixture's true
//! facade materials generate noisy region averages, calibration starts from
//! the standard initial values, and the fitted scene is compared back.
//!
//! Run with: cargo run --release -p risplan --example calibrate_materials

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use risplan::arrays::{SystemConfig, SystemPreset};
use risplan::calibration::{
    build_target_regions, calibrate_scene, explode_group_materials, CalSim, MeasurementSample,
};
use risplan::raytrace::TraceConfig;
use risplan::scene::TileGrid;
use risplan::synthetic;
use risplan::Vec2;

fn main() {
    let truth_mat = synthetic::calibration_truth_material();
    println!(
        "ground truth facades: eps_r {}, sigma {}, scatter {}",
        truth_mat.eps_r, truth_mat.sigma, truth_mat.scatter_s
    );
    let truth = synthetic::calibration_scene(truth_mat);
    let network = synthetic::calibration_network();
    let system = SystemConfig::preset(SystemPreset::FourG);
    let cfg = TraceConfig { ray_count: 60_000, ..TraceConfig::new(system.frequency) };
    let grid = TileGrid::covering(truth.bounds(), 2.0, 1.5);

    // Synthetic campaign: 24 noisy samples per 10 m square along the shadow
    // strip that only the facade reflections illuminate.
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
    let (truth_cal, _) = explode_group_materials(&truth).unwrap();
    let probes: Vec<MeasurementSample> = positions
        .iter()
        .map(|p| MeasurementSample { x: p.x, y: p.y, rsrp_dbm: 0.0, outdoor: true })
        .collect();
    let regions = build_target_regions(&probes, &truth_cal, 20, 10.0);
    let sim = CalSim::new(&truth_cal, &network, &system, &grid, &cfg, &regions).unwrap();
    let mats = truth_cal.materials().to_vec();
    let mut samples = Vec::new();
    for (ri, r) in regions.iter().enumerate() {
        let avg = sim.region_avg_dbm(ri, &mats).unwrap();
        for &si in &r.sample_indices {
            let u1: f64 = rng.gen_range(1e-12..1.0_f64);
            let u2: f64 = rng.gen_range(0.0..1.0_f64);
            let noise = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * 2.0;
            samples.push(MeasurementSample {
                x: positions[si].x,
                y: positions[si].y,
                rsrp_dbm: avg + noise,
                outdoor: true,
            });
        }
    }
    println!("{} regions, {} samples with 2 dB noise", regions.len(), samples.len());

    let result =
        calibrate_scene(&truth, &network, &system, &samples, &grid, &cfg, 600, 0.05, 42).unwrap();
    println!("\nfitted parameters (eps_r, sigma, scatter):");
    for (g, p) in &result.fitted {
        println!("  group {g}: ({:.3}, {:.3}, {:.3})", p[0], p[1], p[2]);
    }
    if !result.excluded.is_empty() {
        println!("excluded regions: {:?}", result.excluded);
    }

    // Residual region error on the calibrated scene.
    let fin_regions = build_target_regions(&samples, &result.scene, 20, 10.0);
    let fin_sim = CalSim::new(&result.scene, &network, &system, &grid, &cfg, &fin_regions).unwrap();
    let fin_mats = result.scene.materials().to_vec();
    let errors: Vec<f64> = fin_regions
        .iter()
        .enumerate()
        .filter_map(|(ri, r)| fin_sim.region_avg_dbm(ri, &fin_mats).map(|a| a - r.avg_measured_dbm))
        .collect();
    let mean = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
    println!("\nresidual mean |region error|: {mean:.2} dB over {} regions", errors.len());
}
