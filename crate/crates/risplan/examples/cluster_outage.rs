//! Detect outage tiles on the blocked-courtyard scene and cluster them with
//! BIRCH across a range of distance thresholds.
//!
//! Run with: cargo run --release -p risplan --example cluster_outage

use risplan::arrays::{SystemConfig, SystemPreset};
use risplan::clustering::{birch_cluster, DEFAULT_BRANCHING};
use risplan::coverage::coverage_map;
use risplan::raytrace::TraceConfig;
use risplan::scene::TileGrid;
use risplan::synthetic;
use risplan::Vec2;

fn main() {
    let scene = synthetic::courtyard_scene();
    let network = synthetic::courtyard_network();
    let system = SystemConfig::preset(SystemPreset::FourG);
    let cfg = TraceConfig { ray_count: 60_000, ..TraceConfig::new(system.frequency) };
    let grid = TileGrid::covering(scene.bounds(), 2.0, 1.5);

    let map = coverage_map(&scene, &network, &system, &grid, &cfg, -100.0, 1).unwrap();
    let outage = map.outage_tiles();
    println!("{} outage tiles below -100 dBm", outage.len());

    let points: Vec<Vec2> = outage.iter().map(|&t| grid.center_of(t).xy()).collect();
    println!("\ncluster count vs distance threshold T:");
    for t in [5.0, 10.0, 15.0, 20.0, 30.0] {
        let clusters = birch_cluster(&points, t, DEFAULT_BRANCHING).unwrap();
        let largest = clusters.iter().map(|c| c.cf.count).max().unwrap_or(0);
        println!(
            "  T = {t:>4.0} m: {:>4} clusters (largest holds {largest} tiles)",
            clusters.len()
        );
    }

    let clusters = birch_cluster(&points, 15.0, DEFAULT_BRANCHING).unwrap();
    println!("\nfive largest clusters at T = 15 m:");
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(clusters[i].cf.count));
    for &i in order.iter().take(5) {
        let c = &clusters[i];
        println!(
            "  cluster {:>3}: {:>3} tiles, centroid ({:>6.1}, {:>6.1}), radius {:.2} m",
            i,
            c.cf.count,
            c.centroid.x,
            c.centroid.y,
            c.cf.radius()
        );
    }
}
