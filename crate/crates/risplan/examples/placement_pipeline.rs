//! Run the full RIS deployment pipeline on the blocked-courtyard scene:
//! coverage, clustering, reflection-based placement, re-clustering of
//! leftovers, and re-association to deployed units.
//!
//! Run with: cargo run --release -p risplan --example placement_pipeline

use risplan::arrays::{SystemConfig, SystemPreset};
use risplan::coverage::coverage_map;
use risplan::placement::{run_pipeline, OutcomeStatus, PipelineConfig};
use risplan::raytrace::TraceConfig;
use risplan::rismodel::RisSpec;
use risplan::scene::TileGrid;
use risplan::synthetic;
use std::time::Instant;

fn main() {
    let scene = synthetic::courtyard_scene();
    let network = synthetic::courtyard_network();
    let system = SystemConfig::preset(SystemPreset::FourG);
    let cfg = TraceConfig { ray_count: 100_000, ..TraceConfig::new(system.frequency) };
    let grid = TileGrid::covering(scene.bounds(), 2.0, 1.5);

    let t0 = Instant::now();
    let map = coverage_map(&scene, &network, &system, &grid, &cfg, -100.0, 1).unwrap();
    println!("coverage over {} tiles in {:.1} s", grid.len(), t0.elapsed().as_secs_f64());

    let pcfg = PipelineConfig { ris: RisSpec::square(6.0), ..PipelineConfig::default() };
    let t1 = Instant::now();
    let report = run_pipeline(&scene, &network, &system, map, &cfg, &pcfg).unwrap();
    println!("pipeline in {:.1} s", t1.elapsed().as_secs_f64());

    let count = |s: OutcomeStatus| report.outcomes.iter().filter(|o| o.status == s).count();
    println!("\noutage tiles: {}", report.outage.len());
    println!("clusters: {} (effective {}, deferred {}, unserved {})",
        report.clusters.len(),
        count(OutcomeStatus::RisEffective),
        count(OutcomeStatus::Deferred),
        count(OutcomeStatus::Unserved),
    );
    println!("units deployed: {}", report.deployments.len());
    println!("tiles re-associated to existing units: {}", report.reassociations.len());
    let [s1, s2, s3] = report.stage_recovery;
    println!("\nrecovered outage fraction by stage:");
    println!("  placement          {:.1}%", 100.0 * s1);
    println!("  + re-clustering    {:.1}%", 100.0 * s2);
    println!("  + re-association   {:.1}%", 100.0 * s3);

    println!("\ntop-N prioritization curve (units sorted by cluster size):");
    for &(n, frac) in report.curve.iter().step_by(report.curve.len().div_ceil(12).max(1)) {
        let bar = "#".repeat((frac * 50.0) as usize);
        println!("  n = {n:>3}: {:>5.1}% {bar}", frac * 100.0);
    }

    println!("\nfirst deployments:");
    for d in report.deployment_records().iter().take(5) {
        println!(
            "  unit {} on building face at ({:.1}, {:.1}, {:.1}), serving beam {} of station {}",
            d.ris_id, d.center.x, d.center.y, d.center.z, d.serving_beam, d.serving_bs
        );
    }
}
