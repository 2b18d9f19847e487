//! Compute a best-server coverage map over the street-canyon scene and print
//! outage statistics plus a coarse RSRP histogram.
//!
//! Run with: cargo run --release -p risplan --example coverage_map

use risplan::arrays::{BaseStation, SectorGeometry, SystemConfig, SystemPreset};
use risplan::coverage::{coverage_map, rsrp_cdf};
use risplan::raytrace::TraceConfig;
use risplan::scene::TileGrid;
use risplan::synthetic;
use risplan::Vec3;

fn main() {
    let scene = synthetic::canyon_scene();
    let network = vec![
        BaseStation {
            position: Vec3::new(20.0, 100.0, 28.0),
            sectors: vec![
                SectorGeometry { bearing_deg: 0.0, tilt_deg: 6.0 },
                SectorGeometry { bearing_deg: 120.0, tilt_deg: 6.0 },
                SectorGeometry { bearing_deg: -120.0, tilt_deg: 6.0 },
            ],
        },
        BaseStation {
            position: Vec3::new(180.0, 100.0, 28.0),
            sectors: vec![
                SectorGeometry { bearing_deg: 180.0, tilt_deg: 6.0 },
                SectorGeometry { bearing_deg: 60.0, tilt_deg: 6.0 },
                SectorGeometry { bearing_deg: -60.0, tilt_deg: 6.0 },
            ],
        },
    ];
    let system = SystemConfig::preset(SystemPreset::FiveG);
    let cfg = TraceConfig { ray_count: 60_000, ..TraceConfig::new(system.frequency) };
    let grid = TileGrid::covering(scene.bounds(), 2.0, 1.5);

    println!(
        "tracing {} tiles at {:.1} GHz with {} rays per station...",
        grid.len(),
        system.frequency / 1e9,
        cfg.ray_count
    );
    let map = coverage_map(&scene, &network, &system, &grid, &cfg, -100.0, 1).unwrap();

    let outdoor = map.records.iter().filter(|r| !r.indoor).count();
    let outage = map.outage_tiles();
    println!(
        "outdoor tiles {}, outage {} ({:.2}%)",
        outdoor,
        outage.len(),
        100.0 * outage.len() as f64 / outdoor as f64
    );

    let cdf = rsrp_cdf(&map);
    println!("no-signal fraction: {:.4}", cdf.no_signal_fraction);
    for pct in [0.05, 0.25, 0.5, 0.75, 0.95] {
        if let Some((v, _)) = cdf.points.iter().find(|(_, c)| *c >= pct) {
            println!("  RSRP p{:>2.0}: {v:8.2} dBm", pct * 100.0);
        }
    }

    // Coarse ASCII heat strip along the central street.
    let row = grid.rows / 2;
    let mut line = String::new();
    for col in (0..grid.cols).step_by(2) {
        let r = map.record(row, col);
        line.push(if r.indoor {
            '#'
        } else if !r.rsrp_dbm.is_finite() {
            ' '
        } else if r.rsrp_dbm > -70.0 {
            '@'
        } else if r.rsrp_dbm > -85.0 {
            '+'
        } else if r.rsrp_dbm > -100.0 {
            '.'
        } else {
            'o'
        });
    }
    println!("central street (west to east): |{line}|");
}
