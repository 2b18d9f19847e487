//! Trace the multipath between two points next to a single wall and compare
//! the specular bounce against the closed-form image-method solution.
//!
//! Run with: cargo run --release -p risplan --example multipath_trace

use risplan::raytrace::{trace_paths, TraceConfig};
use risplan::synthetic;

fn main() {
    let scene = synthetic::single_wall_scene();
    let cfg = TraceConfig { ray_count: 100_000, ..TraceConfig::new(3.5e9) };
    let tx = synthetic::SINGLE_WALL_TX;
    let rx = synthetic::SINGLE_WALL_RX;

    let paths = trace_paths(&scene, tx, rx, &cfg).unwrap();
    println!("{} paths from {:?} to {:?}:", paths.len(), tx, rx);
    println!("{:<28} {:>10} {:>12} {:>10}", "surfaces", "length m", "|amp|", "gain dB");
    for p in &paths {
        let label = if p.is_los() {
            "line of sight".to_string()
        } else {
            format!("{:?}", p.surface_key)
        };
        println!(
            "{:<28} {:>10.2} {:>12.3e} {:>10.2}",
            label,
            p.length,
            p.amplitude.norm(),
            20.0 * p.amplitude.norm().log10()
        );
    }

    let (point, length) = synthetic::single_wall_image_oracle();
    let oracle_gain = synthetic::single_wall_bounce_gain(cfg.frequency);
    println!("\nimage-method oracle:");
    println!("  reflection point ({:.3}, {:.3}, {:.3}), path length {:.3} m", point.x, point.y, point.z, length);
    println!("  bounce gain {:.2} dB", 10.0 * oracle_gain.log10());

    let bounce = paths
        .iter()
        .find(|p| p.bounce_count() == 1 && !p.is_los() && p.length > 100.0)
        .expect("wall bounce discovered");
    let refl = bounce.reflection_points().next().unwrap();
    println!(
        "  traced bounce lands {:.2e} m away, gain off by {:.4} dB",
        refl.point.distance(point),
        10.0 * (bounce.amplitude.norm_sqr() / oracle_gain).log10()
    );
}
