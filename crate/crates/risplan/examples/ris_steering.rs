//! Configure a RIS aperture for anomalous reflection and sweep the
//! reradiated power over departure directions, then check energy
//! conservation by hemispherical quadrature.
//!
//! Run with: cargo run --release -p risplan --example ris_steering

use risplan::raytrace::SPEED_OF_LIGHT;
use risplan::rismodel::{
    configure_anomalous_phase, conservation_check, free_anchor, reradiated_amplitude, RisSpec,
    RisUnit,
};
use risplan::Vec3;

fn main() {
    let f = 3.5e9;
    let lambda = SPEED_OF_LIGHT / f;
    let unit = RisUnit::new(
        &free_anchor(Vec3::new(0.0, 0.0, 10.0), Vec3::new(1.0, 0.0, 0.0)),
        RisSpec::square(10.0 * lambda),
        f,
    )
    .unwrap();
    println!(
        "aperture {:.2} m x {:.2} m = {} elements at lambda/2, far field beyond {:.1} m",
        unit.spec.width,
        unit.spec.height,
        unit.sample_count(),
        unit.far_field_distance()
    );

    let d = unit.far_field_distance();
    let source = unit.center + unit.outward_normal * d;
    let incident = -unit.outward_normal;
    let steer_deg = 30.0_f64;
    let desired =
        (unit.outward_normal * steer_deg.to_radians().cos() + unit.axis_u * steer_deg.to_radians().sin()).normalized();
    let phase = configure_anomalous_phase(&unit, incident, desired, f).unwrap();
    println!(
        "steering {steer_deg} degrees off specular: phase gradient {:.2} rad/m along the aperture",
        phase.gx
    );
    let configured = unit.clone().with_phase(phase);

    println!("\nreradiated power vs observation angle (normal incidence):");
    for ang_deg in (-60..=60).step_by(10) {
        let ang = (ang_deg as f64).to_radians();
        let dir = (unit.outward_normal * ang.cos() + unit.axis_u * ang.sin()).normalized();
        let obs = unit.center + dir * d;
        let flat = reradiated_amplitude(&unit, source, obs).unwrap().norm_sqr();
        let steered = reradiated_amplitude(&configured, source, obs).unwrap().norm_sqr();
        let db = |v: f64| 10.0 * v.max(1e-30).log10();
        let bar = "#".repeat(((db(steered) + 140.0) / 2.5).max(0.0) as usize);
        println!(
            "  {ang_deg:>4} deg: flat {:>7.1} dB, steered {:>7.1} dB {bar}",
            db(flat),
            db(steered)
        );
    }

    let ratio_flat = conservation_check(&unit, source, f);
    let ratio_steered = conservation_check(&configured, source, f);
    println!("\nreradiated/incident power: flat plate {ratio_flat:.3}, steered {ratio_steered:.3}");
    println!("(bounded by eta R^2 = {:.3})", unit.spec.eta * unit.spec.r * unit.spec.r);
}
