//! Inspect the DFT beamforming codebook of each radio preset: beam steering
//! angles, orthogonality, and the element pattern.
//!
//! Run with: cargo run --release -p risplan --example beam_codebook

use num_complex::Complex64;
use risplan::arrays::{beam_angles, dft_beam, element_gain, SystemConfig, SystemPreset};

fn main() {
    for preset in [SystemPreset::FourG, SystemPreset::FiveG, SystemPreset::SixG] {
        let sys = SystemConfig::preset(preset);
        println!(
            "{}: {} x {} array, {} beams at {:.1} GHz",
            sys.name,
            sys.m_h,
            sys.m_v,
            sys.codebook_size(),
            sys.frequency / 1e9
        );
        println!("  horizontal steering angles (deg):");
        print!("   ");
        for bh in 0..sys.m_h {
            let (_, phi) = beam_angles(bh, sys.m_v / 2, sys.m_h, sys.m_v).unwrap();
            print!(" {:7.2}", phi.to_degrees());
        }
        println!();
        // Orthogonality spot check between the first two beams.
        let a = dft_beam(0, 0, sys.m_h, sys.m_v).unwrap();
        let b = dft_beam(1, 0, sys.m_h, sys.m_v).unwrap();
        let dot: Complex64 = a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
        println!("  |<w00, w10>| = {:.2e}", dot.norm());
    }

    println!("\n3GPP element pattern cut (elevation 0):");
    for az_deg in (0..=180).step_by(15) {
        let g = element_gain(0.0, (az_deg as f64).to_radians());
        let bar = "#".repeat(((g + 22.0) / 1.5).max(0.0) as usize);
        println!("  az {az_deg:>3} deg: {g:>6.1} dBi {bar}");
    }
}
