//! BS sector arrays: 3GPP element pattern, DFT beamforming codebook, steering
//! vectors, and channel-vector assembly.
//!
//! Conventions. The codebook is the Kronecker DFT set
//! w[a] = e^{-j 2 pi m a / M} / sqrt(M) per axis; beam (m_h, m_v) points at
//! sin(phi) = 2 m_h / M_h - 1 and sin(theta) = 2 m_v / M_v - 1. The steering
//! vector uses the matching half-wavelength phase e^{-j pi a (sin + 1)} with
//! unit-magnitude entries, so |h^H w|^2 of a single on-grid path reaches the
//! full array gain M and the index-to-angle map is the exact argmax relation.

use crate::geometry::Vec3;
use crate::raytrace::RayPath;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArrayError {
    #[error("beam index ({0}, {1}) out of range for {2}x{3} array")]
    BeamOutOfRange(usize, usize, usize, usize),
}

/// One sector antenna: a vertically polarized uniform planar array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorArray {
    pub position: Vec3,
    /// Azimuth of the boresight, degrees counterclockwise from +x.
    pub bearing_deg: f64,
    /// Mechanical downtilt, degrees (positive points below horizontal).
    pub tilt_deg: f64,
    pub m_h: usize,
    pub m_v: usize,
    /// Element spacing in wavelengths; the codebook math assumes 0.5.
    pub element_spacing: f64,
    pub hpbw_az_deg: f64,
    pub hpbw_el_deg: f64,
}

impl SectorArray {
    pub fn new(position: Vec3, bearing_deg: f64, tilt_deg: f64, m_h: usize, m_v: usize) -> Self {
        SectorArray {
            position,
            bearing_deg,
            tilt_deg,
            m_h,
            m_v,
            element_spacing: 0.5,
            hpbw_az_deg: 65.0,
            hpbw_el_deg: 10.0,
        }
    }

    pub fn elements(&self) -> usize {
        self.m_h * self.m_v
    }

    /// Local right-handed frame: x = boresight, y = horizontal transverse,
    /// z = elevation axis. Bearing rotates about world z, tilt about the
    /// rotated horizontal axis.
    pub fn local_axes(&self) -> (Vec3, Vec3, Vec3) {
        let b = self.bearing_deg.to_radians();
        let t = self.tilt_deg.to_radians();
        let x = Vec3::new(t.cos() * b.cos(), t.cos() * b.sin(), -t.sin());
        let y = Vec3::new(-b.sin(), b.cos(), 0.0);
        let z = Vec3::new(t.sin() * b.cos(), t.sin() * b.sin(), t.cos());
        (x, y, z)
    }

    pub fn boresight(&self) -> Vec3 {
        self.local_axes().0
    }

    /// World direction expressed as local (azimuth, elevation) in radians.
    pub fn local_angles(&self, dir: Vec3) -> (f64, f64) {
        let (x, y, z) = self.local_axes();
        let u = Vec3::new(dir.dot(x), dir.dot(y), dir.dot(z));
        let az = u.y.atan2(u.x);
        let el = u.z.clamp(-1.0, 1.0).asin();
        (az, el)
    }

    /// Unnormalized steering vector for a world departure direction.
    ///
    /// Entries have unit magnitude; the m_h axis varies slowest (Kronecker
    /// layout, index = a_h * m_v + a_v).
    pub fn steering(&self, dir: Vec3) -> Vec<Complex64> {
        let (az, el) = self.local_angles(dir);
        let sin_phi = az.sin();
        let sin_theta = el.sin();
        let mut v = Vec::with_capacity(self.elements());
        for a_h in 0..self.m_h {
            let ph = -PI * a_h as f64 * (sin_phi + 1.0);
            for a_v in 0..self.m_v {
                let pv = -PI * a_v as f64 * (sin_theta + 1.0);
                v.push(Complex64::from_polar(1.0, ph + pv));
            }
        }
        v
    }
}

/// Radio deployment identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemPreset {
    #[serde(rename = "4G")]
    FourG,
    #[serde(rename = "5G")]
    FiveG,
    #[serde(rename = "6G")]
    SixG,
}

impl std::str::FromStr for SystemPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "4G" => Ok(SystemPreset::FourG),
            "5G" => Ok(SystemPreset::FiveG),
            "6G" => Ok(SystemPreset::SixG),
            other => Err(format!("unknown system '{other}', expected 4G, 5G, or 6G")),
        }
    }
}

impl std::fmt::Display for SystemPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SystemPreset::FourG => "4G",
            SystemPreset::FiveG => "5G",
            SystemPreset::SixG => "6G",
        };
        f.write_str(s)
    }
}

/// Per-system radio parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub name: SystemPreset,
    pub frequency: f64,
    pub bandwidth: f64,
    pub m_h: usize,
    pub m_v: usize,
    pub tx_power_subcarrier_dbm: f64,
    pub subcarrier_count: usize,
}

impl SystemConfig {
    pub fn preset(name: SystemPreset) -> SystemConfig {
        match name {
            SystemPreset::FourG => SystemConfig {
                name,
                frequency: 2.0e9,
                bandwidth: 20.0e6,
                m_h: 2,
                m_v: 2,
                tx_power_subcarrier_dbm: 12.2,
                subcarrier_count: 1200,
            },
            SystemPreset::FiveG => SystemConfig {
                name,
                frequency: 3.5e9,
                bandwidth: 100.0e6,
                m_h: 4,
                m_v: 8,
                tx_power_subcarrier_dbm: 13.85,
                subcarrier_count: 3276,
            },
            SystemPreset::SixG => SystemConfig {
                name,
                frequency: 10.0e9,
                bandwidth: 200.0e6,
                m_h: 4,
                m_v: 16,
                tx_power_subcarrier_dbm: 8.85,
                subcarrier_count: 3276,
            },
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.m_h * self.m_v
    }

    pub fn wavelength(&self) -> f64 {
        crate::raytrace::SPEED_OF_LIGHT / self.frequency
    }
}

/// Base station site: one position, one or more sector antennas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub position: Vec3,
    pub sectors: Vec<SectorGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorGeometry {
    pub bearing_deg: f64,
    pub tilt_deg: f64,
}

impl BaseStation {
    pub fn sector_array(&self, sector: usize, system: &SystemConfig) -> SectorArray {
        let g = self.sectors[sector];
        SectorArray::new(self.position, g.bearing_deg, g.tilt_deg, system.m_h, system.m_v)
    }
}

/// DFT codebook vector w_{m_h} (x) w_{m_v}, unit Euclidean norm.
pub fn dft_beam(m_h_idx: usize, m_v_idx: usize, m_h: usize, m_v: usize) -> Result<Vec<Complex64>, ArrayError> {
    if m_h_idx >= m_h || m_v_idx >= m_v {
        return Err(ArrayError::BeamOutOfRange(m_h_idx, m_v_idx, m_h, m_v));
    }
    let norm = 1.0 / ((m_h * m_v) as f64).sqrt();
    let mut w = Vec::with_capacity(m_h * m_v);
    for a_h in 0..m_h {
        let ph = -2.0 * PI * (m_h_idx * a_h) as f64 / m_h as f64;
        for a_v in 0..m_v {
            let pv = -2.0 * PI * (m_v_idx * a_v) as f64 / m_v as f64;
            w.push(Complex64::from_polar(norm, ph + pv));
        }
    }
    Ok(w)
}

/// Steering angles of a codebook beam: sin(theta) = 2 m_v / M_v - 1,
/// sin(phi) = 2 m_h / M_h - 1.
pub fn beam_angles(m_h_idx: usize, m_v_idx: usize, m_h: usize, m_v: usize) -> Result<(f64, f64), ArrayError> {
    if m_h_idx >= m_h || m_v_idx >= m_v {
        return Err(ArrayError::BeamOutOfRange(m_h_idx, m_v_idx, m_h, m_v));
    }
    let sin_theta = 2.0 * m_v_idx as f64 / m_v as f64 - 1.0;
    let sin_phi = 2.0 * m_h_idx as f64 / m_h as f64 - 1.0;
    Ok((sin_theta.asin(), sin_phi.asin()))
}

const ELEMENT_PEAK_DBI: f64 = 8.0;
const SLA_V_DB: f64 = 30.0;
const A_MAX_DB: f64 = 30.0;
const THETA_3DB_DEG: f64 = 10.0;
const PHI_3DB_DEG: f64 = 65.0;

/// 3GPP TR 38.901 element pattern, in dBi. Angles are offsets from boresight
/// in the local element frame (radians).
pub fn element_gain(theta_local: f64, phi_local: f64) -> f64 {
    let th = theta_local.to_degrees();
    let ph = phi_local.to_degrees();
    let a_v = -(12.0 * (th / THETA_3DB_DEG).powi(2)).min(SLA_V_DB);
    let a_h = -(12.0 * (ph / PHI_3DB_DEG).powi(2)).min(A_MAX_DB);
    let a = -((-(a_v + a_h)).min(A_MAX_DB));
    ELEMENT_PEAK_DBI + a
}

/// Assemble the directional channel vector at a receiver from traced paths:
/// h = sum over paths of amplitude * sqrt(element gain) * steering(departure).
///
/// An empty path list yields the zero vector (deep outage).
pub fn channel_vector(paths: &[RayPath], array: &SectorArray, _frequency: f64) -> Vec<Complex64> {
    let m = array.elements();
    let mut h = vec![Complex64::new(0.0, 0.0); m];
    for p in paths {
        let (az, el) = array.local_angles(p.departure_dir);
        let g = 10.0_f64.powf(element_gain(el, az) / 10.0);
        let w = p.amplitude * g.sqrt();
        let steer = array.steering(p.departure_dir);
        for (hi, si) in h.iter_mut().zip(steer.iter()) {
            *hi += w * si;
        }
    }
    h
}

/// |h^H w|^2 for one beam.
pub fn beam_power(h: &[Complex64], w: &[Complex64]) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (hi, wi) in h.iter().zip(w.iter()) {
        acc += hi.conj() * wi;
    }
    acc.norm_sqr()
}

/// Scan the full codebook; returns (beam index, power) with the lowest index
/// winning ties. Beam index = m_h_idx * m_v + m_v_idx.
pub fn best_beam(h: &[Complex64], m_h: usize, m_v: usize) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for bh in 0..m_h {
        for bv in 0..m_v {
            let w = dft_beam(bh, bv, m_h, m_v).expect("in range");
            let p = beam_power(h, &w);
            let idx = bh * m_v + bv;
            if p > best.1 {
                best = (idx, p);
            }
        }
    }
    best
}
