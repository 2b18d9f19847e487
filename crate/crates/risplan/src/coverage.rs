//! Tile-level coverage: directional gain, RSRP, best-server maps, outage
//! detection, and CDF extraction.

use crate::arrays::{beam_power, channel_vector, BaseStation, SectorArray, SystemConfig};
use crate::geometry::Vec3;
use crate::raytrace::{trace_to_receivers, TraceConfig, TraceError};
use crate::scene::{Scene, TileGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const DEFAULT_OUTAGE_THRESHOLD_DBM: f64 = -100.0;

/// Best-server record for one grid tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub row: usize,
    pub col: usize,
    pub center: Vec3,
    /// -1 when no server reaches the tile.
    pub best_bs: i32,
    pub best_sector: i32,
    pub best_beam: i32,
    /// -inf when no path carries energy to the tile.
    pub rsrp_dbm: f64,
    /// Tile center lies inside a building; excluded from outage statistics.
    pub indoor: bool,
    pub in_outage: bool,
}

/// Dense best-server map over a tile grid.
#[derive(Debug, Clone)]
pub struct CoverageMap {
    pub grid: TileGrid,
    pub records: Vec<TileRecord>,
    pub system: SystemConfig,
    pub threshold_dbm: f64,
    pub samples_per_tile: usize,
}

impl CoverageMap {
    pub fn record(&self, row: usize, col: usize) -> &TileRecord {
        &self.records[self.grid.index(row, col)]
    }

    /// Outdoor tiles below the outage threshold, as flat grid indices.
    pub fn outage_tiles(&self) -> Vec<usize> {
        outage_set(self, self.threshold_dbm)
    }
}

/// Sample points used to approximate the per-tile average: tile center for
/// k = 1, plus a half-tile cross pattern for k = 5.
pub fn tile_sample_points(grid: &TileGrid, row: usize, col: usize, k: usize) -> Vec<Vec3> {
    let c = grid.tile_center(row, col);
    match k {
        1 => vec![c],
        5 => {
            let d = grid.tile_size / 4.0;
            vec![
                c,
                Vec3::new(c.x + d, c.y, c.z),
                Vec3::new(c.x - d, c.y, c.z),
                Vec3::new(c.x, c.y + d, c.z),
                Vec3::new(c.x, c.y - d, c.z),
            ]
        }
        other => panic!("samples_per_tile must be 1 or 5, got {other}"),
    }
}

/// Linear power gain of one (sector, beam) at a tile, averaged over the tile
/// sample points.
pub fn tile_gain(
    scene: &Scene,
    tx_array: &SectorArray,
    beam: (usize, usize),
    grid: &TileGrid,
    tile: (usize, usize),
    cfg: &TraceConfig,
    samples_per_tile: usize,
) -> Result<f64, TraceError> {
    let points = tile_sample_points(grid, tile.0, tile.1, samples_per_tile);
    let w = crate::arrays::dft_beam(beam.0, beam.1, tx_array.m_h, tx_array.m_v).expect("beam in range");
    let mut acc = 0.0;
    let mut used = 0usize;
    for p in points {
        if scene.inside_building(p) {
            continue;
        }
        let paths = crate::raytrace::trace_paths(scene, tx_array.position, p, cfg)?;
        let h = channel_vector(&paths, tx_array, cfg.frequency);
        acc += beam_power(&h, &w);
        used += 1;
    }
    if used == 0 {
        return Ok(0.0);
    }
    Ok(acc / used as f64)
}

/// RSRP in dBm for a linear gain under a system's per-subcarrier power.
/// Zero gain maps to -inf (deep outage sentinel).
pub fn rsrp(gain: f64, system: &SystemConfig) -> f64 {
    debug_assert!(gain >= 0.0);
    if gain <= 0.0 {
        f64::NEG_INFINITY
    } else {
        system.tx_power_subcarrier_dbm + 10.0 * gain.log10()
    }
}

/// Best-server coverage map: per tile, the maximum RSRP over every
/// (station, sector, beam) with ties broken toward the lowest index triple.
pub fn coverage_map(
    scene: &Scene,
    network: &[BaseStation],
    system: &SystemConfig,
    grid: &TileGrid,
    cfg: &TraceConfig,
    threshold_dbm: f64,
    samples_per_tile: usize,
) -> Result<CoverageMap, TraceError> {
    assert!(!network.is_empty(), "network must contain at least one base station");
    let n_tiles = grid.len();

    // Outdoor sample points, gathered once for all tiles.
    let mut sample_points: Vec<Vec3> = Vec::new();
    let mut tile_samples: Vec<(usize, usize)> = Vec::with_capacity(n_tiles); // (offset, count)
    let mut indoor = vec![false; n_tiles];
    for (idx, indoor_flag) in indoor.iter_mut().enumerate() {
        let (row, col) = grid.row_col(idx);
        let center = grid.tile_center(row, col);
        if scene.inside_building(center) {
            *indoor_flag = true;
            tile_samples.push((sample_points.len(), 0));
            continue;
        }
        let pts: Vec<Vec3> = tile_sample_points(grid, row, col, samples_per_tile)
            .into_iter()
            .filter(|p| !scene.inside_building(*p))
            .collect();
        tile_samples.push((sample_points.len(), pts.len()));
        sample_points.extend(pts);
    }

    // One trace per station position; sectors share the geometry.
    let mut best: Vec<(f64, i32, i32, i32)> = vec![(f64::NEG_INFINITY, -1, -1, -1); n_tiles];
    for (bs_idx, bs) in network.iter().enumerate() {
        let paths = trace_to_receivers(scene, bs.position, &sample_points, cfg)?;
        for (sec_idx, _) in bs.sectors.iter().enumerate() {
            let array = bs.sector_array(sec_idx, system);
            let updates: Vec<(usize, f64, usize)> = (0..n_tiles)
                .into_par_iter()
                .filter_map(|idx| {
                    let (off, count) = tile_samples[idx];
                    if count == 0 {
                        return None;
                    }
                    // Average each beam's gain over the tile samples, then
                    // pick the best beam.
                    let hs: Vec<Vec<num_complex::Complex64>> = (off..off + count)
                        .map(|s| channel_vector(&paths[s], &array, cfg.frequency))
                        .collect();
                    let mut best_gain = f64::NEG_INFINITY;
                    let mut best_beam_idx = 0usize;
                    for bh in 0..system.m_h {
                        for bv in 0..system.m_v {
                            let w = crate::arrays::dft_beam(bh, bv, system.m_h, system.m_v).expect("in range");
                            let g: f64 =
                                hs.iter().map(|h| beam_power(h, &w)).sum::<f64>() / count as f64;
                            let bidx = bh * system.m_v + bv;
                            if g > best_gain {
                                best_gain = g;
                                best_beam_idx = bidx;
                            }
                        }
                    }
                    Some((idx, best_gain, best_beam_idx))
                })
                .collect();
            for (idx, gain, beam_idx) in updates {
                let r = rsrp(gain, system);
                if r > best[idx].0 {
                    best[idx] = (r, bs_idx as i32, sec_idx as i32, beam_idx as i32);
                }
            }
        }
    }

    let records = (0..n_tiles)
        .map(|idx| {
            let (row, col) = grid.row_col(idx);
            let (rsrp_dbm, bs, sector, beam) = best[idx];
            TileRecord {
                row,
                col,
                center: grid.tile_center(row, col),
                best_bs: bs,
                best_sector: sector,
                best_beam: beam,
                rsrp_dbm,
                indoor: indoor[idx],
                in_outage: rsrp_dbm < threshold_dbm,
            }
        })
        .collect();
    Ok(CoverageMap {
        grid: grid.clone(),
        records,
        system: system.clone(),
        threshold_dbm,
        samples_per_tile,
    })
}

/// Outdoor tiles strictly below the threshold.
pub fn outage_set(map: &CoverageMap, threshold_dbm: f64) -> Vec<usize> {
    map.records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.indoor && r.rsrp_dbm < threshold_dbm)
        .map(|(i, _)| i)
        .collect()
}

/// Empirical RSRP distribution over outdoor tiles.
#[derive(Debug, Clone, Serialize)]
pub struct RsrpCdf {
    /// (rsrp_dbm, cumulative fraction), ascending, over finite-RSRP tiles.
    pub points: Vec<(f64, f64)>,
    /// Fraction of outdoor tiles with no received energy at all.
    pub no_signal_fraction: f64,
}

pub fn rsrp_cdf(map: &CoverageMap) -> RsrpCdf {
    let outdoor: Vec<f64> =
        map.records.iter().filter(|r| !r.indoor).map(|r| r.rsrp_dbm).collect();
    let total = outdoor.len().max(1);
    let mut finite: Vec<f64> = outdoor.iter().copied().filter(|v| v.is_finite()).collect();
    let inf_count = outdoor.len() - finite.len();
    finite.sort_by(f64::total_cmp);
    let n = finite.len().max(1);
    let points = finite
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n as f64))
        .collect();
    RsrpCdf { points, no_signal_fraction: inf_count as f64 / total as f64 }
}

fn fmt_rsrp(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Write the per-tile map as CSV: `row,col,x,y,rsrp_dbm,bs,sector,beam,outage`.
pub fn write_coverage_csv(map: &CoverageMap, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "row,col,x,y,rsrp_dbm,bs,sector,beam,outage")?;
    for r in &map.records {
        writeln!(
            f,
            "{},{},{:.2},{:.2},{},{},{},{},{}",
            r.row,
            r.col,
            r.center.x,
            r.center.y,
            fmt_rsrp(r.rsrp_dbm),
            r.best_bs,
            r.best_sector,
            r.best_beam,
            u8::from(r.in_outage && !r.indoor)
        )?;
    }
    f.flush()
}

/// Write the CDF as CSV: `rsrp_dbm,cdf`.
pub fn write_cdf_csv(cdf: &RsrpCdf, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rsrp_dbm,cdf")?;
    for (v, c) in &cdf.points {
        writeln!(f, "{v:.4},{c:.6}")?;
    }
    f.flush()
}
