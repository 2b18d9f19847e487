//! Measurement-driven material calibration.
//!
//! Region-averaged measured RSRP is compared against the simulated average;
//! per-group material parameters (eps_r, sigma, scatter_s) are fitted by Adam
//! over central finite-difference gradients, projected onto their physical
//! bounds after every step. Path geometry does not depend on materials, so
//! each region is traced once and only amplitudes are re-priced per probe.

use crate::arrays::{beam_power, channel_vector, dft_beam, BaseStation, SystemConfig};
use crate::geometry::{Vec2, Vec3};
use crate::raytrace::{path_amplitude, trace_to_receivers, RayPath, TraceConfig, TraceError};
use crate::scene::{Material, Scene, SceneError, TileGrid};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_REGION_SIZE_M: f64 = 10.0;
pub const DEFAULT_MIN_SAMPLES: usize = 20;
pub const GROUP_RADIUS_M: f64 = 100.0;
pub const OUTLIER_GAP_DB: f64 = 25.0;
/// Loss above (12 dB)^2 with parameters pinned at an extreme flags a region.
pub const EXTREME_LOSS_DB: f64 = 12.0;
/// Stand-in RSRP when a probe leaves a region with no signal at all, so the
/// optimizer sees a steep penalty instead of a silent zero loss.
pub const NO_SIGNAL_FLOOR_DBM: f64 = -150.0;

pub const EPS_BOUNDS: (f64, f64) = (1.0, 20.0);
pub const SIGMA_BOUNDS: (f64, f64) = (0.0, 15.0);
pub const SCATTER_BOUNDS: (f64, f64) = (0.0, 1.0);
pub const INIT_PARAMS: [f64; 3] = [5.0, 5.0, 0.5];

#[derive(Debug, Error)]
pub enum CalError {
    #[error("failed to read measurements: {0}")]
    Io(#[from] std::io::Error),
    #[error("measurement CSV line {0}: {1}")]
    Malformed(usize, String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Raw measurement record as ingested (geodetic coordinates).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMeasurement {
    pub lat: f64,
    pub lon: f64,
    pub rsrp_dbm: f64,
    pub sinr_db: Option<f64>,
    pub indoor: bool,
}

/// Measurement in scene coordinates; indoor samples are dropped upstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub x: f64,
    pub y: f64,
    pub rsrp_dbm: f64,
    pub outdoor: bool,
}

/// Parse the measurement CSV: `lat,lon,rsrp_dbm,sinr_db,indoor` with
/// `sinr_db` optional.
pub fn parse_measurements_csv(path: &Path) -> Result<Vec<RawMeasurement>, CalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CalError::Malformed(0, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(lat_i), Some(lon_i), Some(rsrp_i), Some(indoor_i)) =
        (col("lat"), col("lon"), col("rsrp_dbm"), col("indoor"))
    else {
        return Err(CalError::Malformed(1, format!("header must name lat, lon, rsrp_dbm, indoor: got '{header}'")));
    };
    let sinr_i = col("sinr_db");
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |i: usize| -> Result<f64, CalError> {
            f.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| CalError::Malformed(ln + 1, format!("bad field {i} in '{line}'")))
        };
        let indoor_s = f
            .get(indoor_i)
            .copied()
            .ok_or_else(|| CalError::Malformed(ln + 1, "missing indoor flag".into()))?;
        let indoor = matches!(indoor_s, "1" | "true" | "TRUE" | "True");
        let sinr_db = sinr_i.and_then(|i| f.get(i).and_then(|s| s.parse::<f64>().ok()));
        out.push(RawMeasurement {
            lat: parse(lat_i)?,
            lon: parse(lon_i)?,
            rsrp_dbm: parse(rsrp_i)?,
            sinr_db,
            indoor,
        });
    }
    Ok(out)
}

/// Equirectangular projection about a reference origin; adequate below a
/// couple of kilometers of extent.
pub fn to_local(raw: &RawMeasurement, ref_lat: f64, ref_lon: f64) -> MeasurementSample {
    let k = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
    MeasurementSample {
        x: (raw.lon - ref_lon) * k * ref_lat.to_radians().cos(),
        y: (raw.lat - ref_lat) * k,
        rsrp_dbm: raw.rsrp_dbm,
        outdoor: !raw.indoor,
    }
}

/// Grid-aligned square holding enough samples to calibrate against.
#[derive(Debug, Clone)]
pub struct TargetRegion {
    /// Region cell key: (ix, iy) on the region lattice.
    pub key: (i64, i64),
    pub min: Vec2,
    pub size: f64,
    pub sample_indices: Vec<usize>,
    pub avg_measured_dbm: f64,
    /// Calibration groups within [`GROUP_RADIUS_M`] of the region center.
    pub groups: Vec<String>,
}

impl TargetRegion {
    pub fn center(&self) -> Vec2 {
        Vec2::new(self.min.x + self.size / 2.0, self.min.y + self.size / 2.0)
    }
}

/// Bucket outdoor samples into grid-aligned squares and keep those meeting
/// the sample-count floor.
pub fn build_target_regions(
    samples: &[MeasurementSample],
    scene: &Scene,
    min_count: usize,
    region_size: f64,
) -> Vec<TargetRegion> {
    let bounds = scene.bounds();
    let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.outdoor {
            continue;
        }
        let p = Vec2::new(s.x, s.y);
        if !bounds.contains(p) {
            continue;
        }
        let ix = ((s.x - bounds.min.x) / region_size).floor() as i64;
        let iy = ((s.y - bounds.min.y) / region_size).floor() as i64;
        buckets.entry((ix, iy)).or_default().push(i);
    }
    let mut groups_all: Vec<(String, usize)> = Vec::new();
    for (bi, b) in scene.buildings().iter().enumerate() {
        if let Some(g) = &b.group_id {
            groups_all.push((g.clone(), bi));
        }
    }
    buckets
        .into_iter()
        .filter(|(_, idxs)| idxs.len() >= min_count)
        .map(|(key, sample_indices)| {
            let min = Vec2::new(
                bounds.min.x + key.0 as f64 * region_size,
                bounds.min.y + key.1 as f64 * region_size,
            );
            let avg = sample_indices.iter().map(|&i| samples[i].rsrp_dbm).sum::<f64>()
                / sample_indices.len() as f64;
            let center = Vec2::new(min.x + region_size / 2.0, min.y + region_size / 2.0);
            let mut groups: Vec<String> = groups_all
                .iter()
                .filter(|(_, bi)| scene.distance_to_building(center, *bi) <= GROUP_RADIUS_M)
                .map(|(g, _)| g.clone())
                .collect();
            groups.sort();
            groups.dedup();
            TargetRegion { key, min, size: region_size, sample_indices, avg_measured_dbm: avg, groups }
        })
        .collect()
}

/// Squared dB error between simulated and measured region averages.
pub fn loss_db(simulated_dbm: f64, measured_dbm: f64) -> f64 {
    let d = simulated_dbm - measured_dbm;
    d * d
}

/// Bound-constrained Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }
}

/// One Adam step over central finite-difference gradients.
///
/// Only indices in `active` are probed; the rest see zero gradient. Probe
/// points are clamped to the bounds and the final update is projected back.
pub fn adam_fd_step(
    params: &mut [f64],
    bounds: &[(f64, f64)],
    active: &[bool],
    state: &mut AdamState,
    loss: &mut dyn FnMut(&[f64]) -> f64,
) {
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        if !active[i] {
            continue;
        }
        let (lo, hi) = bounds[i];
        let h = 0.01 * (hi - lo);
        let p_hi = (params[i] + h).min(hi);
        let p_lo = (params[i] - h).max(lo);
        if p_hi - p_lo < 1e-12 {
            continue;
        }
        let mut probe = params.to_vec();
        probe[i] = p_hi;
        let l_hi = loss(&probe);
        probe[i] = p_lo;
        let l_lo = loss(&probe);
        grad[i] = (l_hi - l_lo) / (p_hi - p_lo);
    }
    state.step += 1;
    let t = state.step as f64;
    for i in 0..params.len() {
        if !active[i] {
            continue;
        }
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / (1.0 - state.beta1.powf(t));
        let v_hat = state.v[i] / (1.0 - state.beta2.powf(t));
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        params[i] = params[i].clamp(bounds[i].0, bounds[i].1);
    }
}

/// Why a region was excluded from calibration or validation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExclusionReason {
    /// Initial measured/simulated gap above 25 dB: missing geometry.
    InitialGap { gap_db: f64 },
    /// Loss stayed high with parameters pushed to free-space behavior.
    FreeSpaceExtreme,
    /// Loss stayed high with parameters pushed to maximum reflectivity.
    MaxReflectivityExtreme,
    /// Simulation delivers no finite RSRP inside the region.
    NoSignal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedRegion {
    pub key: (i64, i64),
    pub reason: ExclusionReason,
}

/// Traced tiles of one region, re-priced per material probe.
struct RegionSim {
    /// Per tile: per station path lists.
    tiles: Vec<Vec<Vec<RayPath>>>,
}

/// Precomputed simulation state shared by the calibration loop.
pub struct CalSim<'a> {
    pub network: &'a [BaseStation],
    pub system: &'a SystemConfig,
    pub cfg: TraceConfig,
    regions: Vec<RegionSim>,
}

impl<'a> CalSim<'a> {
    /// Trace every region's tiles once against the (geometry of the) scene.
    pub fn new(
        scene: &Scene,
        network: &'a [BaseStation],
        system: &'a SystemConfig,
        grid: &TileGrid,
        cfg: &TraceConfig,
        regions: &[TargetRegion],
    ) -> Result<CalSim<'a>, CalError> {
        // Tile centers inside each region.
        let mut region_points: Vec<Vec<Vec3>> = Vec::with_capacity(regions.len());
        let mut flat: Vec<Vec3> = Vec::new();
        for region in regions {
            let mut pts = Vec::new();
            let steps = (region.size / grid.tile_size).ceil() as usize + 1;
            for iy in 0..steps {
                for ix in 0..steps {
                    let p = Vec2::new(
                        region.min.x + (ix as f64 + 0.5) * grid.tile_size,
                        region.min.y + (iy as f64 + 0.5) * grid.tile_size,
                    );
                    if p.x >= region.min.x + region.size || p.y >= region.min.y + region.size {
                        continue;
                    }
                    if let Some((r, c)) = grid.tile_at(p) {
                        let center = grid.tile_center(r, c);
                        if scene.is_clear_endpoint(center) && !pts.contains(&center) {
                            pts.push(center);
                        }
                    }
                }
            }
            flat.extend(pts.iter().copied());
            region_points.push(pts);
        }
        let mut per_station: Vec<Vec<Vec<RayPath>>> = Vec::new();
        for bs in network {
            per_station.push(trace_to_receivers(scene, bs.position, &flat, cfg)?);
        }
        let mut regions_sim = Vec::with_capacity(regions.len());
        let mut offset = 0usize;
        for pts in &region_points {
            let mut tiles = Vec::with_capacity(pts.len());
            for i in 0..pts.len() {
                let per: Vec<Vec<RayPath>> =
                    per_station.iter().map(|st| st[offset + i].clone()).collect();
                tiles.push(per);
            }
            offset += pts.len();
            regions_sim.push(RegionSim { tiles });
        }
        Ok(CalSim { network, system, cfg: cfg.clone(), regions: regions_sim })
    }

    /// Simulated region average (dB mean over tiles with finite RSRP) under a
    /// candidate material table. None when nothing reaches the region.
    pub fn region_avg_dbm(&self, region_idx: usize, materials: &[Material]) -> Option<f64> {
        let sim = &self.regions[region_idx];
        let mut acc = 0.0;
        let mut n = 0usize;
        for tile in &sim.tiles {
            let r = self.tile_best_rsrp(tile, materials);
            if r.is_finite() {
                acc += r;
                n += 1;
            }
        }
        (n > 0).then(|| acc / n as f64)
    }

    fn tile_best_rsrp(&self, per_station: &[Vec<RayPath>], materials: &[Material]) -> f64 {
        let freq = self.system.frequency;
        let mut best = f64::NEG_INFINITY;
        for (s, bs) in self.network.iter().enumerate() {
            let repriced: Vec<RayPath> = per_station[s]
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.amplitude = path_amplitude(p, freq, materials)
                        .unwrap_or_else(|_| num_complex::Complex64::new(0.0, 0.0));
                    q
                })
                .collect();
            for sec in 0..bs.sectors.len() {
                let array = bs.sector_array(sec, self.system);
                let h = channel_vector(&repriced, &array, freq);
                for bh in 0..self.system.m_h {
                    for bv in 0..self.system.m_v {
                        let w = dft_beam(bh, bv, self.system.m_h, self.system.m_v).expect("in range");
                        let r = crate::coverage::rsrp(beam_power(&h, &w), self.system);
                        if r > best {
                            best = r;
                        }
                    }
                }
            }
        }
        best
    }

    /// Squared-dB region loss under a candidate material table.
    pub fn region_loss(&self, region: &TargetRegion, region_idx: usize, materials: &[Material]) -> Option<f64> {
        self.region_avg_dbm(region_idx, materials)
            .map(|sim| loss_db(sim, region.avg_measured_dbm))
    }
}

/// Outcome of a calibration run.
pub struct CalibrationResult {
    /// Scene with per-group materials holding the fitted values.
    pub scene: Scene,
    pub regions: Vec<TargetRegion>,
    pub excluded: Vec<ExcludedRegion>,
    /// Fitted (eps_r, sigma, scatter_s) per group id.
    pub fitted: BTreeMap<String, [f64; 3]>,
    /// Region keys that were actively optimized.
    pub calibrated_regions: Vec<(i64, i64)>,
    /// Non-fatal conditions, e.g. no eligible regions.
    pub warnings: Vec<String>,
}

/// Give every calibration group its own material slot so group parameters
/// can vary independently of the shared library entries.
pub fn explode_group_materials(scene: &Scene) -> Result<(Scene, BTreeMap<String, usize>), SceneError> {
    let mut materials = scene.materials().to_vec();
    let mut buildings = scene.buildings().to_vec();
    let mut slots = BTreeMap::new();
    let mut group_ids: Vec<String> =
        buildings.iter().filter_map(|b| b.group_id.clone()).collect();
    group_ids.sort();
    group_ids.dedup();
    for g in group_ids {
        let donor = buildings
            .iter()
            .find(|b| b.group_id.as_deref() == Some(&g))
            .expect("group has a member");
        let base = materials
            .iter()
            .find(|m| m.id == donor.material_id)
            .expect("validated at load")
            .clone();
        let mut mat = base;
        mat.id = format!("cal::{g}");
        materials.push(mat);
        slots.insert(g.clone(), materials.len() - 1);
    }
    for b in &mut buildings {
        if let Some(g) = &b.group_id {
            b.material_id = format!("cal::{g}");
        }
    }
    let scene = Scene::new(materials, buildings, scene.bounds(), scene.ground_material_id().to_string())?;
    Ok((scene, slots))
}

/// Calibrate per-group materials against measured samples.
///
/// Cells (stations) are processed in descending order of attached sample
/// count; each cell runs `iterations_per_cell` Adam steps over its regions,
/// then freezes every group it touched.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_scene(
    scene: &Scene,
    network: &[BaseStation],
    system: &SystemConfig,
    samples: &[MeasurementSample],
    grid: &TileGrid,
    cfg: &TraceConfig,
    iterations_per_cell: usize,
    lr: f64,
    seed: u64,
) -> Result<CalibrationResult, CalError> {
    let regions = build_target_regions(samples, scene, DEFAULT_MIN_SAMPLES, DEFAULT_REGION_SIZE_M);
    let (cal_scene, slots) = explode_group_materials(scene)?;
    let mut materials = cal_scene.materials().to_vec();

    // Learnable groups (near any region) start from the standard initial
    // values; everything else keeps its library material.
    let mut learnable: BTreeSet<String> = BTreeSet::new();
    for r in &regions {
        for g in &r.groups {
            learnable.insert(g.clone());
        }
    }
    for g in &learnable {
        let m = &mut materials[slots[g]];
        m.eps_r = INIT_PARAMS[0];
        m.sigma = INIT_PARAMS[1];
        m.scatter_s = INIT_PARAMS[2];
    }

    if regions.is_empty() || learnable.is_empty() {
        let warnings = vec![if regions.is_empty() {
            "no target region meets the sample floor; scene returned unchanged".to_string()
        } else {
            "no calibration group lies near any target region; scene returned unchanged".to_string()
        }];
        return Ok(CalibrationResult {
            scene: cal_scene.with_materials(materials)?,
            regions,
            excluded: Vec::new(),
            fitted: BTreeMap::new(),
            calibrated_regions: Vec::new(),
            warnings,
        });
    }

    let sim = CalSim::new(&cal_scene, network, system, grid, cfg, &regions)?;

    // Region -> nearest station; cells ordered by sample count, descending.
    let region_cell: Vec<usize> = regions
        .iter()
        .map(|r| {
            let c = r.center();
            network
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.position.xy().distance(c).total_cmp(&b.position.xy().distance(c))
                })
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    let mut cell_load: Vec<(usize, usize)> = (0..network.len())
        .map(|cell| {
            let count: usize = regions
                .iter()
                .zip(&region_cell)
                .filter(|(_, &c)| c == cell)
                .map(|(r, _)| r.sample_indices.len())
                .sum();
            (count, cell)
        })
        .collect();
    cell_load.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    // Flat parameter vector: 3 scalars per learnable group, ordered by id.
    let group_order: Vec<String> = learnable.iter().cloned().collect();
    let dim = group_order.len() * 3;
    let mut params = vec![0.0; dim];
    let mut bounds = vec![(0.0, 0.0); dim];
    for (gi, g) in group_order.iter().enumerate() {
        let m = &materials[slots[g]];
        params[gi * 3] = m.eps_r;
        params[gi * 3 + 1] = m.sigma;
        params[gi * 3 + 2] = m.scatter_s;
        bounds[gi * 3] = EPS_BOUNDS;
        bounds[gi * 3 + 1] = SIGMA_BOUNDS;
        bounds[gi * 3 + 2] = SCATTER_BOUNDS;
    }
    let apply = |materials: &mut [Material], params: &[f64]| {
        for (gi, g) in group_order.iter().enumerate() {
            let m = &mut materials[slots[g]];
            m.eps_r = params[gi * 3];
            m.sigma = params[gi * 3 + 1];
            m.scatter_s = params[gi * 3 + 2];
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frozen: BTreeSet<String> = BTreeSet::new();
    let mut excluded: Vec<ExcludedRegion> = Vec::new();
    let mut calibrated_regions = Vec::new();

    for &(_, cell) in &cell_load {
        let cell_regions: Vec<usize> = (0..regions.len())
            .filter(|&ri| region_cell[ri] == cell)
            .filter(|&ri| excluded.iter().all(|e| e.key != regions[ri].key))
            .collect();
        if cell_regions.is_empty() {
            continue;
        }
        // Pre-filter: large initial gaps indicate missing geometry.
        let mut live: Vec<usize> = Vec::new();
        for &ri in &cell_regions {
            apply(&mut materials, &params);
            match sim.region_avg_dbm(ri, &materials) {
                None => excluded.push(ExcludedRegion { key: regions[ri].key, reason: ExclusionReason::NoSignal }),
                Some(avg) => {
                    let gap = (avg - regions[ri].avg_measured_dbm).abs();
                    if gap > OUTLIER_GAP_DB {
                        excluded.push(ExcludedRegion {
                            key: regions[ri].key,
                            reason: ExclusionReason::InitialGap { gap_db: gap },
                        });
                    } else {
                        live.push(ri);
                    }
                }
            }
        }
        if live.is_empty() {
            continue;
        }
        let active: Vec<bool> = group_order
            .iter()
            .flat_map(|g| {
                let on = !frozen.contains(g)
                    && live.iter().any(|&ri| regions[ri].groups.contains(g));
                [on, on, on]
            })
            .collect();
        if !active.iter().any(|&a| a) {
            continue;
        }
        let mut state = AdamState::new(dim, lr);
        for _ in 0..iterations_per_cell {
            let ri = live[rng.gen_range(0..live.len())];
            let region = &regions[ri];
            // Restrict probing to this region's own groups.
            let step_active: Vec<bool> = group_order
                .iter()
                .flat_map(|g| {
                    let on = region.groups.contains(g)
                        && active[group_order.iter().position(|x| x == g).unwrap() * 3];
                    [on, on, on]
                })
                .collect();
            let mut scratch = materials.clone();
            let mut loss = |p: &[f64]| {
                apply(&mut scratch, p);
                sim.region_loss(region, ri, &scratch)
                    .unwrap_or_else(|| loss_db(NO_SIGNAL_FLOOR_DBM, region.avg_measured_dbm))
            };
            adam_fd_step(&mut params, &bounds, &step_active, &mut state, &mut loss);
        }
        apply(&mut materials, &params);

        // Post-cell extreme-value exclusions.
        for &ri in &live {
            let region = &regions[ri];
            let l = sim.region_loss(region, ri, &materials).unwrap_or(f64::INFINITY);
            if l > EXTREME_LOSS_DB * EXTREME_LOSS_DB {
                let near = |v: f64, target: f64, range: f64| (v - target).abs() <= 0.01 * range;
                let all_free = region.groups.iter().all(|g| {
                    let m = &materials[slots[g]];
                    near(m.eps_r, EPS_BOUNDS.0, EPS_BOUNDS.1 - EPS_BOUNDS.0)
                        && near(m.sigma, SIGMA_BOUNDS.0, SIGMA_BOUNDS.1 - SIGMA_BOUNDS.0)
                        && near(m.scatter_s, SCATTER_BOUNDS.0, 1.0)
                });
                let all_max = region.groups.iter().all(|g| {
                    let m = &materials[slots[g]];
                    near(m.eps_r, EPS_BOUNDS.1, EPS_BOUNDS.1 - EPS_BOUNDS.0)
                        && near(m.sigma, SIGMA_BOUNDS.1, SIGMA_BOUNDS.1 - SIGMA_BOUNDS.0)
                        && near(m.scatter_s, SCATTER_BOUNDS.1, 1.0)
                });
                if all_free {
                    excluded.push(ExcludedRegion { key: region.key, reason: ExclusionReason::FreeSpaceExtreme });
                    continue;
                } else if all_max {
                    excluded.push(ExcludedRegion { key: region.key, reason: ExclusionReason::MaxReflectivityExtreme });
                    continue;
                }
            }
            calibrated_regions.push(region.key);
        }
        for (gi, g) in group_order.iter().enumerate() {
            if active[gi * 3] {
                frozen.insert(g.clone());
            }
        }
    }

    apply(&mut materials, &params);
    let mut fitted = BTreeMap::new();
    for (gi, g) in group_order.iter().enumerate() {
        fitted.insert(g.clone(), [params[gi * 3], params[gi * 3 + 1], params[gi * 3 + 2]]);
    }
    let mut warnings = Vec::new();
    if calibrated_regions.is_empty() {
        warnings.push("every region was excluded; materials keep their initial values".to_string());
    }
    Ok(CalibrationResult {
        scene: cal_scene.with_materials(materials)?,
        regions,
        excluded,
        fitted,
        calibrated_regions,
        warnings,
    })
}

/// Validation statistics for a scene against measured samples.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// (simulated, measured) region averages, excluded regions skipped.
    pub region_pairs: Vec<(f64, f64)>,
    /// Per-sample simulated-minus-measured errors.
    pub sample_errors: Vec<f64>,
    pub mean_error_db: f64,
    pub median_error_db: f64,
    pub std_error_db: f64,
    pub simulated_cdf: Vec<(f64, f64)>,
    pub measured_cdf: Vec<(f64, f64)>,
}

fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len().max(1);
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n as f64)).collect()
}

/// Simulate the sample tiles on the given scene and report per-region and
/// per-sample agreement, excluding flagged regions.
pub fn validation_metrics(
    scene: &Scene,
    network: &[BaseStation],
    system: &SystemConfig,
    samples: &[MeasurementSample],
    grid: &TileGrid,
    cfg: &TraceConfig,
    excluded: &BTreeSet<(i64, i64)>,
) -> Result<ValidationReport, CalError> {
    let regions = build_target_regions(samples, scene, DEFAULT_MIN_SAMPLES, DEFAULT_REGION_SIZE_M);
    let live: Vec<TargetRegion> =
        regions.into_iter().filter(|r| !excluded.contains(&r.key)).collect();
    let sim = CalSim::new(scene, network, system, grid, cfg, &live)?;
    let materials = scene.materials().to_vec();

    let mut region_pairs = Vec::new();
    for (ri, region) in live.iter().enumerate() {
        if let Some(avg) = sim.region_avg_dbm(ri, &materials) {
            region_pairs.push((avg, region.avg_measured_dbm));
        }
    }

    // Per-sample errors at the sample's own tile.
    let mut tile_points: Vec<Vec3> = Vec::new();
    let mut sample_tile: Vec<Option<usize>> = Vec::with_capacity(samples.len());
    let live_sample_set: BTreeSet<usize> =
        live.iter().flat_map(|r| r.sample_indices.iter().copied()).collect();
    let mut point_index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.outdoor || !live_sample_set.contains(&i) {
            sample_tile.push(None);
            continue;
        }
        match grid.tile_at(Vec2::new(s.x, s.y)) {
            Some((r, c)) => {
                let center = grid.tile_center(r, c);
                if !scene.is_clear_endpoint(center) {
                    sample_tile.push(None);
                    continue;
                }
                let idx = *point_index.entry((r, c)).or_insert_with(|| {
                    tile_points.push(center);
                    tile_points.len() - 1
                });
                sample_tile.push(Some(idx));
            }
            None => sample_tile.push(None),
        }
    }
    let mut per_station = Vec::new();
    for bs in network {
        per_station.push(trace_to_receivers(scene, bs.position, &tile_points, cfg)?);
    }
    let tile_rsrp: Vec<f64> = (0..tile_points.len())
        .map(|i| {
            let per: Vec<Vec<RayPath>> = per_station.iter().map(|st| st[i].clone()).collect();
            sim.tile_best_rsrp(&per, &materials)
        })
        .collect();

    let mut sample_errors = Vec::new();
    let mut simulated = Vec::new();
    let mut measured = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(Some(t)) = sample_tile.get(i) {
            let v = tile_rsrp[*t];
            if v.is_finite() {
                sample_errors.push(v - s.rsrp_dbm);
                simulated.push(v);
                measured.push(s.rsrp_dbm);
            }
        }
    }
    let n = sample_errors.len().max(1) as f64;
    let mean = sample_errors.iter().sum::<f64>() / n;
    let mut sorted = sample_errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let std = (sample_errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();

    Ok(ValidationReport {
        region_pairs,
        sample_errors,
        mean_error_db: mean,
        median_error_db: median,
        std_error_db: std,
        simulated_cdf: empirical_cdf(&simulated),
        measured_cdf: empirical_cdf(&measured),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geodetic_conversion_round_trip_scale() {
        let raw = RawMeasurement { lat: 0.001, lon: 0.002, rsrp_dbm: -90.0, sinr_db: None, indoor: false };
        let s = to_local(&raw, 0.0, 0.0);
        // One millidegree of latitude is ~111.2 m.
        assert!((s.y - 111.19).abs() < 0.2, "y = {}", s.y);
        assert!((s.x - 222.39).abs() < 0.4, "x = {}", s.x);
        assert!(s.outdoor);
    }

    #[test]
    fn measurement_csv_parses_with_optional_sinr() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "lat,lon,rsrp_dbm,sinr_db,indoor\n0.001,0.002,-95.5,12.0,0\n0.001,0.002,-99.0,,1\n").unwrap();
        let rows = parse_measurements_csv(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].sinr_db, Some(12.0));
        assert!(rows[1].indoor);

        let p2 = dir.path().join("m2.csv");
        std::fs::write(&p2, "lat,lon,rsrp_dbm,indoor\n0.0,0.0,-90.0,0\n").unwrap();
        assert_eq!(parse_measurements_csv(&p2).unwrap().len(), 1);
    }

    fn sample_at(x: f64, y: f64, rsrp: f64) -> MeasurementSample {
        MeasurementSample { x, y, rsrp_dbm: rsrp, outdoor: true }
    }

    #[test]
    fn regions_respect_the_sample_floor() {
        let scene = crate::synthetic::calibration_scene(crate::synthetic::calibration_truth_material());
        // 19 samples in one square: no region.
        let samples: Vec<MeasurementSample> =
            (0..19).map(|i| sample_at(202.0 + (i % 5) as f64, 142.0 + (i / 5) as f64, -95.0)).collect();
        assert!(build_target_regions(&samples, &scene, 20, 10.0).is_empty());

        // 25 samples: one region with the dB mean.
        let samples: Vec<MeasurementSample> =
            (0..25).map(|i| sample_at(202.0 + (i % 5) as f64, 142.0 + (i / 5) as f64, -90.0 - i as f64 % 3.0)).collect();
        let regions = build_target_regions(&samples, &scene, 20, 10.0);
        assert_eq!(regions.len(), 1);
        let expect = samples.iter().map(|s| s.rsrp_dbm).sum::<f64>() / 25.0;
        assert!((regions[0].avg_measured_dbm - expect).abs() < 1e-12);
        assert!(!regions[0].groups.is_empty(), "facade groups are within 100 m");

        // Straddling two squares with 20 each: two regions.
        let mut samples = Vec::new();
        for i in 0..20 {
            samples.push(sample_at(202.0 + (i % 5) as f64, 142.0 + (i / 5) as f64, -95.0));
            samples.push(sample_at(212.0 + (i % 5) as f64, 142.0 + (i / 5) as f64, -95.0));
        }
        assert_eq!(build_target_regions(&samples, &scene, 20, 10.0).len(), 2);
    }

    #[test]
    fn loss_arithmetic() {
        assert_eq!(loss_db(-95.0, -95.0), 0.0);
        assert_eq!(loss_db(-95.0, -100.0), 25.0);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // loss(p) = (p - 7)^2 within bounds [1, 20].
        let mut params = vec![INIT_PARAMS[0]];
        let bounds = vec![EPS_BOUNDS];
        let active = vec![true];
        let mut state = AdamState::new(1, 0.05);
        for _ in 0..600 {
            let mut loss = |p: &[f64]| (p[0] - 7.0) * (p[0] - 7.0);
            adam_fd_step(&mut params, &bounds, &active, &mut state, &mut loss);
        }
        assert!((params[0] - 7.0).abs() < 0.1, "converged to {}", params[0]);
    }

    #[test]
    fn adam_is_still_at_the_minimum() {
        let mut params = vec![7.0];
        let bounds = vec![EPS_BOUNDS];
        let active = vec![true];
        let mut state = AdamState::new(1, 0.05);
        let mut loss = |p: &[f64]| (p[0] - 7.0) * (p[0] - 7.0);
        adam_fd_step(&mut params, &bounds, &active, &mut state, &mut loss);
        // Gradient is ~0 (the quadratic is symmetric around the probe
        // points), so the update stays negligible.
        assert!((params[0] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn adam_moves_inward_from_a_bound() {
        let mut params = vec![EPS_BOUNDS.0];
        let bounds = vec![EPS_BOUNDS];
        let active = vec![true];
        let mut state = AdamState::new(1, 0.05);
        let mut loss = |p: &[f64]| (p[0] - 7.0) * (p[0] - 7.0);
        adam_fd_step(&mut params, &bounds, &active, &mut state, &mut loss);
        assert!(params[0] > EPS_BOUNDS.0, "inward gradient must move off the bound");
        assert!(params[0] <= EPS_BOUNDS.1);
    }

    #[test]
    fn adam_respects_bounds_always() {
        let mut params = vec![19.9];
        let bounds = vec![EPS_BOUNDS];
        let active = vec![true];
        let mut state = AdamState::new(1, 0.5);
        for _ in 0..100 {
            // Loss pushes the parameter ever upward.
            let mut loss = |p: &[f64]| -p[0];
            adam_fd_step(&mut params, &bounds, &active, &mut state, &mut loss);
            assert!(params[0] <= EPS_BOUNDS.1 && params[0] >= EPS_BOUNDS.0);
        }
        assert_eq!(params[0], EPS_BOUNDS.1);
    }

    #[test]
    fn explode_assigns_one_slot_per_group() {
        let scene = crate::synthetic::calibration_scene(crate::synthetic::calibration_truth_material());
        let (exploded, slots) = explode_group_materials(&scene).unwrap();
        assert_eq!(slots.len(), 2);
        for (g, &slot) in &slots {
            assert_eq!(exploded.materials()[slot].id, format!("cal::{g}"));
        }
        // Group buildings now reference their calibration slots.
        for b in exploded.buildings() {
            if let Some(g) = &b.group_id {
                assert_eq!(b.material_id, format!("cal::{g}"));
            }
        }
    }
}
