//! Batch interface: TOML run configuration, subcommand dispatch, and report
//! emission with stable field ordering.

use crate::arrays::{BaseStation, SystemConfig, SystemPreset};
use crate::calibration;
use crate::clustering::{birch_cluster, write_clusters_csv, write_membership_csv};
use crate::coverage::{self, coverage_map};
use crate::placement::{
    self, extend_nearby, prioritize_topn, EvalContext, PathCache, PipelineConfig, Strategy,
};
use crate::raytrace::TraceConfig;
use crate::rismodel::RisSpec;
use crate::scene::{load_scene, save_scene, Scene, TileGrid};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Exit codes: 0 success, 2 usage, 3 unreadable config or I/O, 4 failed
/// invariant or domain error.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Invariant(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Invariant(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn invariant_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Invariant(e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSection {
    pub ray_count: usize,
    pub max_bounces: usize,
    pub capture_scale: f64,
    pub rx_capture_radius: f64,
}

impl Default for TraceSection {
    fn default() -> Self {
        TraceSection { ray_count: 100_000, max_bounces: 4, capture_scale: 1.0, rx_capture_radius: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub tile_size: f64,
    pub ue_height: f64,
    pub samples_per_tile: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            tile_size: TileGrid::DEFAULT_TILE_SIZE,
            ue_height: TileGrid::DEFAULT_UE_HEIGHT,
            samples_per_tile: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    pub threshold_dbm: f64,
    pub t1: f64,
    pub t2: f64,
    pub effective_fraction: f64,
    pub ris_width: f64,
    pub ris_height: f64,
    pub eta: f64,
    pub r: f64,
    pub strategy: Strategy,
    pub nearby_range_m: f64,
    pub scatter_ray_factor: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            threshold_dbm: -100.0,
            t1: 15.0,
            t2: 10.0,
            effective_fraction: 0.4,
            ris_width: 11.24,
            ris_height: 11.24,
            eta: 1.0,
            r: 1.0,
            strategy: Strategy::Reflection,
            nearby_range_m: 60.0,
            scatter_ray_factor: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    pub measurements_path: Option<PathBuf>,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub ref_lat: f64,
    pub ref_lon: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            measurements_path: None,
            iterations: 600,
            lr: 0.05,
            seed: 1,
            ref_lat: 0.0,
            ref_lon: 0.0,
        }
    }
}

/// Run configuration; unspecified values fall back to the planning defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scene_path: PathBuf,
    pub network_path: PathBuf,
    #[serde(default = "default_system")]
    pub system: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

fn default_system() -> String {
    "5G".to_string()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NetworkFile {
    pub sites: Vec<BaseStation>,
}

pub fn load_network(path: &Path) -> Result<Vec<BaseStation>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("network file {}: {e}", path.display()))?;
    let file: NetworkFile =
        serde_json::from_str(&text).map_err(|e| format!("network file {}: {e}", path.display()))?;
    Ok(file.sites)
}

pub fn save_network(sites: &[BaseStation], path: &Path) -> std::io::Result<()> {
    let file = NetworkFile { sites: sites.to_vec() };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("serializable");
    bytes.push(b'\n');
    std::fs::write(path, bytes)
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

/// Everything a subcommand needs, loaded and validated.
struct Workspace {
    config: RunConfig,
    scene: Scene,
    network: Vec<BaseStation>,
    system: SystemConfig,
    grid: TileGrid,
    trace: TraceConfig,
    pcfg: PipelineConfig,
    out_dir: PathBuf,
    artifacts: Vec<String>,
}

impl Workspace {
    fn load(config_path: &Path) -> CliResult<Workspace> {
        let config = load_config(config_path).map_err(CliError::Config)?;
        let preset: SystemPreset = config.system.parse().map_err(CliError::Config)?;
        let system = SystemConfig::preset(preset);
        let scene = load_scene(&config.scene_path).map_err(invariant_err)?;
        let network = load_network(&config.network_path).map_err(CliError::Config)?;
        if network.is_empty() {
            return Err(CliError::Invariant("network lists no base stations".into()));
        }
        let grid = TileGrid::covering(scene.bounds(), config.grid.tile_size, config.grid.ue_height);
        let trace = TraceConfig {
            ray_count: config.trace.ray_count,
            max_bounces: config.trace.max_bounces,
            frequency: system.frequency,
            rx_capture_radius: config.trace.rx_capture_radius,
            capture_scale: config.trace.capture_scale,
        };
        let p = &config.pipeline;
        let pcfg = PipelineConfig {
            threshold_dbm: p.threshold_dbm,
            t1: p.t1,
            t2: p.t2,
            effective_fraction: p.effective_fraction,
            ris: RisSpec { width: p.ris_width, height: p.ris_height, eta: p.eta, r: p.r },
            strategy: p.strategy,
            nearby_range_m: p.nearby_range_m,
            scatter_ray_factor: p.scatter_ray_factor,
            branching: crate::clustering::DEFAULT_BRANCHING,
        };
        let out_dir = config.output_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(config_err)?;
        Ok(Workspace {
            config,
            scene,
            network,
            system,
            grid,
            trace,
            pcfg,
            out_dir,
            artifacts: Vec::new(),
        })
    }

    fn out(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out_dir.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let path = self.out(name);
        let mut bytes = serde_json::to_vec_pretty(value).map_err(config_err)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(config_err)
    }

    fn manifest(&self, command: &str, started: Instant) -> Manifest {
        Manifest {
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.calibration.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
            config: self.config.clone(),
            artifacts: self.artifacts.clone(),
        }
    }

    fn finish(mut self, command: &str, started: Instant) -> CliResult<()> {
        let manifest = self.manifest(command, started);
        self.write_json("manifest.json", &manifest)
    }
}

/// Run manifest: enough to reproduce the run (plus wall time, which varies).
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub config: RunConfig,
    pub artifacts: Vec<String>,
}

#[derive(Parser)]
#[command(name = "risplan", version, about = "Ray-traced radio planning with automatic RIS deployment")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the best-server coverage map and RSRP distribution.
    Coverage {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cluster outage tiles with BIRCH.
    Cluster {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full RIS deployment pipeline.
    Place {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit per-group material parameters to measurements.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare simulated RSRP against measurements.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recovery versus number of deployed units, with the nearby extension.
    SweepDensity {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recovery versus RIS aperture size.
    SweepAperture {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated aperture side lengths in meters.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<f64>,
    },
}

/// Entry point shared by the binary and the test suite. Returns the process
/// exit code.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            eprintln!("risplan: {}", msg.lines().next().unwrap_or("invalid arguments"));
            return EXIT_USAGE;
        }
    };
    let result = match &cli.cmd {
        Command::Coverage { config } => cmd_coverage(config),
        Command::Cluster { config } => cmd_cluster(config),
        Command::Place { config } => cmd_place(config),
        Command::Calibrate { config } => cmd_calibrate(config),
        Command::Validate { config } => cmd_validate(config),
        Command::SweepDensity { config } => cmd_sweep_density(config),
        Command::SweepAperture { config, sizes } => cmd_sweep_aperture(config, sizes),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("risplan: {}", e.message());
            e.code()
        }
    }
}

fn compute_coverage(ws: &Workspace) -> CliResult<coverage::CoverageMap> {
    coverage_map(
        &ws.scene,
        &ws.network,
        &ws.system,
        &ws.grid,
        &ws.trace,
        ws.pcfg.threshold_dbm,
        ws.config.grid.samples_per_tile,
    )
    .map_err(invariant_err)
}

fn cmd_coverage(config: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    let map = compute_coverage(&ws)?;
    let path = ws.out("coverage.csv");
    coverage::write_coverage_csv(&map, &path).map_err(config_err)?;
    let cdf = coverage::rsrp_cdf(&map);
    let path = ws.out("rsrp_cdf.csv");
    coverage::write_cdf_csv(&cdf, &path).map_err(config_err)?;
    ws.finish("coverage", started)
}

fn cmd_cluster(config: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    let map = compute_coverage(&ws)?;
    let outage = map.outage_tiles();
    if outage.is_empty() {
        let path = ws.out("clusters.csv");
        std::fs::write(path, "cluster_id,centroid_x,centroid_y,size\n").map_err(config_err)?;
        let path = ws.out("members.csv");
        std::fs::write(path, "tile_row,tile_col,cluster_id\n").map_err(config_err)?;
        return ws.finish("cluster", started);
    }
    let points: Vec<crate::Vec2> = outage.iter().map(|&t| ws.grid.center_of(t).xy()).collect();
    let clusters = birch_cluster(&points, ws.pcfg.t1, ws.pcfg.branching).map_err(invariant_err)?;
    let path = ws.out("clusters.csv");
    write_clusters_csv(&clusters, &path).map_err(config_err)?;
    let grid = ws.grid.clone();
    let path = ws.out("members.csv");
    write_membership_csv(&clusters, |m| grid.row_col(outage[m]), &path).map_err(config_err)?;
    ws.finish("cluster", started)
}

fn write_curve_csv(path: &Path, header: &str, rows: &[(usize, f64)]) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    writeln!(f, "{header}").map_err(config_err)?;
    for (n, v) in rows {
        writeln!(f, "{n},{v:.6}").map_err(config_err)?;
    }
    f.flush().map_err(config_err)
}

fn cmd_place(config: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    let map = compute_coverage(&ws)?;
    let path = ws.out("coverage.csv");
    coverage::write_coverage_csv(&map, &path).map_err(config_err)?;
    let report = placement::run_pipeline(&ws.scene, &ws.network, &ws.system, map, &ws.trace, &ws.pcfg)
        .map_err(invariant_err)?;
    ws.write_json("pipeline.json", &report.summary())?;
    ws.write_json("deployments.json", &report.deployment_records())?;
    let path = ws.out("prioritization.csv");
    write_curve_csv(&path, "n,recovered_fraction", &report.curve)?;
    ws.finish("place", started)
}

fn load_samples(ws: &Workspace) -> CliResult<Vec<calibration::MeasurementSample>> {
    let Some(mpath) = &ws.config.calibration.measurements_path else {
        return Err(CliError::Config("calibration.measurements_path is required".into()));
    };
    let raw = calibration::parse_measurements_csv(mpath).map_err(config_err)?;
    let cal = &ws.config.calibration;
    Ok(raw
        .iter()
        .map(|r| calibration::to_local(r, cal.ref_lat, cal.ref_lon))
        .filter(|s| s.outdoor)
        .collect())
}

fn cmd_calibrate(config: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    let samples = load_samples(&ws)?;
    let result = calibration::calibrate_scene(
        &ws.scene,
        &ws.network,
        &ws.system,
        &samples,
        &ws.grid,
        &ws.trace,
        ws.config.calibration.iterations,
        ws.config.calibration.lr,
        ws.config.calibration.seed,
    )
    .map_err(invariant_err)?;
    let path = ws.out("calibrated_scene.json");
    save_scene(&result.scene, &path).map_err(config_err)?;
    ws.write_json("exclusions.json", &result.excluded)?;
    ws.write_json("fitted_materials.json", &result.fitted)?;
    ws.finish("calibrate", started)
}

fn cmd_validate(config: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    let samples = load_samples(&ws)?;
    let report = calibration::validation_metrics(
        &ws.scene,
        &ws.network,
        &ws.system,
        &samples,
        &ws.grid,
        &ws.trace,
        &BTreeSet::new(),
    )
    .map_err(invariant_err)?;
    ws.write_json("validation.json", &serde_json::json!({
        "mean_error_db": report.mean_error_db,
        "median_error_db": report.median_error_db,
        "std_error_db": report.std_error_db,
        "region_count": report.region_pairs.len(),
        "sample_count": report.sample_errors.len(),
    }))?;
    let path = ws.out("scatter.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    writeln!(f, "simulated_dbm,measured_dbm").map_err(config_err)?;
    for (s, m) in &report.region_pairs {
        writeln!(f, "{s:.4},{m:.4}").map_err(config_err)?;
    }
    f.flush().map_err(config_err)?;
    let path = ws.out("errors.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    writeln!(f, "error_db").map_err(config_err)?;
    for e in &report.sample_errors {
        writeln!(f, "{e:.4}").map_err(config_err)?;
    }
    f.flush().map_err(config_err)?;
    let path = ws.out("cdfs.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    writeln!(f, "kind,rsrp_dbm,cdf").map_err(config_err)?;
    for (v, c) in &report.simulated_cdf {
        writeln!(f, "simulated,{v:.4},{c:.6}").map_err(config_err)?;
    }
    for (v, c) in &report.measured_cdf {
        writeln!(f, "measured,{v:.4},{c:.6}").map_err(config_err)?;
    }
    f.flush().map_err(config_err)?;
    ws.finish("validate", started)
}

fn cmd_sweep_density(config: &Path) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    let map = compute_coverage(&ws)?;
    let report = placement::run_pipeline(&ws.scene, &ws.network, &ws.system, map, &ws.trace, &ws.pcfg)
        .map_err(invariant_err)?;
    let outage_total = report.outage.len().max(1);
    let grid = ws.grid.clone();
    let ctx = EvalContext {
        scene: &ws.scene,
        network: &ws.network,
        system: &ws.system,
        grid: &grid,
        pcfg: &ws.pcfg,
    };
    let mut cache = PathCache::new(&ws.scene, &ws.network, ws.trace.clone());
    let baseline = |tile: usize| report.coverage.records[tile].rsrp_dbm;

    // Outcomes ordered by cluster size; deployments activate in that order.
    let mut order: Vec<usize> = (0..report.outcomes.len()).collect();
    order.sort_by(|&a, &b| {
        report.outcomes[b]
            .cluster_size
            .cmp(&report.outcomes[a].cluster_size)
            .then(report.outcomes[a].cluster_id.cmp(&report.outcomes[b].cluster_id))
    });

    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for n in 0..=report.outcomes.len() {
        let limited = prioritize_topn(&report.outcomes, n, outage_total);
        let active: Vec<_> = order
            .iter()
            .take(n)
            .filter_map(|&i| report.outcomes[i].deployment.clone())
            .collect();
        let base: BTreeSet<usize> = order
            .iter()
            .take(n)
            .flat_map(|&i| report.outcomes[i].recovered_tiles.iter().copied())
            .collect();
        let extended = if active.is_empty() {
            base.clone()
        } else {
            extend_nearby(&ctx, &mut cache, &active, &report.outage, &base, ws.pcfg.nearby_range_m, &baseline)
                .map_err(invariant_err)?
        };
        rows.push((n, limited, extended.len() as f64 / outage_total as f64));
    }
    let path = ws.out("density.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    writeln!(f, "n,recovered_fraction,extended_fraction").map_err(config_err)?;
    for (n, a, b) in rows {
        writeln!(f, "{n},{a:.6},{b:.6}").map_err(config_err)?;
    }
    f.flush().map_err(config_err)?;
    ws.finish("sweep-density", started)
}

fn cmd_sweep_aperture(config: &Path, sizes: &[f64]) -> CliResult<()> {
    let started = Instant::now();
    let mut ws = Workspace::load(config)?;
    if sizes.is_empty() || sizes.iter().any(|s| *s <= 0.0) {
        return Err(CliError::Config("aperture sizes must be positive".into()));
    }
    let map = compute_coverage(&ws)?;
    let mut rows = Vec::new();
    for &size in sizes {
        let mut pcfg = ws.pcfg.clone();
        pcfg.ris = RisSpec { width: size, height: size, eta: ws.pcfg.ris.eta, r: ws.pcfg.ris.r };
        let report =
            placement::run_pipeline(&ws.scene, &ws.network, &ws.system, map.clone(), &ws.trace, &pcfg)
                .map_err(invariant_err)?;
        rows.push((size, report.stage_recovery[2]));
    }
    let path = ws.out("aperture.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(config_err)?);
    writeln!(f, "aperture_m,recovered_fraction").map_err(config_err)?;
    for (s, v) in rows {
        writeln!(f, "{s},{v:.6}").map_err(config_err)?;
    }
    f.flush().map_err(config_err)?;
    ws.finish("sweep-aperture", started)
}
