mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use semfuse::cache::ObservationCache;
use semfuse::exec::{with_threads, Exec};
use semfuse::frames::{load_scene, Scene};
use semfuse::fusion::{Strategy, WeightScheme};
use semfuse::glfs::{train_glfs, GlfsParams, TauMode};
use semfuse::metrics::{reliability_table_with, summarize, CalibrationMetric, Conditioning, MetricsSummary, PredictionSet};
use semfuse::pipeline::{fuse_scene, read_voxel_map, write_voxel_map, FuseOptions};
use semfuse::planar::{largest_connected_component, project_to_planar_map, Mask, PlanarPoint};
use semfuse::scaling::{
    calibrate_2d, calibrate_3d, Calibration, CalibrationObjective, PixelSet, ScalingMode, ScalingParams,
    SearchOptions,
};
use semfuse::simulator::{generate_scene, SimulationSpec};

use config::{PipelineConfig, SearchConfig, RESOLVED_CONFIG};

const VOXEL_MAP: &str = "voxel_map.csv";
const OBS_CACHE: &str = "observations.cache";
const SCALING: &str = "scaling.json";
const CALIBRATION: &str = "calibration.json";
const GLFS_PARAMS: &str = "glfs_params.json";
const HISTORY: &str = "training_history.csv";
const METRICS: &str = "metrics.json";
const SIM_SPEC: &str = "simulation.toml";

/// Semantic TSDF mapping with calibrated label fusion.
#[derive(Parser, Debug)]
#[command(name = "semfuse", version, about)]
struct Cli {
    /// Pipeline config (TOML, one table per subcommand); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the data-parallel core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene and emulate a segmenter on it.
    Simulate(SimulateArgs),
    /// Integrate a scene into a TSDF with semantic fusion and export the map.
    Fuse(FuseArgs),
    /// Fit temperature/vector scaling on pixel logits.
    #[command(name = "calibrate-2d")]
    Calibrate2d(Calibrate2dArgs),
    /// Fit temperature/vector scaling on fused voxels of observation caches.
    #[command(name = "calibrate-3d")]
    Calibrate3d(Calibrate3dArgs),
    /// Train GLFS parameters on observation caches.
    #[command(name = "train-glfs")]
    TrainGlfs(TrainGlfsArgs),
    /// Compute calibration and accuracy metrics of a voxel map (and pixels).
    Evaluate(EvaluateArgs),
    /// Project a voxel map to a top-down semantic map.
    #[command(name = "project-map")]
    ProjectMap(ProjectMapArgs),
    /// Merge metrics files into one comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation spec TOML (`[scene]` + `[segmenter]`); standard fixture if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output scene directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scene seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Segmenter temperature override (τ* < 1 is overconfident).
    #[arg(long)]
    tau_star: Option<f64>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Scene directory.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion strategy: rbu, hist, avg, geomean or glfs.
    #[arg(long)]
    fusion: Option<Strategy>,
    /// Observation weights: const, normal-dist or quad-dist.
    #[arg(long)]
    weights: Option<WeightScheme>,
    /// Laplace smoothing α added to every class probability before logs.
    #[arg(long)]
    laplace_alpha: Option<f64>,
    /// Scaling parameters (JSON from calibrate-2d/3d).
    #[arg(long)]
    scaling: Option<PathBuf>,
    /// GLFS parameters (JSON from train-glfs); required with --fusion glfs.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also write the observation cache.
    #[arg(long)]
    cache: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Scaling family: temp or vector.
    #[arg(long)]
    mode: Option<ScalingMode>,
    /// Objective: mece, ece or tl-ece.
    #[arg(long)]
    metric: Option<CalibrationMetric>,
    /// Reliability bins O of the objective.
    #[arg(long)]
    bins: Option<usize>,
    /// Seed of the vector-mode random candidates.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Calibrate2dArgs {
    /// Scene directories.
    #[arg(long, num_args = 1..)]
    scenes: Vec<PathBuf>,
    /// Output directory (scaling.json, calibration.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use every n-th pixel in each image direction.
    #[arg(long)]
    pixel_stride: Option<usize>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args, Debug)]
struct Calibrate3dArgs {
    /// Observation cache files written by `fuse --cache`.
    #[arg(long, num_args = 1..)]
    caches: Vec<PathBuf>,
    /// Output directory (scaling.json, calibration.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed fusion strategy used inside the objective.
    #[arg(long)]
    fusion: Option<Strategy>,
    /// Observation weights: const, normal-dist or quad-dist.
    #[arg(long)]
    weights: Option<WeightScheme>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args, Debug)]
struct TrainGlfsArgs {
    /// Observation cache files written by `fuse --cache`.
    #[arg(long, num_args = 1..)]
    caches: Vec<PathBuf>,
    /// Output directory (glfs_params.json, training_history.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Starting parameters (near-RBU when omitted).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Weight η of the calibration term.
    #[arg(long)]
    eta: Option<f64>,
    /// Calibration bins of the soft-binned loss.
    #[arg(long)]
    bins: Option<usize>,
    /// Passes over the cache.
    #[arg(long)]
    epochs: Option<usize>,
    /// Gradient step size.
    #[arg(long, visible_alias = "lr")]
    learning_rate: Option<f64>,
    /// Voxels per gradient step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Soft-bin width σ_bin.
    #[arg(long)]
    sharpness: Option<f64>,
    /// Uniform subsample cap on cache entries.
    #[arg(long)]
    max_entries: Option<usize>,
    /// vector (per class) or scalar temperature.
    #[arg(long)]
    tau_mode: Option<TauMode>,
    /// Seed of the minibatch order and subsampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Voxel map CSV written by `fuse`.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Scene directory for pixel metrics.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Scaling applied to pixel logits before pixel metrics.
    #[arg(long)]
    scaling: Option<PathBuf>,
    /// Output directory (metrics.json, reliability tables).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reliability bins O.
    #[arg(long)]
    bins: Option<usize>,
    /// Use every n-th pixel in each image direction.
    #[arg(long)]
    pixel_stride: Option<usize>,
    /// Row label in reports.
    #[arg(long)]
    label: Option<String>,
    /// Calibration tag carried into reports.
    #[arg(long)]
    calibration: Option<String>,
}

#[derive(Args, Debug)]
struct ProjectMapArgs {
    /// Voxel map CSV written by `fuse`.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Output directory (planar_map.csv, planar_map.pgm, goal_mask.pgm).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cell edge length in meters.
    #[arg(long)]
    cell_size: Option<f64>,
    /// Lowest voxel-center height kept, meters.
    #[arg(long)]
    min_height: Option<f64>,
    /// Highest voxel-center height kept, meters.
    #[arg(long)]
    max_height: Option<f64>,
    /// Also write the largest connected component of this class's mask.
    #[arg(long)]
    goal_class: Option<usize>,
    /// Confidence threshold of the goal mask.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.json files written by `evaluate`.
    #[arg(long, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.sequential |= cli.sequential;
    if cfg.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    let exec = if cfg.sequential { Exec::Sequential } else { Exec::Parallel };
    let threads = cfg.threads;
    let go = move || match cli.command {
        Command::Simulate(a) => simulate(cfg, a, exec),
        Command::Fuse(a) => fuse(cfg, a, exec),
        Command::Calibrate2d(a) => calibrate_pixels(cfg, a, exec),
        Command::Calibrate3d(a) => calibrate_voxels(cfg, a, exec),
        Command::TrainGlfs(a) => train(cfg, a, exec),
        Command::Evaluate(a) => evaluate(cfg, a, exec),
        Command::ProjectMap(a) => project(cfg, a, exec),
        Command::Report(a) => report(cfg, a),
    };
    match threads {
        Some(n) => with_threads(n, go),
        None => go(),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn set_list<T>(slot: &mut Vec<T>, flag: Vec<T>) {
    if !flag.is_empty() {
        *slot = flag;
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| anyhow!("missing required {flag}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    write(&dir.join(RESOLVED_CONFIG), cfg.to_toml()?)
}

fn load_scenes(dirs: &[PathBuf]) -> Result<Vec<Scene>> {
    dirs.iter()
        .map(|d| load_scene(d).with_context(|| format!("loading scene {}", d.display())))
        .collect()
}

fn load_caches(paths: &[PathBuf]) -> Result<Vec<ObservationCache>> {
    paths
        .iter()
        .map(|p| ObservationCache::read(p).with_context(|| format!("loading cache {}", p.display())))
        .collect()
}

fn load_scaling(path: &Path) -> Result<ScalingParams> {
    ScalingParams::read(path).with_context(|| format!("loading scaling {}", path.display()))
}

// ---------------------------------------------------------------------------

fn simulate(mut cfg: PipelineConfig, a: SimulateArgs, exec: Exec) -> Result<()> {
    let s = &mut cfg.simulate;
    set_opt(&mut s.spec, a.spec);
    set_opt(&mut s.out, a.out);
    set_opt(&mut s.seed, a.seed);
    set_opt(&mut s.tau_star, a.tau_star);
    let out = required(&s.out, "--out")?.clone();

    let mut spec = match &s.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            toml::from_str::<SimulationSpec>(&text).with_context(|| format!("parsing spec {}", p.display()))?
        }
        None => SimulationSpec::standard(),
    };
    if let Some(seed) = s.seed {
        spec.scene.seed = seed;
    }
    if let Some(t) = s.tau_star {
        spec.segmenter.tau_star = t;
    }
    create_dir(&out)?;
    let sim = generate_scene(&spec.scene, &spec.segmenter, &out, exec)?;
    write(&out.join(SIM_SPEC), toml::to_string(&spec).context("serializing spec")?)?;
    write_resolved(&cfg, &out)?;
    println!(
        "simulated {} frames, {} ground-truth voxels -> {}",
        sim.scene.frames.len(),
        sim.gt_voxels.len(),
        out.display()
    );
    Ok(())
}

fn fuse(mut cfg: PipelineConfig, a: FuseArgs, exec: Exec) -> Result<()> {
    let f = &mut cfg.fuse;
    set_opt(&mut f.scene, a.scene);
    set_opt(&mut f.out, a.out);
    set(&mut f.fusion, a.fusion);
    set(&mut f.weights, a.weights);
    set(&mut f.laplace_alpha, a.laplace_alpha);
    set_opt(&mut f.scaling, a.scaling);
    set_opt(&mut f.params, a.params);
    f.cache |= a.cache;
    if f.fusion == Strategy::Glfs && f.params.is_none() {
        bail!("--fusion glfs requires --params <glfs_params.json> (trained GLFS parameters)");
    }
    let scene_dir = required(&f.scene, "--scene")?;
    let out = required(&f.out, "--out")?.clone();

    let scene = load_scene(scene_dir).with_context(|| format!("loading scene {}", scene_dir.display()))?;
    let mut opts = FuseOptions::new(f.fusion);
    opts.weights = f.weights;
    opts.laplace_alpha = f.laplace_alpha;
    opts.caching = f.cache;
    opts.exec = exec;
    if let Some(p) = &f.scaling {
        opts.scaling = Some(load_scaling(p)?);
    }
    if let Some(p) = &f.params {
        opts.glfs = Some(GlfsParams::read(p).with_context(|| format!("loading GLFS params {}", p.display()))?);
    }
    let map = fuse_scene(&scene, &opts)?;

    create_dir(&out)?;
    write_voxel_map(&map, scene.class_names.as_deref(), &out.join(VOXEL_MAP))?;
    if f.cache {
        let id = scene_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        map.cache(&id)?.write(&out.join(OBS_CACHE))?;
    }
    write_resolved(&cfg, &out)?;
    println!("fused {} surface voxels with {} -> {}", map.voxels.len(), map.strategy, out.display());
    Ok(())
}

fn apply_search(s: &mut SearchConfig, a: SearchArgs) {
    set(&mut s.mode, a.mode);
    set(&mut s.metric, a.metric);
    set(&mut s.bins, a.bins);
    set(&mut s.seed, a.seed);
}

fn search_options(s: &SearchConfig, pixel_stride: usize, exec: Exec) -> SearchOptions {
    SearchOptions {
        tau_min: s.tau_min,
        tau_max: s.tau_max,
        sweep: s.sweep,
        max_evals: s.max_evals,
        seed: s.seed,
        pixel_stride,
        exec,
        ..SearchOptions::default()
    }
}

fn write_calibration(cal: &Calibration, metric: CalibrationMetric, out: &Path) -> Result<()> {
    write(&out.join(SCALING), serde_json::to_string_pretty(&cal.params)?)?;
    let summary = serde_json::json!({
        "metric": metric,
        "mode": cal.params.mode,
        "tau": cal.params.tau,
        "value": cal.value,
        "identity_value": cal.identity_value,
        "evaluations": cal.evaluations,
    });
    write(&out.join(CALIBRATION), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} {}: {:.4} at identity -> {:.4}, tau = {:?}",
        cal.params.mode, metric, cal.identity_value, cal.value, cal.params.tau
    );
    Ok(())
}

fn calibrate_pixels(mut cfg: PipelineConfig, a: Calibrate2dArgs, exec: Exec) -> Result<()> {
    let c = &mut cfg.calibrate_2d;
    set_list(&mut c.scenes, a.scenes);
    set_opt(&mut c.out, a.out);
    set(&mut c.pixel_stride, a.pixel_stride);
    apply_search(&mut c.search, a.search);
    if c.scenes.is_empty() {
        bail!("missing required --scenes");
    }
    let out = required(&c.out, "--out")?.clone();
    let scenes = load_scenes(&c.scenes)?;
    let objective = CalibrationObjective {
        metric: c.search.metric,
        bins: c.search.bins,
        ..CalibrationObjective::default()
    };
    let cal = calibrate_2d(&scenes, &objective, c.search.mode, &search_options(&c.search, c.pixel_stride, exec))?;
    create_dir(&out)?;
    write_calibration(&cal, c.search.metric, &out)?;
    write_resolved(&cfg, &out)
}

fn calibrate_voxels(mut cfg: PipelineConfig, a: Calibrate3dArgs, exec: Exec) -> Result<()> {
    let c = &mut cfg.calibrate_3d;
    set_list(&mut c.caches, a.caches);
    set_opt(&mut c.out, a.out);
    set(&mut c.fusion, a.fusion);
    set(&mut c.weights, a.weights);
    apply_search(&mut c.search, a.search);
    if c.caches.is_empty() {
        bail!("missing required --caches (observation caches from `fuse --cache`)");
    }
    let out = required(&c.out, "--out")?.clone();
    let caches = load_caches(&c.caches)?;
    let objective = CalibrationObjective {
        metric: c.search.metric,
        bins: c.search.bins,
        strategy: c.fusion,
        weights: c.weights,
        laplace_alpha: c.laplace_alpha,
    };
    let cal = calibrate_3d(&caches, &objective, c.search.mode, &search_options(&c.search, 1, exec))?;
    create_dir(&out)?;
    write_calibration(&cal, c.search.metric, &out)?;
    write_resolved(&cfg, &out)
}

fn train(mut cfg: PipelineConfig, a: TrainGlfsArgs, exec: Exec) -> Result<()> {
    let c = &mut cfg.train_glfs;
    set_list(&mut c.caches, a.caches);
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.init, a.init);
    let t = &mut c.trainer;
    set(&mut t.eta, a.eta);
    set(&mut t.bins, a.bins);
    set(&mut t.epochs, a.epochs);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.sharpness, a.sharpness);
    set(&mut t.max_entries, a.max_entries);
    set(&mut t.tau_mode, a.tau_mode);
    set(&mut t.seed, a.seed);
    if c.caches.is_empty() {
        bail!("missing required --caches (observation caches from `fuse --cache`)");
    }
    let out = required(&c.out, "--out")?.clone();
    let cache = ObservationCache::merge(&load_caches(&c.caches)?)?;
    let init = match &c.init {
        Some(p) => GlfsParams::read(p).with_context(|| format!("loading GLFS params {}", p.display()))?,
        None => c.trainer.initial_params(cache.class_count),
    };
    let result = train_glfs(&cache, &init, &c.trainer, exec)?;
    create_dir(&out)?;
    result.params.write(&out.join(GLFS_PARAMS))?;
    write(&out.join(HISTORY), result.history_csv())?;
    write_resolved(&cfg, &out)?;
    let first = result.history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let best = result.history.get(result.best_epoch).map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} voxels: loss {first:.4} -> {best:.4} (best epoch {})",
        result.history.len().saturating_sub(1),
        cache.len(),
        result.best_epoch
    );
    Ok(())
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MetricsFile {
    label: String,
    fusion: String,
    calibration: String,
    bins: usize,
    voxel: MetricsSummary,
    pixel: Option<MetricsSummary>,
}

fn reliability_csv(preds: &PredictionSet, bins: usize, exec: Exec) -> Result<String> {
    let mut out = String::from("conditioning,bin,cond_class,mean_conf,mean_acc,count\n");
    for cond in [Conditioning::None, Conditioning::PredClass, Conditioning::GtClass] {
        let table = reliability_table_with(preds, bins, cond, exec)?;
        let name = serde_json::to_value(cond)?;
        for line in table.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{},{line}", name.as_str().unwrap_or_default());
        }
    }
    Ok(out)
}

fn evaluate(mut cfg: PipelineConfig, a: EvaluateArgs, exec: Exec) -> Result<()> {
    let c = &mut cfg.evaluate;
    set_opt(&mut c.map, a.map);
    set_opt(&mut c.scene, a.scene);
    set_opt(&mut c.scaling, a.scaling);
    set_opt(&mut c.out, a.out);
    set(&mut c.bins, a.bins);
    set(&mut c.pixel_stride, a.pixel_stride);
    set_opt(&mut c.label, a.label);
    set(&mut c.calibration, a.calibration);
    let map_path = required(&c.map, "--map")?;
    let out = required(&c.out, "--out")?.clone();

    let map = read_voxel_map(map_path).with_context(|| format!("loading voxel map {}", map_path.display()))?;
    let voxel_preds = map.predictions()?;
    create_dir(&out)?;
    let voxel = summarize(&voxel_preds, c.bins)?;
    write(&out.join("voxel_reliability.csv"), reliability_csv(&voxel_preds, c.bins, exec)?)?;

    let pixel = match &c.scene {
        Some(dir) => {
            let scene = load_scene(dir).with_context(|| format!("loading scene {}", dir.display()))?;
            let scaling = c.scaling.as_deref().map(load_scaling).transpose()?;
            let preds = PixelSet::from_scenes(std::slice::from_ref(&scene), c.pixel_stride)?
                .predictions(scaling.as_ref(), exec)?;
            write(&out.join("pixel_reliability.csv"), reliability_csv(&preds, c.bins, exec)?)?;
            Some(summarize(&preds, c.bins)?)
        }
        None => None,
    };
    let label = c.label.clone().unwrap_or_else(|| {
        out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let file = MetricsFile {
        label,
        fusion: map.info.strategy.to_string(),
        calibration: c.calibration.clone(),
        bins: c.bins,
        voxel,
        pixel,
    };
    write(&out.join(METRICS), serde_json::to_string_pretty(&file)?)?;
    write_resolved(&cfg, &out)?;
    println!(
        "{}: voxel mECE {:.4} mIoU {:.4} over {} voxels{}",
        file.label,
        voxel.mece,
        voxel.miou,
        voxel.count,
        pixel.map(|p| format!("; pixel mECE {:.4}", p.mece)).unwrap_or_default()
    );
    Ok(())
}

fn mask_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.cols, mask.rows).into_bytes();
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            out.push(if mask.get(r, c) { 255 } else { 0 });
        }
    }
    out
}

fn project(mut cfg: PipelineConfig, a: ProjectMapArgs, exec: Exec) -> Result<()> {
    let c = &mut cfg.project_map;
    set_opt(&mut c.map, a.map);
    set_opt(&mut c.out, a.out);
    set(&mut c.planar.cell_size, a.cell_size);
    set(&mut c.planar.min_height, a.min_height);
    set(&mut c.planar.max_height, a.max_height);
    set_opt(&mut c.goal_class, a.goal_class);
    set(&mut c.threshold, a.threshold);
    let map_path = required(&c.map, "--map")?;
    let out = required(&c.out, "--out")?.clone();

    let map = read_voxel_map(map_path).with_context(|| format!("loading voxel map {}", map_path.display()))?;
    let points: Vec<PlanarPoint> = map.voxels.iter().map(PlanarPoint::from).collect();
    let planar = project_to_planar_map(&points, map.info.class_count, &c.planar, exec)?;
    create_dir(&out)?;
    planar.write_csv(&out.join("planar_map.csv"))?;
    planar.write_pgm(&out.join("planar_map.pgm"))?;
    if let Some(k) = c.goal_class {
        if k >= map.info.class_count {
            bail!("--goal-class {k} is out of range for {} classes", map.info.class_count);
        }
        let goal = largest_connected_component(&planar.class_mask(k, c.threshold));
        write(&out.join("goal_mask.pgm"), mask_pgm(&goal))?;
        println!("goal class {k}: {} cells in the largest component", goal.count());
    }
    write_resolved(&cfg, &out)?;
    println!(
        "projected {} voxels to {}x{} cells ({} known) -> {}",
        points.len(),
        planar.cols,
        planar.rows,
        planar.known_cells(),
        out.display()
    );
    Ok(())
}

fn report(mut cfg: PipelineConfig, a: ReportArgs) -> Result<()> {
    let c = &mut cfg.report;
    set_list(&mut c.metrics, a.metrics);
    set_opt(&mut c.out, a.out);
    if c.metrics.is_empty() {
        bail!("missing required --metrics");
    }
    let out = required(&c.out, "--out")?.clone();
    let metrics = c.metrics.clone();
    let mut csv = String::from(
        "label,fusion,calibration,voxel_count,mece,tl_ece,ece,brier,nll,miou,pixel_mece,pixel_ece,pixel_miou\n",
    );
    for p in &metrics {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let m: MetricsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let v = &m.voxel;
        let pix = |f: fn(&MetricsSummary) -> f64| m.pixel.as_ref().map(|s| format!("{:.6}", f(s))).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            m.label,
            m.fusion,
            m.calibration,
            v.count,
            v.mece,
            v.tl_ece,
            v.ece,
            v.brier,
            v.nll,
            v.miou,
            pix(|s| s.mece),
            pix(|s| s.ece),
            pix(|s| s.miou)
        );
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&out, &csv)?;
    write(&out.with_extension("config.toml"), cfg.to_toml()?)?;
    println!("{} rows -> {}", metrics.len(), out.display());
    Ok(())
}
