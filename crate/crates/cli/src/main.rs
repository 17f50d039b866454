//! `costalign`: command-line front end for scan-path transfer between
//! costal-cartilage point clouds.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use costalign_core::baselines::{CpdParams, IcpParams};
use costalign_core::eval::{self, BenchConfig, BenchParams, Method, RegistrationReport};
use costalign_core::geom::{read_xyzl, write_xyzl, Point3, PointCloud, STERNUM};
use costalign_core::preprocess::clean_subject;
use costalign_core::register::{map_waypoints, BlendMode, PipelineParams};
use costalign_core::shaperepair::{
    build_manifold, ellipse_dataset, repair, shape_valid, train_embedding, BinaryMask,
    ManifoldParams, ShapeModel, DEFAULT_LATENT_DIM,
};
use costalign_core::somgraph::{build_template_graph_with, som_fit, SkeletonGraph};
use costalign_core::synth::{generate_pair, AnatomyParams, DeformProfile};
use costalign_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "costalign",
    version,
    about = "Transfer intercostal scan paths between rib-cage point clouds"
)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic template/subject pair with ground truth, plus
    /// the subject's cartilage points without labels as a raw scan.
    Generate(GenerateArgs),
    /// Denoise and label a raw subject cloud and align it to the template.
    Preprocess(PreprocessArgs),
    /// Fit a skeleton graph to a cloud with the geodesic SOM.
    FitGraph(FitGraphArgs),
    /// Register the template onto a subject and map the waypoints.
    Register(RegisterArgs),
    /// Map waypoints through a template and its warped copy.
    MapPath(MapPathArgs),
    /// Run every (method, profile, seed) combination and write reports.
    Benchmark(BenchmarkArgs),
    /// Repair a binary mask with a trained shape model.
    RepairMask(RepairMaskArgs),
    /// Train a shape model (embedding plus valid-shape manifold).
    TrainShapeModel(TrainShapeArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "mild")]
    deform_profile: DeformProfile,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Drop sternum points and labels first, so a labeled cloud (such as the
    /// template) is cleaned exactly like a raw scan.
    #[arg(long)]
    strip_sternum: bool,
}

#[derive(Args)]
struct FitGraphArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    cloud: PathBuf,
    /// Starting graph; built from the cloud's labels when omitted.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Node count of a graph built from the cloud.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    subject: PathBuf,
    /// Waypoints on the template: a JSON array of [x, y, z], or a truth file.
    #[arg(long)]
    waypoints: PathBuf,
    /// Ground truth; enables per-waypoint errors in the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "dense")]
    method: Method,
    #[arg(long)]
    blend: Option<BlendMode>,
    /// Zero all wall-clock fields so reports are reproducible byte for byte.
    #[arg(long)]
    no_timings: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MapPathArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    template: PathBuf,
    /// Template warped onto the subject, point for point.
    #[arg(long)]
    warped: PathBuf,
    #[arg(long)]
    waypoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Benchmark configuration `{seeds, profiles, methods, params}`.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Comma-separated seeds; overrides the configuration.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    profiles: Option<Vec<DeformProfile>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    no_timings: bool,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct RepairMaskArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Nearest manifold samples averaged; only k = 1 guarantees a valid shape.
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Args)]
struct TrainShapeArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of PGM training masks; synthetic ellipses when omitted.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    synthetic_count: Option<usize>,
    /// Raster side of synthetic masks.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Accepted manifold samples to collect.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Parameters read from `--config`; every field is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    rng_seed: Option<u64>,
    /// `error`, `info` or `debug`; `COSTALIGN_LOG` wins.
    verbosity: Option<String>,
    out_dir: Option<PathBuf>,
    anatomy: AnatomyParams,
    pipeline: PipelineParams,
    icp: IcpParams,
    cpd: CpdParams,
    sparse_node_count: usize,
    latent_dim: usize,
    synthetic_count: usize,
    mask_size: usize,
    manifold: ManifoldParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchParams::default();
        Self {
            rng_seed: None,
            verbosity: None,
            out_dir: None,
            anatomy: bench.anatomy,
            pipeline: bench.pipeline,
            icp: bench.icp,
            cpd: bench.cpd,
            sparse_node_count: bench.sparse_node_count,
            latent_dim: DEFAULT_LATENT_DIM,
            synthetic_count: 300,
            mask_size: 32,
            manifold: ManifoldParams::default(),
        }
    }
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Json {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_json_compact<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Domain(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let config = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    init_logging(config.verbosity.as_deref());
    Ok(config)
}

fn require_seed(flag: Option<u64>, config: &RunConfig) -> CliResult<u64> {
    flag.or(config.rng_seed).ok_or_else(|| {
        Failure::Usage("a seed is required: pass --seed or set rng_seed in --config".into())
    })
}

fn init_logging(verbosity: Option<&str>) {
    let env = env_logger::Env::default().filter_or("COSTALIGN_LOG", verbosity.unwrap_or("error"));
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Waypoints from a JSON array of `[x, y, z]` or from a truth file's
/// template list.
fn read_waypoints(path: &Path) -> CliResult<Vec<Point3>> {
    let value: serde_json::Value = read_json(path)?;
    let list = match value {
        serde_json::Value::Object(mut map) => map
            .remove("waypoints_template")
            .unwrap_or(serde_json::Value::Null),
        other => other,
    };
    serde_json::from_value(list).map_err(|e| {
        Error::Json {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn bench_params(config: &RunConfig) -> BenchParams {
    BenchParams {
        anatomy: config.anatomy,
        pipeline: config.pipeline,
        icp: config.icp,
        cpd: config.cpd,
        sparse_node_count: config.sparse_node_count,
    }
}

fn generate(args: GenerateArgs) -> CliResult<()> {
    let config = load_config(args.common.config.as_deref())?;
    let seed = require_seed(args.common.seed, &config)?;
    let params = AnatomyParams {
        rng_seed: seed,
        deform: args.deform_profile.params(),
        ..config.anatomy
    };
    let (template, subject, truth) = generate_pair(&params)?;
    ensure_dir(&args.out_dir)?;
    write_xyzl(args.out_dir.join("template.xyzl"), &template)?;
    write_xyzl(args.out_dir.join("subject.xyzl"), &subject)?;
    // what an ultrasound sweep sees: cartilage only, no labels
    let raw = subject.filter(|_, l| l != STERNUM);
    let raw = PointCloud::new(raw.points);
    write_xyzl(args.out_dir.join("subject_raw.xyzl"), &raw)?;
    write_json_compact(&args.out_dir.join("truth.json"), &truth)?;
    log::info!(
        "generated {} template and {} subject points",
        template.len(),
        subject.len()
    );
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> CliResult<()> {
    let config = load_config(args.common.config.as_deref())?;
    let mut raw = read_xyzl(&args.input)?;
    if args.strip_sternum {
        raw = PointCloud::new(raw.filter(|_, l| l != STERNUM).points);
    }
    let template = read_xyzl(&args.template)?;
    let (cleaned, _, report) = clean_subject(
        &raw,
        &template,
        &config.pipeline.clustering,
        config.pipeline.branch_count,
    )?;
    write_xyzl(&args.out, &cleaned)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn fit_graph(args: FitGraphArgs) -> CliResult<()> {
    let config = load_config(args.common.config.as_deref())?;
    let seed = require_seed(args.common.seed, &config)?;
    let cloud = read_xyzl(&args.cloud)?;
    let start = match &args.graph {
        Some(path) => SkeletonGraph::read_json(path)?,
        None => build_template_graph_with(
            &cloud,
            args.nodes.unwrap_or(config.pipeline.node_count),
            config.pipeline.branch_count,
        )?,
    };
    let som = costalign_core::somgraph::SomParams {
        rng_seed: seed,
        ..config.pipeline.som
    };
    let fitted = som_fit(&start, &cloud, &som)?;
    fitted.write_json(&args.out)?;
    Ok(())
}

fn register(args: RegisterArgs) -> CliResult<()> {
    let config = load_config(args.common.config.as_deref())?;
    let seed = require_seed(args.common.seed, &config)?;
    let template = read_xyzl(&args.template)?;
    let subject = read_xyzl(&args.subject)?;
    let waypoints = read_waypoints(&args.waypoints)?;
    let truth = match &args.truth {
        Some(p) => {
            let t: costalign_core::synth::GroundTruth = read_json(p)?;
            Some(t.waypoints_subject)
        }
        None => None,
    };
    let mut params = bench_params(&config);
    params.pipeline.rng_seed = seed;
    if let Some(blend) = args.blend {
        params.pipeline.register.blend = blend;
    }
    let echo = serde_json::to_value(params).unwrap_or(serde_json::Value::Null);
    let out = eval::run_method(args.method, &template, &subject, &waypoints, &params)?;
    let errors = match &truth {
        Some(t) => eval::waypoint_errors(&out.waypoints, t)?,
        None => Vec::new(),
    };
    let mut report =
        RegistrationReport::success(args.method.name(), errors, out.stages.clone(), echo);
    report.seed = Some(seed);
    if args.no_timings {
        report.strip_timings();
    }
    ensure_dir(&args.out_dir)?;
    write_xyzl(args.out_dir.join("warped.xyzl"), &out.warped)?;
    write_json(&args.out_dir.join("mapped_waypoints.json"), &out.waypoints)?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    if let Some(g) = &out.g_ct {
        g.write_json(args.out_dir.join("g_ct.json"))?;
    }
    if let Some(g) = &out.g_us {
        g.write_json(args.out_dir.join("g_us.json"))?;
    }
    if let Some(m) = report.mean_mm {
        log::info!("mean waypoint error {m:.3} mm");
    }
    Ok(())
}

fn map_path(args: MapPathArgs) -> CliResult<()> {
    let config = load_config(args.common.config.as_deref())?;
    let template = read_xyzl(&args.template)?;
    let warped = read_xyzl(&args.warped)?;
    let waypoints = read_waypoints(&args.waypoints)?;
    let mapped = map_waypoints(&waypoints, &template, &warped, &config.pipeline.register)?;
    write_json(&args.out, &mapped)?;
    Ok(())
}

fn benchmark(args: BenchmarkArgs) -> CliResult<()> {
    init_logging(None);
    let mut config = match &args.config {
        Some(p) => read_json::<BenchConfig>(p)?,
        None => BenchConfig {
            seeds: Vec::new(),
            profiles: vec![DeformProfile::Mild],
            methods: Method::ALL.to_vec(),
            params: BenchParams::default(),
        },
    };
    if let Some(s) = args.seeds {
        config.seeds = s;
    }
    if let Some(p) = args.profiles {
        config.profiles = p;
    }
    if let Some(m) = args.methods {
        config.methods = m;
    }
    if config.seeds.is_empty() {
        return Err(Failure::Usage(
            "no seeds: pass --seeds or list them in --config".into(),
        ));
    }
    let mut reports = eval::run_benchmark(&config)?;
    if args.no_timings {
        for r in &mut reports {
            r.strip_timings();
        }
    }
    eval::write_benchmark(&reports, &args.out)?;
    for row in eval::aggregate(&reports)
        .iter()
        .filter(|r| r.source == "benchmark")
    {
        log::info!(
            "{} {}: {:?} mm over {} runs",
            row.method,
            row.profile,
            row.mean_mm,
            row.runs
        );
    }
    Ok(())
}

fn repair_mask(args: RepairMaskArgs) -> CliResult<()> {
    init_logging(None);
    let model = ShapeModel::read_json(&args.model)?;
    let mask = BinaryMask::read_pgm(&args.input)?;
    let repaired = repair(&mask, &model.embedding, &model.manifold, args.k)?;
    repaired.write_pgm(&args.out)?;
    Ok(())
}

fn read_mask_dir(dir: &Path) -> CliResult<Vec<BinaryMask>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| BinaryMask::read_pgm(p).map_err(Failure::from))
        .collect()
}

fn train_shape_model(args: TrainShapeArgs) -> CliResult<()> {
    let config = load_config(args.common.config.as_deref())?;
    let seed = require_seed(args.common.seed, &config)?;
    let masks = match &args.masks {
        Some(dir) => read_mask_dir(dir)?,
        None => {
            let size = args.size.unwrap_or(config.mask_size);
            ellipse_dataset(
                args.synthetic_count.unwrap_or(config.synthetic_count),
                size,
                size,
                seed,
            )
            .into_iter()
            .map(|(_, m)| m)
            .collect()
        }
    };
    let embedding = train_embedding(&masks, args.dim.unwrap_or(config.latent_dim))?;
    let valid: Vec<BinaryMask> = masks.into_iter().filter(shape_valid).collect();
    let params = ManifoldParams {
        target_count: args.samples.unwrap_or(config.manifold.target_count),
        rng_seed: seed,
        ..config.manifold
    };
    let manifold = build_manifold(&embedding, &valid, &params)?;
    log::info!(
        "accepted {} of {} proposals (K = {:.3e})",
        manifold.stats.accepted,
        manifold.stats.proposed,
        manifold.k_rs
    );
    ShapeModel {
        embedding,
        manifold,
    }
    .write_json(&args.out)?;
    Ok(())
}

fn error_context(e: &Error) -> serde_json::Value {
    match e {
        Error::Io { path, .. } | Error::Json { path, .. } => json!({ "path": path }),
        Error::Parse { path, line, .. } => json!({ "path": path, "line": line }),
        Error::SparseNeighborhood { index, radius } => {
            json!({ "waypoint": index, "radius_mm": radius })
        }
        Error::ManifoldStarved { accepted, proposed } => {
            json!({ "accepted": accepted, "proposed": proposed })
        }
        Error::PairMismatch {
            source_len,
            target_len,
        } => json!({ "source_len": source_len, "target_len": target_len }),
        Error::MissingBranch(b) => json!({ "branch": b }),
        Error::AmbiguousSide { cluster } => json!({ "cluster": cluster }),
        _ => json!({}),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::FitGraph(a) => fit_graph(a),
        Command::Register(a) => register(a),
        Command::MapPath(a) => map_path(a),
        Command::Benchmark(a) => benchmark(a),
        Command::RepairMask(a) => repair_mask(a),
        Command::TrainShapeModel(a) => train_shape_model(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            let report =
                json!({ "code": e.code(), "message": e.to_string(), "context": error_context(&e) });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
