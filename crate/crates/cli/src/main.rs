//! Command-line front end: density rendering, statistics, evaluation, embedding,
//! gradient verification and a decoder demo.
//!
//! Exit codes: 0 success, 1 invalid input or failed verification, 2 usage error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crowddet::cqblock::decoder::{decoder_forward, DecoderMemory, DecoderParams};
use crowddet::cqblock::gradcheck::{grad_check, GradComponent, DEFAULT_STEP};
use crowddet::cqblock::module::{cq_module_forward, density_tokens, CqModuleParams};
use crowddet::cqblock::{parse_stages, DEFAULT_POS_TEMPERATURE};
use crowddet::density::{density_loss, triplet_statistic, count_overlapping_triplets, DEFAULT_TRIPLET_IOU};
use crowddet::embedding::{embed_map, EmbeddingTable};
use crowddet::io::config::DecoderSettings;
use crowddet::io::image::DEFAULT_DISPLAY_MAX;
use crowddet::io::parallel::{map_ordered, with_workers};
use crowddet::io::{self, load_config, load_density_csv, load_scenes, DensityFormat, RunConfig};
use crowddet::metrics::{evaluate_2d, evaluate_3d, ApMode, EvalReport, DEFAULT_DISTANCE_THRESHOLDS, DEFAULT_IOU_THRESH};
use crowddet::tensor::Tensor;

/// Gradient checks fail above this relative error.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "crowddet", version, about = "Density-guided crowd detection toolkit")]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; overrides `run.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Density map rendering and loss.
    #[command(subcommand)]
    Density(DensityCommand),
    /// Dataset statistics.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Evaluate predictions against ground truth.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Quantize a density map and expand it into embedding vectors.
    Embed(EmbedArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Small runnable demos.
    #[command(subcommand)]
    Demo(DemoCommand),
}

#[derive(Subcommand)]
enum DensityCommand {
    /// Render one density map per scene.
    Render(RenderArgs),
    /// λ-weighted L1 loss between two CSV density maps.
    Loss(LossArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// Scene file (`.odgt` or native scene JSON).
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory; defaults to `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "pgm", value_parser = ["pgm", "csv"])]
    format: String,
    /// Density value shown as white in PGM output.
    #[arg(long, default_value_t = DEFAULT_DISPLAY_MAX)]
    display_max: f64,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Loss weight; defaults to `loss.lambda`.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Average number of mutually overlapping box triplets per image.
    Triplets(TripletArgs),
}

#[derive(Args)]
struct TripletArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Pairwise IoU every pair of a triplet must reach.
    #[arg(long, default_value_t = DEFAULT_TRIPLET_IOU)]
    iou: f64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// AP and MR⁻² for 2D boxes.
    #[command(name = "2d")]
    TwoD(Eval2dArgs),
    /// Center-distance mAP and occlusion-stratified AR for 3D boxes.
    #[command(name = "3d")]
    ThreeD(Eval3dArgs),
}

#[derive(Args)]
struct ReportOut {
    /// Directory for `report.csv` and `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval2dArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESH)]
    iou: f64,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct Eval3dArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Drop ground truths whose center is not visible to the camera.
    #[arg(long)]
    fov_filter: bool,
    /// Center-distance thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DISTANCE_THRESHOLDS.to_vec())]
    thresholds: Vec<f64>,
    /// Plain all-point AP instead of the 0.1-clipped, renormalized variant.
    #[arg(long)]
    plain_ap: bool,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct EmbedArgs {
    /// Density map as CSV.
    #[arg(long)]
    map: PathBuf,
    /// Output tensor file (`h x w x dim`).
    #[arg(long)]
    out: PathBuf,
    /// Embedding table tensor file (`n_bins x dim`); seeded from `run.seed` if absent.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Embedding size of a seeded table.
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Component to check (`all` for every one).
    #[arg(long, default_value = "all")]
    component: String,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Run the decoder on random queries with a given stage order.
    Decoder(DecoderDemoArgs),
}

#[derive(Args)]
struct DecoderDemoArgs {
    /// Stage order, e.g. `DS,SA,D,SA,V` or `DS->SA->V`; defaults to `decoder.stages`.
    #[arg(long)]
    stages: Option<String>,
    /// Layer count; defaults to `decoder.layers`.
    #[arg(long)]
    layers: Option<usize>,
    /// Keep the density stage only in these 1-based layers.
    #[arg(long, value_delimiter = ',')]
    density_layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    /// Model width; must be a multiple of 4 and of `heads`.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Seed; defaults to `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json(value: &serde_json::Value) {
    emit(&serde_json::to_string_pretty(value).expect("json"));
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn render(cfg: &RunConfig, args: &RenderArgs) -> Result<()> {
    let format: DensityFormat = args.format.parse()?;
    if !(args.display_max > 0.0 && args.display_max.is_finite()) {
        bail!("--display-max must be positive");
    }
    let scenes = load_scenes(&args.scenes)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let maps = map_ordered(&scenes, cfg.workers, |s| {
        s.density_map(&cfg.density, s.grid_size(cfg.density.scale))
    })?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, (scene, map)) in scenes.iter().zip(maps).enumerate() {
        let map = map.with_context(|| format!("scene {i} ({})", scene.image_id))?;
        let name = format!("{:04}_{}.{}", i, file_stem_for(&scene.image_id), format.extension());
        io::write_density_image(&map, &out.join(&name), format, args.display_max)?;
        entries.push(json!({
            "image_id": scene.image_id,
            "file": name,
            "height": map.height(),
            "width": map.width(),
            "max": map.max(),
            "sum": map.sum(),
        }));
    }
    let summary = json!({
        "density": {
            "mode": cfg.density.mode.name(),
            "d": cfg.density.d,
            "scale": cfg.density.scale,
        },
        "quantizer": {
            "n_bins": cfg.quantizer.n_bins,
            "rho_min": cfg.quantizer.rho_min,
            "rho_max": cfg.quantizer.rho_max,
            "scheme": cfg.quantizer.scheme.name(),
        },
        "maps": entries,
    });
    write_file(&out.join("render.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    info!("wrote {} maps to {}", scenes.len(), out.display());
    print_json(&summary);
    Ok(())
}

fn loss(cfg: &RunConfig, args: &LossArgs) -> Result<()> {
    let lambda = match args.lambda {
        Some(l) => crowddet::density::LossConfig::new(l)?,
        None => cfg.loss,
    };
    let pred = load_density_csv(&args.pred)?;
    let target = load_density_csv(&args.target)?;
    let l1 = density_loss(&pred, &target)?;
    print_json(&json!({ "l1": l1, "lambda": lambda.lambda, "loss": lambda.weighted(l1) }));
    Ok(())
}

fn triplets(cfg: &RunConfig, args: &TripletArgs) -> Result<()> {
    let scenes = load_scenes(&args.scenes)?;
    let boxes: Vec<_> = scenes.iter().map(|s| s.person_boxes_2d()).collect();
    let avg = triplet_statistic(&boxes, args.iou)?;
    let counts = map_ordered(&boxes, cfg.workers, |b| count_overlapping_triplets(b, args.iou))?;
    print_json(&json!({
        "images": scenes.len(),
        "iou": args.iou,
        "total_triplets": counts.iter().sum::<u64>(),
        "triplets_per_image": avg,
    }));
    Ok(())
}

fn emit_report(report: &EvalReport, out: &ReportOut) -> Result<()> {
    if let Some(dir) = &out.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
        write_file(&dir.join("report.json"), report.to_json().as_bytes())?;
    }
    emit(&report.to_json());
    Ok(())
}

fn eval_2d(args: &Eval2dArgs) -> Result<()> {
    let scenes = load_scenes(&args.gt)?;
    let gts: Vec<_> = scenes.iter().flat_map(|s| s.ground_truth_2d()).collect();
    let dets = io::load_predictions_2d(&args.pred)?;
    let report = evaluate_2d(&dets, &gts, args.iou)?;
    emit_report(&EvalReport::TwoD(report), &args.report)
}

fn eval_3d(args: &Eval3dArgs) -> Result<()> {
    let scenes = load_scenes(&args.gt)?;
    let all: usize = scenes.iter().map(|s| s.ground_truth_3d(false).len()).sum();
    let gts: Vec<_> = scenes.iter().flat_map(|s| s.ground_truth_3d(args.fov_filter)).collect();
    if args.fov_filter {
        eprintln!("fov filter removed {} of {} ground truths", all - gts.len(), all);
    }
    let dets = io::load_predictions_3d(&args.pred)?;
    let mode = if args.plain_ap { ApMode::Plain } else { ApMode::NuScenes };
    let report = evaluate_3d(&dets, &gts, &args.thresholds, mode)?;
    emit_report(&EvalReport::ThreeD(report), &args.report)
}

fn embed(cfg: &RunConfig, args: &EmbedArgs) -> Result<()> {
    let map = load_density_csv(&args.map)?;
    let table = match &args.table {
        Some(p) => EmbeddingTable::from_tensor(io::read_tensor(p)?)?,
        None => {
            if args.dim == 0 {
                bail!("--dim must be positive");
            }
            EmbeddingTable::seeded(cfg.quantizer.n_bins, args.dim, cfg.seed)
        }
    };
    let grid = embed_map(&map, &cfg.quantizer, &table)?;
    io::write_tensor(&grid, &args.out)?;
    print_json(&json!({ "shape": grid.shape(), "n_bins": table.n_bins(), "out": args.out }));
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let components: Vec<GradComponent> = if args.component == "all" {
        GradComponent::ALL.to_vec()
    } else {
        vec![args.component.parse()?]
    };
    let reports = components
        .iter()
        .map(|&c| grad_check(c, args.seed, args.step))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().all(|r| r.passes(GRADCHECK_TOL));
    print_json(&json!({ "tolerance": GRADCHECK_TOL, "passed": passed, "reports": reports }));
    Ok(passed)
}

fn demo_decoder(cfg: &RunConfig, args: &DecoderDemoArgs) -> Result<()> {
    let settings = DecoderSettings {
        stages: match &args.stages {
            Some(s) => parse_stages(s)?,
            None => cfg.decoder.stages.clone(),
        },
        layers: args.layers.unwrap_or(cfg.decoder.layers),
        density_layers: args.density_layers.clone().or_else(|| cfg.decoder.density_layers.clone()),
    };
    let dec = settings.build()?;
    if args.dim == 0 || !args.dim.is_multiple_of(4) || args.heads == 0 || !args.dim.is_multiple_of(args.heads) {
        bail!("--dim must be a positive multiple of 4 and of --heads");
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Tensor::random_unit(&[4, 4, args.dim], &mut rng);
    let cq = CqModuleParams::seeded(args.dim, args.dim, args.heads, cfg.quantizer.clone(), seed);
    let cq_out = cq_module_forward(&features, &cq)?;
    let memory = DecoderMemory {
        density: density_tokens(&cq_out.density_features, DEFAULT_POS_TEMPERATURE)?,
        depth: Tensor::random_unit(&[6, args.dim], &mut rng),
        visual: Tensor::random_unit(&[16, args.dim], &mut rng),
    };
    let queries = Tensor::random_unit(&[args.queries, args.dim], &mut rng);
    let params = DecoderParams::seeded(&dec, args.dim, args.heads, seed);
    let out = decoder_forward(&queries, &memory, &dec, &params)?;
    let layers: Vec<Vec<&str>> = dec.layers.iter().map(|l| l.iter().map(|s| s.symbol()).collect()).collect();
    let rows: Vec<&[f64]> = (0..args.queries).map(|i| out.row(i)).collect();
    print_json(&json!({
        "layers": layers,
        "seed": seed,
        "predicted_density_max": cq_out.density.max(),
        "output_shape": out.shape(),
        "output": rows,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let workers = cfg.workers;
    with_workers(workers, move || match &cli.command {
        Command::Density(DensityCommand::Render(a)) => render(&cfg, a).map(|_| true),
        Command::Density(DensityCommand::Loss(a)) => loss(&cfg, a).map(|_| true),
        Command::Stats(StatsCommand::Triplets(a)) => triplets(&cfg, a).map(|_| true),
        Command::Eval(EvalCommand::TwoD(a)) => eval_2d(a).map(|_| true),
        Command::Eval(EvalCommand::ThreeD(a)) => eval_3d(a).map(|_| true),
        Command::Embed(a) => embed(&cfg, a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Demo(DemoCommand::Decoder(a)) => demo_decoder(&cfg, a).map(|_| true),
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
