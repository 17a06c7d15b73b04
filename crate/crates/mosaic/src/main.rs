use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mosaic::bench::{linear_fit, run_scaling_bench, BenchConfig};
use mosaic::config::PipelineConfig;
use mosaic::io::{read_graph, read_ply, write_graph, write_ply, write_text};
use mosaic::pipeline::{run_ablation, run_pipeline, PipelineInput, StageMask};
use mosaic::report;
use mosaic::{Error, Result};
use mosaic_core::consensus::{apply_reestimates, reestimate_edge, ConsensusConfig};
use mosaic_core::frontend::{estimate_pairwise, generate_scene_with, overlap_score};
use mosaic_core::geometry::{relative_point_map, RigidTransform};
use mosaic_core::graph::{build_graph, PairwiseResult, PoseGraph, Vertex};
use mosaic_core::metrics::multiway_metrics;
use rayon::prelude::*;

/// Multiway point cloud registration.
#[derive(Parser)]
#[command(name = "mosaic", version)]
struct Cli {
    /// Worker threads for per-edge work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more stderr logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inlier radius, meters.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct SceneArgs {
    /// Number of clouds.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Probability that a correspondence is a random mismatch.
    #[arg(long)]
    outliers: Option<f64>,
    /// Fraction of non-consecutive edges with wrong correspondences.
    #[arg(long)]
    corrupted: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene: PLY clouds, correspondences and ground truth.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
    /// Estimate pairwise transforms from the CORR records of a graph file.
    Pairwise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        /// One PLY per vertex, in id order, for overlap scores.
        #[arg(long, num_args = 1..)]
        clouds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-estimate edge translations under the graph's vertex rotations.
    Consensus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        zoom_factor: Option<usize>,
        #[arg(long)]
        max_zoom: Option<usize>,
        /// Per-level cell statistics of every edge, as CSV.
        #[arg(long)]
        dump_cells: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline.
    Run(RunArgs),
    /// Compare stage subsets over several seeds of the synthetic benchmark.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneArgs,
        /// Comma-separated masks such as `TA,R+TA,R+TR+TA,R+TR+TA+D`.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "TA,R+TA,R+TR+TA,R+TR+TA+D"
        )]
        masks: Vec<String>,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the consensus solver against the exhaustive oracle.
    ScaleBench {
        /// Comma-separated ascending candidate counts.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score estimated poses against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scene: SceneArgs,
    /// Generate the input instead of reading --graph.
    #[arg(long)]
    synthetic: bool,
    /// Graph file with CORR records.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Graph file whose vertex poses are the ground truth.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    clouds: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write report.json.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    disable_rotation: bool,
    #[arg(long)]
    disable_consensus: bool,
    #[arg(long)]
    disable_refinement: bool,
    #[arg(long)]
    no_edge_weights: bool,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(e) = common.eps {
        cfg.eps = e;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_scene(cfg: &mut PipelineConfig, s: &SceneArgs) {
    let sc = &mut cfg.scene;
    if let Some(v) = s.n {
        sc.n_clouds = v;
    }
    if let Some(v) = s.points {
        sc.points_per_cloud = v;
    }
    if let Some(v) = s.noise {
        sc.noise_sigma = v;
    }
    if let Some(v) = s.outliers {
        sc.outlier_ratio = v;
    }
    if let Some(v) = s.corrupted {
        sc.corrupted_edge_ratio = v;
    }
}

/// The effective config as comment lines for output files.
fn provenance(cfg: &PipelineConfig) -> Vec<String> {
    vec![
        format!("mosaic {}", env!("CARGO_PKG_VERSION")),
        cfg.to_toml_string(),
    ]
}

fn read_clouds(
    paths: &[PathBuf],
    n: usize,
) -> Result<Option<Vec<Vec<mosaic_core::geometry::Vec3>>>> {
    if paths.is_empty() {
        return Ok(None);
    }
    if paths.len() != n {
        return Err(Error::Usage(format!(
            "{} clouds given for {n} vertices",
            paths.len()
        )));
    }
    Ok(Some(
        paths.iter().map(|p| read_ply(p)).collect::<Result<_>>()?,
    ))
}

fn generate(common: &Common, scene: &SceneArgs, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_scene(&mut cfg, scene);
    let bundle = generate_scene_with(&cfg.scene_config()).map_err(|source| Error::Stage {
        stage: "generate",
        source,
    })?;
    for (k, c) in bundle.clouds.iter().enumerate() {
        write_ply(&out.join(format!("cloud_{k:03}.ply")), c)?;
    }
    let truth = bundle.truth_graph();
    let mut input = truth.clone();
    for v in &mut input.vertices {
        v.pose = RigidTransform::identity();
    }
    for e in &mut input.edges {
        e.relative = RigidTransform::identity();
        e.inlier_count = 0;
    }
    let mut truth_only = truth;
    for e in &mut truth_only.edges {
        e.correspondences = Default::default();
        e.inlier_count = 0;
    }
    let header = provenance(&cfg);
    write_graph(&out.join("correspondences.graph"), &input, &header)?;
    write_graph(&out.join("truth.graph"), &truth_only, &header)?;
    let corrupted: Vec<String> = bundle
        .pairs
        .iter()
        .filter(|p| p.corrupted)
        .map(|p| format!("({}, {})", p.i, p.j))
        .collect();
    eprintln!(
        "wrote {} clouds and {} pairs to {} (corrupted: {})",
        bundle.clouds.len(),
        bundle.pairs.len(),
        out.display(),
        if corrupted.is_empty() {
            "none".into()
        } else {
            corrupted.join(" ")
        }
    );
    Ok(())
}

fn pairwise(common: &Common, graph: &Path, clouds: &[PathBuf], out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let g = read_graph(graph)?;
    let clouds = read_clouds(clouds, g.vertices.len())?;
    let estimates: Vec<_> = g
        .edges
        .par_iter()
        .enumerate()
        .map(|(k, e)| estimate_pairwise(&e.correspondences, &cfg.ransac_config(k)))
        .collect();
    let mut results = Vec::new();
    for (e, est) in g.edges.iter().zip(estimates) {
        match est {
            Ok(est) => results.push(PairwiseResult {
                i: e.i,
                j: e.j,
                relative: est.relative,
                correspondences: e.correspondences.clone(),
                inlier_count: est.inlier_indices.len(),
            }),
            Err(err) => log::warn!("dropping edge ({}, {}): {err}", e.i, e.j),
        }
    }
    let mut built = build_graph(results).map_err(|source| Error::Stage {
        stage: "build_graph",
        source,
    })?;
    if let Some(clouds) = clouds {
        let ocfg = cfg.overlap_config();
        for e in &mut built.edges {
            e.overlap_score = overlap_score(
                &clouds[e.i],
                &clouds[e.j],
                &relative_point_map(&e.relative),
                &ocfg,
            )
            .map_err(|source| Error::Stage {
                stage: "overlap",
                source,
            })?;
        }
    }
    write_graph(out, &built, &provenance(&cfg))
}

fn consensus(
    common: &Common,
    graph: &Path,
    zoom_factor: Option<usize>,
    max_zoom: Option<usize>,
    dump_cells: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(z) = zoom_factor {
        cfg.consensus.zoom_factor = z;
    }
    if let Some(z) = max_zoom {
        cfg.consensus.max_zoom = z;
    }
    let g = read_graph(graph)?;
    let rotations = g.rotations();
    let rcfg = cfg.reestimate_config();
    let results = (0..g.edges.len())
        .into_par_iter()
        .map(|k| reestimate_edge(&g, k, &rotations, cfg.eps, &rcfg))
        .collect::<mosaic_core::Result<Vec<_>>>()
        .and_then(|r| apply_reestimates(&g, &rotations, r))
        .map_err(|source| Error::Stage {
            stage: "translation_reestimation",
            source,
        })?;
    #[derive(serde::Serialize)]
    struct EdgeRow {
        i: usize,
        j: usize,
        inliers: usize,
        zoom_levels: usize,
        cells_visited: usize,
        terminated: bool,
        low_inlier: bool,
    }
    #[derive(serde::Serialize)]
    struct CellRow {
        i: usize,
        j: usize,
        zoom_level: usize,
        cells: usize,
        max_count: usize,
    }
    let mut edge_rows = csv::Writer::from_writer(std::io::stdout().lock());
    let mut cell_rows = Vec::new();
    for (e, r) in results.graph.edges.iter().zip(&results.edges) {
        let c = r.consensus.as_ref();
        edge_rows.serialize(EdgeRow {
            i: e.i,
            j: e.j,
            inliers: e.inlier_count,
            zoom_levels: c.map_or(0, |c| c.zoom_levels),
            cells_visited: c.map_or(0, |c| c.cells_visited),
            terminated: c.is_none_or(|c| c.terminated),
            low_inlier: r.low_inlier,
        })?;
        for l in c.map(|c| c.levels.as_slice()).unwrap_or_default() {
            cell_rows.push(CellRow {
                i: e.i,
                j: e.j,
                zoom_level: l.zoom_level,
                cells: l.cells,
                max_count: l.max_count,
            });
        }
    }
    edge_rows.flush().map_err(|e| Error::io("<stdout>", e))?;
    if let Some(path) = dump_cells {
        write_text(path, &report::to_csv(cell_rows)?)?;
    }
    write_graph(out, &results.graph, &provenance(&cfg))
}

fn run(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_scene(&mut cfg, &args.scene);
    if args.disable_rotation {
        cfg.stages.rotation_averaging = false;
    }
    if args.disable_consensus {
        cfg.stages.consensus = false;
    }
    if args.disable_refinement {
        cfg.stages.refinement = false;
    }
    if args.no_edge_weights {
        cfg.stages.edge_weights = false;
    }
    if let Some(g) = &args.graph {
        cfg.io.graph = Some(g.clone());
    }
    if let Some(t) = &args.truth {
        cfg.io.truth = Some(t.clone());
    }
    if !args.clouds.is_empty() {
        cfg.io.clouds = args.clouds.clone();
    }
    if let Some(o) = &args.out {
        cfg.io.output_dir = Some(o.clone());
    }
    let input = match (&cfg.io.graph, args.synthetic) {
        (Some(_), true) => {
            return Err(Error::Usage("--synthetic and --graph are exclusive".into()))
        }
        (None, true) => PipelineInput::synthetic(&cfg)?,
        (Some(path), false) => {
            let g = read_graph(path)?;
            let mut input = PipelineInput::from_graph(&g);
            input.clouds = read_clouds(&cfg.io.clouds, g.vertices.len())?;
            if let Some(t) = &cfg.io.truth {
                let truth = read_graph(t)?.poses();
                if truth.len() != g.vertices.len() {
                    return Err(Error::Usage(
                        "truth and input graphs differ in vertex count".into(),
                    ));
                }
                input.truth = Some(truth);
            }
            input
        }
        (None, false) => return Err(Error::Usage("give --synthetic or --graph".into())),
    };
    let out = run_pipeline(&input, &cfg)?;
    let dir = cfg
        .io
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("mosaic_out"));
    write_graph(&dir.join("final.graph"), &out.graph, &provenance(&cfg))?;
    write_text(&dir.join("stages.csv"), &report::stages_csv(&out.stages)?)?;
    write_text(&dir.join("timings.csv"), &report::timings_csv(&out.stages)?)?;
    if let Some(r) = &out.report {
        write_text(&dir.join("report.csv"), &report::eval_csv(r)?)?;
    }
    if args.json {
        let text = serde_json::to_string_pretty(&report::run_json(&cfg, &out))?;
        write_text(&dir.join("report.json"), &(text + "\n"))?;
    }
    print!("{}", report::stage_table(&out.stages));
    if let Some(r) = &out.report {
        println!();
        print!("{}", report::eval_table(r));
    }
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn ablate(
    common: &Common,
    scene: &SceneArgs,
    masks: &[String],
    seeds: u64,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_scene(&mut cfg, scene);
    let masks = masks
        .iter()
        .map(|m| m.parse::<StageMask>())
        .collect::<Result<Vec<_>>>()?;
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let seed_list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let ab = run_ablation(&cfg, &masks, &seed_list)?;
    for w in &ab.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report::ablation_table(&ab));
    if let Some(p) = out {
        write_text(p, &report::ablation_csv(&ab)?)?;
    }
    Ok(())
}

fn scale_bench(
    counts: &[usize],
    eps: f64,
    seed: u64,
    repeats: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = BenchConfig {
        eps,
        seed,
        repeats,
        consensus: ConsensusConfig::default(),
        ..BenchConfig::default()
    };
    let rows = run_scaling_bench(&cfg, counts)?;
    let text = report::scaling_csv(&rows)?;
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if rows.len() >= 2 {
        let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.proposed_seconds).collect();
        let (_, _, r2) = linear_fit(&x, &y);
        eprintln!("proposed: linear fit R^2 = {r2:.4}");
    }
    Ok(())
}

fn eval(
    common: &Common,
    estimate: &Path,
    truth: &Path,
    json: bool,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let est: PoseGraph = read_graph(estimate)?;
    let tru = read_graph(truth)?;
    let pairs: Vec<(usize, usize)> = est.edges.iter().map(|e| (e.i, e.j)).collect();
    let poses = |g: &PoseGraph| {
        g.vertices
            .iter()
            .map(|v: &Vertex| v.pose)
            .collect::<Vec<_>>()
    };
    let r = multiway_metrics(&poses(&est), &poses(&tru), &pairs, &cfg.metrics_config()).map_err(
        |source| Error::Stage {
            stage: "metrics",
            source,
        },
    )?;
    if let Some(p) = out {
        write_text(p, &report::eval_csv(&r)?)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report::eval_json(&r))?);
    } else {
        print!("{}", report::eval_table(&r));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { common, scene, out } => generate(common, scene, out),
        Command::Pairwise {
            common,
            graph,
            clouds,
            out,
        } => pairwise(common, graph, clouds, out),
        Command::Consensus {
            common,
            graph,
            zoom_factor,
            max_zoom,
            dump_cells,
            out,
        } => consensus(
            common,
            graph,
            *zoom_factor,
            *max_zoom,
            dump_cells.as_deref(),
            out,
        ),
        Command::Run(args) => run(args),
        Command::Ablate {
            common,
            scene,
            masks,
            seeds,
            out,
        } => ablate(common, scene, masks, *seeds, out.as_deref()),
        Command::ScaleBench {
            counts,
            eps,
            seed,
            repeats,
            out,
        } => scale_bench(counts, *eps, *seed, *repeats, out.as_deref()),
        Command::Eval {
            common,
            estimate,
            truth,
            json,
            out,
        } => eval(common, estimate, truth, *json, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
