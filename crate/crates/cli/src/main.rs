use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nrreg_core::graph::{build_graph, DEFAULT_RADIUS_MULTIPLIER};
use nrreg_core::io;
use nrreg_core::metrics::overlap_ratio;
use nrreg_core::pipeline::{evaluate_metrics, run_register, GroundTruth, RegisterOptions};
use nrreg_core::synth::{add_noise, half_space_crop, partial_overlap_crop, CropMode, NoiseMode, DEFAULT_CROP_RESOLUTION};
use nrreg_core::{Error, ErrorKind, Vec3};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nrreg", version, about = "Robust non-rigid registration of surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a source surface onto a target and write the deformed source.
    Register(RegisterArgs),
    /// Add Gaussian noise to a mesh.
    SynthNoise(NoiseArgs),
    /// Cut a partial view out of a mesh and write the vertex mask.
    SynthCrop(CropArgs),
    /// Compare a deformed mesh against ground truth.
    Metrics(MetricsArgs),
    /// Build the deformation graph of a mesh and print it as JSON.
    GraphDump(GraphArgs),
}

#[derive(Args)]
struct RegisterArgs {
    /// TOML file of `key = value` settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Deformed source mesh (.obj or .ply).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    k_alpha: Option<f64>,
    #[arg(long)]
    k_beta: Option<f64>,
    /// Stage stops once no point moves more than this (normalized units).
    #[arg(long)]
    epsilon: Option<f64>,
    /// MM steps per stage.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Anderson window; 0 disables acceleration.
    #[arg(long)]
    anderson_m: Option<usize>,
    /// Graph radius in multiples of the average source edge length.
    #[arg(long)]
    radius_multiplier: Option<f64>,
    #[arg(long)]
    nu_a_init: Option<f64>,
    #[arg(long)]
    nu_a_min: Option<f64>,
    #[arg(long)]
    nu_r_init: Option<f64>,
    /// File of `source_index target_index` pairs.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    landmark_weight: Option<f64>,
    /// Source vertex i corresponds to target vertex i.
    #[arg(long)]
    gt_identity: bool,
    /// Uncropped target for identity ground truth.
    #[arg(long)]
    complete_target: Option<PathBuf>,
    /// Scene-flow file (`i tx ty tz`).
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Overlap mask written by `synth-crop`.
    #[arg(long)]
    overlap_mask: Option<PathBuf>,
    /// Store the per-vertex error in the output mesh.
    #[arg(long)]
    error_channel: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Dense,
    Sparse,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults to `<stem>_noisy.<ext>` next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dense")]
    mode: NoiseArg,
    /// Standard deviation in multiples of the average edge length.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Share of vertices perturbed in sparse mode.
    #[arg(long, default_value_t = 0.05)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CropArg {
    /// Keep faces visible in an orthographic depth buffer.
    Depth,
    /// Keep faces facing the viewer.
    Backface,
    /// Keep the given share of the mesh nearest to the viewer.
    HalfSpace,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults to `<stem>_crop.<ext>` next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Viewing direction `x,y,z`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    dir: Vec3,
    #[arg(long, value_enum, default_value = "depth")]
    mode: CropArg,
    #[arg(long, default_value_t = DEFAULT_CROP_RESOLUTION)]
    resolution: usize,
    /// Kept share of the vertices for `half-space`.
    #[arg(long, default_value_t = 0.7)]
    keep: f64,
    /// Per input vertex `i 0|1`. Defaults to `<stem>_crop.mask`.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    deformed: PathBuf,
    /// Reference with the same vertex order as the deformed mesh.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Undeformed source, needed for `--flow`.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Mesh copy of `--deformed` carrying the per-vertex error.
    #[arg(long)]
    error_out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RADIUS_MULTIPLIER)]
    radius_multiplier: f64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected three finite numbers `x,y,z`, got `{s}`")),
    }
}

fn sibling(path: &Path, suffix: &str, ext: Option<&str>) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = ext
        .map(str::to_string)
        .or_else(|| path.extension().map(|e| e.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "obj".into());
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn load_config(path: &Path) -> Result<RegisterOptions, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let known: BTreeSet<String> = match serde_json::to_value(RegisterOptions::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("options serialize to an object"),
    };
    if let Some(key) = table.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::Config(format!("{}: unknown key `{key}`", path.display())));
    }
    table
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn register_options(a: RegisterArgs) -> Result<RegisterOptions, Error> {
    let mut o = match &a.config {
        Some(path) => load_config(path)?,
        None => RegisterOptions::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { o.$($field).+ = v.into(); })*
        };
    }
    set!(
        source => source,
        target => target,
        out => output,
        k_alpha => solver.k_alpha,
        k_beta => solver.k_beta,
        epsilon => solver.epsilon,
        max_iters => solver.max_iters,
        anderson_m => solver.anderson_m,
        radius_multiplier => radius_multiplier,
        landmark_weight => solver.landmark_weight,
    );
    if a.report.is_some() {
        o.report = a.report;
    }
    if a.nu_a_init.is_some() {
        o.solver.nu_a_init = a.nu_a_init;
    }
    if a.nu_a_min.is_some() {
        o.solver.nu_a_min = a.nu_a_min;
    }
    if a.nu_r_init.is_some() {
        o.solver.nu_r_init = a.nu_r_init;
    }
    if a.landmarks.is_some() {
        o.landmarks = a.landmarks;
    }
    if a.complete_target.is_some() {
        o.ground_truth.complete_target = a.complete_target;
    }
    if a.flow.is_some() {
        o.ground_truth.flow = a.flow;
    }
    if a.overlap_mask.is_some() {
        o.ground_truth.overlap_mask = a.overlap_mask;
    }
    o.ground_truth.gt_identity |= a.gt_identity;
    o.error_channel |= a.error_channel;
    Ok(o)
}

fn register(a: RegisterArgs) -> Result<serde_json::Value, Error> {
    let opts = register_options(a)?;
    let out = run_register(&opts)?;
    Ok(json!({
        "output": opts.output,
        "report": opts.report,
        "nodes": out.report.graph.nodes,
        "stages": out.report.stages.len(),
        "iterations": out.report.total_iterations,
        "final_energy": out.report.final_energy,
        "metrics": out.report.metrics,
        "warnings": out.report.warnings,
    }))
}

fn synth_noise(a: NoiseArgs) -> Result<serde_json::Value, Error> {
    let surface = io::load_surface(&a.input)?;
    let sigma = a.sigma * surface.avg_edge_length();
    let mode = match a.mode {
        NoiseArg::Dense => NoiseMode::Dense,
        NoiseArg::Sparse => NoiseMode::Sparse,
    };
    let noisy = add_noise(&surface, mode, sigma, a.fraction, a.seed)?;
    let out = a.out.unwrap_or_else(|| sibling(&a.input, "_noisy", None));
    io::save_surface(&noisy, &out, None)?;
    Ok(json!({ "output": out, "vertices": noisy.len(), "sigma": sigma, "seed": a.seed }))
}

fn synth_crop(a: CropArgs) -> Result<serde_json::Value, Error> {
    let surface = io::load_surface(&a.input)?;
    let crop = match a.mode {
        CropArg::Depth => partial_overlap_crop(
            &surface,
            &a.dir,
            CropMode::DepthBuffer {
                resolution: a.resolution,
            },
        )?,
        CropArg::Backface => partial_overlap_crop(&surface, &a.dir, CropMode::BackFace)?,
        // nearest to the viewer means smallest projection on the view direction
        CropArg::HalfSpace => half_space_crop(&surface, &a.dir, a.keep)?,
    };
    let out = a.out.unwrap_or_else(|| sibling(&a.input, "_crop", None));
    let mask = a.mask.unwrap_or_else(|| sibling(&a.input, "_crop", Some("mask")));
    io::save_surface(&crop.surface, &out, None)?;
    io::save_mask(&mask, &crop.vertex_mask)?;
    Ok(json!({
        "output": out,
        "mask": mask,
        "vertices": crop.surface.len(),
        "overlap": overlap_ratio(&crop.vertex_mask)?,
    }))
}

fn metrics(a: MetricsArgs) -> Result<serde_json::Value, Error> {
    let deformed = io::load_surface(&a.deformed)?;
    let gt = GroundTruth {
        reference: a.reference.as_deref().map(io::load_surface).transpose()?.map(|s| s.points().to_vec()),
        flows: a.flow.as_deref().map(io::load_flows).transpose()?,
        overlap_mask: a.mask.as_deref().map(io::load_mask).transpose()?,
    };
    if gt.is_empty() {
        return Err(Error::Config("give at least one of --reference, --flow, --mask".into()));
    }
    let source = match (&a.source, &gt.flows) {
        (Some(p), _) => io::load_surface(p)?.points().to_vec(),
        (None, Some(_)) => return Err(Error::Config("--flow needs --source".into())),
        (None, None) => deformed.points().to_vec(),
    };
    let (report, errors) = evaluate_metrics(deformed.points(), &source, &gt)?;
    if let Some(path) = &a.error_out {
        let errors = errors.ok_or_else(|| Error::Config("--error-out needs --reference".into()))?;
        io::save_surface(&deformed, path, Some(&errors))?;
    }
    Ok(serde_json::to_value(report).expect("metrics serialize"))
}

fn graph_dump(a: GraphArgs) -> Result<Option<serde_json::Value>, Error> {
    if !(a.radius_multiplier.is_finite() && a.radius_multiplier > 0.0) {
        return Err(Error::Config(format!(
            "radius multiplier must be positive, got {}",
            a.radius_multiplier
        )));
    }
    let surface = io::load_surface(&a.input)?;
    let graph = build_graph(&surface, a.radius_multiplier * surface.avg_edge_length())?;
    let export = serde_json::to_value(graph.to_export()).expect("graph serializes");
    match a.out {
        Some(path) => {
            let text = serde_json::to_string_pretty(&export).expect("value serializes");
            io::write_file(&path, text.as_bytes())?;
            Ok(Some(json!({ "output": path, "nodes": graph.node_count(), "edges": graph.edges().len() })))
        }
        None => Ok(Some(export)),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Config => 4,
    }
}

fn fail(kind: &str, code: u8, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("config", 4, e.render().to_string().trim_end().to_string()),
    };
    let result = match cli.command {
        Command::Register(a) => register(a).map(Some),
        Command::SynthNoise(a) => synth_noise(a).map(Some),
        Command::SynthCrop(a) => synth_crop(a).map(Some),
        Command::Metrics(a) => metrics(a).map(Some),
        Command::GraphDump(a) => graph_dump(a),
    };
    match result {
        Ok(value) => {
            if let Some(v) = value {
                // a closed pipe (e.g. `| head`) is not an error
                let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&v).expect("value serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Io => "io",
                ErrorKind::Numerical => "numerical",
                ErrorKind::Config => "config",
            };
            fail(name, exit_code(kind), e.to_string())
        }
    }
}
