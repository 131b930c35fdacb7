//! End-to-end registration of two mesh files: load, normalize, build the
//! deformation graph, register, map back to input units, save and report.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::Landmark;
use crate::error::{Error, Result};
use crate::geometry::{normalize_pair, Similarity, SpatialIndex, Surface};
use crate::graph::{build_graph, DEFAULT_RADIUS_MULTIPLIER};
use crate::io;
use crate::metrics::{masked_rmse, overlap_ratio, pointwise_error, rmse, scene_flow_rmse, Flow};
use crate::solver::{register, Parameters, SolverConfig, StageReport};
use crate::Vec3;

/// Everything a `register` run needs. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterOptions {
    pub source: PathBuf,
    pub target: PathBuf,
    pub output: PathBuf,
    pub report: Option<PathBuf>,
    #[serde(flatten)]
    pub solver: SolverConfig,
    /// Graph sampling radius in multiples of the average source edge length.
    pub radius_multiplier: f64,
    pub landmarks: Option<PathBuf>,
    #[serde(flatten)]
    pub ground_truth: GroundTruthOptions,
    /// Write the per-vertex error as an extra channel of the output mesh.
    pub error_channel: bool,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            source: PathBuf::new(),
            target: PathBuf::new(),
            output: PathBuf::new(),
            report: None,
            solver: SolverConfig::default(),
            radius_multiplier: DEFAULT_RADIUS_MULTIPLIER,
            landmarks: None,
            ground_truth: GroundTruthOptions::default(),
            error_channel: false,
        }
    }
}

impl RegisterOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("source", &self.source), ("target", &self.target), ("output", &self.output)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("missing {name} path")));
            }
        }
        if !(self.radius_multiplier.is_finite() && self.radius_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "radius_multiplier must be positive, got {}",
                self.radius_multiplier
            )));
        }
        self.solver.validate()
    }
}

/// Ground truth used for metrics only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthOptions {
    /// Vertex `i` of the source corresponds to vertex `i` of the reference.
    pub gt_identity: bool,
    /// Uncropped target used as the identity reference instead of the target.
    pub complete_target: Option<PathBuf>,
    /// Scene-flow file (`i tx ty tz`).
    pub flow: Option<PathBuf>,
    /// Source-membership mask (`i 0|1`) of the cropped target.
    pub overlap_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<f64>,
    /// RMSE over the points inside the overlap mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_overlap: Option<f64>,
}

/// Ground truth resolved to points.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub reference: Option<Vec<Vec3>>,
    pub flows: Option<Vec<Flow>>,
    pub overlap_mask: Option<Vec<bool>>,
}

impl GroundTruth {
    pub fn load(opts: &GroundTruthOptions, target: &Surface) -> Result<GroundTruth> {
        let reference = match (&opts.complete_target, opts.gt_identity) {
            (Some(p), _) => Some(io::load_surface(p)?.points().to_vec()),
            (None, true) => Some(target.points().to_vec()),
            (None, false) => None,
        };
        let flows = opts.flow.as_deref().map(io::load_flows).transpose()?;
        let overlap_mask = opts.overlap_mask.as_deref().map(io::load_mask).transpose()?;
        Ok(GroundTruth {
            reference,
            flows,
            overlap_mask,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_none() && self.flows.is_none() && self.overlap_mask.is_none()
    }
}

/// Metrics of `deformed` against the ground truth, plus the per-point errors
/// when a dense reference exists. All inputs are in the same units.
pub fn evaluate_metrics(
    deformed: &[Vec3],
    source: &[Vec3],
    gt: &GroundTruth,
) -> Result<(MetricsReport, Option<Vec<f64>>)> {
    let mut report = MetricsReport::default();
    let mut errors = None;
    if let Some(reference) = &gt.reference {
        if reference.len() != deformed.len() {
            return Err(Error::Config(format!(
                "identity ground truth needs equal vertex counts (source {}, reference {})",
                deformed.len(),
                reference.len()
            )));
        }
        let d = pointwise_error(deformed, reference)?;
        report.rmse = Some(rmse(&d)?);
        report.max_error = Some(d.iter().cloned().fold(0.0, f64::max));
        errors = Some(d);
    }
    if let Some(flows) = &gt.flows {
        report.rs = Some(scene_flow_rmse(deformed, source, flows)?);
    }
    if let Some(mask) = &gt.overlap_mask {
        if mask.len() != deformed.len() {
            return Err(Error::DimensionMismatch {
                what: "overlap mask",
                expected: deformed.len(),
                actual: mask.len(),
            });
        }
        report.overlap = Some(overlap_ratio(mask)?);
        if let Some(d) = &errors {
            report.rmse_overlap = masked_rmse(d, mask).ok();
        }
    }
    Ok((report, errors))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub radius: f64,
    pub avg_edge_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineTimings {
    pub load_seconds: f64,
    pub graph_seconds: f64,
    pub stage_seconds: Vec<f64>,
    pub solve_seconds: f64,
    pub total_seconds: f64,
}

/// The JSON report. Everything except `timings` is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config: RegisterOptions,
    pub normalization: Similarity,
    /// Graph statistics in normalized units.
    pub graph: GraphSummary,
    pub parameters: Parameters,
    pub stages: Vec<StageReport>,
    pub total_iterations: usize,
    pub final_energy: f64,
    /// In input units.
    pub metrics: MetricsReport,
    pub warnings: Vec<String>,
    pub timings: PipelineTimings,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

pub struct PipelineOutput {
    /// Deformed source in input units.
    pub deformed: Surface,
    /// Deformed source in normalized units.
    pub deformed_normalized: Vec<Vec3>,
    pub report: PipelineReport,
}

/// Runs the registration described by `opts` and writes its outputs.
pub fn run_register(opts: &RegisterOptions) -> Result<PipelineOutput> {
    opts.validate()?;
    let started = Instant::now();
    let source = io::load_surface(&opts.source)?;
    let target = io::load_surface(&opts.target)?;
    let landmark_pairs = opts.landmarks.as_deref().map(io::load_landmarks).transpose()?;
    let gt = GroundTruth::load(&opts.ground_truth, &target)?;
    let load_seconds = started.elapsed().as_secs_f64();

    let (src_n, tgt_n, sim) = normalize_pair(&source, &target)?;
    let mut warnings = Vec::new();
    let landmarks = match landmark_pairs {
        Some(pairs) => to_landmarks(&pairs, &src_n, &tgt_n)?,
        None => Vec::new(),
    };

    let t = Instant::now();
    let radius = opts.radius_multiplier * src_n.avg_edge_length();
    let graph = build_graph(&src_n, radius)?;
    let graph_seconds = t.elapsed().as_secs_f64();

    let index = SpatialIndex::new(tgt_n.points())?;
    let result = register(&src_n, &index, &graph, &opts.solver, &landmarks)?;
    warnings.extend(result.report.parameters.warnings.iter().cloned());
    let degenerate: usize = result
        .report
        .stages
        .iter()
        .flat_map(|s| &s.iterations)
        .map(|r| r.degenerate_rotations)
        .max()
        .unwrap_or(0);
    if degenerate > 0 {
        warnings.push(format!(
            "up to {degenerate} node transforms were rank deficient during the solve"
        ));
    }

    let deformed_points: Vec<Vec3> = result.deformed.iter().map(|p| sim.invert(p)).collect();
    let deformed = source.with_points(deformed_points);
    let (metrics, errors) = evaluate_metrics(deformed.points(), source.points(), &gt)?;
    let scalar = if opts.error_channel {
        match &errors {
            Some(e) => Some(e.as_slice()),
            None => {
                warnings.push("error channel requested without dense ground truth; omitted".into());
                None
            }
        }
    } else {
        None
    };
    io::save_surface(&deformed, &opts.output, scalar)?;

    let report = PipelineReport {
        config: opts.clone(),
        normalization: sim,
        graph: GraphSummary {
            nodes: graph.node_count(),
            edges: graph.edges().len(),
            radius,
            avg_edge_length: src_n.avg_edge_length(),
        },
        parameters: result.report.parameters.clone(),
        stages: result.report.stages.clone(),
        total_iterations: result.report.total_iterations,
        final_energy: result.report.final_energy,
        metrics,
        warnings,
        timings: PipelineTimings {
            load_seconds,
            graph_seconds,
            stage_seconds: result.report.timings.stage_seconds.clone(),
            solve_seconds: result.report.timings.total_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    };
    if let Some(path) = &opts.report {
        io::write_file(path, report.to_json().as_bytes())?;
    }
    Ok(PipelineOutput {
        deformed,
        deformed_normalized: result.deformed,
        report,
    })
}

fn to_landmarks(pairs: &[(usize, usize)], source: &Surface, target: &Surface) -> Result<Vec<Landmark>> {
    pairs
        .iter()
        .map(|&(s, t)| {
            if s >= source.len() || t >= target.len() {
                return Err(Error::InvalidInput(format!(
                    "landmark pair ({s}, {t}) out of range ({} source, {} target points)",
                    source.len(),
                    target.len()
                )));
            }
            Ok(Landmark {
                source: s,
                target: target.points()[t],
            })
        })
        .collect()
}

/// Report JSON with the `timings` object removed, for reproducibility checks.
pub fn strip_timings(json: &str) -> Result<String> {
    let mut value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| Error::InvalidInput(format!("report is not JSON: {e}")))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("timings");
    }
    Ok(serde_json::to_string_pretty(&value).expect("value is serializable"))
}
