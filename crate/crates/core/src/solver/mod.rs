//! Outer registration loop: MM steps as a fixed-point map, Anderson
//! acceleration guarded by an energy-decrease test, and the annealing of the
//! Welsch parameters.

mod anderson;

pub use anderson::{anderson_combine, AndersonHistory, TIKHONOV};

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::energy::{
    evaluate_energy, find_correspondences, rotation_projections, Correspondences, EnergyBreakdown,
    EnergyWeights, Landmark, SystemAssembler,
};
use crate::error::{Error, Result};
use crate::geometry::{RotationProjection, SpatialIndex, Surface};
use crate::graph::{deform_points, DeformationGraph, NodeTransforms};
use crate::Vec3;

/// Lower bound applied to `ν_r` while annealing.
pub const MIN_NU_R: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub k_alpha: f64,
    pub k_beta: f64,
    /// Stage ends once no deformed point moves by this much.
    pub epsilon: f64,
    /// Iteration cap per annealing stage.
    pub max_iters: usize,
    /// Anderson window; 0 disables acceleration.
    pub anderson_m: usize,
    pub nu_a_init: Option<f64>,
    pub nu_a_min: Option<f64>,
    pub nu_r_init: Option<f64>,
    pub landmark_weight: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            k_alpha: 100.0,
            k_beta: 1.0,
            epsilon: 1e-5,
            max_iters: 100,
            anderson_m: 5,
            nu_a_init: None,
            nu_a_min: None,
            nu_r_init: None,
            landmark_weight: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be non-negative and finite, got {v}")))
            }
        };
        non_negative("k_alpha", self.k_alpha)?;
        non_negative("k_beta", self.k_beta)?;
        non_negative("landmark_weight", self.landmark_weight)?;
        positive("epsilon", self.epsilon)?;
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        for (name, v) in [
            ("nu_a_init", self.nu_a_init),
            ("nu_a_min", self.nu_a_min),
            ("nu_r_init", self.nu_r_init),
        ] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        Ok(())
    }
}

/// Welsch parameters at the start of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Parameters {
    pub nu_a: f64,
    pub nu_r: f64,
    pub nu_a_min: f64,
    /// Median initial closest-point distance, before clamping.
    pub median_distance: f64,
    pub warnings: Vec<String>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `ν_a = max(d̄, ν_a,min)` with `d̄` the median closest-point distance of the
/// undeformed source, `ν_a,min = l̄/√3` and `ν_r = 3 l̄`, unless overridden.
pub fn init_parameters(
    source: &Surface,
    target: &SpatialIndex,
    graph: &DeformationGraph,
    config: &SolverConfig,
) -> Result<Parameters> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source surface"));
    }
    let l = source.avg_edge_length();
    let distances: Vec<f64> = find_correspondences(source.points(), target).distance;
    let d = median(&distances);
    let nu_a_min = config.nu_a_min.unwrap_or(l / 3f64.sqrt());
    let nu_r = config.nu_r_init.unwrap_or(3.0 * l);
    let nu_a = config.nu_a_init.unwrap_or(d).max(nu_a_min);
    let mut warnings = Vec::new();
    if graph.edges().is_empty() {
        warnings.push("deformation graph has no edges; regularization weight forced to 0".into());
    }
    if !(nu_a_min > 0.0 && nu_r > 0.0) {
        return Err(Error::Config(format!(
            "Welsch parameters must be positive (nu_a_min = {nu_a_min}, nu_r = {nu_r}); \
             is the average edge length zero?"
        )));
    }
    Ok(Parameters {
        nu_a,
        nu_r,
        nu_a_min,
        median_distance: d,
        warnings,
    })
}

/// `α = k_α |V|/|E_G| · ν_r²/ν_a²`, `β = k_β |V|/|V_G| · 1/(2ν_a²)`.
pub fn energy_weights(
    config: &SolverConfig,
    point_count: usize,
    graph: &DeformationGraph,
    nu_a: f64,
    nu_r: f64,
) -> EnergyWeights {
    let n = point_count as f64;
    let alpha = if graph.edges().is_empty() {
        0.0
    } else {
        config.k_alpha * n / graph.edges().len() as f64 * nu_r * nu_r / (nu_a * nu_a)
    };
    let beta = config.k_beta * n / graph.node_count() as f64 / (2.0 * nu_a * nu_a);
    EnergyWeights {
        alpha,
        beta,
        nu_a,
        nu_r,
        landmark: config.landmark_weight,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anneal {
    pub nu_a: f64,
    pub nu_r: f64,
    /// The stage just finished already ran at `ν_a,min`.
    pub done: bool,
}

pub fn anneal(nu_a: f64, nu_r: f64, nu_a_min: f64) -> Anneal {
    Anneal {
        nu_a: (nu_a / 2.0).max(nu_a_min),
        nu_r: (nu_r / 2.0).max(MIN_NU_R),
        done: nu_a <= nu_a_min,
    }
}

/// Energy at one iterate together with the quantities the next MM step reuses.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub deformed: Vec<Vec3>,
    pub correspondences: Correspondences,
    pub rotations: Vec<RotationProjection>,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_align")]
    pub e_align: f64,
    #[serde(rename = "E_reg")]
    pub e_reg: f64,
    #[serde(rename = "E_rot")]
    pub e_rot: f64,
    /// The evaluated iterate was an Anderson extrapolation and passed the energy test.
    pub aa_accepted: bool,
    /// The evaluated iterate raised the energy and was replaced by the last MM output.
    pub reverted: bool,
    /// Largest point displacement to the next iterate; absent for reverted rows.
    pub max_disp: Option<f64>,
    pub degenerate_rotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub nu_a: f64,
    pub nu_r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub landmarks: bool,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
}

impl StageReport {
    /// Number of MM solves in the stage.
    pub fn mm_steps(&self) -> usize {
        self.iterations.iter().filter(|r| !r.reverted).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSettings {
    pub epsilon: f64,
    pub max_iters: usize,
    pub anderson_m: usize,
}

impl From<&SolverConfig> for StageSettings {
    fn from(c: &SolverConfig) -> Self {
        StageSettings {
            epsilon: c.epsilon,
            max_iters: c.max_iters,
            anderson_m: c.anderson_m,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Iterate the stage ended on (not yet energy-checked).
    pub transforms: NodeTransforms,
    /// Last plain MM output.
    pub mm_output: NodeTransforms,
    /// Energy of the last accepted iterate.
    pub last_energy: f64,
    pub report: StageReport,
}

/// Source, graph and target bound together with the cached sparse factorization.
pub struct Problem<'a> {
    source: &'a [Vec3],
    graph: &'a DeformationGraph,
    target: &'a SpatialIndex,
    assembler: SystemAssembler,
}

impl<'a> Problem<'a> {
    pub fn new(source: &'a [Vec3], graph: &'a DeformationGraph, target: &'a SpatialIndex) -> Result<Self> {
        if source.len() != graph.point_count() {
            return Err(Error::DimensionMismatch {
                what: "source points vs graph influence sets",
                expected: graph.point_count(),
                actual: source.len(),
            });
        }
        if graph.node_count() == 0 {
            return Err(Error::Empty("deformation graph"));
        }
        Ok(Problem {
            source,
            graph,
            target,
            assembler: SystemAssembler::new(graph),
        })
    }

    pub fn graph(&self) -> &DeformationGraph {
        self.graph
    }

    pub fn evaluate(&self, x: &NodeTransforms, weights: &EnergyWeights, landmarks: &[Landmark]) -> Result<Evaluation> {
        self.evaluate_deformed(x, deform_points(self.source, self.graph, x), weights, landmarks)
    }

    fn evaluate_deformed(
        &self,
        x: &NodeTransforms,
        deformed: Vec<Vec3>,
        weights: &EnergyWeights,
        landmarks: &[Landmark],
    ) -> Result<Evaluation> {
        let correspondences = find_correspondences(&deformed, self.target);
        let rotations = rotation_projections(x);
        let energy = evaluate_energy(self.graph, x, &deformed, &correspondences, &rotations, weights, landmarks)?;
        Ok(Evaluation {
            deformed,
            correspondences,
            rotations,
            energy,
        })
    }

    /// Minimizer of the surrogate built at `x` from an existing evaluation.
    pub fn mm_step(
        &mut self,
        x: &NodeTransforms,
        eval: &Evaluation,
        weights: &EnergyWeights,
        landmarks: &[Landmark],
    ) -> Result<NodeTransforms> {
        let system = self.assembler.assemble(
            self.source,
            self.graph,
            x,
            &eval.deformed,
            &eval.correspondences,
            &eval.rotations,
            weights,
            landmarks,
        );
        self.assembler.solve(&system)
    }

    /// The MM map `G(x)`.
    pub fn mm_map(&mut self, x: &NodeTransforms, weights: &EnergyWeights, landmarks: &[Landmark]) -> Result<NodeTransforms> {
        let eval = self.evaluate(x, weights, landmarks)?;
        self.mm_step(x, &eval, weights, landmarks)
    }

    /// One annealing stage at fixed weights.
    pub fn run_stage(
        &mut self,
        start: NodeTransforms,
        weights: &EnergyWeights,
        settings: StageSettings,
        landmarks: &[Landmark],
    ) -> Result<StageOutcome> {
        let nodes = self.graph.node_count();
        let mut history = AndersonHistory::new(settings.anderson_m);
        let mut x = start;
        let mut deformed = deform_points(self.source, self.graph, &x);
        let mut mm_output = x.clone();
        let mut e_prev = f64::INFINITY;
        let mut from_aa = false;
        let mut after_revert = false;
        let mut steps = 0;
        let mut converged = false;
        let mut records = Vec::new();

        loop {
            let eval = self.evaluate_deformed(&x, deformed, weights, landmarks)?;
            let degenerate = eval.rotations.iter().filter(|r| r.is_degenerate()).count();
            let record = |aa_accepted, reverted, max_disp| IterationRecord {
                energy: eval.energy.total,
                e_align: eval.energy.e_align,
                e_reg: eval.energy.e_reg,
                e_rot: eval.energy.e_rot,
                aa_accepted,
                reverted,
                max_disp,
                degenerate_rotations: degenerate,
            };
            // The MM output cannot raise the energy, so after a revert it is
            // taken as is; this keeps rounding noise from looping forever.
            if !after_revert && eval.energy.total > e_prev {
                records.push(record(false, true, None));
                x = mm_output.clone();
                deformed = deform_points(self.source, self.graph, &x);
                after_revert = true;
                from_aa = false;
                continue;
            }
            after_revert = false;
            e_prev = eval.energy.total;

            let g = self.mm_step(&x, &eval, weights, landmarks)?;
            let next_flat = history.step(
                &DVector::from_column_slice(x.as_slice()),
                DVector::from_column_slice(g.as_slice()),
            );
            let next = NodeTransforms::from_flat(nodes, next_flat.as_slice());
            if !next.is_finite() {
                return Err(Error::NonFinite("iterate"));
            }
            mm_output = g;
            let next_deformed = deform_points(self.source, self.graph, &next);
            let max_disp = next_deformed
                .iter()
                .zip(&eval.deformed)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            records.push(record(from_aa, false, Some(max_disp)));
            from_aa = settings.anderson_m > 0 && history.depth() > 0;
            steps += 1;
            x = next;
            deformed = next_deformed;
            if max_disp < settings.epsilon {
                converged = true;
                break;
            }
            if steps >= settings.max_iters {
                break;
            }
        }

        Ok(StageOutcome {
            transforms: x,
            mm_output,
            last_energy: e_prev,
            report: StageReport {
                nu_a: weights.nu_a,
                nu_r: weights.nu_r,
                alpha: weights.alpha,
                beta: weights.beta,
                landmarks: !landmarks.is_empty(),
                converged,
                iterations: records,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub stage_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationReport {
    pub parameters: Parameters,
    pub stages: Vec<StageReport>,
    pub total_iterations: usize,
    pub final_energy: f64,
    /// Final weights, needed to re-evaluate the MM map at the result.
    pub final_weights: EnergyWeights,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transforms: NodeTransforms,
    pub deformed: Vec<Vec3>,
    pub report: RegistrationReport,
}

/// Runs the full annealed, accelerated MM registration from identity
/// transforms. Landmarks, if any, are active during the first stage only.
pub fn register(
    source: &Surface,
    target: &SpatialIndex,
    graph: &DeformationGraph,
    config: &SolverConfig,
    landmarks: &[Landmark],
) -> Result<Registration> {
    let started = Instant::now();
    let params = init_parameters(source, target, graph, config)?;
    for l in landmarks {
        if l.source >= source.len() {
            return Err(Error::InvalidInput(format!(
                "landmark source index {} out of range ({} points)",
                l.source,
                source.len()
            )));
        }
    }
    let mut problem = Problem::new(source.points(), graph, target)?;
    let settings = StageSettings::from(config);
    let (mut nu_a, mut nu_r) = (params.nu_a, params.nu_r);
    let mut x = NodeTransforms::identity(graph.node_count());
    let mut stages = Vec::new();
    let mut stage_seconds = Vec::new();

    let (final_x, final_weights, last_energy, mm_output) = loop {
        let t = Instant::now();
        let weights = energy_weights(config, source.len(), graph, nu_a, nu_r);
        let active: &[Landmark] = if stages.is_empty() { landmarks } else { &[] };
        let outcome = problem.run_stage(x, &weights, settings, active)?;
        stage_seconds.push(t.elapsed().as_secs_f64());
        stages.push(outcome.report);
        let step = anneal(nu_a, nu_r, params.nu_a_min);
        if step.done {
            break (outcome.transforms, weights, outcome.last_energy, outcome.mm_output);
        }
        x = outcome.transforms;
        nu_a = step.nu_a;
        nu_r = step.nu_r;
    };

    // The last iterate was never energy-checked; fall back to the MM output
    // if it is worse than the last accepted one.
    let active: &[Landmark] = if stages.len() == 1 { landmarks } else { &[] };
    let mut eval = problem.evaluate(&final_x, &final_weights, active)?;
    let mut transforms = final_x;
    if eval.energy.total > last_energy {
        eval = problem.evaluate(&mm_output, &final_weights, active)?;
        transforms = mm_output;
    }

    let total_iterations = stages.iter().map(StageReport::mm_steps).sum();
    Ok(Registration {
        transforms,
        deformed: eval.deformed,
        report: RegistrationReport {
            parameters: params,
            stages,
            total_iterations,
            final_energy: eval.energy.total,
            final_weights,
            timings: Timings {
                stage_seconds,
                total_seconds: started.elapsed().as_secs_f64(),
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[0.05, 0.01, 0.03, 0.02, 0.04]), 0.03);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn anneal_schedule() {
        let mut seq = vec![];
        let (mut a, mut r) = (0.08, 1.0);
        loop {
            seq.push(a);
            let s = anneal(a, r, 0.01);
            if s.done {
                break;
            }
            a = s.nu_a;
            r = s.nu_r;
        }
        assert_eq!(seq, vec![0.08, 0.04, 0.02, 0.01]);

        let s = anneal(0.03, 1.0, 0.02);
        assert_eq!((s.nu_a, s.done), (0.02, false));
        assert!(anneal(0.02, s.nu_r, 0.02).done);
    }

    #[test]
    fn nu_r_is_floored() {
        assert_eq!(anneal(1.0, 1e-8, 0.1).nu_r, MIN_NU_R);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SolverConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            k_alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
