use nrreg_core::energy::Landmark;
use nrreg_core::geometry::{normalize_pair, SpatialIndex, Surface};
use nrreg_core::graph::{build_graph, deform_points, DeformationGraph, DEFAULT_RADIUS_MULTIPLIER};
use nrreg_core::io;
use nrreg_core::metrics::{pointwise_error, rmse};
use nrreg_core::pipeline::{run_register, GroundTruthOptions, RegisterOptions};
use nrreg_core::solver::{register, Registration, SolverConfig};
use nrreg_core::synth::{sinusoidal_warp, strip, translate};
use nrreg_core::{ErrorKind, Vec3};

struct Setup {
    source: Surface,
    target: Surface,
    graph: DeformationGraph,
    index: SpatialIndex,
}

fn setup(source: &Surface, target: &Surface) -> Setup {
    let (source, target, _) = normalize_pair(source, target).unwrap();
    let graph = build_graph(&source, DEFAULT_RADIUS_MULTIPLIER * source.avg_edge_length()).unwrap();
    let index = SpatialIndex::new(target.points()).unwrap();
    Setup {
        source,
        target,
        graph,
        index,
    }
}

fn solve(s: &Setup, config: &SolverConfig, landmarks: &[Landmark]) -> Registration {
    register(&s.source, &s.index, &s.graph, config, landmarks).unwrap()
}

fn warp() -> Setup {
    let src = strip(30, 8, 1.0, 0.25).unwrap();
    setup(&src, &sinusoidal_warp(&src, 0.05, 4.0))
}

fn stiff10() -> SolverConfig {
    SolverConfig {
        k_alpha: 10.0,
        ..Default::default()
    }
}

#[test]
fn identity_pair_stops_immediately() {
    let src = strip(12, 6, 1.0, 0.5).unwrap();
    let s = setup(&src, &src);
    let r = solve(&s, &SolverConfig::default(), &[]);
    assert_eq!(r.report.stages.len(), 1);
    assert_eq!(r.report.total_iterations, 1);
    assert!(r.report.final_energy < 1e-20);
    assert!(rmse(&pointwise_error(&r.deformed, s.target.points()).unwrap()).unwrap() < 1e-12);
}

#[test]
fn deformed_points_match_transforms() {
    let s = warp();
    let r = solve(&s, &stiff10(), &[]);
    let again = deform_points(s.source.points(), &s.graph, &r.transforms);
    assert_eq!(again, r.deformed);
}

#[test]
fn schedule_and_report_shape() {
    let s = warp();
    let config = stiff10();
    let r = solve(&s, &config, &[]);
    let p = &r.report.parameters;
    let stages = &r.report.stages;
    assert!(stages.len() > 1);
    assert_eq!(stages[0].nu_a, p.nu_a);
    assert_eq!(stages[0].nu_r, p.nu_r);
    for w in stages.windows(2) {
        assert_eq!(w[1].nu_a, (w[0].nu_a / 2.0).max(p.nu_a_min));
        assert_eq!(w[1].nu_r, (w[0].nu_r / 2.0).max(1e-8));
    }
    assert_eq!(stages.last().unwrap().nu_a, p.nu_a_min);
    let steps: usize = stages.iter().map(|st| st.mm_steps()).sum();
    assert_eq!(steps, r.report.total_iterations);
    for st in stages {
        assert!(st.mm_steps() <= config.max_iters);
    }
    assert_eq!(r.report.timings.stage_seconds.len(), stages.len());
}

#[test]
fn plain_mm_never_reverts_and_descends() {
    let s = warp();
    let config = SolverConfig {
        anderson_m: 0,
        ..stiff10()
    };
    let r = solve(&s, &config, &[]);
    for st in &r.report.stages {
        assert!(st.iterations.iter().all(|i| !i.reverted && !i.aa_accepted));
        for w in st.iterations.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-12);
        }
    }
}

#[test]
fn accelerated_and_plain_agree_on_result() {
    let s = warp();
    let aa = solve(&s, &stiff10(), &[]);
    let mm = solve(
        &s,
        &SolverConfig {
            anderson_m: 0,
            max_iters: 1000,
            ..stiff10()
        },
        &[],
    );
    let a = rmse(&pointwise_error(&aa.deformed, s.target.points()).unwrap()).unwrap();
    let b = rmse(&pointwise_error(&mm.deformed, s.target.points()).unwrap()).unwrap();
    assert!((a - b).abs() < 0.2 * b.max(a), "AA {a} vs MM {b}");
    assert!(aa.report.total_iterations < mm.report.total_iterations);
}

#[test]
fn landmarks_only_in_first_stage() {
    let s = warp();
    let landmarks: Vec<Landmark> = [0, 100, 239]
        .into_iter()
        .map(|i| Landmark {
            source: i,
            target: s.target.points()[i],
        })
        .collect();
    let r = solve(&s, &stiff10(), &landmarks);
    assert!(r.report.stages[0].landmarks);
    assert!(r.report.stages[1..].iter().all(|st| !st.landmarks));

    let bad = [Landmark {
        source: 10_000,
        target: Vec3::zeros(),
    }];
    let err = register(&s.source, &s.index, &s.graph, &stiff10(), &bad).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn invalid_configuration_is_rejected() {
    let s = warp();
    for config in [
        SolverConfig {
            k_alpha: -1.0,
            ..Default::default()
        },
        SolverConfig {
            epsilon: 0.0,
            ..Default::default()
        },
        SolverConfig {
            max_iters: 0,
            ..Default::default()
        },
        SolverConfig {
            k_beta: f64::NAN,
            ..Default::default()
        },
    ] {
        let err = register(&s.source, &s.index, &s.graph, &config, &[]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config, "{config:?}");
    }
}

#[test]
fn translation_is_recovered_in_input_units() {
    let dir = tempfile::tempdir().unwrap();
    let src = strip(20, 10, 2.0, 1.0).unwrap();
    let src = sinusoidal_warp(&src, 0.3, 1.5);
    let src = src.with_points(
        src.points()
            .iter()
            .map(|p| p + Vec3::new(0.0, 0.0, 0.2 * (3.0 * p.y).sin()))
            .collect(),
    );
    let tgt = translate(&src, &Vec3::new(0.0, 0.0, 0.05));
    io::save_surface(&src, &dir.path().join("s.obj"), None).unwrap();
    io::save_surface(&tgt, &dir.path().join("t.obj"), None).unwrap();
    let opts = RegisterOptions {
        source: dir.path().join("s.obj"),
        target: dir.path().join("t.obj"),
        output: dir.path().join("d.ply"),
        ground_truth: GroundTruthOptions {
            gt_identity: true,
            ..Default::default()
        },
        error_channel: true,
        ..Default::default()
    };
    let out = run_register(&opts).unwrap();
    assert!(out.report.metrics.max_error.unwrap() < 1e-3, "{:?}", out.report.metrics);

    // the saved mesh is the normalized result mapped back by the stored similarity
    let saved = io::load_surface(&opts.output).unwrap();
    let sim = out.report.normalization;
    for (n, p) in out.deformed_normalized.iter().zip(saved.points()) {
        assert!((sim.invert(n) - p).amax() < 1e-12);
    }
}
