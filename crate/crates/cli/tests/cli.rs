use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nrreg_core::io;
use nrreg_core::synth::{sinusoidal_warp, strip, uv_sphere};

fn nrreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let s = strip(16, 8, 1.0, 0.5).unwrap();
    let path = dir.path().join("s.obj");
    io::save_surface(&s, &path, None).unwrap();
    (dir, path)
}

#[test]
fn register_identity_pair() {
    let (dir, _) = setup();
    let out = nrreg(
        dir.path(),
        &["register", "--source", "s.obj", "--target", "s.obj", "--out", "d.obj", "--report", "r.json", "--gt-identity"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(report["metrics"]["rmse"].as_f64().unwrap() < 1e-6);
    let stage = &report["stages"][0];
    assert!(stage["nu_a"].is_number() && stage["nu_r"].is_number());
    for key in ["E", "E_align", "E_reg", "E_rot", "aa_accepted", "max_disp"] {
        assert!(stage["iterations"][0].get(key).is_some(), "iteration record lacks {key}");
    }
    assert!(report["timings"].is_object());
    let d = io::load_surface(&dir.path().join("d.obj")).unwrap();
    assert_eq!(d.len(), 128);
}

#[test]
fn register_warp_with_config_file() {
    let (dir, path) = setup();
    let s = io::load_surface(&path).unwrap();
    io::save_surface(&sinusoidal_warp(&s, 0.05, 4.0), &dir.path().join("t.ply"), None).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "source = \"s.obj\"\ntarget = \"t.ply\"\noutput = \"d.ply\"\nk_alpha = 10\ngt_identity = true\n",
    )
    .unwrap();
    let out = nrreg(dir.path(), &["register", "--config", "run.toml", "--k-beta", "2", "--report", "r.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["k_alpha"], 10.0);
    assert_eq!(report["config"]["k_beta"], 2.0);
    assert!(report["metrics"]["rmse"].as_f64().unwrap() < 0.1 * 0.05);
}

#[test]
fn synth_noise_is_deterministic() {
    let (dir, _) = setup();
    let args = ["synth-noise", "--in", "s.obj", "--mode", "dense", "--sigma", "0.3", "--seed", "7"];
    assert!(nrreg(dir.path(), &args).status.success());
    let first = std::fs::read(dir.path().join("s_noisy.obj")).unwrap();
    assert!(nrreg(dir.path(), &args).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("s_noisy.obj")).unwrap());
    assert_ne!(first, std::fs::read(dir.path().join("s.obj")).unwrap());

    let other = nrreg(dir.path(), &["synth-noise", "--in", "s.obj", "--seed", "8", "--out", "n8.obj"]);
    assert!(other.status.success());
    assert_ne!(first, std::fs::read(dir.path().join("n8.obj")).unwrap());
}

#[test]
fn synth_crop_mask_is_a_subset() {
    let (dir, path) = setup();
    let s = uv_sphere(12, 24, 1.0).unwrap();
    io::save_surface(&s, &path, None).unwrap();
    for (mode, dir_arg) in [("depth", "0,0,1"), ("backface", "0,0,1"), ("half-space", "-1,0,0")] {
        let out = nrreg(
            dir.path(),
            &["synth-crop", "--in", "s.obj", "--dir", dir_arg, "--mode", mode, "--out", "c.obj", "--mask", "c.mask"],
        );
        assert!(out.status.success(), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        let mask = io::load_mask(&dir.path().join("c.mask")).unwrap();
        let crop = io::load_surface(&dir.path().join("c.obj")).unwrap();
        assert_eq!(mask.len(), s.len());
        assert_eq!(mask.iter().filter(|&&m| m).count(), crop.len(), "{mode}");
        assert!(crop.len() < s.len() && !crop.is_empty(), "{mode}");
        let overlap = stdout_json(&out)["overlap"].as_f64().unwrap();
        assert!((overlap - crop.len() as f64 / s.len() as f64).abs() < 1e-12);
    }
    let out = nrreg(dir.path(), &["synth-crop", "--in", "s.obj", "--dir", "0,0,1"]);
    assert!(out.status.success());
    assert!(dir.path().join("s_crop.obj").exists() && dir.path().join("s_crop.mask").exists());
}

#[test]
fn metrics_and_graph_dump() {
    let (dir, _) = setup();
    let out = nrreg(dir.path(), &["metrics", "--deformed", "s.obj", "--reference", "s.obj"]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["rmse"], 0.0);

    std::fs::write(dir.path().join("f.txt"), "0 0 0 0\n5 0 0 0\n").unwrap();
    let out = nrreg(dir.path(), &["metrics", "--deformed", "s.obj", "--source", "s.obj", "--flow", "f.txt"]);
    assert_eq!(stdout_json(&out)["rs"], 0.0);

    let out = nrreg(dir.path(), &["graph-dump", "--in", "s.obj", "--radius-multiplier", "3"]);
    assert!(out.status.success());
    let g = stdout_json(&out);
    let nodes = g["nodes"].as_array().unwrap().len();
    assert!(nodes > 1);
    assert_eq!(g["influence"].as_array().unwrap().len(), 128);
    assert_eq!(g["reg_weights"].as_array().unwrap().len(), g["edges"].as_array().unwrap().len());
}

#[test]
fn exit_codes() {
    let (dir, _) = setup();
    let missing = nrreg(dir.path(), &["register", "--source", "nope.obj", "--target", "s.obj", "--out", "d.obj"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(stderr_json(&missing)["error"], "io");

    std::fs::write(dir.path().join("bad.obj"), "v 0 0 0\nv 1 0\n").unwrap();
    let malformed = nrreg(dir.path(), &["graph-dump", "--in", "bad.obj"]);
    assert_eq!(malformed.status.code(), Some(2));
    assert!(stderr_json(&malformed)["message"].as_str().unwrap().contains(":2:"));

    std::fs::write(dir.path().join("bad.toml"), "k_alfa = 10\n").unwrap();
    let unknown = nrreg(dir.path(), &["register", "--config", "bad.toml", "--source", "s.obj", "--target", "s.obj", "--out", "d.obj"]);
    assert_eq!(unknown.status.code(), Some(4));
    assert_eq!(stderr_json(&unknown)["error"], "config");

    let negative = nrreg(
        dir.path(),
        &["register", "--source", "s.obj", "--target", "s.obj", "--out", "d.obj", "--k-alpha", "-1"],
    );
    assert_eq!(negative.status.code(), Some(4));

    let no_paths = nrreg(dir.path(), &["register"]);
    assert_eq!(no_paths.status.code(), Some(4));

    let bad_flag = nrreg(dir.path(), &["register", "--k-alpha", "abc"]);
    assert_eq!(bad_flag.status.code(), Some(4));
    assert_eq!(stderr_json(&bad_flag)["error"], "config");

    let help = nrreg(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
}
