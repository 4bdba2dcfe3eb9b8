use std::path::Path;
use std::process::{Command, Output};

fn cotune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[tune]\nsteps = 10\n");
    let out = cotune(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let video = tmp.path().join("out/video");
    assert!(video.join("manifest.json").exists());

    let rep = cotune(&["report", video.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(0), "{}", stderr(&rep));
    let json: serde_json::Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert_eq!(json["per_pair"].as_array().unwrap().len(), 5);
    assert!(json["regions"].is_null());

    let masks = tmp.path().join("out/fusion/masks.ctmask");
    let rep = cotune(&["report", video.to_str().unwrap(), "--masks", masks.to_str().unwrap()]);
    let json: serde_json::Value = serde_json::from_slice(&rep.stdout).unwrap();
    assert!(json["regions"]["bg_mean"].is_number());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[fusion]\nk = 51\n");
    let out = cotune(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("fusion.k"), "{}", stderr(&out));

    let cfg = write_config(tmp.path(), "[fusion]\nnot_a_key = 1\n");
    assert_eq!(cotune(&["run", &cfg]).status.code(), Some(2));
    assert_eq!(cotune(&["stage", "polish", &cfg]).status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[tune]\nlearning_rate = 1e9\nsteps = 50\n");
    let out = cotune(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("tune"));
}

#[test]
fn stages_run_individually_and_seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 4\n[tune]\nsteps = 3\n");
    for stage in ["setup", "fuse", "tune", "generate"] {
        let out = cotune(&["stage", stage, &cfg, "--threads", "2"]);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", stderr(&out));
    }
    let frame = tmp.path().join("out/video/frame_00000.ctf");
    let first = std::fs::read(&frame).unwrap();

    let out = cotune(&["--seed-override", "5", "run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_ne!(std::fs::read(&frame).unwrap(), first);
    let out = cotune(&["run", &cfg, "--seed-override", "4", "--dump-intermediates"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&frame).unwrap(), first);
    assert!(tmp.path().join("out/intermediates/generate").is_dir());
}

#[test]
fn defaults_print_a_loadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    for extra in [None, Some("--full-scale")] {
        let mut args = vec!["defaults"];
        args.extend(extra);
        let out = cotune(&args);
        assert_eq!(out.status.code(), Some(0));
        let cfg = write_config(tmp.path(), &String::from_utf8(out.stdout).unwrap());
        let text = std::fs::read_to_string(&cfg).unwrap();
        assert!(text.contains(if extra.is_some() { "steps = 1000" } else { "steps = 50" }));
    }
}

#[test]
fn missing_video_dir_is_a_plain_failure() {
    let out = cotune(&["report", "/nonexistent/video"]);
    assert_eq!(out.status.code(), Some(1));
}
