//! End-to-end checks of the installed binary: every subcommand, the artifact
//! formats, determinism/round-trip guarantees, and the single-line error
//! contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_densecorr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn run_err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).expect("utf-8 stderr");
    assert_eq!(stderr.trim_end().lines().count(), 1, "one-line error, got: {stderr}");
    stderr.trim_end().to_string()
}

/// A tiny config over freshly generated datasets, everything inside `dir`.
fn tiny_setup(dir: &Path) -> PathBuf {
    let train = dir.join("train.scenes");
    let eval = dir.join("eval.scenes");
    run_ok(&[
        "gen-data",
        train.to_str().unwrap(),
        "--scenes",
        "2",
        "--width",
        "32",
        "--height",
        "32",
        "--seed",
        "500",
    ]);
    run_ok(&[
        "gen-data",
        eval.to_str().unwrap(),
        "--scenes",
        "2",
        "--width",
        "32",
        "--height",
        "32",
        "--seed",
        "900",
    ]);
    let cfg = dir.join("config.txt");
    fs::write(
        &cfg,
        format!(
            "channels = 4\nunified_channels = 8\nhead_channels = 8\nregion_size = 8\n\
             iters = 3\nsize_boundary = 400\ntrain_data = {}\neval_data = {}\nout_dir = {}\n",
            train.display(),
            eval.display(),
            dir.join("out").display()
        ),
    )
    .unwrap();
    cfg
}

fn json_field(json: &str, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    v[key].as_f64().unwrap_or_else(|| panic!("field {key} in {json:.80}"))
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out_dir = tmp.path().join("out");

    let stdout = run_ok(&["train", "--config", cfg]);
    assert!(stdout.contains("trained 3 iterations"), "{stdout}");
    let checkpoint = out_dir.join("checkpoint.bin");
    assert!(checkpoint.exists());
    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "header + one row per iteration");
    assert!(log.starts_with("iter,lr,total,body,part,kpt,surface,uv,seg,instance,triplet"));

    // the echoed config reproduces the run bitwise from a different out dir
    let echo = out_dir.join("config.txt");
    let rerun_out = tmp.path().join("rerun");
    run_ok(&[
        "train",
        "--config",
        echo.to_str().unwrap(),
        "--out",
        rerun_out.to_str().unwrap(),
    ]);
    let a = fs::read(&checkpoint).unwrap();
    let b = fs::read(rerun_out.join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "echoed config reproduces the checkpoint bitwise");

    let ck = checkpoint.to_str().unwrap();
    let stdout = run_ok(&["eval", "--config", cfg, "--checkpoint", ck, "--sweep"]);
    assert!(stdout.contains("ap "), "{stdout}");
    let report = fs::read_to_string(out_dir.join("report.json")).unwrap();
    let plain_ap = json_field(&report, "ap");
    let categories = fs::read_to_string(out_dir.join("report_categories.csv")).unwrap();
    assert!(categories.starts_with("metric,Head,Torso,"), "{categories:.60}");
    assert_eq!(categories.lines().count(), 5, "header + ar, u_mse, v_mse, uv_gd rows");
    let sweep = fs::read_to_string(out_dir.join("substitution.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows.len(), 17);
    assert_eq!(rows[0], "gt_body,gt_surface,gt_u,gt_v,ap");
    assert!(rows[1].starts_with("0,0,0,0,"));
    let sweep_plain: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(sweep_plain, plain_ap);
    assert_eq!(rows[16], "1,1,1,1,1");

    // full substitution drives the headline number to a perfect score
    let gt_out = tmp.path().join("gt");
    run_ok(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ck,
        "--gt-all",
        "--out",
        gt_out.to_str().unwrap(),
    ]);
    let gt_report = fs::read_to_string(gt_out.join("report.json")).unwrap();
    assert_eq!(json_field(&gt_report, "ap"), 1.0);
    assert_eq!(json_field(&gt_report, "ap75"), 1.0);

    let stdout = run_ok(&["predict", "--config", cfg, "--checkpoint", ck, "--limit", "1"]);
    assert!(stdout.contains("wrote 1 scene maps"), "{stdout}");
    let scene = fs::read_to_string(out_dir.join("predictions/scene0000.csv")).unwrap();
    assert!(scene.starts_with("instance,y,x,surface,u,v\n"));
    assert_eq!(scene.lines().count(), 1 + 2 * 32 * 32, "two 32x32 maps");
    let scores = fs::read_to_string(out_dir.join("predictions/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 3, "header + two instances of scene 0");
}

#[test]
fn deterministic_training_and_seed_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let o1 = tmp.path().join("o1");
    let o2 = tmp.path().join("o2");
    let o3 = tmp.path().join("o3");
    run_ok(&["train", "--config", cfg, "--out", o1.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg, "--out", o2.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg, "--out", o3.to_str().unwrap(), "--seed", "77"]);
    let a = fs::read(o1.join("checkpoint.bin")).unwrap();
    let b = fs::read(o2.join("checkpoint.bin")).unwrap();
    let c = fs::read(o3.join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "same seed, same bytes");
    assert_ne!(a, c, "--seed switches the run");
    assert!(fs::read_to_string(o3.join("config.txt")).unwrap().contains("seed = 77"));
}

#[test]
fn errors_are_single_line_and_coded() {
    let tmp = tempfile::tempdir().unwrap();

    // unknown config key, named
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "channles = 8\n").unwrap();
    let err = run_err(&["train", "--config", bad.to_str().unwrap()]);
    assert!(err.starts_with("error[parse]:"), "{err}");
    assert!(err.contains("unknown config key \"channles\""), "{err}");

    // missing dataset file
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, format!("train_data = {}\n", tmp.path().join("absent.scenes").display()))
        .unwrap();
    let err = run_err(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(err.starts_with("error[io]:"), "{err}");
    assert!(err.contains("absent.scenes"), "{err}");

    // unknown preset
    let err = run_err(&["ablate", "table9"]);
    assert!(err.starts_with("error[parse]:"), "{err}");
    assert!(err.contains("table9"), "{err}");

    // zero threads
    let err = run_err(&["export-graph", "--threads", "0"]);
    assert!(err.starts_with("error[cli]:"), "{err}");
}

#[test]
fn incompatible_checkpoints_name_the_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg_s]);
    let ck = tmp.path().join("out/checkpoint.bin");

    // same files but a wider model: loading must fail naming a tensor
    let wide = tmp.path().join("wide.txt");
    let text = fs::read_to_string(&cfg).unwrap().replace("channels = 4", "channels = 6");
    fs::write(&wide, text).unwrap();
    let err = run_err(&[
        "eval",
        "--config",
        wide.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert!(err.starts_with("error[invalid]:"), "{err}");
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn ablate_writes_grid_and_category_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(tmp.path());
    // shrink further: the grid trains 12 models
    let text = fs::read_to_string(&cfg).unwrap().replace("iters = 3", "iters = 2");
    fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    let stdout = run_ok(&["ablate", "table1", "--config", cfg, "--threads", "2"]);
    assert!(stdout.contains("baseline: median ap"), "{stdout}");
    assert!(stdout.contains("+mid+ktm: median ap"), "{stdout}");
    let out_dir = tmp.path().join("out");
    let grid = fs::read_to_string(out_dir.join("table1.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines.len(), 5, "header + 4 configs");
    assert_eq!(lines[0], "config,ap_seed0,ap_seed1,ap_seed2,ap_median,ar_seed0,ar_seed1,ar_seed2,ar_median");
    assert!(lines[1].starts_with("baseline,"));
    let cats = fs::read_to_string(out_dir.join("table1_categories.csv")).unwrap();
    assert_eq!(cats.lines().count(), 1 + 4 * 10, "10 parts per config");

    // the parallel and sequential paths agree bitwise
    let seq_out = tmp.path().join("seq");
    run_ok(&["ablate", "table1", "--config", cfg, "--out", seq_out.to_str().unwrap()]);
    let seq = fs::read_to_string(seq_out.join("table1.csv")).unwrap();
    assert_eq!(grid, seq);
}

#[test]
fn export_graph_writes_the_three_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("graph");
    run_ok(&["export-graph", "--out", out.to_str().unwrap()]);
    for name in ["m_s.csv", "m_d.csv", "m_g.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().count(), 26, "{name} has a row per surface label");
        assert!(text.starts_with("surface_label,"), "{name} has a labelled header");
    }
}

#[test]
fn fcn_pipeline_works_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("single.scenes");
    run_ok(&[
        "gen-data",
        data.to_str().unwrap(),
        "--scenes",
        "2",
        "--width",
        "32",
        "--height",
        "32",
        "--instances",
        "1",
        "--seed",
        "41",
    ]);
    let cfg = tmp.path().join("fcn.txt");
    fs::write(
        &cfg,
        format!(
            "pipeline = fcn\nchannels = 4\nunified_channels = 8\nhead_channels = 8\n\
             iters = 2\ntrain_data = {0}\neval_data = {0}\nout_dir = {1}\n",
            data.display(),
            tmp.path().join("out").display()
        ),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg]);
    let ck = tmp.path().join("out/checkpoint.bin");
    let stdout = run_ok(&["eval", "--config", cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert!(stdout.contains("ap "), "{stdout}");
}
