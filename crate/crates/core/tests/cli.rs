use std::fs;
use std::path::Path;

use sgnet::cli::run_args;
use sgnet::io::{self, MetricsFile, PredictionsFile, SCHEMA_VERSION};

const TINY: &str = "feat_channels = 8\nbackbone_widths = [4, 8, 8, 8]\ntower_depth = 1\n\
                    base_hidden = 8\nbase_channels = 8\nclip_length = 3\ncheckpoint_every = 5\n";

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn metrics(path: &Path) -> MetricsFile {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, run, cfg) = (d.join("data"), d.join("run"), d.join("tiny.toml"));
    fs::write(&cfg, TINY).unwrap();

    let gen = ["gen-data", "--out", &s(&data), "--videos", "2", "--frames", "4", "--height", "64", "--width", "64", "--shapes", "2"];
    assert_eq!(run_args(&gen), 0);
    assert!(data.join("dataset.json").exists());
    assert!(data.join(io::video_dir_name(1)).join("frame_003.png").exists());

    let train = ["train", "--data", &s(&data), "--out", &s(&run), "--config", &s(&cfg), "--steps", "8", "--seed", "0"];
    assert_eq!(run_args(&train), 0);
    let log = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 9);
    assert!(run.join("step_000005").join("manifest.json").exists());

    // resume continues the log
    let more = ["train", "--data", &s(&data), "--out", &s(&run), "--config", &s(&cfg), "--steps", "10", "--resume", &s(&run.join("final"))];
    assert_eq!(run_args(&more), 0);
    assert_eq!(fs::read_to_string(run.join("losses.csv")).unwrap().lines().count(), 11);

    let ckpt = s(&run.join("final"));
    let (p1, p2) = (d.join("p1.json"), d.join("p2.json"));
    assert_eq!(run_args(&["infer", "--checkpoint", &ckpt, "--data", &s(&data), "--out", &s(&p1)]), 0);
    assert_eq!(run_args(&["infer", "--checkpoint", &ckpt, "--data", &s(&data), "--out", &s(&p2)]), 0);
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let m = d.join("m.json");
    assert_eq!(run_args(&["eval", "--predictions", &s(&p1), "--data", &s(&data), "--out", &s(&m)]), 0);
    let got = metrics(&m);
    assert_eq!(got.schema_version, SCHEMA_VERSION);
    assert!((0.0..=1.0).contains(&got.metrics.ap));

    let ov = d.join("overlay");
    assert_eq!(run_args(&["overlay", "--predictions", &s(&p1), "--data", &s(&data), "--out", &s(&ov), "--video", "0"]), 0);
    assert!(ov.join(io::video_dir_name(0)).join("overlay_000.png").exists());
    assert!(!ov.join(io::video_dir_name(1)).exists());
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = ["gen-data", "--out", &s(&data), "--videos", "3", "--frames", "5", "--seed", "4"];
    assert_eq!(run_args(&gen), 0);
    let predictions = io::read_dataset(&data)
        .unwrap()
        .iter()
        .flat_map(|(vid, v)| io::gt_as_predictions(*vid, v))
        .collect();
    let preds = dir.path().join("gt.json");
    io::write_predictions(
        &preds,
        &PredictionsFile {
            schema_version: SCHEMA_VERSION,
            predictions,
        },
    )
    .unwrap();
    let out = dir.path().join("m.json");
    assert_eq!(run_args(&["eval", "--predictions", &s(&preds), "--data", &s(&data), "--out", &s(&out)]), 0);
    let m = metrics(&out).metrics;
    assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_args(&[]), 2);
    assert_eq!(run_args(&["gen-data"]), 2);
    let missing = dir.path().join("nowhere");
    assert_eq!(run_args(&["eval", "--predictions", &s(&missing), "--data", &s(&missing)]), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"schema_version\": 1, \"predictions\": [{\"video_id\": 0}]}").unwrap();
    assert_eq!(run_args(&["eval", "--predictions", &s(&bad), "--data", &s(&missing)]), 1);
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "divison_cap = 4\n").unwrap();
    let data = dir.path().join("data");
    assert_eq!(run_args(&["gen-data", "--out", &s(&data), "--videos", "1", "--frames", "2"]), 0);
    assert_eq!(run_args(&["train", "--data", &s(&data), "--out", &s(&dir.path().join("r")), "--config", &s(&cfg)]), 1);
}
