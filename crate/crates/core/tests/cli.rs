mod common;

use std::process::Command;

use voxgraph::config::TrainConfig;
use voxgraph::kitti::{load_detections, Calibration, KittiDataset};

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_voxgraph")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_then_infer_on_kitti_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("kitti");
    let config = TrainConfig { max_steps: Some(2), ..common::criteria::ablation_config() };
    let data = KittiDataset::new(&root);
    for i in 0..3 {
        let mut scene = voxgraph::synthetic::generate_synthetic(&config.synthetic(), i).unwrap();
        scene.id = format!("{i:06}");
        data.write_scene(&scene).unwrap();
    }
    std::fs::create_dir(root.join("ImageSets")).unwrap();
    std::fs::write(root.join("ImageSets/val.txt"), "000002\n").unwrap();
    let cfg = dir.path().join("micro.toml");
    std::fs::write(&cfg, config.to_toml()).unwrap();
    let run_dir = dir.path().join("run");
    let (cfg, root_s, run_s) = (cfg.to_str().unwrap(), root.to_str().unwrap(), run_dir.to_str().unwrap());

    run(&["train", "--config", cfg, "--dataset", root_s, "--seed", "3", "--out", run_s]);
    let metrics = std::fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let saved = TrainConfig::load(run_dir.join("config.toml")).unwrap();
    assert_eq!(saved.seed, 3);

    let ckpt = run_dir.join("model.vxgc");
    let dets = dir.path().join("dets");
    let ckpt_s = ckpt.to_str().unwrap();
    run(&["infer", "--checkpoint", ckpt_s, "--dataset", root_s, "--split", "val", "--out", dets.to_str().unwrap()]);
    let files: Vec<_> = std::fs::read_dir(&dets).unwrap().collect();
    assert_eq!(files.len(), 1);
    load_detections(dets.join("000002.txt"), &Calibration::nominal()).unwrap();

    let report = run(&["eval", "--checkpoint", ckpt_s, "--dataset", root_s, "--class", "car"]);
    assert!(report.starts_with("Car AP@"), "{report}");
    let bench = run(&["bench", "--checkpoint", ckpt_s, "--dataset", root_s]);
    assert!(bench.contains("voxelize") && bench.contains("postprocess"));
}

#[test]
fn rejects_unknown_preset() {
    let out = Command::new(env!("CARGO_BIN_EXE_voxgraph")).args(["eval", "--config", "truck"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}
