//! Drives the command-line front end through a whole small pipeline of
//! artifacts on disk: dataset, teacher checkpoint, distilled student,
//! evaluation log, and exported heatmaps.

use gkd::io::read_metrics;
use std::path::Path;

fn gkd(args: &[&str]) -> i32 {
    gkd::cli::run(std::iter::once("gkd").chain(args.iter().copied()))
}

fn kinds(path: &Path) -> Vec<String> {
    read_metrics(path)
        .expect("metrics log parses")
        .iter()
        .map(|r| r["kind"].as_str().expect("kind is a string").to_string())
        .collect()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = |name: &str| dir.path().join(name).display().to_string();
    let data = path("data");
    let teacher = path("teacher.ckpt");
    let student = path("student.ckpt");

    // Dataset: 24 train / 8 val scenes, then the overwrite guard.
    assert_eq!(gkd(&["gen-data", "--out", &data, "--train", "24", "--val", "8", "--seed", "5"]), 0);
    assert!(Path::new(&data).join("train").is_dir());
    let data_kinds = kinds(&Path::new(&data).join("metrics.jsonl"));
    assert_eq!(data_kinds, ["gen-data", "summary"]);
    assert_eq!(gkd(&["gen-data", "--out", &data, "--train", "24", "--val", "8"]), 2);
    assert_eq!(
        gkd(&["gen-data", "--out", &data, "--train", "24", "--val", "8", "--seed", "5", "--overwrite"]),
        0
    );

    // Teacher: two abbreviated epochs.
    assert_eq!(
        gkd(&["train-teacher", "--data", &data, "--out", &teacher, "--epochs", "2"]),
        0
    );
    assert!(Path::new(&teacher).is_file());
    let teacher_metrics = dir.path().join("teacher.metrics.jsonl");
    assert_eq!(kinds(&teacher_metrics), ["train-teacher", "epoch", "epoch"]);

    // Student distilled against the teacher checkpoint.
    assert_eq!(
        gkd(&["distill", "--data", &data, "--teacher", &teacher, "--out", &student, "--epochs", "2"]),
        0
    );
    let records = read_metrics(&dir.path().join("student.metrics.jsonl")).unwrap();
    assert_eq!(records[0]["kind"], "distill");
    let echo = &records[0]["config"];
    assert_eq!(echo["inherit"], false);
    assert_eq!(echo["kd"]["use_gkd"], true);
    assert_eq!(echo["detector"]["backbone_widths"], serde_json::json!([8, 16, 32]));
    assert_eq!(echo["train"]["epochs"], 2);
    assert!(records[1]["kd_loss"].as_f64().expect("kd loss recorded") > 0.0);

    // Evaluation writes a scoreboard record.
    let eval_log = path("eval.jsonl");
    assert_eq!(
        gkd(&["eval", "--data", &data, "--checkpoint", &student, "--metrics", &eval_log]),
        0
    );
    let records = read_metrics(Path::new(&eval_log)).unwrap();
    assert_eq!(records[0]["kind"], "eval");
    assert_eq!(records[0]["config"]["split"], "val");
    let map50 = records[1]["map50"].as_f64().expect("map50 recorded");
    assert!((0.0..=1.0).contains(&map50));
    assert_eq!(gkd(&["eval", "--data", &data, "--checkpoint", &student, "--split", "train"]), 0);

    // Heatmap export: one teacher and one student map per scene per level.
    let masks = path("masks");
    assert_eq!(
        gkd(&["emit-masks", "--data", &data, "--teacher", &teacher, "--student", &student, "--out", &masks, "--count", "2"]),
        0
    );
    let levels = 3;
    for scene in 0..2 {
        for level in 0..levels {
            for side in ["teacher", "student"] {
                let file = Path::new(&masks).join(format!("scene{scene:02}_level{level}_{side}.ppm"));
                assert!(file.is_file(), "missing {}", file.display());
                let bytes = std::fs::read(&file).unwrap();
                assert!(bytes.starts_with(b"P6"));
            }
        }
    }
    let sims = read_metrics(&Path::new(&masks).join("similarity.jsonl")).unwrap();
    assert_eq!(sims.len(), 1 + 2 * levels + 1);
    let mean = sims.last().unwrap()["mask_similarity"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean), "similarity mean {mean} out of range");

    assert_eq!(gkd(&["complexity"]), 0);
}

#[test]
fn config_file_loses_to_flags_in_artifacts() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = |name: &str| dir.path().join(name).display().to_string();
    let data = path("data");
    let teacher = path("teacher.ckpt");
    let student = path("student.ckpt");
    assert_eq!(gkd(&["gen-data", "--out", &data, "--train", "16", "--val", "8"]), 0);
    assert_eq!(gkd(&["train-teacher", "--data", &data, "--out", &teacher, "--epochs", "1"]), 0);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nlr = 0.001\nbeta = 0.0001\nmask = false\n").unwrap();
    assert_eq!(
        gkd(&[
            "distill", "--data", &data, "--teacher", &teacher, "--out", &student,
            "--config", &cfg.display().to_string(), "--epochs", "2",
        ]),
        0
    );
    let echo = &read_metrics(&dir.path().join("student.metrics.jsonl")).unwrap()[0]["config"];
    assert_eq!(echo["train"]["epochs"], 2, "flag beats file");
    assert_eq!(echo["train"]["lr"], 0.001, "file beats preset");
    assert_eq!(echo["kd"]["bmfi_weight"], 0.0001);
    assert_eq!(echo["kd"]["use_mask"], false);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data").display().to_string();
    assert_eq!(gkd(&["gen-data", "--out", &data, "--train", "8", "--val", "4"]), 0);
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert_eq!(gkd(&["eval", "--data", &data, "--checkpoint", &bogus.display().to_string()]), 2);
}
