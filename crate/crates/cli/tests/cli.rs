use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xdet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdet")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_class_lists(dir: &Path) {
    fs::write(dir.join("l.txt"), "l1\nl2\nl3\nl4\nl5\n").unwrap();
    fs::write(dir.join("m.txt"), "m1\nm2\nm3\n").unwrap();
}

#[test]
fn every_command_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let commands = [
        ("merge-labels", &["--dataset", "--merge-config", "--out", "--force"][..]),
        ("build-manifest", &["--dataset", "--merge-config", "--out", "--force"]),
        ("synth-gen", &["--config", "--seed", "--out-dir", "--force"]),
        ("train", &["--config", "--seed", "--world", "--manifest", "--mode", "--out", "--history", "--force"]),
        ("infer", &["--config", "--seed", "--checkpoint", "--world", "--manifest", "--out", "--force"]),
        ("evaluate", &["--manifest", "--detections", "--voc", "--out", "--per-class-csv", "--pr-csv", "--force"]),
        ("gradcheck", &["--config", "--seed", "--points", "--head-trials", "--tolerance"]),
    ];
    for (cmd, flags) in commands {
        let out = xdet(&[cmd, "--help"], dir.path());
        assert!(out.status.success());
        let help = stdout(&out);
        for flag in flags {
            let line = help.lines().find(|l| l.trim_start().starts_with(flag) || l.contains(&format!(" {flag} ")));
            let line = line.unwrap_or_else(|| panic!("{cmd} --help lacks {flag}"));
            assert!(line.trim().len() > flag.len() + 8, "{cmd} {flag} has no description: {line:?}");
        }
    }
}

#[test]
fn merge_labels_summaries_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_class_lists(dir.path());
    let plain = xdet(&["merge-labels", "--dataset", "l:classes:l.txt", "--dataset", "m:classes:m.txt", "--out", "a.json"], dir.path());
    assert_eq!(stdout(&plain).trim(), "8 classes (0 merged groups)");

    fs::write(
        dir.path().join("overlap.json"),
        r#"{"merges":[[{"dataset":"l","name":"l1"},{"dataset":"m","name":"m1"}],[{"dataset":"l","name":"l1"},{"dataset":"m","name":"m2"}]]}"#,
    )
    .unwrap();
    let overlap = xdet(
        &["merge-labels", "--dataset", "l:classes:l.txt", "--dataset", "m:classes:m.txt", "--merge-config", "overlap.json", "--out", "b.json"],
        dir.path(),
    );
    assert_eq!(overlap.status.code(), Some(2));
    assert!(!dir.path().join("b.json").exists());

    fs::write(dir.path().join("broken.json"), "{\n  \"merges\": [\n    oops\n}").unwrap();
    let broken = xdet(
        &["merge-labels", "--dataset", "l:classes:l.txt", "--merge-config", "broken.json", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(broken.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("line 3"));
}

#[test]
fn outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    write_class_lists(dir.path());
    let args = ["merge-labels", "--dataset", "l:classes:l.txt", "--out", "space.json"];
    assert!(xdet(&args, dir.path()).status.success());
    fs::write(dir.path().join("space.json"), "keep").unwrap();
    assert_eq!(xdet(&args, dir.path()).status.code(), Some(2));
    assert_eq!(fs::read_to_string(dir.path().join("space.json")).unwrap(), "keep");
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(xdet(&forced, dir.path()).status.success());
    assert_ne!(fs::read_to_string(dir.path().join("space.json")).unwrap(), "keep");
}

#[test]
fn usage_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = xdet(&["train", "--world", "w.json", "--manifest", "missing.json", "--out", "c.json"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(xdet(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(xdet(&["merge-labels", "--dataset", "bad", "--out", "x"], dir.path()).status.code(), Some(2));

    assert!(xdet(&["synth-gen", "--out-dir", "s"], dir.path()).status.success());
    let bad_mode = xdet(
        &["train", "--world", "s/world.json", "--manifest", "s/manifest.json", "--mode", "sideways", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(bad_mode.status.code(), Some(2));

    // lr so large the loss overflows: a runtime failure, not a usage error
    fs::write(dir.path().join("hot.toml"), "[train]\nbase_lr = 1e300\nwarmup_steps = 0\ntotal_steps = 60\n").unwrap();
    let diverged = xdet(
        &["train", "--config", "hot.toml", "--world", "s/world.json", "--manifest", "s/manifest.json", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(diverged.status.code(), Some(1));
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn evaluate_empty_detections_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    assert!(xdet(&["synth-gen", "--seed", "1", "--out-dir", "s"], dir.path()).status.success());
    fs::write(dir.path().join("none.jsonl"), "").unwrap();
    let out = xdet(&["evaluate", "--manifest", "s/test_manifest.json", "--detections", "none.jsonl", "--out", "r.json"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().next().unwrap().split_whitespace().eq(["class", "AP", "AP50", "AP75", "Easy", "Medium", "Hard"]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["coco"]["ap"], 0.0);
    assert_eq!(report["coco"]["ap50"], 0.0);
    assert!(report["wider"].as_array().unwrap().iter().all(|w| w["easy"]["ap"] == 0.0 && w["hard"]["ap"] == 0.0));
}

#[test]
fn toml_and_json_configs_agree() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[world]\nimages_per_dataset = 3\ntest_images = 2\n").unwrap();
    fs::write(dir.path().join("c.json"), r#"{"world":{"images_per_dataset":3,"test_images":2}}"#).unwrap();
    assert!(xdet(&["synth-gen", "--config", "c.toml", "--seed", "2", "--out-dir", "t"], dir.path()).status.success());
    assert!(xdet(&["synth-gen", "--config", "c.json", "--seed", "2", "--out-dir", "j"], dir.path()).status.success());
    for f in ["world.json", "manifest.json", "test_manifest.json"] {
        assert_eq!(fs::read(dir.path().join("t").join(f)).unwrap(), fs::read(dir.path().join("j").join(f)).unwrap());
    }
    let other = xdet(&["synth-gen", "--config", "c.json", "--seed", "3", "--out-dir", "k"], dir.path());
    assert!(other.status.success());
    assert_ne!(fs::read(dir.path().join("k/world.json")).unwrap(), fs::read(dir.path().join("j/world.json")).unwrap());
}

#[test]
fn build_manifest_from_coco_and_voc() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("coco.json"),
        r#"{"images":[{"id":1,"file_name":"x.jpg","width":50,"height":50}],
            "annotations":[{"id":1,"image_id":1,"category_id":7,"bbox":[1,2,10,10],"iscrowd":0}],
            "categories":[{"id":7,"name":"person"}]}"#,
    )
    .unwrap();
    fs::create_dir(dir.path().join("voc")).unwrap();
    fs::write(
        dir.path().join("voc/000001.xml"),
        "<annotation><filename>000001.jpg</filename><size><width>100</width><height>80</height></size>\
         <object><name>dog</name><difficult>0</difficult><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>11</xmax><ymax>21</ymax></bndbox></object>\
         <object><name>person</name><difficult>1</difficult><bndbox><xmin>5</xmin><ymin>5</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>\
         </annotation>",
    )
    .unwrap();
    fs::write(dir.path().join("merge.json"), r#"{"merges":[[{"dataset":"coco","name":"person"},{"dataset":"voc","name":"person"}]]}"#)
        .unwrap();
    let out = xdet(
        &["build-manifest", "--dataset", "coco:coco:coco.json", "--dataset", "voc:voc:voc", "--merge-config", "merge.json", "--out", "m.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), "coco: 1 images, 1 boxes\nvoc: 1 images, 2 boxes\n");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["images"].as_array().unwrap().len(), 2);
}
