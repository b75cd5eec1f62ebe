use std::path::Path;
use std::process::{Command, Output};

fn psrp(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_psrp"))
        .args(args)
        .env_remove("PSRP_SEED")
        .output()
        .expect("spawn psrp");
    assert!(
        out.status.success(),
        "psrp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_infer_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    psrp(&["synth-data", "--out", s(&data), "--num-images", "2", "--seed", "3"]);
    let ann = data.join("annotations.json");
    assert!(ann.exists());

    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.toml");
    psrp(&[
        "train", "--config", s(&config), "--set", "train.iterations=2", "--set", "model.head.tower_depth=1",
        "--annotations", s(&ann), "--out", s(&run),
    ]);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ckpt = run.join("final.ckpt");

    let image = data.join("images/synth_000001.png");
    let image = if image.exists() { image } else { data.join("images/synth_000000.png") };
    let dets = dir.path().join("dets.json");
    let drawn = dir.path().join("drawn.png");
    psrp(&[
        "infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--score-threshold", "0",
        "--out", s(&dets), "--render", s(&drawn),
    ]);
    let set: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dets).unwrap()).unwrap();
    assert!(!set["detections"].as_array().unwrap().is_empty());
    assert!(drawn.exists());

    let again = dir.path().join("again.png");
    psrp(&["render", "--image", s(&image), "--detections", s(&dets), "--out", s(&again)]);
    assert_eq!(std::fs::read(&drawn).unwrap(), std::fs::read(&again).unwrap());

    // ground truth scored against itself is perfect
    let gt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ann).unwrap()).unwrap();
    let results: Vec<serde_json::Value> = gt["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| serde_json::json!({"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}))
        .collect();
    let res = dir.path().join("results.json");
    std::fs::write(&res, serde_json::to_string(&results).unwrap()).unwrap();
    let metrics = dir.path().join("metrics.json");
    let out = psrp(&["eval", "--annotations", s(&ann), "--detections", s(&res), "--out", s(&metrics)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["aggregate"]["ap"].as_f64(), Some(1.0));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, env: Option<&str>, arg: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_psrp"));
        cmd.args(["synth-data", "--out", s(&out), "--num-images", "2"]).env_remove("PSRP_SEED");
        if let Some(e) = env {
            cmd.env("PSRP_SEED", e);
        }
        if let Some(a) = arg {
            cmd.args(["--seed", a]);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read(out.join("annotations.json")).unwrap()
    };
    let from_env = gen("a", Some("5"), None);
    assert_eq!(from_env, gen("b", None, Some("5")));
    assert_ne!(from_env, gen("c", None, None));
    assert_eq!(gen("d", Some("9"), Some("5")), from_env);
}

#[test]
fn bad_override_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_psrp"))
        .args(["train", "--set", "train.lr=0", "--annotations", "missing.json", "--out", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));
}
