use std::path::Path;

use psrp_core::checkpoint::Checkpoint;
use psrp_core::data::{generate_synthetic, DatasetManifest, SynthConfig};
use psrp_core::train::{checkpoint_name, run_ablation, train, LogRecord, Trainer, FINAL_CHECKPOINT, LOG_FILE};
use psrp_core::{Error, RunConfig, Variant};

fn config(iterations: usize) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.toml");
    let sets = vec![format!("train.iterations={iterations}")];
    RunConfig::load(Some(&path), &sets, None).unwrap()
}

fn data() -> DatasetManifest {
    generate_synthetic(&SynthConfig::default(), 7, None).unwrap()
}

fn read_log(dir: &Path) -> Vec<LogRecord> {
    std::fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn ten_iterations_log_ten_finite_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&config(10), &data(), Some(dir.path()), None).unwrap();
    let log = read_log(dir.path());
    assert_eq!(log.len(), 10);
    assert_eq!(log, out.log);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.iteration, i + 1);
        assert!(r.total.is_finite() && r.cls.is_finite() && r.reg.is_finite() && r.center.is_finite());
    }
    assert_eq!(out.final_checkpoint.as_deref(), Some(dir.path().join(FINAL_CHECKPOINT).as_path()));
}

#[test]
fn resume_from_iteration_five_reproduces_the_rest() {
    let mut cfg = config(10);
    cfg.train.checkpoint_every = 5;
    let manifest = data();
    let full = tempfile::tempdir().unwrap();
    let straight = train(&cfg, &manifest, Some(full.path()), None).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let ckpt = full.path().join(checkpoint_name(5));
    let tail = train(&cfg, &manifest, Some(resumed.path()), Some(&ckpt)).unwrap();
    assert_eq!(tail.log, straight.log[5..]);
    assert_eq!(read_log(resumed.path()), straight.log[5..]);
    assert_eq!(
        std::fs::read(full.path().join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(resumed.path().join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn trainer_checkpoint_round_trips_bytes() {
    let manifest = data();
    let mut t = Trainer::new(&config(4), &manifest).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    Checkpoint::from_bytes(&bytes).unwrap().save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    let back = Trainer::from_checkpoint(&Checkpoint::load(&p).unwrap(), &manifest).unwrap();
    assert_eq!(back.iteration, 2);
    assert_eq!(back.checkpoint().unwrap().to_bytes(), bytes);
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let mut cfg = config(50);
    cfg.train.lr = 1e12;
    match train(&cfg, &data(), None, None) {
        Err(Error::Diverged { iteration }) => assert!(iteration >= 1 && iteration <= 50),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn ablation_reports_eight_rows() {
    let mut cfg = config(2);
    cfg.model.sedam.width = 32;
    cfg.model.head.tower_depth = 1;
    let manifest = data().truncated(2);
    let report = run_ablation(&cfg, &manifest, None).unwrap();
    assert_eq!(report.rows.len(), 8);
    let count = |v| report.row(v, true).unwrap().param_count;
    for v in Variant::ALL {
        for revise in [true, false] {
            assert!(report.row(v, revise).is_some());
        }
    }
    assert!(count(Variant::A) < count(Variant::B));
    assert!(count(Variant::A) < count(Variant::C));
    assert!(count(Variant::A) < count(Variant::Ours));
    let k = cfg.model.sedam.attention_params.spatial_kernel;
    assert_eq!(count(Variant::C) - count(Variant::B), psrp_core::sedam::ENCODER_BLOCKS * k * k);
    assert!(report.to_json().unwrap().contains("\"revise\""));
}
