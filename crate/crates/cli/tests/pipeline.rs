//! Command contracts on a small acquisition.

use std::path::Path;
use std::process::Command;

use cbct_autofocus::io::{read_pgm, read_stack, read_volume, write_volume};
use cbct_autofocus::Error;
use cbct_autofocus_cli::pipeline::METRICS_HEADER;
use cbct_autofocus_cli::{Config, Run};

const SMALL: &str = r#"{
  "dataset": "small",
  "seed": 3,
  "geometry": {"n_views": 36, "detector_cols": 64, "detector_rows": 32, "pixel_mm": 4.0},
  "simulation": {"n_nodes": 6, "detector_subsamples": 1},
  "reconstruction": {"nx": 32, "ny": 32, "nz": 3, "voxel_mm": 8.0},
  "training": {
    "set": {"n_samples": 50, "input_size": 16, "pixel_mm": 16.0, "n_nodes": 6, "detector_subsamples": 1},
    "fit": {"epochs": 3}
  },
  "compensation": {
    "n_nodes": 4,
    "active": "in_plane",
    "lut": {"n_theta": 36},
    "pairs": {"stride": 3},
    "schedule": {"max_sweeps": 1, "max_evals_per_block": 20},
    "methods": [
      {"name": "entropy", "iqm": "entropy", "lambda": {"fixed": 0.0}},
      {"name": "proposed", "iqm": "oracle_rpe", "lambda": "auto"}
    ]
  }
}"#;

fn small() -> Config {
    let cfg = Config::from_json(SMALL).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn zero_amplitude_gives_identical_stacks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.simulation.max_translation_mm = 0.0;
    cfg.simulation.max_rotation_deg = 0.0;
    let run = Run::new(cfg, dir.path()).unwrap();
    run.simulate().unwrap();
    assert_eq!(read(&run.path("stack_clean.rawp")), read(&run.path("stack_motion.rawp")));
}

#[test]
fn simulation_is_reproducible_and_motion_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Run::new(small(), a.path()).unwrap();
    let rb = Run::new(small(), b.path()).unwrap();
    ra.simulate().unwrap();
    rb.simulate().unwrap();
    for name in ["stack_motion.rawp", "stack_clean.rawp", "motion_true.csv", "uncompensated.rawv", "manifest.json"] {
        assert_eq!(read(&ra.path(name)), read(&rb.path(name)), "{name}");
    }
    let clean = read_stack(&ra.path("stack_clean.rawp")).unwrap();
    let moved = read_stack(&ra.path("stack_motion.rawp")).unwrap();
    let max_diff = clean.data.iter().zip(&moved.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(max_diff > 0.0);
    let manifest = String::from_utf8(read(&ra.path("manifest.json"))).unwrap();
    assert!(manifest.contains(ra.config_hash()));
    assert!(String::from_utf8(read(&ra.path("motion_true.csv"))).unwrap().starts_with("# config_sha256="));
}

#[test]
fn compensate_writes_one_row_per_method_and_keeps_the_stack() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(), dir.path()).unwrap();
    run.simulate().unwrap();
    let before = read(&run.path("stack_motion.rawp"));
    run.compensate().unwrap();
    assert_eq!(read(&run.path("stack_motion.rawp")), before);

    let csv = String::from_utf8(read(&run.path("metrics.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_sha256="));
    assert_eq!(lines[1], METRICS_HEADER);
    let methods: Vec<&str> = lines[2..].iter().map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(methods, ["uncompensated", "entropy", "proposed"]);
    for line in &lines[2..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), METRICS_HEADER.split(',').count());
        assert_eq!(cols[0], "small");
        assert_eq!(cols[1], "in_plane");
        assert!(cols[3].parse::<f64>().is_ok(), "{line}");
    }
    let report = String::from_utf8(read(&run.path("report_proposed.json"))).unwrap();
    assert!(report.contains("objective_trace"));
    assert!(run.path("motion_entropy.csv").is_file());
}

#[test]
fn missing_regressor_model_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.compensation.methods[1].iqm = cbct_autofocus::iqm::IqmKind::Regressor;
    let run = Run::new(cfg, dir.path()).unwrap();
    run.simulate().unwrap();
    match run.compensate() {
        Err(Error::Validation { field, reason }) => {
            assert_eq!(field, "compensation.methods[1].model");
            assert!(reason.contains("model.rpem"), "{reason}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn null_motion_reports_ssim_without_suppression() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.simulation.max_translation_mm = 0.0;
    cfg.simulation.max_rotation_deg = 0.0;
    cfg.compensation.methods.truncate(1);
    let run = Run::new(cfg, dir.path()).unwrap();
    run.simulate().unwrap();
    run.compensate().unwrap();
    let csv = String::from_utf8(read(&run.path("metrics.csv"))).unwrap();
    for line in csv.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "", "{line}");
        assert!(cols[4].parse::<f64>().unwrap().is_finite(), "{line}");
        assert!(cols[7].contains("undefined"));
        if cols[2] == "uncompensated" {
            assert_eq!(cols[4], "1.000000");
        }
    }
}

#[test]
fn training_contract() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.training.set.n_samples = 10;
    match Run::new(cfg, dir.path()) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "training.set.n_samples"),
        other => panic!("expected a validation error, got {:?}", other.err()),
    }

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Run::new(small(), a.path()).unwrap();
    let rb = Run::new(small(), b.path()).unwrap();
    ra.train().unwrap();
    rb.train().unwrap();
    let log = String::from_utf8(read(&ra.path("training_log.csv"))).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "epoch,train_mse,val_mse,val_pearson_r");
    assert_eq!(rows.len(), 1 + 3);
    assert_eq!(log, String::from_utf8(read(&rb.path("training_log.csv"))).unwrap());
    assert_eq!(read(&ra.path("model.rpem")), read(&rb.path("model.rpem")));
}

#[test]
fn evaluate_images_and_stability() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(), dir.path()).unwrap();
    run.simulate().unwrap();
    run.compensate().unwrap();
    // make one method's result identical to the reference
    let reference = read_volume(&run.path("reference.rawv")).unwrap();
    write_volume(&reference, &run.path("compensated_entropy.rawv")).unwrap();
    run.evaluate().unwrap();
    let (w, h, px) = read_pgm(&run.path("slices_entropy.pgm")).unwrap();
    assert_eq!((w, h), (4 * 32, 32));
    for y in 0..h {
        assert!(px[y * w + 3 * 32..(y + 1) * w].iter().all(|&g| g == 0));
        assert_eq!(&px[y * w..y * w + 32], &px[y * w + 2 * 32..y * w + 3 * 32]);
    }
    let csv = read(&run.path("metrics.csv"));
    let pgm = read(&run.path("slices_proposed.pgm"));
    run.evaluate().unwrap();
    assert_eq!(read(&run.path("metrics.csv")), csv);
    assert_eq!(read(&run.path("slices_proposed.pgm")), pgm);
    let text = String::from_utf8(csv).unwrap();
    let entropy = text.lines().find(|l| l.contains(",entropy,")).unwrap();
    assert_eq!(entropy.split(',').nth(3).unwrap(), "100.00");
}

#[test]
fn evaluate_rejects_mismatched_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(), dir.path()).unwrap();
    run.simulate().unwrap();
    run.compensate().unwrap();
    let mut v = read_volume(&run.path("reference.rawv")).unwrap();
    v.grid.nz = 1;
    v.data.truncate(v.grid.len());
    write_volume(&v, &run.path("compensated_entropy.rawv")).unwrap();
    assert!(matches!(run.evaluate(), Err(Error::ShapeMismatch { .. })));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cbct-autofocus"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, SMALL).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"geometry": {"n_views": "many"}}"#).unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let r = cli(&["simulate", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("geometry.n_views"));

    // nothing simulated yet
    let r = cli(&["compensate", "--config", good.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(3));

    let r = cli(&["simulate", "--config", good.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(dir.path().join("out/stack_motion.rawp").is_file());

    let r = cli(&["simulate", "--out", out]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
