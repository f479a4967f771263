use std::path::{Path, PathBuf};
use std::process::Command;

use procam_cli::config::RunConfig;
use procam_cli::*;
use procam_core::baseline::Variant;
use procam_core::diffcore::Checkpoint;
use procam_core::simulator::Dataset;
use procam_core::training::{init_model, read_curves, ModelConfig, Preset};
use procam_core::photometric::PhotometricNet;
use rand::SeedableRng;

fn write_config(root: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 5
preset = "fast"
size = 32
output_root = "{}"
[dataset]
train = 24
val = 6
[train]
iterations = 24
batch_size = 4
val_every = 8
[model]
photo_width = 8
refine_width = 8
[pretrain]
iterations = 20
[baseline]
photo_width = 8
[baseline.compennet]
iterations = 12
lr_decay_at = 8
batch_size = 4
"#,
        root.join("runs").display()
    );
    let p = root.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn simulated(root: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(root);
    let data = simulate(&SimulateArgs {
        config: Some(cfg.clone()),
        out: Some(root.join("data")),
        ..Default::default()
    })
    .unwrap();
    (cfg, data)
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (_, data) = simulated(root);
    for f in ["setup.meta", "surface.png", "dark.png", "config.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let tr = train(&TrainArgs {
        data: data.clone(),
        out: Some(root.join("train")),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(tr.summary.report.iterations, 24);
    assert_eq!(tr.summary.train_pairs, 24);
    assert!(!tr.dir.join("state.ck").exists());
    assert_eq!(read_curves(tr.dir.join("curves.csv")).unwrap().len(), 25);
    assert!(tr.dir.join("geometry/fov_mask.png").exists());
    assert!(root.join("runs/pretrained").read_dir().unwrap().next().is_some());
    let ck = Checkpoint::load(tr.dir.join("model.ck")).unwrap();
    let cfg = RunConfig::load(&tr.dir.join("config.toml")).unwrap();
    assert_eq!(ck.meta("run.config_hash"), Some(cfg.hash().unwrap().as_str()));
    assert_eq!(cfg.preset, Preset::Fast);

    let si = simplify(&SimplifyArgs {
        checkpoint: tr.dir.join("model.ck"),
        probes: 3,
        out: Some(root.join("simplify")),
    })
    .unwrap();
    assert!(si.summary.residuals.photometric <= 1e-5);
    assert!(si.summary.simplified_bytes < si.summary.full_bytes);

    let co = compensate(&CompensateArgs {
        model: si.dir.join("simplified.ck"),
        image: data.join("val/0000_proj.png"),
        setup: Some(data.clone()),
        out: Some(root.join("compensate")),
    })
    .unwrap();
    for f in ["z_prime.png", "z_star.png", "capture.png", "uncompensated.png", "report.csv"] {
        assert!(co.dir.join(f).exists(), "{f}");
    }
    assert_eq!(co.rows.len(), 2);

    let ev = evaluate(&EvaluateArgs {
        data: data.clone(),
        model: vec![tr.dir.join("model.ck"), si.dir.join("simplified.ck")],
        baseline: vec![Variant::TpsPlain],
        panels: 2,
        config: None,
        out: Some(root.join("evaluate")),
    })
    .unwrap();
    let methods: Vec<&str> = ev.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["uncompensated", "compennet++", "compennet++", "tps_plain w/ SL"]);
    assert!((ev.rows[1].psnr - ev.rows[2].psnr).abs() < 1e-3);
    assert!(ev.dir.join("panel_001.png").exists() && !ev.dir.join("panel_002.png").exists());
    let table = std::fs::read_to_string(ev.dir.join("table.csv")).unwrap();
    assert!(table.starts_with("method,train,psnr,rmse,ssim\nuncompensated,0,"));
}

#[test]
fn ablation_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (_, data) = simulated(root);
    let first = train(&TrainArgs {
        data: data.clone(),
        iterations: Some(12),
        ablation: Some(Ablation::NoRefine),
        out: Some(root.join("a")),
        ..Default::default()
    })
    .unwrap();
    assert!(first.summary.no_refine);
    let resumed = train(&TrainArgs {
        data: data.clone(),
        resume: Some(first.dir.join("model.ck")),
        iterations: Some(18),
        out: Some(root.join("b")),
        ..Default::default()
    })
    .unwrap();
    assert!(resumed.summary.no_refine);
    assert_eq!(resumed.summary.report.iterations, 18);

    let ev = evaluate(&EvaluateArgs {
        data,
        model: vec![resumed.dir.join("model.ck")],
        panels: 0,
        out: Some(root.join("ev")),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(ev.rows[1].method, "compennet++ w/o refine");
}

#[test]
fn refuses_untrained_and_occupied_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (_, data) = simulated(root);
    let (d, _) = Dataset::load(&data).unwrap();
    let photo = PhotometricNet::<f32>::new(8, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    let model = init_model(&d, &ModelConfig { photo_width: 8, refine_width: 8 }, photo, 1).unwrap();
    let ck = root.join("untrained.ck");
    model.to_checkpoint().unwrap().save(&ck).unwrap();
    let err = simplify(&SimplifyArgs {
        checkpoint: ck,
        probes: 1,
        out: Some(root.join("s")),
    })
    .unwrap_err();
    assert!(err.to_string().contains("not been trained"), "{err}");

    let err = simulate(&SimulateArgs {
        config: Some(root.join("cfg.toml")),
        out: Some(data),
        ..Default::default()
    })
    .unwrap_err();
    assert!(err.to_string().contains("not empty"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_procam");
    let tmp = tempfile::tempdir().unwrap();
    assert!(Command::new(bin).arg("--help").output().unwrap().status.success());
    let usage = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    let missing = Command::new(bin)
        .args(["train", "--data"])
        .arg(tmp.path().join("absent"))
        .env("PROCAM_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
}
