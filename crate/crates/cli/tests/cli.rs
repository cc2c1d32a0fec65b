use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixgda::config::{preset, RunConfig};
use mixgda::gda::de_fields;
use mixgda::network::ForwardOpts;
use mixgda::principal::degenerated_entropy;
use mixgda::trainer::{build_network, evaluate};
use mixgda::Tensor;
use serde_json::Value;
use tempfile::TempDir;

fn mixgda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixgda"))
        .args(args)
        .output()
        .expect("spawn mixgda")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> (RunConfig, std::path::PathBuf) {
    let cfg = preset("smoke").unwrap().desk_scale(3);
    let p = dir.join("cfg.json");
    fs::write(&p, cfg.to_json()).unwrap();
    (cfg, p)
}

#[test]
fn dry_run_echoes_shipped_presets() {
    let o = mixgda(&["train", "--preset", "svhn-1000", "--dry-run"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["a"], 0.5);
    assert_eq!(v["eps"], 3.5);
    assert_eq!(v["delta_gvat"], 1.0);

    let o = mixgda(&["train", "--preset", "cifar10-4000", "--dry-run", "--seed", "9"]);
    assert!(o.status.success());
    let cfg = RunConfig::from_json(&stdout(&o)).unwrap();
    assert_eq!(cfg.hp.a, 0.4);
    assert_eq!(serde_json::to_value(cfg.hp.mixup).unwrap(), "normal");
    assert_eq!(cfg.hp.delta_xu, 1.0);
    assert_eq!(cfg.seed, 9);
    let mut expected = preset("cifar10-4000").unwrap();
    expected.seed = 9;
    expected.out_dir = cfg.out_dir.clone();
    assert_eq!(cfg, expected);
}

#[test]
fn bad_inputs_exit_2() {
    let o = mixgda(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--preset", "smoke"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mixgda(&["train", "--config", "/nonexistent/cfg.json", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mixgda(&["train", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mixgda(&["frobnicate"]).status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let mut v: Value = serde_json::from_str(&preset("smoke").unwrap().to_json()).unwrap();
    v["zeta_groi"] = 0.5.into();
    let p = dir.path().join("bad.json");
    fs::write(&p, v.to_string()).unwrap();
    let o = mixgda(&["train", "--config", path(&p), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("zeta_groi"));
}

#[test]
fn eval_matches_in_process() {
    let dir = TempDir::new().unwrap();
    let (cfg, cfg_path) = small_config(dir.path());
    let mut net = build_network(&cfg).unwrap();
    net.mode = mixgda::network::Mode::Eval;
    let ckpt = dir.path().join("net.ckpt");
    net.save(&ckpt).unwrap();
    let o = mixgda(&["eval", "--checkpoint", path(&ckpt), "--config", path(&cfg_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let (_, test) = cfg.dataset.load(Path::new(".")).unwrap();
    let expected = evaluate(&net, &test).unwrap();
    assert!((v["error_rate"].as_f64().unwrap() - expected).abs() <= 1e-12);
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = TempDir::new().unwrap();
    let (_, cfg_path) = small_config(dir.path());
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = mixgda(&["train", "--config", path(&cfg_path), "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        for key in ["final_error_prime", "final_error_averaged", "seed", "config"] {
            assert!(summary.get(key).is_some(), "{key}");
        }
        for ckpt in ["prime.ckpt", "averaged.ckpt"] {
            let o = mixgda(&["eval", "--checkpoint", path(&out.join(ckpt)), "--config", path(&cfg_path)]);
            assert!(o.status.success());
        }
        csvs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn augment_is_deterministic_and_reports_de() {
    let dir = TempDir::new().unwrap();
    let (cfg, cfg_path) = small_config(dir.path());
    let mut net = build_network(&cfg).unwrap();
    net.mode = mixgda::network::Mode::Eval;
    let ckpt = dir.path().join("net.ckpt");
    net.save(&ckpt).unwrap();
    let (_, test) = cfg.dataset.load(Path::new(".")).unwrap();
    for which in ["gvat", "gccb", "groi"] {
        let mut dumps = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{which}-{run}"));
            let o = mixgda(&[
                "augment", "--checkpoint", path(&ckpt), "--config", path(&cfg_path), "--which", which, "--start", "1",
                "--count", "2", "--out", path(&out),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            assert_eq!(files.len(), 6);
            dumps.push(files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>());
        }
        assert_eq!(dumps[0], dumps[1], "{which}");
    }
    let side: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("groi-a/test00001_groi.json")).unwrap()).unwrap();
    let f = de_fields(&net, &Tensor::stack(&[test[1].image.clone()]).unwrap(), cfg.hp.a, &ForwardOpts::EVAL).unwrap();
    let de = degenerated_entropy(f.probs.data(), cfg.hp.a).unwrap();
    assert!((side["de"].as_f64().unwrap() - de).abs() <= 1e-12);
}

#[test]
fn groi_with_vanishing_field_reproduces_input() {
    let dir = TempDir::new().unwrap();
    let (cfg, cfg_path) = small_config(dir.path());
    let mut net = build_network(&cfg).unwrap();
    net.theta_mut().iter_mut().for_each(|w| *w = 0.0);
    let ckpt = dir.path().join("zero.ckpt");
    net.save(&ckpt).unwrap();
    let out = dir.path().join("aug");
    let o = mixgda(&[
        "augment", "--checkpoint", path(&ckpt), "--config", path(&cfg_path), "--which", "groi", "--count", "3", "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        let input = fs::read(out.join(format!("test{i:05}_input.ppm"))).unwrap();
        let aug = fs::read(out.join(format!("test{i:05}_groi.ppm"))).unwrap();
        assert_eq!(input, aug);
        let side: Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("test{i:05}_groi.json"))).unwrap()).unwrap();
        assert_eq!(side["omega_low_len"], 0);
    }
}

#[test]
fn augment_reads_ppm_inputs() {
    let dir = TempDir::new().unwrap();
    let (cfg, cfg_path) = small_config(dir.path());
    let net = build_network(&cfg).unwrap();
    let ckpt = dir.path().join("net.ckpt");
    net.save(&ckpt).unwrap();
    let (_, test) = cfg.dataset.load(Path::new(".")).unwrap();
    let img = dir.path().join("probe.ppm");
    mixgda::ppm::write(&img, &test[0].image).unwrap();
    let out = dir.path().join("aug");
    let o = mixgda(&[
        "augment", "--checkpoint", path(&ckpt), "--config", path(&cfg_path), "--which", "gvat", "--images", path(&img),
        "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("probe_gvat.ppm").exists());
}

#[test]
fn verify_passes_and_catches_fault() {
    let o = mixgda(&["verify", "--quick"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("PASS ").count(), 7);

    let o = mixgda(&["verify", "--quick", "--inject-fault", "ccb-sign"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL gccb-signs"));
}

#[test]
fn thread_cap_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_mixgda"))
        .args(["verify", "--quick"])
        .env("MIXGDA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mixgda"))
        .args(["verify", "--quick"])
        .env("MIXGDA_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
}
