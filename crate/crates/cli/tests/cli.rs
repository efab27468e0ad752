use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: [&str; 6] = [
    "--set",
    "network.widths=4,4,4,4",
    "--set",
    "train.epochs=3",
    "--set",
    "train.batch_size=8",
];

fn dyngate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyngate"))
        .args(args)
        .env_remove("DYNGATE_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = dyngate(&["gen-data", "--out", s(&out), "--per-domain", "20", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("manifest.txt")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", s(manifest), "--out-dir", s(out), "--quiet"];
    args.extend(TINY);
    args.extend(extra);
    dyngate(&args)
}

fn metrics(dir: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn gen_data_defaults_write_four_domains_and_manifest() {
    let dir = TempDir::new().unwrap();
    let o = dyngate(&["gen-data", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for d in ["photo", "sketch", "cartoon", "art"] {
        assert!(dir.path().join(format!("{d}.dyn")).exists());
        assert!(stdout(&o).contains(&format!("{d} (")), "{}", stdout(&o));
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let entries: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(entries, ["train photo.dyn", "test sketch.dyn", "test cartoon.dyn", "test art.dyn"]);
    assert!(stdout(&o).contains("400 samples, per class 100/100/100/100"));
}

#[test]
fn single_domain_manifest() {
    let dir = TempDir::new().unwrap();
    let o = dyngate(&["gen-data", "--out", s(dir.path()), "--domains", "photo", "--per-domain", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn gen_data_rejects_bad_input() {
    let dir = TempDir::new().unwrap();
    for args in [
        vec!["--classes", "1"],
        vec!["--classes", "11"],
        vec!["--domains", "watercolor"],
        vec!["--domains", "photo,photo"],
    ] {
        let mut full = vec!["gen-data", "--out", s(dir.path())];
        full.extend(args.iter().copied());
        let o = dyngate(&full);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    }
}

#[test]
fn seed_env_is_a_fallback() {
    let dir = TempDir::new().unwrap();
    let gen = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_dyngate"));
        c.args(["gen-data", "--out", s(&out), "--domains", "photo", "--per-domain", "4"]);
        c.env_remove("DYNGATE_SEED");
        if let Some(e) = env {
            c.env("DYNGATE_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(out.join("photo.dyn")).unwrap()
    };
    let by_flag = gen("flag", None, Some("9"));
    assert_eq!(gen("env", Some("9"), None), by_flag);
    assert_eq!(gen("both", Some("1"), Some("9")), by_flag);
    assert_ne!(gen("none", None, None), by_flag);
}

#[test]
fn base_variant_has_zero_bound_columns() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let out = dir.path().join("base");
    let o = train(&manifest, &out, &["--variant", "base"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = metrics(&out);
    let low = header.iter().position(|h| h == "bound_low").unwrap();
    let up = header.iter().position(|h| h == "bound_up").unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[low] == 0.0 && r[up] == 0.0));
    for (i, h) in header.iter().enumerate() {
        if h.contains(".density_") {
            assert!(rows.iter().all(|r| r[i] == 1.0), "{h}");
        }
    }
    for f in ["checkpoint.bin", "val.dyn", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn slot_variant_reports_densities_per_layer() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let out = dir.path().join("slot");
    let o = train(&manifest, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, _) = metrics(&out);
    for stage in 0..4 {
        for kind in ["density_c", "density_s"] {
            let col = format!("stage{stage}.block0.{kind}");
            assert!(header.contains(&col), "{col} missing from {header:?}");
        }
    }
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("variant = slot"));
}

#[test]
fn training_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&manifest, &a, &["--seed", "4"])), 0);
    assert_eq!(code(&train(&manifest, &b, &["--seed", "4"])), 0);
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = train(&dir.path().join("nope.txt"), &out, &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = dyngate(&["train", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("manifest"));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = dir.path().join("run");
    let o = dyngate(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    for bad in [&["--variant", "huge"][..], &["--set", "train.learning_rate=-1"], &["--set", "network.classes=5"]] {
        let o = train(&manifest, &out, bad);
        assert_eq!(code(&o), 2, "{bad:?}: {}", stderr(&o));
    }
}

#[test]
fn config_file_paths_are_relative_to_the_file() {
    let dir = TempDir::new().unwrap();
    small_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "[network]\nvariant = dynamic\nwidths = 4,4,4,4\n[train]\nepochs = 2\nbatch_size = 8\n[data]\nmanifest = data/manifest.txt\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = dyngate(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics(&out).1.len(), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let o = train(&manifest, &dir.path().join("run"), &["--set", "train.learning_rate=1e30"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
}

#[test]
fn eval_reproduces_best_validation_accuracy() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&train(&manifest, &out, &["--set", "train.epochs=4"])), 0);
    let (header, rows) = metrics(&out);
    let val = header.iter().position(|h| h == "val_acc").unwrap();
    let best = rows.iter().map(|r| r[val]).fold(f64::NEG_INFINITY, f64::max);
    let o = dyngate(&["eval", "--checkpoint", s(&out.join("checkpoint.bin")), "--dataset", s(&out.join("val.dyn"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("accuracy:")).unwrap().to_string();
    let acc: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, best, "{line}");
    assert!(stdout(&o).contains("stage3.block0"));
}

#[test]
fn eval_dumps_one_mask_line_per_layer() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&train(&manifest, &out, &[])), 0);
    let dump = dir.path().join("masks.txt");
    let o = dyngate(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--dataset",
        s(&dir.path().join("data/sketch.dyn")),
        "--dump-masks",
        s(&dump),
        "--sample",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&dump).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f[0], format!("stage{}.block0", i / 2));
        assert_eq!(f[1], if i % 2 == 0 { "channel" } else { "spatial" });
        let values: Vec<f64> = f[3..].iter().map(|v| v.parse().unwrap()).collect();
        assert!(values.iter().all(|&v| v == 0.0 || v == 1.0));
        let density: f64 = f[2].parse().unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((density - mean).abs() < 1e-6);
    }
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&train(&manifest, &out, &[])), 0);
    let ckpt = out.join("checkpoint.bin");
    let bytes = std::fs::read(&ckpt).unwrap();
    let val = s(&out.join("val.dyn")).to_string();
    let variants: [Vec<u8>; 3] = [
        bytes[..bytes.len() / 2].to_vec(),
        [b"XXXXXXXX".as_slice(), &bytes[8..]].concat(),
        Vec::new(),
    ];
    for (i, corrupt) in variants.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.bin"));
        std::fs::write(&path, corrupt).unwrap();
        let o = dyngate(&["eval", "--checkpoint", s(&path), "--dataset", &val]);
        assert_eq!(code(&o), 2, "variant {i}: {}", stderr(&o));
    }
    let o = dyngate(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&ckpt)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn report_over_four_variants() {
    let dir = TempDir::new().unwrap();
    let manifest = small_data(dir.path());
    let mut paths = Vec::new();
    for v in ["base", "dynamic", "normal", "slot"] {
        let out = dir.path().join(v);
        let o = train(&manifest, &out, &["--variant", v, "--set", "train.epochs=2"]);
        assert_eq!(code(&o), 0, "{v}: {}", stderr(&o));
        paths.push(out.join("metrics.csv"));
    }
    let rep = dir.path().join("report");
    let mut args = vec!["report", "--out", s(&rep), "--metrics"];
    args.extend(paths.iter().map(|p| s(p)));
    let o = dyngate(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cmp = std::fs::read_to_string(rep.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines.len(), 5);
    let runs: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(runs, ["base", "dynamic", "normal", "slot"]);
    let base_density: Vec<&str> = lines[1].split(',').rev().take(3).collect();
    assert_eq!(&base_density[1..], ["1.000000", "1.000000"]);
    let curves = std::fs::read_to_string(rep.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 4 * 2);
    assert!(rep.join("curves.gp").exists());
}

#[test]
fn report_rejects_malformed_metrics() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("metrics.csv");
    std::fs::write(&bad, "epoch,p\n0,1\n").unwrap();
    let o = dyngate(&["report", "--out", s(&dir.path().join("r")), "--metrics", s(&bad)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = dyngate(&["report", "--out", s(&dir.path().join("r")), "--metrics", s(&dir.path().join("none.csv"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_default_passes() {
    let o = dyngate(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("ok ")).count(), 31, "{out}");
    assert!(out.contains("31 of 31 checks within 1e-4"), "{out}");
}

#[test]
fn gradcheck_is_deterministic() {
    let a = dyngate(&["gradcheck", "--seed", "11", "--seeds", "2"]);
    let b = dyngate(&["gradcheck", "--seed", "11", "--seeds", "2"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn injected_fault_exits_1_listing_checks() {
    let o = dyngate(&["gradcheck", "--seeds", "2", "--inject-fault"]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stderr(&o).contains("failing checks: matmul"), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL matmul")));
}

#[test]
fn config_command_prints_every_default() {
    let o = dyngate(&["config"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for key in ["variant = slot", "epochs = 70", "learning_rate = 0.001", "target_rate = 0.5", "anneal_rate = 0.05", "manifest = "] {
        assert!(out.contains(key), "{key} missing:\n{out}");
    }
    let o = dyngate(&["config", "--set", "schedule.nope=1"]);
    assert_eq!(code(&o), 2);
}
