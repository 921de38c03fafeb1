use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scar_cli::RunManifest;
use scar_world::{Dataset, Split};
use serde_json::Value;

fn scar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scar")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let o = scar(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn world_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/world.cfg")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(o: &Output) -> Value {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim()).unwrap()
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_default_counts_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--spec", p(&world_cfg()), "--out", p(&a), "--seed", "3"]);
    ok(&["gen", "--spec", p(&world_cfg()), "--out", p(&b), "--seed", "3"]);
    let bytes = fs::read(a.join("dataset.bin")).unwrap();
    assert_eq!(bytes, fs::read(b.join("dataset.bin")).unwrap());
    let ds = Dataset::from_bytes(&bytes).unwrap();
    for e in 0..4 {
        let want = if e == ds.target { 10 } else { 300 };
        assert_eq!(ds.count(Split::Train, e), want);
    }
    let m = manifest(&a.join("gen.manifest.json"));
    let listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(listed, ["dataset.bin", "spec.cfg"]);
    assert_eq!(m.seed, 3);
}

#[test]
fn config_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(world_cfg()).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let data_at = lines.iter().position(|l| *l == "[data]").unwrap();
    lines[data_at + 1..].reverse();
    let shuffled = dir.path().join("shuffled.cfg");
    fs::write(&shuffled, lines.join("\n")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--spec", p(&world_cfg()), "--out", p(&a)]);
    ok(&["gen", "--spec", p(&shuffled), "--out", p(&b)]);
    let (ma, mb) = (manifest(&a.join("gen.manifest.json")), manifest(&b.join("gen.manifest.json")));
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.files[0], mb.files[0]);
}

#[test]
fn unknown_spec_key_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[dgp]\nd_u = 2\n\nwobble = 1\n").unwrap();
    let e = error_line(&scar(&["gen", "--spec", p(&bad), "--out", p(&dir.path().join("o"))]));
    assert_eq!(e["error"], "config");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("dgp.wobble") && msg.contains("line 4"), "{msg}");
}

#[test]
fn contradictions_and_missing_inputs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--spec", p(&world_cfg()), "--out", p(&data)]);
    let cfg = dir.path().join("kl0.cfg");
    fs::write(&cfg, "[train]\nbeta = 0\n").unwrap();
    let out = dir.path().join("ck");
    let e = error_line(&scar(&["train", "--variant", "scar-kl", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]));
    assert_eq!(e["error"], "contradiction");
    assert!(e["message"].as_str().unwrap().contains("beta"));
    assert!(!out.join("scar-kl.ckpt").exists());

    let e = error_line(&scar(&["eval", "--checkpoints", p(&out), "--data", p(&data), "--out", p(&out)]));
    assert_eq!(e["error"], "missing-input");
    let e = error_line(&scar(&["train", "--variant", "scar-kl", "--data", p(&dir.path().join("nope")), "--out", p(&out)]));
    assert_eq!(e["error"], "missing-input");
    let e = error_line(&scar(&["train", "--variant", "scar-xl", "--data", p(&data), "--out", p(&out)]));
    assert_eq!(e["error"], "usage");
    let e = error_line(&scar(&["verify", "--preset", "vmf-huge", "--out", p(&out)]));
    assert_eq!(e["error"], "usage");
}

#[test]
fn short_training_is_bit_reproducible_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--spec", p(&world_cfg()), "--out", p(&data), "--seed", "2"]);
    let cfg = dir.path().join("short.cfg");
    fs::write(&cfg, "[train]\nsteps = 100\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--variant", "scar-kl-grl", "--config", p(&cfg), "--data", p(&data), "--out", p(out), "--seed", "5"]);
    }
    assert_eq!(fs::read(a.join("scar-kl-grl.ckpt")).unwrap(), fs::read(b.join("scar-kl-grl.ckpt")).unwrap());
    let m = manifest(&a.join("train-scar-kl-grl.manifest.json"));
    for f in &m.files {
        assert!(a.join(&f.path).exists());
    }
    assert!(m.checksums.contains_key("idm"));

    let ev = dir.path().join("ev");
    ok(&["eval", "--checkpoints", p(&a), "--data", p(&data), "--out", p(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,task,SSIM,PSNR,MSE,SSIM-L"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert_eq!(rows.iter().filter(|r| r.starts_with("scar-kl-grl,transfer,")).count(), 50);
}

#[test]
fn verify_emits_three_part_saddle_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["verify", "--preset", "vmf-small", "--seeds", "4", "--out", p(dir.path())]);
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["check"].as_str().unwrap()).collect();
    for part in ["saddle/ce_minus_ln_e", "saddle/center_gap", "saddle/max_angle"] {
        assert!(names.iter().any(|n| n.ends_with(part)), "{names:?}");
    }
    for c in v.as_array().unwrap() {
        for key in ["check", "statistic", "threshold", "pass", "seeds"] {
            assert!(c.get(key).is_some());
        }
    }
}
