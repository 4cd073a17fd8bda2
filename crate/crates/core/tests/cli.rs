//! End-to-end checks of the `guidance-lab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_guidance-lab"));
    for (k, _) in std::env::vars() {
        if k.starts_with("GLAB_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn binary")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fail(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
        .unwrap_or_else(|| panic!("{key} missing"))
}

#[test]
fn dataset_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["dataset", "--preset", "A", "--n", "4096", "--seed", "7", "--out", "a.csv"], d);
    ok(&["dataset", "--preset", "A", "--n", "4096", "--seed", "7", "--out", "b.csv"], d);
    let a = fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("x,y,class\n"));
    assert_eq!(text.lines().count(), 4097);
    assert!(!text.contains('\r'));
    assert!(ok(&["--check", "a.csv.manifest"], d).contains("1 digests match"));
}

#[test]
fn unknown_key_reports_nearest_valid_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = fail(&["dataset", "--set", "data.nn=5", "--out", "x.csv"], d);
    assert!(err.contains("data.nn") && err.contains("data.n`"), "{err}");
    fs::write(d.join("cfg.txt"), "guidance.tua = 0.3\n").unwrap();
    let err = fail(&["dataset", "--config", "cfg.txt", "--out", "x.csv"], d);
    assert!(err.contains("guidance.tau"), "{err}");
    let out = bin()
        .args(["dataset", "--out", "x.csv"])
        .env("GLAB_SAMPLER__STEP", "3")
        .current_dir(d)
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampler.steps"));
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = fail(&["dataset", "--config", "nope.cfg", "--out", "x.csv"], d);
    assert!(err.contains("nope.cfg"), "{err}");
    let err = fail(&["sample", "--checkpoint", "missing.bin", "--out", "s.csv"], d);
    assert!(err.contains("missing.bin"), "{err}");
    let err = fail(&["eval", "--samples", "none.csv", "--out", "e.csv"], d);
    assert!(err.contains("none.csv"), "{err}");
}

#[test]
fn config_precedence_one_key_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.txt"), "data.n = 100\nsampler.steps = 40\nseed = 5\n").unwrap();
    let out = bin()
        .args(["dataset", "--config", "cfg.txt", "--seed", "9", "--out", "p.csv"])
        .env("GLAB_SAMPLER__STEPS", "50")
        .current_dir(d)
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = fs::read_to_string(d.join("p.csv.manifest")).unwrap();
    assert_eq!(manifest_value(&m, "config.train.lr"), "0.001"); // default
    assert_eq!(manifest_value(&m, "config.data.n"), "100"); // file
    assert_eq!(manifest_value(&m, "config.sampler.steps"), "50"); // env over file
    assert_eq!(manifest_value(&m, "config.seed"), "9"); // flag over file
    assert_eq!(fs::read_to_string(d.join("p.csv")).unwrap().lines().count(), 101);

    // A manifest replays as a config file.
    ok(&["dataset", "--config", "p.csv.manifest", "--out", "q.csv"], d);
    assert_eq!(fs::read(d.join("p.csv")).unwrap(), fs::read(d.join("q.csv")).unwrap());
}

#[test]
fn sample_eval_and_digest_checks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["sample", "--preset", "B", "--n", "240", "--set", "sampler.steps=32", "--out", "s.csv"], d);
    assert!(d.join("s.svg").exists());
    let report = ok(&["eval", "--preset", "B", "--samples", "s.csv", "--out", "e.csv"], d);
    assert!(report.contains("outlier rate"));
    let err = fail(&["eval", "--preset", "C", "--samples", "s.csv", "--out", "e2.csv"], d);
    assert!(err.contains("digest mismatch"), "{err}");

    ok(&["--check", "e.csv.manifest"], d);
    let mut text = fs::read_to_string(d.join("e.csv")).unwrap();
    text.push('\n');
    fs::write(d.join("e.csv"), text).unwrap();
    let err = fail(&["--check", "e.csv.manifest"], d);
    assert!(err.contains("digest mismatch") && err.contains("e.csv"), "{err}");
}

#[test]
fn tiny_train_sample_error_curve_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("small.cfg"),
        "data.preset = B\ntrain.iters = 16\ntrain.batch = 32\nnet.d_h = 8\nsampler.n = 96\nsampler.steps = 16\n\
         error.n_states = 32\nerror.t_points = 4\nsweep.ws = 1,2\n",
    )
    .unwrap();
    ok(&["train", "--config", "small.cfg", "--variant", "ag", "--out", "run"], d);
    for f in ["strong.bin", "strong.bin.manifest.txt", "weak.bin", "train_log.csv", "train.manifest"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&["--check", "run/train.manifest"], d);
    ok(
        &[
            "sample", "--config", "small.cfg", "--checkpoint", "run/strong.bin", "--weak", "run/weak.bin", "--guidance",
            "sgg", "--out", "sgg.csv",
        ],
        d,
    );
    let head = fs::read_to_string(d.join("sgg.csv")).unwrap();
    assert!(head.starts_with("x,y,class,guidance_label\n") && head.lines().nth(1).unwrap().ends_with(",sgg"));
    ok(
        &[
            "error-curve", "--config", "small.cfg", "--checkpoint", "run/strong.bin", "--weak", "run/weak.bin", "--out",
            "err.csv",
        ],
        d,
    );
    assert!(fs::read_to_string(d.join("err.csv")).unwrap().starts_with("guidance_label,w,t,delta_e,stderr\n"));
    assert!(d.join("err.svg").exists());
    ok(&["sweep", "--config", "small.cfg", "--checkpoint", "run/strong.bin", "--guidance", "cfg", "--out", "sw.csv"], d);
    assert_eq!(fs::read_to_string(d.join("sw.csv")).unwrap().lines().count(), 3);
}

#[test]
fn repro_b_records_budget_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["repro", "B", "--set", "sampler.n=240", "--set", "error.n_states=100", "--out", "rb"], d);
    let m = fs::read_to_string(d.join("rb/repro.manifest")).unwrap();
    assert_eq!(manifest_value(&m, "extra.t_main"), "4096");
    assert_eq!(manifest_value(&m, "extra.t_weak"), "1024");
    assert_eq!(manifest_value(&m, "extra.tau"), "0.1");
    assert_eq!(manifest_value(&m, "extra.w_cfg"), "2");
    assert_eq!(manifest_value(&m, "extra.w_ag"), "2");
    assert_eq!(manifest_value(&m, "extra.weak_iters"), "1024");
    let panels = fs::read_to_string(d.join("rb/panels.svg")).unwrap();
    for title in ["unguided", "CDG (CFG)", "CAG (AG)", "SGG"] {
        assert!(panels.contains(&format!(">{title}</text>")), "{title}");
    }
    ok(&["--check", "rb/repro.manifest"], d);
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fail(&["frobnicate"], dir.path());
    fail(&["repro", "D"], dir.path());
    let help = ok(&["--help"], dir.path());
    assert!(help.contains("train.weak_update_ratio") && help.contains("GLAB_"));
}
